//! Run configuration: one TOML file holding every tunable of a run.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_sequence, save_manifest, save_sequence, Archetype, AugmentConfig, Manifest, MotionPattern, SceneParams,
    SizeRanges,
};
use crate::error::{Error, Result};
use crate::eval::DistanceMode;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::{mix_seed, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest. Relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub distance: DistanceMode,
}

/// Synthetic dataset layout. Sequence `i` of a split uses motion pattern
/// `motions[i % motions.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub archetype: Archetype,
    pub motions: Vec<MotionPattern>,
    pub frames: usize,
    pub distractors: usize,
    pub surface_density: f64,
    pub sparsity: f64,
    pub clutter_points: usize,
    pub arena_half: f64,
    /// Overrides the archetype's speed range (meters per frame).
    pub speed: Option<[f64; 2]>,
    /// Overrides the archetype's size ranges.
    pub sizes: Option<SizeRanges>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let base = SceneParams::new(Archetype::Car, MotionPattern::ConstantVelocity, 0);
        Self {
            train: 200,
            val: 0,
            test: 50,
            seed: 0,
            archetype: Archetype::Car,
            motions: vec![MotionPattern::ConstantVelocity, MotionPattern::Turning, MotionPattern::Abrupt],
            frames: base.frames,
            distractors: base.distractors,
            surface_density: base.surface_density,
            sparsity: base.sparsity,
            clutter_points: base.clutter_points,
            arena_half: base.arena_half,
            speed: None,
            sizes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl GenConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn scene(&self, split: Split, index: usize) -> SceneParams {
        let motion = self.motions[index % self.motions.len().max(1)];
        let seed = mix_seed(mix_seed(self.seed, split.tag()), index as u64);
        let mut p = SceneParams::new(self.archetype, motion, seed);
        p.frames = self.frames;
        p.distractors = self.distractors;
        p.surface_density = self.surface_density;
        p.sparsity = self.sparsity;
        p.clutter_points = self.clutter_points;
        p.arena_half = self.arena_half;
        if let Some(s) = self.speed {
            p.speed = s;
        }
        if let Some(s) = self.sizes {
            p.sizes = s;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.motions.is_empty() {
            return Err(Error::param("gen.motions", "needs at least one motion pattern"));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::param("gen.train", "train and test splits need at least one sequence each"));
        }
        self.scene(Split::Train, 0).validate().map_err(|e| match e {
            Error::InvalidParam { field, reason } => Error::InvalidParam {
                field: format!("gen.{field}"),
                reason,
            },
            other => other,
        })
    }

    /// Relative file name of sequence `index` in `split`.
    pub fn file_name(split: Split, index: usize) -> PathBuf {
        PathBuf::from(split.name()).join(format!("seq_{index:04}.jsonl"))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates every split into `out` and writes `out/manifest.json`. Existing
/// files are only replaced when `force` is set.
pub fn generate_dataset(cfg: &GenConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let splits = [Split::Train, Split::Val, Split::Test];
    let jobs: Vec<(Split, usize)> = splits
        .iter()
        .flat_map(|&s| (0..cfg.count(s)).map(move |i| (s, i)))
        .collect();
    let manifest_path = out.join(MANIFEST_FILE);
    if !force {
        let clash = std::iter::once(manifest_path.clone())
            .chain(jobs.iter().map(|&(s, i)| out.join(GenConfig::file_name(s, i))))
            .find(|p| p.exists());
        if let Some(p) = clash {
            return Err(Error::WouldOverwrite(p));
        }
    }
    for s in splits {
        if cfg.count(s) > 0 {
            fs::create_dir_all(out.join(s.name()))?;
        }
    }
    jobs.par_iter().try_for_each(|&(s, i)| {
        let seq = generate_sequence(&cfg.scene(s, i))?;
        save_sequence(&out.join(GenConfig::file_name(s, i)), &seq)
    })?;
    let list = |s: Split| (0..cfg.count(s)).map(|i| GenConfig::file_name(s, i)).collect();
    let manifest = Manifest {
        train: list(Split::Train),
        val: list(Split::Val),
        test: list(Split::Test),
    };
    save_manifest(&manifest_path, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates `path`; a relative manifest path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.gen.validate()
    }

    /// The configured manifest, which must exist.
    pub fn manifest_path(&self) -> Result<&Path> {
        let p = self
            .data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::param("data.manifest", "no manifest configured"))?;
        if !p.is_file() {
            return Err(Error::param("data.manifest", format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    /// SHA-256 over everything that shapes a trained model. The epoch count
    /// is left out so a finished run can be resumed with a longer schedule.
    pub fn hash(&self) -> String {
        let train = TrainConfig {
            epochs: 0,
            ..self.train.clone()
        };
        let relevant = serde_json::json!({
            "model": self.model,
            "loss": self.loss,
            "train": train,
            "augment": self.augment,
        });
        let digest = Sha256::digest(relevant.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// The default configuration as commented TOML.
pub fn default_toml() -> String {
    let body = RunConfig::default().to_toml();
    let mut out = String::from(
        "# bevtrack run configuration. Every key is optional; missing keys take the\n\
         # values shown here. Unknown keys are rejected.\n\n",
    );
    for line in body.lines() {
        match line.trim_start() {
            l if l.starts_with("batch_size =") => out.push_str("# Desk scale. The full-scale setting is 256.\n"),
            l if l.starts_with("epochs =") => out.push_str("# Desk scale. The full-scale setting is 160.\n"),
            l if l.starts_with("pairs_per_sequence =") => {
                out.push_str("# Frame pairs sampled per sequence each epoch; 0 uses all of them.\n")
            }
            "[data]" => {
                out.push_str(line);
                out.push_str("\n# manifest = \"data/manifest.json\"\n");
                continue;
            }
            _ => {}
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toml_roundtrips() {
        let text = default_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
        assert!(text.contains("256") && text.contains("160"));
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[model.voxel]\nvoxel_size = [0.3, 0.3, 0.3]\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.model.voxel.range_min, [-4.8, -4.8, -1.5]);
        assert_eq!(cfg.model.voxel.dims(), [32, 32, 10]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml("[model]\nbmm_ratio = 3\n").unwrap_err();
        assert!(err.to_string().contains("model.bmm_ratio"), "{err}");
        let err = RunConfig::from_toml("[gen]\nsurface_density = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("gen.surface_density"), "{err}");
    }

    #[test]
    fn hash_tracks_training_fields_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.gen.train = 7;
        b.train.epochs = 99;
        assert_eq!(a.hash(), b.hash());
        b.train.optimizer.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_manifest_is_reported() {
        let mut cfg = RunConfig::default();
        assert!(cfg.manifest_path().is_err());
        cfg.data.manifest = Some("/nonexistent/manifest.json".into());
        assert!(cfg.manifest_path().unwrap_err().to_string().contains("data.manifest"));
    }

    #[test]
    fn dataset_generation_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            train: 2,
            test: 1,
            frames: 3,
            clutter_points: 10,
            ..GenConfig::default()
        };
        let m = generate_dataset(&cfg, dir.path(), false).unwrap();
        assert_eq!(m.train.len() + m.test.len(), 3);
        assert!(matches!(generate_dataset(&cfg, dir.path(), false), Err(Error::WouldOverwrite(_))));
        generate_dataset(&cfg, dir.path(), true).unwrap();
    }
}
