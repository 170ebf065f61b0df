//! Mini-batch training with deterministic gradient reduction, per-epoch
//! checkpoints and exact resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Sequence};
use crate::error::{Error, Result};
use crate::geom::{canonicalize, relative_pose, MotionOffsets, PointCloud};
use crate::loss::{loss_on_tape, LossBreakdown, LossConfig, LossTerms};
use crate::model::{adamw_step, bind_params, AdamWConfig, AdamWState, ForwardOutput, ModelConfig, Network};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frame pairs drawn per sequence each epoch; 0 uses every pair.
    pub pairs_per_sequence: usize,
    pub augment: bool,
    pub seed: u64,
    /// Items per gradient shard. Shards are summed in order, so results do
    /// not depend on the thread count.
    pub shard_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            pairs_per_sequence: 0,
            augment: true,
            seed: 0,
            shard_size: 4,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size", "must be at least 1"));
        }
        if self.shard_size == 0 {
            return Err(Error::param("train.shard_size", "must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::param("train.optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::param("train.optimizer.beta1", "betas must be in [0, 1)"));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::param("train.optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Two consecutive frames in canonical coordinates of the earlier GT box and
/// the motion label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub prev: PointCloud,
    pub cur: PointCloud,
    pub label: MotionOffsets,
}

/// Frame `t - 1` to frame `t` of sequence `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    pub seq: usize,
    pub t: usize,
}

pub fn make_sample(seq: &Sequence, t: usize, aug: Option<(&AugmentConfig, u64)>) -> Result<TrainSample> {
    if t == 0 || t >= seq.len() {
        return Err(Error::param("pair", format!("frame {t} has no predecessor in a {}-frame sequence", seq.len())));
    }
    let (a, b) = (&seq.frames[t - 1], &seq.frames[t]);
    let prev = canonicalize(&a.cloud, &a.gt);
    let cur = canonicalize(&b.cloud, &a.gt);
    let label = relative_pose(&a.gt, &b.gt);
    Ok(match aug {
        Some((cfg, seed)) => {
            let (prev, cur, label, _) = augment(&prev, &cur, &label, cfg, seed)?;
            TrainSample { prev, cur, label }
        }
        None => TrainSample { prev, cur, label },
    })
}

/// Loss of one sample on a fresh tape; returns the scalar loss variable.
pub type LossFn = dyn Fn(&mut Tape<f32>, &[Var], &Network, &ForwardOutput, Var) -> Result<LossTerms> + Sync;

pub fn configured_loss(cfg: LossConfig) -> impl Fn(&mut Tape<f32>, &[Var], &Network, &ForwardOutput, Var) -> Result<LossTerms> + Sync {
    move |tape, vars, net, out, target| loss_on_tape(tape, vars, net.flow(), out.mean, out.sigma, target, &cfg)
}

fn sample_gradients(
    net: &Network,
    params: &ParamSet<f32>,
    s: &TrainSample,
    loss: &LossFn,
) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let vars = bind_params(&mut tape, params);
    let out = net.forward_on_tape(&mut tape, &vars, &s.prev, &s.cur)?;
    let target = tape.constant(Tensor::from_vec(s.label.to_array().map(|v| v as f32).to_vec()));
    let terms = loss(&mut tape, &vars, net, &out, target)?;
    let value = terms.values(&tape);
    let mut g = tape.backward(terms.total)?;
    // Parameters the loss never reaches (the flow under a fixed prior) get zeros.
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(v, p)| g.take(*v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((value, grads))
}

fn add_terms(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.total += b.total;
    a.prior_nll += b.prior_nll;
    a.flow_nll += b.flow_nll;
    a.log_sigma += b.log_sigma;
}

fn scale_terms(a: &mut LossBreakdown, c: f64) {
    a.total *= c;
    a.prior_nll *= c;
    a.flow_nll *= c;
    a.log_sigma *= c;
}

/// Mean loss terms and mean gradient over `samples`. Shards of `shard_size`
/// items are reduced in item order and then summed in shard order.
pub fn batch_gradients(
    net: &Network,
    params: &ParamSet<f32>,
    samples: &[TrainSample],
    loss: &LossFn,
    shard_size: usize,
) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
    if samples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let shards: Vec<(LossBreakdown, Vec<Vec<f32>>)> = samples
        .par_chunks(shard_size.max(1))
        .map(|shard| {
            let mut acc: Option<(LossBreakdown, Vec<Vec<f32>>)> = None;
            for s in shard {
                let (l, g) = sample_gradients(net, params, s, loss)?;
                acc = Some(match acc {
                    None => (l, g),
                    Some((mut al, mut ag)) => {
                        add_into(&mut ag, &g);
                        add_terms(&mut al, &l);
                        (al, ag)
                    }
                });
            }
            Ok(acc.expect("non-empty shard"))
        })
        .collect::<Result<_>>()?;
    let mut it = shards.into_iter();
    let (mut loss_sum, mut grads) = it.next().expect("non-empty batch");
    for (l, g) in it {
        add_terms(&mut loss_sum, &l);
        add_into(&mut grads, &g);
    }
    let inv = 1.0 / samples.len() as f32;
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    scale_terms(&mut loss_sum, 1.0 / samples.len() as f64);
    Ok((loss_sum, grads))
}

fn add_into(acc: &mut [Vec<f32>], g: &[Vec<f32>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Parameters, optimizer moments and the number of finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub params: ParamSet<f32>,
    pub optimizer: AdamWState,
}

/// One optimizer step: mean loss terms over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub batch_seed: u64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Sample-weighted mean of the loss terms.
    pub terms: LossBreakdown,
    pub batches: usize,
    pub samples: usize,
    pub seconds: f64,
    pub config_hash: String,
    #[serde(skip)]
    pub steps: Vec<StepMetrics>,
}

pub struct Trainer<'a> {
    pub net: Network,
    pub cfg: TrainConfig,
    pub augment: AugmentConfig,
    pub sequences: &'a [Sequence],
    pub config_hash: String,
    loss: Box<LossFn>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &ModelConfig,
        cfg: TrainConfig,
        loss: LossConfig,
        augment: AugmentConfig,
        sequences: &'a [Sequence],
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        Self::with_loss(model, cfg, Box::new(configured_loss(loss)), augment, sequences, config_hash)
    }

    pub fn with_loss(
        model: &ModelConfig,
        cfg: TrainConfig,
        loss: Box<LossFn>,
        augment: AugmentConfig,
        sequences: &'a [Sequence],
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        if sequences.iter().all(|s| s.len() < 2) {
            return Err(Error::Empty("training set has no frame pairs"));
        }
        let (net, _) = Network::new(model, cfg.seed)?;
        Ok(Self {
            net,
            cfg,
            augment,
            sequences,
            config_hash: config_hash.into(),
            loss,
        })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let (_, params) = Network::new(self.net.config(), self.cfg.seed)?;
        let optimizer = AdamWState::new(&params);
        Ok(TrainState {
            epochs_done: 0,
            params,
            optimizer,
        })
    }

    /// Batches of `(pair, augmentation seed)` for `epoch`, a pure function of
    /// the training seed.
    pub fn epoch_plan(&self, epoch: usize) -> Vec<Vec<(PairRef, u64)>> {
        let epoch_seed = mix_seed(self.cfg.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut pairs = Vec::new();
        for (si, s) in self.sequences.iter().enumerate() {
            let all: Vec<PairRef> = (1..s.len()).map(|t| PairRef { seq: si, t }).collect();
            if self.cfg.pairs_per_sequence == 0 || self.cfg.pairs_per_sequence >= all.len() {
                pairs.extend(all);
            } else {
                pairs.extend(all.choose_multiple(&mut rng, self.cfg.pairs_per_sequence).copied());
            }
        }
        pairs.shuffle(&mut rng);
        pairs
            .chunks(self.cfg.batch_size)
            .enumerate()
            .map(|(b, chunk)| {
                let batch_seed = mix_seed(epoch_seed, b as u64);
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (*p, mix_seed(batch_seed, i as u64)))
                    .collect()
            })
            .collect()
    }

    pub fn batch_seed(&self, epoch: usize, batch: usize) -> u64 {
        mix_seed(mix_seed(self.cfg.seed, epoch as u64), batch as u64)
    }

    pub fn samples(&self, batch: &[(PairRef, u64)]) -> Result<Vec<TrainSample>> {
        batch
            .iter()
            .map(|(p, seed)| {
                let aug = self.cfg.augment.then_some((&self.augment, *seed));
                make_sample(&self.sequences[p.seq], p.t, aug)
            })
            .collect()
    }

    /// One optimizer step; returns the mean batch loss terms.
    pub fn step(&self, state: &mut TrainState, samples: &[TrainSample]) -> Result<LossBreakdown> {
        let (loss, grads) = batch_gradients(&self.net, &state.params, samples, self.loss.as_ref(), self.cfg.shard_size)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("batch loss".into()));
        }
        adamw_step(&mut state.params, &grads, &mut state.optimizer, &self.cfg.optimizer)?;
        Ok(loss)
    }

    /// Runs epoch `state.epochs_done` and advances the state.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochMetrics> {
        let epoch = state.epochs_done;
        let start = Instant::now();
        let plan = self.epoch_plan(epoch);
        let (mut terms, mut count) = (LossBreakdown::default(), 0usize);
        let mut steps = Vec::with_capacity(plan.len());
        for (b, batch) in plan.iter().enumerate() {
            let samples = self.samples(batch)?;
            let loss = self.step(state, &samples).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} at epoch {epoch} batch {b} (batch seed {})",
                    self.batch_seed(epoch, b)
                )),
                other => other,
            })?;
            let mut weighted = loss;
            scale_terms(&mut weighted, samples.len() as f64);
            add_terms(&mut terms, &weighted);
            count += samples.len();
            steps.push(StepMetrics {
                epoch,
                batch: b,
                step: state.optimizer.step,
                batch_seed: self.batch_seed(epoch, b),
                loss,
            });
        }
        state.epochs_done += 1;
        scale_terms(&mut terms, 1.0 / count as f64);
        Ok(EpochMetrics {
            epoch,
            train_loss: terms.total,
            terms,
            batches: plan.len(),
            samples: count,
            seconds: start.elapsed().as_secs_f64(),
            config_hash: self.config_hash.clone(),
            steps,
        })
    }

    /// Trains until `cfg.epochs`, checkpointing into `out` after every epoch
    /// and appending to `out/metrics.jsonl`.
    pub fn fit(
        &self,
        state: &mut TrainState,
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        while state.epochs_done < self.cfg.epochs {
            let m = match self.run_epoch(state) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(dir) = out {
                        let line = serde_json::json!({"abort": e.to_string(), "config_hash": self.config_hash});
                        append_line(&dir.join(METRICS_FILE), &line.to_string())?;
                    }
                    return Err(e);
                }
            };
            if let Some(dir) = out {
                save_state(dir, state, &self.config_hash)?;
                let path = dir.join(METRICS_FILE);
                for s in &m.steps {
                    append_line(&path, &serde_json::to_string(s).expect("metrics serialize"))?;
                }
                append_line(&path, &serde_json::to_string(&m).expect("metrics serialize"))?;
            }
            on_epoch(&m);
            all.push(m);
        }
        Ok(all)
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
const OPTIMIZER_FILE: &str = "optimizer.ckpt";
const STATE_FILE: &str = "train_state.json";

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    epochs_done: usize,
    optimizer_step: u64,
    config_hash: String,
}

pub fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params.iter())?;
    write_atomic(path, &buf)
}

pub fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let entries = read_checkpoint(fs::File::open(path)?)?;
    let mut params = ParamSet::new();
    for (name, t) in entries {
        params.push(name, t);
    }
    Ok(params)
}

pub fn save_state(dir: &Path, state: &TrainState, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_params(&dir.join(MODEL_FILE), &state.params)?;
    let mut buf = Vec::new();
    let m = state.optimizer.m.iter().map(|(n, t)| (format!("m/{n}"), t));
    let v = state.optimizer.v.iter().map(|(n, t)| (format!("v/{n}"), t));
    let named: Vec<(String, &Tensor<f32>)> = m.chain(v).collect();
    write_checkpoint(&mut buf, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    write_atomic(&dir.join(OPTIMIZER_FILE), &buf)?;
    let meta = StateFile {
        epochs_done: state.epochs_done,
        optimizer_step: state.optimizer.step,
        config_hash: config_hash.to_string(),
    };
    write_atomic(&dir.join(STATE_FILE), serde_json::to_string_pretty(&meta).expect("state serializes").as_bytes())
}

/// Restores a training state written by [`save_state`]. The stored config
/// hash must match `config_hash`.
pub fn load_state(dir: &Path, net: &Network, config_hash: &str) -> Result<TrainState> {
    let meta: StateFile = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)
        .map_err(|e| Error::Checkpoint(format!("{STATE_FILE}: {e}")))?;
    if meta.config_hash != config_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by config {}, current config is {config_hash}",
            meta.config_hash
        )));
    }
    let params = load_params(&dir.join(MODEL_FILE))?;
    net.check_params(&params)?;
    let mut optimizer = AdamWState::new(&params);
    optimizer.step = meta.optimizer_step;
    for (name, t) in read_checkpoint(fs::File::open(dir.join(OPTIMIZER_FILE))?)? {
        let (set, key) = match name.split_once('/') {
            Some(("m", k)) => (&mut optimizer.m, k),
            Some(("v", k)) => (&mut optimizer.v, k),
            _ => return Err(Error::Checkpoint(format!("unexpected optimizer entry `{name}`"))),
        };
        let i = set
            .index_of(key)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer entry for unknown parameter `{key}`")))?;
        if set.get(i).shape() != t.shape() {
            return Err(Error::Checkpoint(format!("optimizer entry `{name}` has shape {:?}", t.shape())));
        }
        *set.get_mut(i) = t;
    }
    Ok(TrainState {
        epochs_done: meta.epochs_done,
        params,
        optimizer,
    })
}
