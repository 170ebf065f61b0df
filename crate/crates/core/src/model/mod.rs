//! The tracking network: shared voxel backbone, BEV squeeze, BEV motion
//! modeling (BMM) and a pooled MLP head producing motion mean and scale.

mod adamw;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, DIMS};
use crate::geom::PointCloud;
use crate::nn::{self, Conv2d, Init, Linear, SparseConv3d};
use crate::tensor::{ParamSet, Real, SparseLayout, SparseTensor3D, Tape, Tensor, Var};
use crate::voxel::{voxelize, SparseVoxels, VoxelSpec};

/// Lower bound added to the softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Concat,
    Sum,
    Mul,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Sparse 3D convolutions, then height squeeze.
    #[default]
    PreBev,
    /// Height collapsed right after voxelization, then dense 2D convolutions.
    PostBev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone_channels: Vec<usize>,
    pub backbone: BackboneMode,
    /// Total spatial downsampling inside BMM; a power of two.
    pub bmm_ratio: usize,
    pub bmm_layers: usize,
    /// Width of the first BMM layer; doubles at every stride-2 layer.
    pub bmm_channels: usize,
    pub fusion: Fusion,
    pub mlp_hidden: usize,
    pub leaky_slope: f64,
    pub kernel: usize,
    pub voxel: VoxelSpec,
    pub flow: FlowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64, 128],
            backbone: BackboneMode::PreBev,
            bmm_ratio: 4,
            bmm_layers: 6,
            bmm_channels: 64,
            fusion: Fusion::Concat,
            mlp_hidden: 128,
            leaky_slope: 0.01,
            kernel: 3,
            voxel: VoxelSpec::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::param("model.backbone_channels", "must be a nonempty list of positive widths"));
        }
        if !self.bmm_ratio.is_power_of_two() {
            return Err(Error::param("model.bmm_ratio", format!("{} is not a power of two", self.bmm_ratio)));
        }
        let strides = self.bmm_ratio.trailing_zeros() as usize;
        if self.bmm_layers < 2 * strides {
            return Err(Error::param(
                "model.bmm_layers",
                format!("{} layers cannot hold {strides} stride-2 layers at intervals", self.bmm_layers),
            ));
        }
        if self.bmm_channels == 0 || self.mlp_hidden == 0 {
            return Err(Error::param("model", "layer widths must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::param("model.kernel", "kernel size must be odd"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::param("model.leaky_slope", "must be finite and non-negative"));
        }
        if self.flow.blocks == 0 || self.flow.hidden == 0 {
            return Err(Error::param("model.flow", "needs at least one block of positive width"));
        }
        self.voxel
            .validate()
            .map_err(|e| Error::param("model.voxel", e.to_string()))?;
        Ok(())
    }

    /// Spatial reduction of the backbone (2 per block after the first).
    pub fn backbone_stride(&self) -> usize {
        1 << (self.backbone_channels.len() - 1)
    }

    /// BEV grid `(nx, ny)` and channel count at the backbone output.
    pub fn bev_shape(&self) -> [usize; 3] {
        let mut dims = self.voxel.dims();
        for _ in 1..self.backbone_channels.len() {
            dims = dims.map(|d| d.div_ceil(2));
        }
        let c = *self.backbone_channels.last().unwrap();
        match self.backbone {
            BackboneMode::PreBev => [dims[0], dims[1], dims[2] * c],
            BackboneMode::PostBev => [dims[0], dims[1], c],
        }
    }

    /// Indices of the BMM layers that use stride 2.
    pub fn bmm_stride_layers(&self) -> Vec<usize> {
        let n = self.bmm_ratio.trailing_zeros() as usize;
        (0..n).map(|i| 2 * i + 1).collect()
    }

    /// Grid seen by the pooling layer.
    pub fn pooled_grid(&self) -> [usize; 2] {
        let [mut h, mut w, _] = self.bev_shape();
        for _ in self.bmm_stride_layers() {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        [h, w]
    }
}

/// Mean offsets and positive scales, in canonical-frame meters and radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrediction {
    pub mean: [f64; DIMS],
    pub sigma: [f64; DIMS],
    pub diagnostics: ForwardDiagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardDiagnostics {
    pub empty_previous: bool,
    pub empty_current: bool,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub mean: Var,
    pub sigma: Var,
    pub diagnostics: ForwardDiagnostics,
}

#[derive(Debug, Clone)]
enum Backbone {
    Sparse(Vec<Vec<SparseConv3d>>),
    Dense(Vec<Vec<Conv2d>>),
}

/// Layer structure of the network; parameter values live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    backbone: Backbone,
    bmm: Vec<Conv2d>,
    head: [Linear; 2],
    flow: Flow,
}

/// Occupancy and mean height channels of the collapsed BEV input.
pub const POST_BEV_INPUT_CHANNELS: usize = 2;

impl Network {
    /// Builds the layers and draws initial parameters from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let slope = cfg.leaky_slope;
        let k = cfg.kernel;
        let chans = &cfg.backbone_channels;

        let backbone = match cfg.backbone {
            BackboneMode::PreBev => {
                let mut blocks = Vec::new();
                let mut cin = 3;
                for (i, &c) in chans.iter().enumerate() {
                    let mut block = Vec::new();
                    if i > 0 {
                        block.push(SparseConv3d::new(&mut params, &format!("backbone.block{i}.down"), cin, c, k, 2, slope, &mut rng));
                        cin = c;
                    }
                    block.push(SparseConv3d::new(&mut params, &format!("backbone.block{i}.subm"), cin, c, k, 1, slope, &mut rng));
                    cin = c;
                    blocks.push(block);
                }
                Backbone::Sparse(blocks)
            }
            BackboneMode::PostBev => {
                let mut blocks = Vec::new();
                let mut cin = POST_BEV_INPUT_CHANNELS;
                for (i, &c) in chans.iter().enumerate() {
                    let mut block = Vec::new();
                    if i > 0 {
                        block.push(Conv2d::new(&mut params, &format!("backbone.block{i}.down"), cin, c, k, 2, slope, &mut rng));
                        cin = c;
                    }
                    block.push(Conv2d::new(&mut params, &format!("backbone.block{i}.conv"), cin, c, k, 1, slope, &mut rng));
                    cin = c;
                    blocks.push(block);
                }
                Backbone::Dense(blocks)
            }
        };

        let bev_c = cfg.bev_shape()[2];
        let mut cin = match cfg.fusion {
            Fusion::Concat => 2 * bev_c,
            _ => bev_c,
        };
        let strided = cfg.bmm_stride_layers();
        let mut width = cfg.bmm_channels;
        let mut bmm = Vec::new();
        for i in 0..cfg.bmm_layers {
            let stride = if strided.contains(&i) { 2 } else { 1 };
            if stride == 2 {
                width *= 2;
            }
            bmm.push(Conv2d::new(&mut params, &format!("bmm.conv{i}"), cin, width, k, stride, slope, &mut rng));
            cin = width;
        }

        let head = [
            Linear::new(&mut params, "head.fc0", cin, cfg.mlp_hidden, Init::FanIn, slope, &mut rng),
            Linear::new(&mut params, "head.fc1", cfg.mlp_hidden, 2 * DIMS, Init::FanIn, slope, &mut rng),
        ];
        let flow = Flow::new(&mut params, "flow", &cfg.flow, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                bmm,
                head,
                flow,
            },
            params,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn flow(&self) -> &Flow {
        &self.flow
    }

    /// Parameters of the last head layer, used by tests that zero the head.
    pub fn head_output_layer(&self) -> (usize, usize) {
        (self.head[1].w, self.head[1].b)
    }

    fn sparse_input<T: Real>(tape: &mut Tape<T>, v: &SparseVoxels) -> Result<SparseTensor3D> {
        let layout = SparseLayout::new(v.dims, v.coords.clone())?;
        let data = v.feats.iter().flatten().map(|&x| T::from_f64(x)).collect();
        let feats = tape.constant(Tensor::new(vec![v.len(), 3], data)?);
        Ok(SparseTensor3D {
            layout: Arc::new(layout),
            feats,
        })
    }

    fn collapsed_bev<T: Real>(tape: &mut Tape<T>, v: &SparseVoxels) -> Result<Var> {
        let [nx, ny, _] = v.dims;
        let mut occ = vec![0usize; nx * ny];
        let mut zsum = vec![0.0f64; nx * ny];
        for (c, f) in v.coords.iter().zip(&v.feats) {
            let cell = c[0] * ny + c[1];
            occ[cell] += 1;
            zsum[cell] += f[2];
        }
        let mut data = Vec::with_capacity(nx * ny * POST_BEV_INPUT_CHANNELS);
        for (n, z) in occ.iter().zip(&zsum) {
            if *n > 0 {
                data.push(T::one());
                data.push(T::from_f64(z / *n as f64));
            } else {
                data.push(T::zero());
                data.push(T::zero());
            }
        }
        Ok(tape.constant(Tensor::new(vec![nx, ny, POST_BEV_INPUT_CHANNELS], data)?))
    }

    /// One branch of the Siamese backbone, ending in a BEV map `[nx, ny, c]`.
    fn branch<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], voxels: &SparseVoxels) -> Result<Var> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let bev = match &self.backbone {
            Backbone::Sparse(blocks) => {
                let mut x = Self::sparse_input(tape, voxels)?;
                for block in blocks {
                    for conv in block {
                        x = conv.forward(tape, vars, &x)?;
                        x.feats = tape.leaky_relu(x.feats, slope);
                    }
                }
                tape.height_squeeze(&x)?
            }
            Backbone::Dense(blocks) => {
                let mut x = Self::collapsed_bev(tape, voxels)?;
                for block in blocks {
                    for conv in block {
                        x = conv.forward(tape, vars, x)?;
                        x = tape.leaky_relu(x, slope);
                    }
                }
                x
            }
        };
        let expected = self.cfg.bev_shape();
        if tape.shape(bev) != expected {
            return Err(Error::shape(
                "backbone",
                format!("BEV map {:?}, expected {expected:?}", tape.shape(bev)),
            ));
        }
        Ok(bev)
    }

    /// Runs the network on two clouds already expressed in the canonical
    /// frame of the previous box.
    pub fn forward_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        prev: &PointCloud,
        cur: &PointCloud,
    ) -> Result<ForwardOutput> {
        let vp = voxelize(prev, &self.cfg.voxel)?;
        let vc = voxelize(cur, &self.cfg.voxel)?;
        self.forward_voxels(tape, vars, &vp, &vc)
    }

    pub fn forward_voxels<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        prev: &SparseVoxels,
        cur: &SparseVoxels,
    ) -> Result<ForwardOutput> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let diagnostics = ForwardDiagnostics {
            empty_previous: prev.is_empty(),
            empty_current: cur.is_empty(),
        };
        let bp = self.branch(tape, vars, prev)?;
        let bc = self.branch(tape, vars, cur)?;
        let mut x = match self.cfg.fusion {
            Fusion::Concat => tape.concat(bp, bc)?,
            Fusion::Sum => tape.add(bp, bc)?,
            Fusion::Mul => tape.mul(bp, bc)?,
            Fusion::Sub => tape.sub(bc, bp)?,
        };
        for conv in &self.bmm {
            x = conv.forward(tape, vars, x)?;
            x = tape.leaky_relu(x, slope);
        }
        let [ph, pw] = self.cfg.pooled_grid();
        let s = tape.shape(x);
        if s[0] != ph || s[1] != pw {
            return Err(Error::shape("bmm", format!("pooled grid {s:?}, expected {ph}x{pw}")));
        }
        let pooled = tape.global_max_pool(x)?;
        let h = self.head[0].forward(tape, vars, pooled)?;
        let h = tape.leaky_relu(h, slope);
        let out = self.head[1].forward(tape, vars, h)?;
        let mean = tape.slice_last(out, 0, DIMS)?;
        let raw = tape.slice_last(out, DIMS, DIMS)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, T::from_f64(SIGMA_FLOOR));
        Ok(ForwardOutput {
            mean,
            sigma,
            diagnostics,
        })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, params: &ParamSet<f32>, prev: &PointCloud, cur: &PointCloud) -> Result<MotionPrediction> {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward_on_tape(&mut tape, &vars, prev, cur)?;
        let read = |v: Var| -> [f64; DIMS] {
            let d = tape.value(v).data();
            std::array::from_fn(|i| d[i] as f64)
        };
        let pred = MotionPrediction {
            mean: read(out.mean),
            sigma: read(out.sigma),
            diagnostics: out.diagnostics,
        };
        if pred.mean.iter().chain(&pred.sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(pred)
    }

    /// Checks that `params` has exactly the names and shapes this network uses.
    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let (_, reference) = Network::new(&self.cfg, 0)?;
        if reference.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((n, t), (rn, rt)) in params.iter().zip(reference.iter()) {
            if n != rn || t.shape() != rt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{n}` {:?} does not match `{rn}` {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Registers `params` on `tape` in order.
pub fn bind_params<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Vec<Var> {
    nn::bind(tape, params)
}
