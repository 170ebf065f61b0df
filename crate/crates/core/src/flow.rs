//! RealNVP-style affine coupling flow over the 4 motion dimensions.
//!
//! `forward` maps a residual `z` towards the standard-normal base space; the
//! learned density is `log N(forward(z); 0, I) + log|det J|`.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

pub const DIMS: usize = 4;

pub type Mask = [bool; DIMS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub slope: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            hidden: 64,
            slope: 0.01,
        }
    }
}

/// Three fully connected layers with leaky-relu between them.
#[derive(Debug, Clone)]
struct SubNet {
    layers: [Linear; 3],
}

impl SubNet {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        params: &mut ParamSet<f32>,
        name: &str,
        inputs: usize,
        outputs: usize,
        hidden: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: [
                Linear::new(params, &format!("{name}.fc0"), inputs, hidden, Init::FanIn, slope, rng),
                Linear::new(params, &format!("{name}.fc1"), hidden, hidden, Init::FanIn, slope, rng),
                Linear::new(params, &format!("{name}.fc2"), hidden, outputs, Init::Zero, slope, rng),
            ],
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, slope: T) -> Result<Var> {
        let mut h = self.layers[0].forward(tape, vars, x)?;
        h = tape.leaky_relu(h, slope);
        h = self.layers[1].forward(tape, vars, h)?;
        h = tape.leaky_relu(h, slope);
        self.layers[2].forward(tape, vars, h)
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    /// `true` marks the dimensions passed through unchanged and fed to the subnets.
    pub mask: Mask,
    scale_net: SubNet,
    shift_net: SubNet,
    /// Learnable bound on the log-scale of each transformed dimension:
    /// `s = bound * tanh(raw)`.
    scale_bound: usize,
}

impl CouplingLayer {
    fn dims(&self, keep: bool) -> Vec<usize> {
        (0..DIMS).filter(|&d| self.mask[d] == keep).collect()
    }

    /// Parameter index of the log-scale bound.
    pub fn scale_bound_index(&self) -> usize {
        self.scale_bound
    }
}

#[derive(Debug, Clone)]
pub struct Flow {
    layers: Vec<CouplingLayer>,
    slope: f64,
}

/// `[DIMS, k]` 0/1 matrix picking coordinates `dims`; its transpose scatters
/// them back.
fn selection<T: Real>(dims: &[usize], transpose: bool) -> Tensor<T> {
    let k = dims.len();
    let mut data = vec![T::zero(); DIMS * k];
    for (j, &d) in dims.iter().enumerate() {
        let idx = if transpose { j * DIMS + d } else { d * k + j };
        data[idx] = T::one();
    }
    let shape = if transpose { vec![k, DIMS] } else { vec![DIMS, k] };
    Tensor::new(shape, data).expect("selection shape")
}

fn select<T: Real>(tape: &mut Tape<T>, x: Var, dims: &[usize], scatter: bool) -> Result<Var> {
    let m = tape.constant(selection(dims, scatter));
    let out = if scatter { DIMS } else { dims.len() };
    let zero = tape.constant(Tensor::zeros(&[out]));
    tape.linear(x, m, zero)
}

/// Masks alternate between the first and the second pair of dimensions.
pub fn alternating_masks(blocks: usize) -> Vec<Mask> {
    (0..blocks)
        .map(|i| {
            if i % 2 == 0 {
                [true, true, false, false]
            } else {
                [false, false, true, true]
            }
        })
        .collect()
}

impl Flow {
    pub fn new<R: Rng>(params: &mut ParamSet<f32>, prefix: &str, cfg: &FlowConfig, rng: &mut R) -> Result<Self> {
        Self::with_masks(params, prefix, &alternating_masks(cfg.blocks), cfg.hidden, cfg.slope, rng)
    }

    pub fn with_masks<R: Rng>(
        params: &mut ParamSet<f32>,
        prefix: &str,
        masks: &[Mask],
        hidden: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(masks.len());
        for (i, mask) in masks.iter().enumerate() {
            if mask.iter().all(|&m| m) || mask.iter().all(|&m| !m) {
                return Err(Error::param(
                    format!("{prefix}.block{i}.mask"),
                    "mask must be neither all-zero nor all-one",
                ));
            }
            let name = format!("{prefix}.block{i}");
            let n_keep = mask.iter().filter(|&&m| m).count();
            let n_free = DIMS - n_keep;
            let scale_net = SubNet::new(params, &format!("{name}.scale"), n_keep, n_free, hidden, slope, rng);
            let shift_net = SubNet::new(params, &format!("{name}.shift"), n_keep, n_free, hidden, slope, rng);
            let scale_bound = params.push(format!("{name}.scale_bound"), Tensor::from_vec(vec![1.0; n_free]));
            layers.push(CouplingLayer {
                mask: *mask,
                scale_net,
                shift_net,
                scale_bound,
            });
        }
        Ok(Self { layers, slope })
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Maps `z` (shape `[4]`) through every coupling layer; returns the image
    /// and the scalar log-determinant.
    pub fn forward_on_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], z: Var) -> Result<(Var, Var)> {
        let slope = T::from_f64(self.slope);
        let mut x = z;
        let mut logdet: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (keep, free) = (layer.dims(true), layer.dims(false));
            let x_in = select(tape, x, &keep, false)?;
            let raw = layer.scale_net.forward(tape, vars, x_in, slope)?;
            let raw = tape.tanh(raw);
            let s = tape.mul(raw, vars[layer.scale_bound])?;
            let t = layer.shift_net.forward(tape, vars, x_in, slope)?;
            let s_full = select(tape, s, &free, true)?;
            let t_full = select(tape, t, &free, true)?;
            let es = tape.exp(s_full);
            let scaled = tape.mul(x, es)?;
            x = tape.add(scaled, t_full)?;
            let ld = tape.sum(s);
            let total = match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            };
            logdet = Some(total);
            if !tape.value(x).is_finite() || !tape.value(total).is_finite() {
                return Err(Error::NonFinite(format!("flow block {i}")));
            }
        }
        let logdet = match logdet {
            Some(v) => v,
            None => tape.constant(Tensor::scalar(T::zero())),
        };
        Ok((x, logdet))
    }

    /// `log G(z)`: standard-normal log density of the image plus log-determinant.
    pub fn log_prob_on_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], z: Var) -> Result<Var> {
        let (x, logdet) = self.forward_on_tape(tape, vars, z)?;
        let sq = tape.square(x);
        let ss = tape.sum(sq);
        let quad = tape.scale(ss, T::from_f64(-0.5));
        let base = tape.add_scalar(quad, T::from_f64(-(DIMS as f64) / 2.0 * TAU.ln()));
        tape.add(base, logdet)
    }

    fn const_vars<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Vec<Var> {
        params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn check_input(z: &[f64; DIMS]) -> Result<()> {
        if z.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("flow input".into()))
        }
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, z: [f64; DIMS]) -> Result<([f64; DIMS], f64)> {
        Self::check_input(&z)?;
        let mut tape = Tape::new();
        let vars = Self::const_vars(&mut tape, params);
        let zv = tape.constant(Tensor::from_vec(z.iter().map(|&v| T::from_f64(v)).collect()));
        let (x, ld) = self.forward_on_tape(&mut tape, &vars, zv)?;
        let xs = tape.value(x).data();
        Ok((
            std::array::from_fn(|i| xs[i].as_f64()),
            tape.value(ld).data()[0].as_f64(),
        ))
    }

    pub fn inverse<T: Real>(&self, params: &ParamSet<T>, x: [f64; DIMS]) -> Result<[f64; DIMS]> {
        Self::check_input(&x)?;
        let slope = T::from_f64(self.slope);
        let mut tape = Tape::new();
        let vars = Self::const_vars(&mut tape, params);
        let mut cur: Vec<f64> = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (keep, free) = (layer.dims(true), layer.dims(false));
            let x_in: Vec<T> = keep.iter().map(|&d| T::from_f64(cur[d])).collect();
            let xv = tape.constant(Tensor::from_vec(x_in));
            let raw = layer.scale_net.forward(&mut tape, &vars, xv, slope)?;
            let t = layer.shift_net.forward(&mut tape, &vars, xv, slope)?;
            let raw = tape.value(raw).data().to_vec();
            let t = tape.value(t).data().to_vec();
            let bound = params.get(layer.scale_bound).data();
            for (j, &d) in free.iter().enumerate() {
                let s = bound[j].as_f64() * raw[j].as_f64().tanh();
                cur[d] = (cur[d] - t[j].as_f64()) * (-s).exp();
            }
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("flow block {i} (inverse)")));
            }
        }
        Ok(std::array::from_fn(|i| cur[i]))
    }

    pub fn log_prob<T: Real>(&self, params: &ParamSet<T>, z: [f64; DIMS]) -> Result<f64> {
        let (x, logdet) = self.forward(params, z)?;
        let sq: f64 = x.iter().map(|v| v * v).sum();
        Ok(-0.5 * sq - (DIMS as f64) / 2.0 * TAU.ln() + logdet)
    }
}
