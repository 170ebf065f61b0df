//! Parameter-holding layers. Each layer stores indices into a [`ParamSet`];
//! the forward pass reads the matching tape variables from a slice that was
//! registered in parameter order (see [`bind`]).

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamSet, Real, SparseTensor3D, Tape, Tensor, Var};

/// Registers every parameter on `tape` as a trainable leaf, in order.
pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Vec<Var> {
    params.tensors().iter().map(|t| tape.param(t.clone())).collect()
}

/// He-style uniform bound for a leaky-relu network.
fn init_bound(fan_in: usize, slope: f64) -> f64 {
    (6.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt()
}

fn uniform<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let data = match init {
            Init::FanIn => uniform(rng, fan_in * fan_out, init_bound(fan_in, slope)),
            Init::Zero => vec![0.0; fan_in * fan_out],
        };
        let w = params.push(
            format!("{name}.weight"),
            Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
        );
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, vars[self.w], vars[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let data = uniform(rng, fan_in * cout, init_bound(fan_in, slope));
        let w = params.push(
            format!("{name}.weight"),
            Tensor::new(vec![kernel, kernel, cin, cout], data).expect("shape"),
        );
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.w], vars[self.b], self.stride)
    }
}

/// Sparse 3D convolution; `stride == 1` means submanifold.
#[derive(Debug, Clone, Copy)]
pub struct SparseConv3d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

impl SparseConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let kv = kernel * kernel * kernel;
        let data = uniform(rng, kv * cin * cout, init_bound(kv * cin, slope));
        let w = params.push(
            format!("{name}.weight"),
            Tensor::new(vec![kv, cin, cout], data).expect("shape"),
        );
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: &SparseTensor3D,
    ) -> Result<SparseTensor3D> {
        if self.stride == 1 {
            tape.submanifold_conv3d(x, vars[self.w], vars[self.b])
        } else {
            tape.strided_sparse_conv3d(x, vars[self.w], vars[self.b], self.stride)
        }
    }
}
