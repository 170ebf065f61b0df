//! Numerical self-checks: naive-loop oracles for the convolution and pooling
//! kernels, central finite differences for every differentiable op, and
//! property checks of the flow.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::eval::{precision_auc, success_auc, PRECISION_MAX_DIST};
use crate::flow::{Flow, FlowConfig, DIMS};
use crate::geom::{apply_offsets, iou3d, relative_pose, Box3D, MotionOffsets, PointCloud};
use crate::loss::{fixed_prior_nll_on_tape, rle_loss_on_tape, Prior};
use crate::model::{ModelConfig, Network};
use crate::tensor::{ParamSet, Real, SparseLayout, SparseTensor3D, Tape, Tensor, Var};
use crate::voxel::VoxelSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Op (or component) under test.
    pub op: &'static str,
    pub passed: bool,
    /// Worst observed error in the check's own metric.
    pub error: f64,
    pub tolerance: f64,
    /// Coordinates compared against finite differences; 0 for other checks.
    pub probes: usize,
}

impl CheckResult {
    fn new(name: impl Into<String>, op: &'static str, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            op,
            passed: error.is_finite() && error < tolerance,
            error,
            tolerance,
            probes: 0,
        }
    }

    fn with_probes(mut self, n: usize) -> Self {
        self.probes = n;
        self
    }

    fn from_result(name: &str, op: &'static str, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(e) => Self::new(name, op, e, tolerance),
            Err(e) => {
                log::warn!("{name}: {e}");
                Self::new(name, op, f64::INFINITY, tolerance)
            }
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: error {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.op,
            self.name,
            self.error,
            self.tolerance
        )
    }
}

/// Relative error with a floor so that near-zero gradients compare absolutely.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform in `±[lo, hi]`: keeps values away from the kink at zero.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn random_layout(rng: &mut ChaCha8Rng, min_dim: usize, max_dim: usize) -> SparseLayout {
    let dims = [0; 3].map(|_| rng.random_range(min_dim..=max_dim));
    let density = rng.random_range(0.1..0.6);
    let mut coords = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if rng.random_bool(density) {
                    coords.push([x, y, z]);
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push([0, 0, 0]);
    }
    SparseLayout::new(dims, coords).expect("valid layout")
}

// ---------------------------------------------------------------------------
// Naive-loop oracles

/// Dense 3D convolution over the active sites of `layout`, evaluated at every
/// output cell. Returns the output grid dims and `[cell][cout]` values, with
/// `None` for cells whose receptive field holds no active input.
#[allow(clippy::too_many_arguments)]
fn dense_conv3d(
    layout: &SparseLayout,
    feats: &[f64],
    w: &[f64],
    b: &[f64],
    k: usize,
    cin: usize,
    cout: usize,
    stride: usize,
) -> ([usize; 3], Vec<Option<Vec<f64>>>) {
    let dims = layout.dims();
    let mut site = vec![usize::MAX; dims.iter().product()];
    for (i, c) in layout.coords().iter().enumerate() {
        site[(c[0] * dims[1] + c[1]) * dims[2] + c[2]] = i;
    }
    let pad = (k / 2) as isize;
    let od = dims.map(|d| (d + 2 * (k / 2) - k) / stride + 1);
    let mut out = Vec::with_capacity(od.iter().product());
    for ox in 0..od[0] {
        for oy in 0..od[1] {
            for oz in 0..od[2] {
                let o = [ox, oy, oz];
                let mut acc = b.to_vec();
                let mut any = false;
                for dx in 0..k {
                    for dy in 0..k {
                        for dz in 0..k {
                            let d = [dx, dy, dz];
                            let p: [isize; 3] =
                                std::array::from_fn(|a| (o[a] * stride) as isize - pad + d[a] as isize);
                            if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as isize) {
                                continue;
                            }
                            let s = site[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize];
                            if s == usize::MAX {
                                continue;
                            }
                            any = true;
                            let off = (dx * k + dy) * k + dz;
                            for ci in 0..cin {
                                let xv = feats[s * cin + ci];
                                for co in 0..cout {
                                    acc[co] += xv * w[(off * cin + ci) * cout + co];
                                }
                            }
                        }
                    }
                }
                out.push(any.then_some(acc));
            }
        }
    }
    (od, out)
}

fn sparse_oracle_case<T: Real>(rng: &mut ChaCha8Rng, strided: bool) -> Result<f64> {
    let layout = random_layout(rng, 3, 8);
    let (cin, cout, k) = (rng.random_range(1..=4), rng.random_range(1..=4), 3);
    let stride = if strided { 2 } else { 1 };
    let feats = rand_tensor(rng, &[layout.len(), cin], -1.0, 1.0);
    let w = rand_tensor(rng, &[k * k * k, cin, cout], -1.0, 1.0);
    let b = rand_tensor(rng, &[cout], -1.0, 1.0);

    let mut tape = Tape::<T>::new();
    let x = SparseTensor3D {
        layout: Arc::new(layout.clone()),
        feats: tape.constant(feats.cast()),
    };
    let wv = tape.constant(w.cast());
    let bv = tape.constant(b.cast());
    let y = if strided {
        tape.strided_sparse_conv3d(&x, wv, bv, stride)?
    } else {
        tape.submanifold_conv3d(&x, wv, bv)?
    };
    let (od, dense) = dense_conv3d(&layout, feats.data(), w.data(), b.data(), k, cin, cout, stride);
    let got = tape.value(y.feats).data();

    let mut err: f64 = 0.0;
    let mut seen = 0;
    for (i, c) in y.layout.coords().iter().enumerate() {
        let cell = (c[0] * od[1] + c[1]) * od[2] + c[2];
        let Some(expect) = &dense[cell] else {
            return Ok(f64::INFINITY);
        };
        if !strided && c != &layout.coords()[i] {
            return Ok(f64::INFINITY);
        }
        for co in 0..cout {
            err = err.max(rel_err(got[i * cout + co].as_f64(), expect[co], 1.0));
        }
        seen += 1;
    }
    // Strided outputs must cover every cell with an active receptive field.
    if strided && seen != dense.iter().filter(|c| c.is_some()).count() {
        return Ok(f64::INFINITY);
    }
    Ok(err)
}

fn conv2d_oracle_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, wd) = (rng.random_range(3..=8), rng.random_range(3..=8));
    let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let k = [1, 3, 3, 5][rng.random_range(0..4)];
    let stride = rng.random_range(1..=2);
    let x = rand_tensor(rng, &[h, wd, cin], -1.0, 1.0);
    let w = rand_tensor(rng, &[k, k, cin, cout], -1.0, 1.0);
    let b = rand_tensor(rng, &[cout], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, stride)?;

    let pad = (k / 2) as isize;
    let ho = (h + 2 * (k / 2) - k) / stride + 1;
    let wo = (wd + 2 * (k / 2) - k) / stride + 1;
    if tape.shape(y) != [ho, wo, cout] {
        return Ok(f64::INFINITY);
    }
    let got = tape.value(y).data();
    let mut err: f64 = 0.0;
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad;
                        let ix = (ox * stride + kx) as isize - pad;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                err = err.max(rel_err(got[(oy * wo + ox) * cout + co], acc, 1.0));
            }
        }
    }
    Ok(err)
}

fn max_pool_oracle_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, c) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=5));
    // Coarse values produce ties, which must resolve to the first position.
    let data: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(0..4) as f64).collect();
    let x = Tensor::new(vec![h, w, c], data.clone())?;
    let mut tape = Tape::<f64>::new();
    let xv = tape.param(x);
    let y = tape.global_max_pool(xv)?;
    let loss = tape.sum(y);
    let grads = tape.backward(loss)?;
    let gx = grads.get(xv).expect("input gradient");
    let mut err: f64 = 0.0;
    let mut expect_grad = vec![0.0; data.len()];
    for ch in 0..c {
        let mut best = ch;
        for p in 0..h * w {
            if data[p * c + ch] > data[best] {
                best = p * c + ch;
            }
        }
        err = err.max((tape.value(y).data()[ch] - data[best]).abs());
        expect_grad[best] = 1.0;
    }
    for (g, e) in gx.iter().zip(&expect_grad) {
        err = err.max((g - e).abs());
    }
    Ok(err)
}

/// Sparse and dense convolution and max pooling against naive loops.
pub fn oracle_checks(seed: u64, cases: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (strided, label) in [(false, "submanifold"), (true, "strided")] {
        for (prec, tol) in [("f32", 1e-5), ("f64", 1e-10)] {
            let worst = (0..cases).try_fold(0.0f64, |acc, _| {
                let e = if prec == "f32" {
                    sparse_oracle_case::<f32>(&mut rng, strided)?
                } else {
                    sparse_oracle_case::<f64>(&mut rng, strided)?
                };
                Ok(acc.max(e))
            });
            out.push(CheckResult::from_result(
                &format!("{label} sparse conv vs dense loop ({cases} cases, {prec})"),
                "sparse_conv",
                tol,
                worst,
            ));
        }
    }
    let worst = (0..cases).try_fold(0.0f64, |acc, _| Ok(acc.max(conv2d_oracle_case(&mut rng)?)));
    out.push(CheckResult::from_result(
        &format!("conv2d vs loop ({cases} cases)"),
        "conv2d",
        1e-10,
        worst,
    ));
    let worst = (0..cases).try_fold(0.0f64, |acc, _| Ok(acc.max(max_pool_oracle_case(&mut rng)?)));
    out.push(CheckResult::from_result(
        &format!("max pool vs scan ({cases} cases)"),
        "max_pool",
        1e-12,
        worst,
    ));
    out
}

// ---------------------------------------------------------------------------
// Finite differences

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Scalar probe `sum(out * r)` for a fixed random `r`.
fn probe(build: &Build, inputs: &[Tensor<f64>], r: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng, track: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = build(&mut tape, &vars)?;
    let weights = r.get_or_insert_with(|| rand_tensor(rng, tape.shape(out), -1.0, 1.0)).clone();
    let rv = tape.constant(weights);
    let m = tape.mul(out, rv)?;
    let loss = tape.sum(m);
    let value = tape.value(loss).data()[0];
    if !track {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], |g| g.to_vec()))
        .collect();
    Ok((value, Some(g)))
}

/// Compares the analytic gradient with central differences at up to
/// `per_input` random coordinates of every input (all of them when smaller).
/// Worst relative error and the number of coordinates compared.
fn fd_error(
    build: &Build,
    inputs: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut r = None;
    let (_, analytic) = probe(build, inputs, &mut r, rng, true)?;
    let analytic = analytic.expect("tracked");
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= per_input {
            (0..t.len()).collect()
        } else {
            (0..per_input).map(|_| rng.random_range(0..t.len())).collect()
        };
        for j in coords {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + h;
            let (up, _) = probe(build, &work, &mut r, rng, false)?;
            work[i].data_mut()[j] = orig - h;
            let (down, _) = probe(build, &work, &mut r, rng, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], numeric, floor));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

const FD_H: f64 = 1e-3;
const FD_TOL: f64 = 1e-3;
const FD_FLOOR: f64 = 1e-2;
const FD_SAMPLES: usize = 20;
const COMPOSITE_H: f64 = 1e-5;

struct FdCase<'a> {
    name: &'static str,
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'a>>,
    tol: f64,
    h: f64,
}

fn case<'a>(
    name: &'static str,
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a,
) -> FdCase<'a> {
    FdCase {
        name,
        op,
        inputs,
        build: Box::new(build),
        tol,
        h: FD_H,
    }
}

/// Fresh flow with every parameter jittered by up to `jitter` and the scale
/// bounds drawn from `bounds`.
pub fn randomized_flow(rng: &mut ChaCha8Rng, cfg: &FlowConfig, jitter: f64, bounds: (f64, f64)) -> (Flow, ParamSet<f64>) {
    let mut params = ParamSet::new();
    let flow = Flow::new(&mut params, "flow", cfg, rng).expect("flow config");
    let mut p: ParamSet<f64> = params.cast();
    for (i, t) in p.tensors_mut().iter_mut().enumerate() {
        let bound_like = t.shape().len() == 1 && flow.layers().iter().any(|l| l.scale_bound_index() == i);
        for v in t.data_mut() {
            *v = if bound_like {
                rng.random_range(bounds.0..bounds.1)
            } else {
                *v + rng.random_range(-jitter..jitter)
            };
        }
    }
    (flow, p)
}

fn sparse_input(rng: &mut ChaCha8Rng, cin: usize) -> (Arc<SparseLayout>, Tensor<f64>) {
    let layout = Arc::new(random_layout(rng, 4, 6));
    let feats = rand_tensor(rng, &[layout.len(), cin], -1.0, 1.0);
    (layout, feats)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<FdCase<'static>> {
    let mut cases = Vec::new();
    cases.push(case(
        "linear (batched)",
        "linear",
        vec![rand_tensor(rng, &[5, 6], -1.0, 1.0), rand_tensor(rng, &[6, 3], -1.0, 1.0), rand_tensor(rng, &[3], -1.0, 1.0)],
        1e-4,
        |t, v| t.linear(v[0], v[1], v[2]),
    ));
    cases.push(case(
        "linear (vector)",
        "linear",
        vec![rand_tensor(rng, &[6], -1.0, 1.0), rand_tensor(rng, &[6, 4], -1.0, 1.0), rand_tensor(rng, &[4], -1.0, 1.0)],
        1e-4,
        |t, v| t.linear(v[0], v[1], v[2]),
    ));
    for (name, k, stride) in [("conv2d 3x3", 3, 1), ("conv2d 3x3 stride 2", 3, 2), ("conv2d 1x1", 1, 1)] {
        cases.push(case(
            name,
            "conv2d",
            vec![
                rand_tensor(rng, &[5, 6, 3], -1.0, 1.0),
                rand_tensor(rng, &[k, k, 3, 4], -1.0, 1.0),
                rand_tensor(rng, &[4], -1.0, 1.0),
            ],
            FD_TOL,
            move |t, v| t.conv2d(v[0], v[1], v[2], stride),
        ));
    }
    let (layout, feats) = sparse_input(rng, 3);
    cases.push(case(
        "submanifold sparse conv",
        "sparse_conv",
        vec![feats, rand_tensor(rng, &[27, 3, 4], -1.0, 1.0), rand_tensor(rng, &[4], -1.0, 1.0)],
        FD_TOL,
        move |t, v| {
            let x = SparseTensor3D {
                layout: Arc::clone(&layout),
                feats: v[0],
            };
            Ok(t.submanifold_conv3d(&x, v[1], v[2])?.feats)
        },
    ));
    let (layout, feats) = sparse_input(rng, 3);
    cases.push(case(
        "strided sparse conv",
        "sparse_conv",
        vec![feats, rand_tensor(rng, &[27, 3, 2], -1.0, 1.0), rand_tensor(rng, &[2], -1.0, 1.0)],
        FD_TOL,
        move |t, v| {
            let x = SparseTensor3D {
                layout: Arc::clone(&layout),
                feats: v[0],
            };
            Ok(t.strided_sparse_conv3d(&x, v[1], v[2], 2)?.feats)
        },
    ));
    let (layout, feats) = sparse_input(rng, 2);
    cases.push(case("height squeeze", "height_squeeze", vec![feats], FD_TOL, move |t, v| {
        let x = SparseTensor3D {
            layout: Arc::clone(&layout),
            feats: v[0],
        };
        t.height_squeeze(&x)
    }));
    // Distinct values spaced well beyond the step so the argmax never flips.
    let mut pool_vals: Vec<f64> = (0..4 * 5 * 3).map(|i| i as f64 * 0.05).collect();
    for i in (1..pool_vals.len()).rev() {
        pool_vals.swap(i, rng.random_range(0..=i));
    }
    cases.push(case(
        "global max pool",
        "max_pool",
        vec![Tensor::new(vec![4, 5, 3], pool_vals).expect("shape")],
        FD_TOL,
        |t, v| t.global_max_pool(v[0]),
    ));
    let pair = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[3, 4], -1.0, 1.0)];
    cases.push(case("add", "add", pair(rng), FD_TOL, |t, v| t.add(v[0], v[1])));
    cases.push(case("sub", "sub", pair(rng), FD_TOL, |t, v| t.sub(v[0], v[1])));
    cases.push(case("mul", "mul", pair(rng), FD_TOL, |t, v| t.mul(v[0], v[1])));
    cases.push(case(
        "div",
        "div",
        vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_signed(rng, &[3, 4], 0.5, 2.0)],
        FD_TOL,
        |t, v| t.div(v[0], v[1]),
    ));
    cases.push(case(
        "concat",
        "concat",
        vec![rand_tensor(rng, &[2, 3, 2], -1.0, 1.0), rand_tensor(rng, &[2, 3, 5], -1.0, 1.0)],
        FD_TOL,
        |t, v| t.concat(v[0], v[1]),
    ));
    cases.push(case(
        "slice last axis",
        "slice",
        vec![rand_tensor(rng, &[3, 8], -1.0, 1.0)],
        FD_TOL,
        |t, v| t.slice_last(v[0], 2, 4),
    ));
    let unary = |rng: &mut ChaCha8Rng| vec![rand_signed(rng, &[4, 6], 0.05, 2.0)];
    cases.push(case("leaky relu", "leaky_relu", unary(rng), FD_TOL, |t, v| Ok(t.leaky_relu(v[0], 0.01))));
    cases.push(case("tanh", "tanh", unary(rng), FD_TOL, |t, v| Ok(t.tanh(v[0]))));
    cases.push(case("exp", "exp", unary(rng), FD_TOL, |t, v| Ok(t.exp(v[0]))));
    cases.push(case("softplus", "softplus", unary(rng), FD_TOL, |t, v| Ok(t.softplus(v[0]))));
    cases.push(case("abs", "abs", unary(rng), FD_TOL, |t, v| Ok(t.abs(v[0]))));
    cases.push(case("square", "square", unary(rng), FD_TOL, |t, v| Ok(t.square(v[0]))));
    cases.push(case("scale", "scale", unary(rng), FD_TOL, |t, v| Ok(t.scale(v[0], -1.7))));
    cases.push(case("add scalar", "add_scalar", unary(rng), FD_TOL, |t, v| Ok(t.add_scalar(v[0], 0.3))));
    cases.push(case("sum", "sum", unary(rng), FD_TOL, |t, v| Ok(t.sum(v[0]))));
    cases.push(case(
        "log",
        "log",
        vec![rand_tensor(rng, &[4, 6], 0.2, 3.0)],
        FD_TOL,
        |t, v| Ok(t.log(v[0])),
    ));
    cases
}

/// Loss cases: inputs are `[mean, sigma, flow params...]`. The flow subnets
/// have leaky-relu kinks that a parameter step of `1e-3` can cross, so these
/// use a smaller step.
fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<FdCase<'static>> {
    let mut cases = Vec::new();
    let cfg = FlowConfig {
        hidden: 16,
        ..FlowConfig::default()
    };
    let (flow, fparams) = randomized_flow(rng, &cfg, 0.3, (0.5, 1.5));
    let flow = Arc::new(flow);
    let target: Vec<f64> = (0..DIMS).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (name, prior) in [("rle loss, gaussian prior", Prior::Gaussian), ("rle loss, laplacian prior", Prior::Laplacian)] {
        // The mean sits at least 0.1 from the target so |z| stays off its kink.
        let mean: Vec<f64> = target.iter().map(|u| u + rng.random_range(0.1..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let sigma = rand_tensor(rng, &[DIMS], 0.5, 1.5);
        let mut inputs = vec![Tensor::from_vec(mean), sigma];
        inputs.extend(fparams.tensors().iter().cloned());
        let (flow, target) = (Arc::clone(&flow), target.clone());
        cases.push(case(name, "rle_loss", inputs, FD_TOL, move |t, v| {
            let tgt = t.constant(Tensor::from_vec(target.clone()));
            Ok(rle_loss_on_tape(t, &v[2..], &flow, v[0], v[1], tgt, prior)?.total)
        }));
    }
    let mean: Vec<f64> = target.iter().map(|u| u + 0.3).collect();
    for (name, prior, learned) in [
        ("fixed prior nll, gaussian, learned sigma", Prior::Gaussian, true),
        ("fixed prior nll, laplacian, learned sigma", Prior::Laplacian, true),
        ("fixed prior nll, gaussian, unit sigma", Prior::Gaussian, false),
        ("fixed prior nll, laplacian, unit sigma", Prior::Laplacian, false),
    ] {
        let mut inputs = vec![Tensor::from_vec(mean.clone())];
        if learned {
            inputs.push(rand_tensor(rng, &[DIMS], 0.5, 1.5));
        }
        let target = target.clone();
        cases.push(case(name, "fixed_prior_nll", inputs, FD_TOL, move |t, v| {
            let tgt = t.constant(Tensor::from_vec(target.clone()));
            Ok(fixed_prior_nll_on_tape(t, v[0], v.get(1).copied(), tgt, prior)?.total)
        }));
    }
    let mut inputs = vec![rand_tensor(rng, &[DIMS], -2.0, 2.0)];
    inputs.extend(fparams.tensors().iter().cloned());
    cases.push(case("flow log density", "flow", inputs, FD_TOL, move |t, v| {
        flow.log_prob_on_tape(t, &v[1..], v[0])
    }));
    for c in &mut cases {
        c.h = COMPOSITE_H;
    }
    cases
}

/// Central differences for every op, the losses and the flow, in `f64`.
pub fn finite_difference_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng);
    cases.extend(loss_cases(&mut rng));
    cases
        .iter()
        .map(|c| {
            match fd_error(&*c.build, &c.inputs, c.h, FD_SAMPLES, FD_FLOOR, &mut rng) {
                Ok((e, n)) => CheckResult::new(c.name, c.op, e, c.tol).with_probes(n),
                Err(e) => CheckResult::from_result(c.name, c.op, c.tol, Err(e)),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Whole model

/// Configuration small enough to difference in `f64` quickly.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![4, 8],
        bmm_channels: 8,
        bmm_ratio: 2,
        bmm_layers: 2,
        mlp_hidden: 16,
        voxel: VoxelSpec {
            range_min: [-3.2, -3.2, -1.2],
            range_max: [3.2, 3.2, 1.2],
            voxel_size: [0.4, 0.4, 0.4],
        },
        flow: FlowConfig {
            hidden: 8,
            ..FlowConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn blob(rng: &mut ChaCha8Rng, center: [f64; 3], n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| std::array::from_fn(|a| center[a] + rng.random_range(-0.8..0.8) * if a == 2 { 0.5 } else { 1.0 }))
            .collect(),
    )
}

/// Differences the RLE loss of a randomly parameterized tiny network with
/// respect to `samples` randomly chosen scalar parameters.
pub fn model_gradient_check(seed: u64, samples: usize) -> CheckResult {
    let name = format!("tiny network + rle loss, {samples} random parameters");
    let r = (|| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, params) = Network::new(&tiny_model_config(), seed)?;
        let mut p: ParamSet<f64> = params.cast();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let prev = blob(&mut rng, [0.0, 0.0, 0.0], 150);
        let cur = blob(&mut rng, [0.4, -0.2, 0.05], 150);
        let target: Vec<f64> = vec![0.4, -0.2, 0.05, 0.1];
        let build = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let out = net.forward_on_tape(tape, vars, &prev, &cur)?;
            let tgt = tape.constant(Tensor::from_vec(target.clone()));
            Ok(rle_loss_on_tape(tape, vars, net.flow(), out.mean, out.sigma, tgt, Prior::Gaussian)?.total)
        };
        let eval = |ps: &ParamSet<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.tensors().iter().map(|t| tape.constant(t.clone())).collect();
            let l = build(&mut tape, &vars)?;
            Ok(tape.value(l).data()[0])
        };
        let mut tape = Tape::new();
        let vars = crate::model::bind_params(&mut tape, &p);
        let loss = build(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let h = 1e-6;
        let total = p.num_scalars();
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let mut flat = rng.random_range(0..total);
            let mut ti = 0;
            while flat >= p.get(ti).len() {
                flat -= p.get(ti).len();
                ti += 1;
            }
            let analytic = grads.get(vars[ti]).map_or(0.0, |g| g[flat]);
            let orig = p.get(ti).data()[flat];
            p.get_mut(ti).data_mut()[flat] = orig + h;
            let up = eval(&p)?;
            p.get_mut(ti).data_mut()[flat] = orig - h;
            let down = eval(&p)?;
            p.get_mut(ti).data_mut()[flat] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h), FD_FLOOR));
        }
        Ok(worst)
    })();
    CheckResult::from_result(&name, "network", 1e-3, r).with_probes(samples)
}

// ---------------------------------------------------------------------------
// Flow properties

fn det4(m: [[f64; 4]; 4]) -> f64 {
    let mut a = m;
    let mut det = 1.0;
    for c in 0..4 {
        let p = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows");
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            for k in c..4 {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

/// Inverse roundtrip, log-determinant against a numeric Jacobian, exact
/// identity at initialization and normalization of the learned density.
pub fn flow_checks(seed: u64, quadrature_step: f64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig::default();
    let (flow, params) = randomized_flow(&mut rng, &cfg, 0.3, (0.5, 1.5));
    let mut out = Vec::new();

    let roundtrip = (|| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let z: [f64; DIMS] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let (x, _) = flow.forward(&params, z)?;
            let back = flow.inverse(&params, x)?;
            worst = z.iter().zip(back).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
        Ok(worst)
    })();
    out.push(CheckResult::from_result("inverse roundtrip, 1000 vectors", "flow", 1e-6, roundtrip));

    let logdet = (|| -> Result<f64> {
        // Small enough that crossing a leaky-relu kink inside a subnet is rare.
        let h = 1e-7;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let z: [f64; DIMS] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let (_, ld) = flow.forward(&params, z)?;
            let mut jac = [[0.0; 4]; 4];
            for j in 0..DIMS {
                let (mut zp, mut zm) = (z, z);
                zp[j] += h;
                zm[j] -= h;
                let (xp, _) = flow.forward(&params, zp)?;
                let (xm, _) = flow.forward(&params, zm)?;
                for i in 0..DIMS {
                    jac[i][j] = (xp[i] - xm[i]) / (2.0 * h);
                }
            }
            worst = worst.max((det4(jac).abs().ln() - ld).abs());
        }
        Ok(worst)
    })();
    out.push(CheckResult::from_result("log-determinant vs numeric Jacobian", "flow", 1e-4, logdet));

    let identity = (|| -> Result<f64> {
        let mut p32 = ParamSet::new();
        let fresh = Flow::new(&mut p32, "flow", &cfg, &mut rng)?;
        let p64: ParamSet<f64> = p32.cast();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let z: [f64; DIMS] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
            let (x, ld) = fresh.forward(&p64, z)?;
            worst = z.iter().zip(x).fold(worst.max(ld.abs()), |w, (a, b)| w.max((a - b).abs()));
        }
        Ok(worst)
    })();
    // Exactly zero: any deviation at all fails.
    out.push(CheckResult::from_result("zero-initialized flow is the identity", "flow", f64::MIN_POSITIVE, identity));

    // A gentler flow for the normalization check, so that its mass stays
    // inside the integration box.
    let (flow, params) = randomized_flow(&mut rng, &cfg, 0.05, (0.2, 0.5));
    let mass = (|| -> Result<f64> {
        let n = (12.0 / quadrature_step).round() as usize + 1;
        let axis: Vec<f64> = (0..n).map(|i| -6.0 + i as f64 * quadrature_step).collect();
        // Trapezoid weights.
        let wt = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let total: Result<f64> = (0..n * n)
            .into_par_iter()
            .map(|ab| {
                let (a, b) = (ab / n, ab % n);
                let mut s = 0.0;
                for c in 0..n {
                    for d in 0..n {
                        let lp = flow.log_prob(&params, [axis[a], axis[b], axis[c], axis[d]])?;
                        s += wt(a) * wt(b) * wt(c) * wt(d) * lp.exp();
                    }
                }
                Ok(s)
            })
            .sum();
        Ok((total? * quadrature_step.powi(4) - 1.0).abs())
    })();
    out.push(CheckResult::from_result(
        &format!("density integrates to 1 over [-6, 6]^4 (step {quadrature_step})"),
        "flow",
        0.02,
        mass,
    ));
    out
}

// ---------------------------------------------------------------------------
// Geometry

/// Monte-Carlo IoU from stratified samples inside `a`.
fn iou_monte_carlo(a: &Box3D, b: &Box3D, per_axis: usize, rng: &mut ChaCha8Rng) -> f64 {
    let half = a.half_extents();
    let mut inside = 0usize;
    for i in 0..per_axis {
        for j in 0..per_axis {
            for k in 0..per_axis {
                let cell = [i, j, k];
                let local: [f64; 3] = std::array::from_fn(|ax| {
                    let u = (cell[ax] as f64 + rng.random::<f64>()) / per_axis as f64;
                    (2.0 * u - 1.0) * half[ax]
                });
                if b.contains(a.to_world(local), 0.0) {
                    inside += 1;
                }
            }
        }
    }
    let inter = a.volume() * inside as f64 / (per_axis * per_axis * per_axis) as f64;
    inter / (a.volume() + b.volume() - inter)
}

fn random_box(rng: &mut ChaCha8Rng, center: [f64; 3]) -> Box3D {
    Box3D::new(
        center,
        [rng.random_range(0.5..2.5), rng.random_range(0.5..5.0), rng.random_range(0.5..2.0)],
        rng.random_range(-3.1..3.1),
    )
    .expect("positive size")
}

/// Exact IoU against Monte-Carlo volume estimates, and the offset roundtrip.
pub fn geometry_checks(seed: u64, pairs: usize, per_axis: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0];
        let a = random_box(&mut rng, c);
        let shift = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
        let b = random_box(&mut rng, std::array::from_fn(|i| a.center[i] + shift[i]));
        worst = worst.max((iou3d(&a, &b) - iou_monte_carlo(&a, &b, per_axis, &mut rng)).abs());
    }
    let samples = per_axis * per_axis * per_axis;
    let mut out = vec![CheckResult::new(
        format!("iou3d vs Monte Carlo ({pairs} pairs, {samples} samples each)"),
        "iou3d",
        worst,
        2e-3,
    )];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-1.0..1.0)];
        let a = random_box(&mut rng, c);
        let off = MotionOffsets::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-1.0..1.0),
        );
        let b = apply_offsets(&a, &off);
        let back = relative_pose(&a, &b).to_array();
        worst = back.iter().zip(off.to_array()).fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    out.push(CheckResult::new("apply_offsets then relative_pose, 1000 boxes", "offsets", worst, 1e-9));
    out
}

// ---------------------------------------------------------------------------
// Metrics

/// Trapezoid integral of the fraction of `values` passing `pass(v, t)` for
/// `t` on a uniform grid over `[0, max]`, normalized by `max`.
fn curve_auc(values: &[f64], max: f64, steps: usize, pass: impl Fn(f64, f64) -> bool) -> f64 {
    let frac = |t: f64| values.iter().filter(|&&v| pass(v, t)).count() as f64 / values.len() as f64;
    let dt = max / steps as f64;
    let inner: f64 = (1..steps).map(|i| frac(i as f64 * dt)).sum();
    (inner + 0.5 * (frac(0.0) + frac(max))) * dt / max
}

/// Success against the plain mean and both AUCs against numeric
/// integration of their threshold curves.
pub fn metric_checks(seed: u64, lists: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean_err, mut succ_err, mut prec_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..lists {
        let n = rng.random_range(1..200);
        let ious: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let dists: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let s = success_auc(&ious).expect("valid ious");
        let p = precision_auc(&dists).expect("valid distances");
        mean_err = mean_err.max((s - ious.iter().sum::<f64>() / n as f64).abs());
        succ_err = succ_err.max((s - curve_auc(&ious, 1.0, 2000, |v, t| v >= t)).abs());
        let m = PRECISION_MAX_DIST;
        prec_err = prec_err.max((p - curve_auc(&dists, m, 2000, |v, t| v <= t)).abs());
    }
    vec![
        CheckResult::new(format!("success equals mean IoU ({lists} lists)"), "success_auc", mean_err, 1e-12),
        CheckResult::new(format!("success vs numeric integration ({lists} lists)"), "success_auc", succ_err, 1e-3),
        CheckResult::new(format!("precision vs numeric integration ({lists} lists)"), "precision_auc", prec_err, 1e-3),
    ]
}

/// Everything `bevtrack gradcheck` runs.
pub fn gradcheck_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = oracle_checks(seed, 50);
    out.extend(finite_difference_checks(seed ^ 0x5eed));
    out.push(model_gradient_check(seed ^ 0xbee, 20));
    out.extend(flow_checks(seed ^ 0xf10, 1.0));
    out
}
