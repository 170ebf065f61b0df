use std::sync::Arc;

use crate::error::{Error, Result};

use super::fault::{self, FaultOp};
use super::sparse::{Rulebook, SparseLayout, SparseTensor3D};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Concat {
        a: Var,
        b: Var,
        inner_a: usize,
        inner_b: usize,
    },
    Slice {
        x: Var,
        start: usize,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        kernel: usize,
        cols: Vec<T>,
    },
    SparseConv {
        x: Var,
        w: Var,
        b: Var,
        rules: Arc<Rulebook>,
        /// `[n_out, k^3 * c_in]` gathered inputs, zero where a rule is absent.
        cols: Vec<T>,
    },
    HeightSqueeze {
        x: Var,
        layout: Arc<SparseLayout>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order; `backward` walks them in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients of a scalar with respect to every recorded value that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (ia, ib) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = if ia + ib == 0 { 0 } else { (va.len() + vb.len()) / (ia + ib) };
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ia..(r + 1) * ia]);
            data.extend_from_slice(&vb.data()[r * ib..(r + 1) * ib]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ia + ib;
        let value = Tensor::new(shape, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                inner_a: ia,
                inner_b: ib,
            },
            ng,
        ))
    }

    /// Elements `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let shape = vx.shape();
        let inner = *shape.last().ok_or_else(|| Error::shape("slice", "scalar input"))?;
        if start + len > inner {
            return Err(Error::shape("slice", format!("{start}..{} of {inner}", start + len)));
        }
        let rows = if inner == 0 { 0 } else { vx.len() / inner };
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * inner + start..r * inner + start + len]);
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(out_shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Slice { x, start, inner }, ng))
    }

    /// `x W + b` for `x` of shape `[in]` or `[n, in]`, `W` of shape `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (ws, bs) = (vw.shape(), vb.shape());
        if ws.len() != 2 || bs != [ws[1]] {
            return Err(Error::shape("linear", format!("weight {ws:?}, bias {bs:?}")));
        }
        let (fan_in, fan_out) = (ws[0], ws[1]);
        let (rows, out_shape) = match vx.shape() {
            [n] if *n == fan_in => (1, vec![fan_out]),
            [r, n] if *n == fan_in => (*r, vec![*r, fan_out]),
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("input {s:?} does not match weight {ws:?}"),
                ))
            }
        };
        let mut data: Vec<T> = (0..rows).flat_map(|_| vb.data().iter().copied()).collect();
        T::gemm(rows, fan_in, fan_out, vx.data(), false, vw.data(), false, T::one(), &mut data);
        let value = Tensor::new(out_shape, data)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    /// Cross-correlation of an `[h, w, c_in]` map with a `[k, k, c_in, c_out]`
    /// kernel, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[2] || vb.shape() != [ws[3]] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", vb.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[3]);
        let pad = k / 2;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("input {xs:?} smaller than padded kernel {k}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let patch = k * k * cin;
        let mut cols = vec![T::zero(); ho * wo * patch];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = (iy as usize * wd + ix as usize) * cin;
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&vx.data()[src..src + cin]);
                    }
                }
            }
        }
        let mut data: Vec<T> = (0..ho * wo).flat_map(|_| vb.data().iter().copied()).collect();
        T::gemm(ho * wo, patch, cout, &cols, false, vw.data(), false, T::one(), &mut data);
        let value = Tensor::new(vec![ho, wo, cout], data)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                kernel: k,
                cols,
            },
            ng,
        ))
    }

    /// Applies a sparse convolution described by `rules`; weights are
    /// `[k^3, c_in, c_out]`.
    fn sparse_conv(&mut self, x: Var, w: Var, b: Var, rules: Arc<Rulebook>) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let kv = rules.kernel.pow(3);
        let ws = vw.shape();
        if ws.len() != 3 || ws[0] != kv || vb.shape() != [ws[2]] {
            return Err(Error::shape(
                "sparse conv",
                format!("weight {ws:?}, bias {:?}, kernel {}", vb.shape(), rules.kernel),
            ));
        }
        let (cin, cout) = (ws[1], ws[2]);
        if vx.shape() != [rules.n_in, cin] {
            return Err(Error::shape(
                "sparse conv",
                format!("features {:?}, expected [{}, {cin}]", vx.shape(), rules.n_in),
            ));
        }
        let kc = kv * cin;
        let mut cols = vec![T::zero(); rules.n_out * kc];
        for (off, pairs) in rules.pairs.iter().enumerate() {
            for &(i, o) in pairs {
                let (i, o) = (i as usize, o as usize);
                let dst = o * kc + off * cin;
                cols[dst..dst + cin].copy_from_slice(&vx.data()[i * cin..(i + 1) * cin]);
            }
        }
        let mut out: Vec<T> = (0..rules.n_out).flat_map(|_| vb.data().iter().copied()).collect();
        T::gemm(rules.n_out, kc, cout, &cols, false, vw.data(), false, T::one(), &mut out);
        let value = Tensor::new(vec![rules.n_out, cout], out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(value, Op::SparseConv { x, w, b, rules, cols }, ng))
    }

    /// Submanifold convolution: the output active set equals the input's.
    pub fn submanifold_conv3d(
        &mut self,
        x: &SparseTensor3D,
        w: Var,
        b: Var,
    ) -> Result<SparseTensor3D> {
        let kernel = cube_root(self.shape(w).first().copied().unwrap_or(0))?;
        let rules = Arc::new(Rulebook::submanifold(&x.layout, kernel)?);
        let feats = self.sparse_conv(x.feats, w, b, rules)?;
        Ok(SparseTensor3D {
            layout: Arc::clone(&x.layout),
            feats,
        })
    }

    pub fn strided_sparse_conv3d(
        &mut self,
        x: &SparseTensor3D,
        w: Var,
        b: Var,
        stride: usize,
    ) -> Result<SparseTensor3D> {
        let kernel = cube_root(self.shape(w).first().copied().unwrap_or(0))?;
        let (rules, layout) = Rulebook::strided(&x.layout, kernel, stride)?;
        let feats = self.sparse_conv(x.feats, w, b, Arc::new(rules))?;
        Ok(SparseTensor3D {
            layout: Arc::new(layout),
            feats,
        })
    }

    /// Folds the vertical axis into channels: site `(ix, iy, iz)` channel `c`
    /// lands at BEV cell `(ix, iy)` channel `iz * C + c`.
    pub fn height_squeeze(&mut self, x: &SparseTensor3D) -> Result<Var> {
        let vx = &self.nodes[x.feats.0].value;
        let [nx, ny, nz] = x.layout.dims();
        let c = match vx.shape() {
            [n, c] if *n == x.layout.len() => *c,
            s => return Err(Error::shape("height squeeze", format!("features {s:?}"))),
        };
        let mut data = vec![T::zero(); nx * ny * nz * c];
        for (i, s) in x.layout.coords().iter().enumerate() {
            let dst = (s[0] * ny + s[1]) * nz * c + s[2] * c;
            data[dst..dst + c].copy_from_slice(&vx.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![nx, ny, nz * c], data)?;
        let ng = self.ng(&[x.feats]);
        Ok(self.push(
            value,
            Op::HeightSqueeze {
                x: x.feats,
                layout: Arc::clone(&x.layout),
            },
            ng,
        ))
    }

    /// Per-channel maximum of an `[h, w, c]` map. Ties go to the first
    /// position in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (hw, c) = match vx.shape() {
            [h, w, c] if h * w > 0 => (h * w, *c),
            s => return Err(Error::shape("global max pool", format!("input {s:?}"))),
        };
        let mut argmax: Vec<usize> = (0..c).collect();
        for p in 1..hw {
            for ch in 0..c {
                let idx = p * c + ch;
                if vx.data()[idx] > vx.data()[argmax[ch]] {
                    argmax[ch] = idx;
                }
            }
        }
        let data = argmax.iter().map(|&i| vx.data()[i]).collect();
        let value = Tensor::new(vec![c], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, ng))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d += -s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * va[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / vb[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += -g[j] * va[j] / (vb[j] * vb[j]);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c)),
            Op::AddScalar(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s)),
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += if vx[j] >= T::zero() { g[j] } else { g[j] * *slope };
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * (T::one() - y[j] * y[j]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * y[j];
                }
            }),
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] / vx[j];
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * sigmoid(vx[j]);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        let s = if vx[j] > T::zero() {
                            T::one()
                        } else if vx[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[j] += g[j] * s;
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = T::one() + T::one();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * two * vx[j];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat {
                a,
                b,
                inner_a,
                inner_b,
            } => {
                let (ia, ib) = (*inner_a, *inner_b);
                let rows = if ia + ib == 0 { 0 } else { g.len() / (ia + ib) };
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for j in 0..ia {
                            ga[r * ia + j] += g[r * (ia + ib) + j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..ib {
                            gb[r * ib + j] += g[r * (ia + ib) + ia + j];
                        }
                    }
                });
            }
            Op::Slice { x, start, inner } => {
                let len = *node.value.shape().last().unwrap();
                let rows = if len == 0 { 0 } else { g.len() / len };
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * inner + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (fan_in, fan_out) = (ws[0], ws[1]);
                let rows = g.len() / fan_out;
                let corrupt = fault::is_active(FaultOp::Linear);
                acc(*x, &mut |gx| {
                    T::gemm(rows, fan_out, fan_in, g, false, val(*w), true, T::one(), gx);
                });
                acc(*w, &mut |gw| {
                    T::gemm(fan_in, rows, fan_out, val(*x), true, g, false, T::one(), gw);
                    if corrupt {
                        gw.iter_mut().for_each(|v| *v *= T::from_f64(1.1));
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..fan_out {
                            gb[j] += g[r * fan_out + j];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                kernel,
                cols,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                let cout = self.nodes[w.0].value.shape()[3];
                let (k, stride) = (*kernel, *stride);
                let pad = k / 2;
                let patch = k * k * cin;
                let positions = g.len() / cout;
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                let corrupt = fault::is_active(FaultOp::Conv2d);
                acc(*w, &mut |gw| {
                    T::gemm(patch, positions, cout, cols, true, g, false, T::one(), gw);
                    if corrupt {
                        gw.iter_mut().for_each(|v| *v *= T::from_f64(1.1));
                    }
                });
                acc(*b, &mut |gb| {
                    for p in 0..positions {
                        for j in 0..cout {
                            gb[j] += g[p * cout + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let mut gcols = vec![T::zero(); positions * patch];
                    T::gemm(positions, cout, patch, g, false, val(*w), true, T::zero(), &mut gcols);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = &gcols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * wd + ix as usize) * cin;
                                    let src = (ky * k + kx) * cin;
                                    for c in 0..cin {
                                        gx[dst + c] += row[src + c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SparseConv { x, w, b, rules, cols } => {
                let ws = self.nodes[w.0].value.shape();
                let (kv, cin, cout) = (ws[0], ws[1], ws[2]);
                let kc = kv * cin;
                let n_out = rules.n_out;
                let corrupt = fault::is_active(FaultOp::SparseConv);
                acc(*b, &mut |gb| {
                    for o in 0..n_out {
                        for j in 0..cout {
                            gb[j] += g[o * cout + j];
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    T::gemm(kc, n_out, cout, cols, true, g, false, T::one(), gw);
                    if corrupt {
                        gw.iter_mut().for_each(|v| *v *= T::from_f64(1.1));
                    }
                });
                if self.nodes[x.0].needs_grad {
                    let mut gcols = vec![T::zero(); n_out * kc];
                    T::gemm(n_out, cout, kc, g, false, val(*w), true, T::zero(), &mut gcols);
                    acc(*x, &mut |gx| {
                        for (off, pairs) in rules.pairs.iter().enumerate() {
                            for &(i, o) in pairs {
                                let (i, o) = (i as usize, o as usize);
                                let src = o * kc + off * cin;
                                for c in 0..cin {
                                    gx[i * cin + c] += gcols[src + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::HeightSqueeze { x, layout } => {
                let [_, ny, nz] = layout.dims();
                let c = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (i, s) in layout.coords().iter().enumerate() {
                        let src = (s[0] * ny + s[1]) * nz * c + s[2] * c;
                        for j in 0..c {
                            gx[i * c + j] += g[src + j];
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let corrupt = fault::is_active(FaultOp::MaxPool);
                acc(*x, &mut |gx| {
                    for (ch, &idx) in argmax.iter().enumerate() {
                        let target = if corrupt { (idx + 1) % gx.len() } else { idx };
                        gx[target] += g[ch];
                    }
                });
            }
        }
    }
}

fn cube_root(kv: usize) -> Result<usize> {
    let k = (kv as f64).cbrt().round() as usize;
    if k == 0 || k * k * k != kv {
        return Err(Error::shape("sparse conv", format!("weight leading dim {kv} is not a cube")));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_params_has_unit_gradients() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient() {
        // loss = 0.5 * |W x|^2 => dW = (W x) x^T
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.param(t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        let sq = tape.square(y);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        // y = x W (row vector convention) = [4.5, 5.0]; dW[i][j] = x_i y_j
        let expected = [4.5, 5.0, 9.0, 10.0];
        for (a, e) in g.get(w).unwrap().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let p = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn leaky_relu_and_identity_linear() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let z = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(z).data(), &[-1.0, 2.0]);
        assert!(tape.linear(y, b, b).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![-200.0, 0.0, 200.0]));
        let y = tape.softplus(x);
        let v = tape.value(y).data();
        assert!(v[0] >= 0.0 && v[0] < 1e-30);
        assert!((v[1] - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(v[2], 200.0);
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::<f64>::new();
        // 1x1 identity over 2 channels
        let x = tape.constant(t(&[2, 3, 2], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.constant(Tensor::new(vec![5, 5, 1], vec![1.0; 25]).unwrap());
        let w = tape.constant(Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap());
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv2d(ones, w, b, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[5, 5, 1]);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[0], 4.0);
        let y2 = tape.conv2d(ones, w, b, 2).unwrap();
        assert_eq!(tape.shape(y2), &[3, 3, 1]);

        let bad = tape.constant(Tensor::new(vec![3, 3, 2, 1], vec![0.0; 18]).unwrap());
        assert!(tape.conv2d(ones, bad, b, 1).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2, 2], &[3., 1., 3., 5., 3., 1., 2., 1.]));
        let m = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3., 5.]);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        // channel 0 ties at positions 0,1,2 -> first wins
        assert_eq!(g.get(x).unwrap(), &[1., 0., 0., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 1], &[1., 2.]));
        let b = tape.param(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = tape.slice_last(c, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0., 0.]);
        assert_eq!(g.get(b).unwrap(), &[1., 1., 1., 1.]);
    }
}
