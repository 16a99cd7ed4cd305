use super::conv::{self, Geometry};
use super::gemm::{gemm, Trans};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Variance floor inside [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    ConcatLast(Var, Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv {
        x: Var,
        k: Var,
        bias: Option<Var>,
        n: usize,
        c_in: usize,
        c_out: usize,
        geom: Geometry,
    },
    Deconv {
        y: Var,
        k: Var,
        bias: Option<Var>,
        n: usize,
        c_in: usize,
        c_out: usize,
        geom: Geometry,
    },
    Reparam {
        mu: Var,
        log_std: Var,
        noise: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Node inputs always precede the node itself.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("{op}: stride must be 1 or 2, got {stride}")))
    }
}

/// Splits `[n, c, h, w]` or `[c, h, w]` into `(n, c, h, w, batched)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::dim(op, format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on `v` by the most recent [`Graph::backward`]
    /// (summed over every call for leaves).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A trainable parameter; its gradient can be flushed back with
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// A parameter read as a constant (frozen for this graph).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Same value, severed from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `(param, gradient)` for every parameter node that received gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(n, g)| match (&n.op, g) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Trans::N, tb.data(), Trans::N, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds `bias: [n]` to every row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [n] {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
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

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, f64::min, Op::Min(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ---- reductions and reshaping --------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sums over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let Some((&n, lead)) = t.shape().split_last() else {
            return Err(Error::dim("sum_last", "scalar input"));
        };
        let data = t.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(lead, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumLast(x), rg))
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p, q) = match (ta.shape(), tb.shape()) {
            (&[m, p], &[m2, q]) if m == m2 => (m, p, q),
            (sa, sb) => return Err(Error::dim("concat_last", format!("{sa:?} ++ {sb:?}"))),
        };
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, p + q], data)?, Op::ConcatLast(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ---- normalization --------------------------------------------------

    /// LayerNorm over the last axis with per-feature affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::dim("layer_norm", format!("need at least 2 features, got {:?}", tx.shape())));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- convolution ----------------------------------------------------

    /// Valid 3x3 convolution. `x: [C_in,H,W]` or `[N,C_in,H,W]`,
    /// `kernels: [C_out,C_in,3,3]`, optional per-channel `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        check_stride("conv2d", stride)?;
        let (n, c_in, h, w, batched) = image_dims("conv2d", self.shape(x))?;
        let c_out = match *self.shape(kernels) {
            [co, ci, 3, 3] if ci == c_in => co,
            ref s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernels {s:?} do not fit input {:?}", self.shape(x)),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {c_out} channels", self.shape(b))));
            }
        }
        let (Some(oh), Some(ow)) = (conv::conv2d_out_size(h, stride), conv::conv2d_out_size(w, stride)) else {
            return Err(Error::dim("conv2d", format!("input {h}x{w} smaller than 3x3 kernel")));
        };
        let geom = Geometry {
            big_h: h,
            big_w: w,
            small_h: oh,
            small_w: ow,
            stride,
        };
        let out = conv::conv_forward(
            self.value(x).data(),
            n,
            c_in,
            c_out,
            self.value(kernels).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let shape: Vec<usize> = if batched { vec![n, c_out, oh, ow] } else { vec![c_out, oh, ow] };
        let rg = self.rg(x) || self.rg(kernels) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv {
                x,
                k: kernels,
                bias,
                n,
                c_in,
                c_out,
                geom,
            },
            rg,
        ))
    }

    /// Transposed 3x3 convolution. `y: [C_in,H,W]` or `[N,C_in,H,W]`,
    /// `kernels: [C_in,C_out,3,3]`; output extent `(H-1)*stride + 3 + output_padding`.
    pub fn deconv2d(
        &mut self,
        y: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        output_padding: usize,
    ) -> Result<Var> {
        check_stride("deconv2d", stride)?;
        if output_padding >= stride.max(2) {
            return Err(Error::Config(format!(
                "deconv2d: output_padding {output_padding} too large for stride {stride}"
            )));
        }
        let (n, c_in, h, w, batched) = image_dims("deconv2d", self.shape(y))?;
        let c_out = match *self.shape(kernels) {
            [ci, co, 3, 3] if ci == c_in => co,
            ref s => {
                return Err(Error::dim(
                    "deconv2d",
                    format!("kernels {s:?} do not fit input {:?}", self.shape(y)),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim("deconv2d", format!("bias {:?} for {c_out} channels", self.shape(b))));
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("deconv2d", "empty input"));
        }
        let geom = Geometry {
            big_h: conv::deconv2d_out_size(h, stride, output_padding),
            big_w: conv::deconv2d_out_size(w, stride, output_padding),
            small_h: h,
            small_w: w,
            stride,
        };
        let out = conv::deconv_forward(
            self.value(y).data(),
            n,
            c_in,
            c_out,
            self.value(kernels).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let shape: Vec<usize> = if batched {
            vec![n, c_out, geom.big_h, geom.big_w]
        } else {
            vec![c_out, geom.big_h, geom.big_w]
        };
        let rg = self.rg(y) || self.rg(kernels) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Deconv {
                y,
                k: kernels,
                bias,
                n,
                c_in,
                c_out,
                geom,
            },
            rg,
        ))
    }

    // ---- sampling -------------------------------------------------------

    /// `mu + exp(log_std) * noise`. `noise` is a constant; `log_std` must
    /// already lie in the policy bounds `[-10, 2]`.
    pub fn gaussian_reparam(&mut self, mu: Var, log_std: Var, noise: &Tensor) -> Result<Var> {
        let (tm, ts) = (self.value(mu), self.value(log_std));
        same_shape("gaussian_reparam", tm, ts)?;
        same_shape("gaussian_reparam", tm, noise)?;
        assert!(
            ts.data().iter().all(|v| (-10.0..=2.0).contains(v)),
            "gaussian_reparam: log_std outside [-10, 2]"
        );
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(noise.data())
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        let out = Tensor::new(tm.shape(), data)?;
        let rg = self.rg(mu) || self.rg(log_std);
        Ok(self.push(
            out,
            Op::Reparam {
                mu,
                log_std,
                noise: noise.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients on leaves and parameters
    /// accumulate across calls; interior gradients are recomputed each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf | Op::Param(_)) {
                *g = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let Graph { nodes, grads } = self;
        grad_slot(nodes, grads, loss).unwrap()[0] += 1.0;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param(_) | Op::Constant) {
                continue;
            }
            let Some(d) = grads[i].take() else { continue };
            propagate(nodes, grads, &node.op, &node.value, &d);
            grads[i] = Some(d);
        }
        Ok(())
    }
}

/// Zero-initialised gradient buffer for `v`, or `None` if `v` takes no gradient.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, out: &Tensor, d: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    match *op {
        Op::Leaf | Op::Param(_) | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if let Some(ga) = grad_slot(nodes, grads, a) {
                gemm(m, n, k, d, Trans::N, val(b).data(), Trans::T, 1.0, ga);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                gemm(k, m, n, val(a).data(), Trans::T, d, Trans::N, 1.0, gb);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                add_into(gx, d);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                let n = gb.len();
                for row in d.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_slot(nodes, grads, a) {
                add_into(ga, d);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                add_into(gb, d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_slot(nodes, grads, a) {
                add_into(ga, d);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                gb.iter_mut().zip(d).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            if let Some(ga) = grad_slot(nodes, grads, a) {
                for i in 0..d.len() {
                    ga[i] += d[i] * vb[i];
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                for i in 0..d.len() {
                    gb[i] += d[i] * va[i];
                }
            }
        }
        Op::Min(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            if let Some(ga) = grad_slot(nodes, grads, a) {
                for i in 0..d.len() {
                    if va[i] <= vb[i] {
                        ga[i] += d[i];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                for i in 0..d.len() {
                    if va[i] > vb[i] {
                        gb[i] += d[i];
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                gx.iter_mut().zip(d).for_each(|(g, d)| *g += c * d);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                add_into(gx, d);
            }
        }
        Op::Square(x) => {
            let vx = val(x).data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for i in 0..d.len() {
                    gx[i] += 2.0 * vx[i] * d[i];
                }
            }
        }
        Op::Relu(x) => {
            let vx = val(x).data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for i in 0..d.len() {
                    if vx[i] > 0.0 {
                        gx[i] += d[i];
                    }
                }
            }
        }
        Op::Tanh(x) => {
            let y = out.data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for i in 0..d.len() {
                    gx[i] += (1.0 - y[i] * y[i]) * d[i];
                }
            }
        }
        Op::Exp(x) => {
            let y = out.data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for i in 0..d.len() {
                    gx[i] += y[i] * d[i];
                }
            }
        }
        Op::Log(x) => {
            let vx = val(x).data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for i in 0..d.len() {
                    gx[i] += d[i] / vx[i];
                }
            }
        }
        Op::Clamp(x, lo, hi) => {
            let vx = val(x).data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for i in 0..d.len() {
                    if vx[i] >= lo && vx[i] <= hi {
                        gx[i] += d[i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                gx.iter_mut().for_each(|g| *g += d[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                let s = d[0] / gx.len() as f64;
                gx.iter_mut().for_each(|g| *g += s);
            }
        }
        Op::SumLast(x) => {
            let n = *val(x).shape().last().unwrap();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for (row, di) in gx.chunks_mut(n.max(1)).zip(d) {
                    row.iter_mut().for_each(|g| *g += di);
                }
            }
        }
        Op::ConcatLast(a, b) => {
            let p = val(a).shape()[1];
            let q = val(b).shape()[1];
            if let Some(ga) = grad_slot(nodes, grads, a) {
                for (row, drow) in ga.chunks_mut(p.max(1)).zip(d.chunks(p + q)) {
                    add_into(row, &drow[..p]);
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                for (row, drow) in gb.chunks_mut(q.max(1)).zip(d.chunks(p + q)) {
                    add_into(row, &drow[p..]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            ref xhat,
            ref inv_std,
        } => {
            let g = val(gain).data();
            let dim = g.len();
            if let Some(gg) = grad_slot(nodes, grads, gain) {
                for (drow, hrow) in d.chunks(dim).zip(xhat.chunks(dim)) {
                    for j in 0..dim {
                        gg[j] += drow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, bias) {
                for drow in d.chunks(dim) {
                    add_into(gb, drow);
                }
            }
            if let Some(gx) = grad_slot(nodes, grads, x) {
                let mut dh = vec![0.0; dim];
                for (r, is) in inv_std.iter().enumerate() {
                    let drow = &d[r * dim..(r + 1) * dim];
                    let hrow = &xhat[r * dim..(r + 1) * dim];
                    for j in 0..dim {
                        dh[j] = drow[j] * g[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / dim as f64;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    let grow = &mut gx[r * dim..(r + 1) * dim];
                    for j in 0..dim {
                        grow[j] += is * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Conv {
            x,
            k,
            bias,
            n,
            c_in,
            c_out,
            geom,
        } => {
            let (xv, kv) = (val(x).data(), val(k).data());
            let mut dx = nodes[x.0].requires_grad.then(|| vec![0.0; xv.len()]);
            let mut dk = nodes[k.0].requires_grad.then(|| vec![0.0; kv.len()]);
            let mut db = bias.filter(|b| nodes[b.0].requires_grad).map(|_| vec![0.0; c_out]);
            conv::conv_backward(
                xv,
                n,
                c_in,
                c_out,
                kv,
                geom,
                d,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            flush(nodes, grads, x, dx);
            flush(nodes, grads, k, dk);
            if let Some(b) = bias {
                flush(nodes, grads, b, db);
            }
        }
        Op::Deconv {
            y,
            k,
            bias,
            n,
            c_in,
            c_out,
            geom,
        } => {
            let (yv, kv) = (val(y).data(), val(k).data());
            let mut dy = nodes[y.0].requires_grad.then(|| vec![0.0; yv.len()]);
            let mut dk = nodes[k.0].requires_grad.then(|| vec![0.0; kv.len()]);
            let mut db = bias.filter(|b| nodes[b.0].requires_grad).map(|_| vec![0.0; c_out]);
            conv::deconv_backward(
                yv,
                n,
                c_in,
                c_out,
                kv,
                geom,
                d,
                dy.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            flush(nodes, grads, y, dy);
            flush(nodes, grads, k, dk);
            if let Some(b) = bias {
                flush(nodes, grads, b, db);
            }
        }
        Op::Reparam {
            mu,
            log_std,
            ref noise,
        } => {
            if let Some(gm) = grad_slot(nodes, grads, mu) {
                add_into(gm, d);
            }
            let ls = val(log_std).data();
            if let Some(gs) = grad_slot(nodes, grads, log_std) {
                for i in 0..d.len() {
                    gs[i] += d[i] * ls[i].exp() * noise[i];
                }
            }
        }
    }
}

fn flush(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: Option<Vec<f64>>) {
    if let (Some(c), Some(g)) = (contrib, grad_slot(nodes, grads, v)) {
        add_into(g, &c);
    }
}
