//! Reverse-mode automatic differentiation over real and complex grid
//! arrays, covering exactly the operation set the operator models need.
//!
//! A `Tape` is a Wengert list: forward calls append nodes, `backward`
//! walks it once in reverse. Tapes are single-use; calling `backward`
//! twice without a new forward is an error. Complex gradients are stored
//! as gradients with respect to (Re, Im) pairs, carried in a complex
//! array: `grad.re = dL/dRe`, `grad.im = dL/dIm`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft_full, hermitian_expand};
use crate::tensor::{
    affine_bwd, affine_fwd, channel_affine_bwd, channel_affine_fwd, numel, par_chunks_mut,
    CTensor, Tensor,
};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
}

/// Real or complex array value carried by a node.
#[derive(Clone, Debug)]
pub enum Buffer {
    R(Tensor),
    C(CTensor),
}

impl Buffer {
    pub fn shape(&self) -> &[usize] {
        match self {
            Buffer::R(t) => &t.shape,
            Buffer::C(t) => &t.shape,
        }
    }

    fn zeros_like(&self) -> Buffer {
        match self {
            Buffer::R(t) => Buffer::R(Tensor::zeros(&t.shape)),
            Buffer::C(t) => Buffer::C(CTensor::zeros(&t.shape)),
        }
    }

    fn add_assign(&mut self, other: &Buffer) {
        match (self, other) {
            (Buffer::R(a), Buffer::R(b)) => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += *y;
                }
            }
            (Buffer::C(a), Buffer::C(b)) => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += *y;
                }
            }
            _ => unreachable!("kind mismatch in gradient accumulation"),
        }
    }
}

/// Supported activation functions. GELU is the exact erf form
/// z * Phi(z), not the tanh approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Gelu,
    Tanh,
    Sigmoid,
    Softplus,
    Swish,
}

impl ActKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(ActKind::Gelu),
            "tanh" => Ok(ActKind::Tanh),
            "sigmoid" => Ok(ActKind::Sigmoid),
            "softplus" => Ok(ActKind::Softplus),
            "swish" => Ok(ActKind::Swish),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActKind::Gelu => z * std_normal_cdf(z),
            ActKind::Tanh => z.tanh(),
            ActKind::Sigmoid => sigmoid(z),
            ActKind::Softplus => softplus(z),
            ActKind::Swish => z * sigmoid(z),
        }
    }

    /// Derivative reusing the stored forward output (avoids a second
    /// erf/tanh evaluation on the backward pass).
    pub fn derivative_from(self, z: f64, out: f64) -> f64 {
        match self {
            ActKind::Gelu => {
                if z.abs() < 1e-6 {
                    self.derivative(z)
                } else {
                    out / z + z * std_normal_pdf(z)
                }
            }
            ActKind::Tanh => 1.0 - out * out,
            ActKind::Sigmoid => out * (1.0 - out),
            ActKind::Softplus => sigmoid(z),
            ActKind::Swish => {
                if z.abs() < 1e-6 {
                    self.derivative(z)
                } else {
                    let s = out / z;
                    s + z * s * (1.0 - s)
                }
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActKind::Gelu => std_normal_cdf(z) + z * std_normal_pdf(z),
            ActKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActKind::Softplus => sigmoid(z),
            ActKind::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
        }
    }
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Optimizer state slot attached to a parameter (Adam moments).
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Named persistent array with a gradient slot and optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub state: Option<AdamState>,
}

/// Flat storage of all parameters of a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(&value.shape);
        self.params.push(Parameter { name, value, grad, state: None });
        self.params.len() - 1
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.fill(0.0);
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

enum Op {
    Leaf,
    LeafParam(usize),
    Add(usize, usize),
    Scale(usize, f64),
    MulR(usize, usize),
    MulBcastC(usize, usize),
    Affine { x: usize, w: usize, b: usize },
    ChannelAffine { x: usize, w: usize, b: usize },
    ChannelAffineB { x: usize, w: usize, b: usize },
    Act { x: usize, kind: ActKind },
    ComplexJoin { re: usize, im: usize },
    ComplexJoinT { re: usize, im: usize },
    CAbsSq(usize),
    SumAxis0(usize),
    SumAll(usize),
    Transpose2(usize),
    Reshape(usize),
    ChannelContract { sym: usize, spec: usize },
    ChannelContractB { sym: usize, spec: usize },
    Rfft { x: usize, sdims: usize },
    Irfft { y: usize, res: Vec<usize> },
    GatherLast { x: usize, idx: Arc<Vec<usize>>, src_len: usize },
    ScatterLast { x: usize, idx: Arc<Vec<usize>> },
    RelL2 { pred: usize, target: Arc<Tensor> },
    BatchRelL2 { pred: usize, targets: Arc<Tensor> },
    MeanScalars(Vec<usize>),
}

struct Node {
    op: Op,
    value: Buffer,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Buffer>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Buffer, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var { id: self.nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> &Buffer {
        &self.nodes[v.id].value
    }

    pub fn value_real(&self, v: Var) -> Result<&Tensor> {
        match &self.nodes[v.id].value {
            Buffer::R(t) => Ok(t),
            Buffer::C(_) => Err(Error::invalid("expected real value, found complex")),
        }
    }

    pub fn value_complex(&self, v: Var) -> Result<&CTensor> {
        match &self.nodes[v.id].value {
            Buffer::C(t) => Ok(t),
            Buffer::R(_) => Err(Error::invalid("expected complex value, found real")),
        }
    }

    /// Scalar value of a one-element real node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value_real(v)?;
        if t.len() != 1 {
            return Err(Error::invalid("not a scalar node"));
        }
        Ok(t.data[0])
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Buffer::R(t), false)
    }

    pub fn constant_c(&mut self, t: CTensor) -> Var {
        self.push(Op::Leaf, Buffer::C(t), false)
    }

    /// Differentiable leaf that is not a parameter (gradient readable
    /// from the tape after backward).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Buffer::R(t), true)
    }

    pub fn input_c(&mut self, t: CTensor) -> Var {
        self.push(Op::Leaf, Buffer::C(t), true)
    }

    /// Lease a parameter onto the tape; backward accumulates into
    /// `store.params[idx].grad`.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> Var {
        let value = store.params[idx].value.clone();
        self.push(Op::LeafParam(idx), Buffer::R(value), true)
    }

    // ---- elementwise and structural ops -------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = match (va, vb) {
            (Buffer::R(x), Buffer::R(y)) => Buffer::R(Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
            }),
            (Buffer::C(x), Buffer::C(y)) => Buffer::C(CTensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
            }),
            _ => return Err(Error::invalid("add: mixed real/complex operands")),
        };
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::Add(a.id, b.id), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = match &self.nodes[a.id].value {
            Buffer::R(x) => Buffer::R(Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| v * factor).collect(),
            }),
            Buffer::C(x) => Buffer::C(CTensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| v * factor).collect(),
            }),
        };
        let rg = self.requires(a.id);
        self.push(Op::Scale(a.id, factor), value, rg)
    }

    /// Elementwise real product, identical shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.value_real(a)?;
        let y = self.value_real(b)?;
        if x.shape != y.shape {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", x.shape, y.shape)));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        };
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::MulR(a.id, b.id), Buffer::R(value), rg))
    }

    /// Elementwise complex product with broadcasting over singleton axes
    /// (equal ranks; each axis must match or be 1 on one side).
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.value_complex(a)?;
        let y = self.value_complex(b)?;
        let out_shape = broadcast_shape(&x.shape, &y.shape)?;
        let mut out = CTensor::zeros(&out_shape);
        let (sa, sb) = (bcast_strides(&x.shape, &out_shape), bcast_strides(&y.shape, &out_shape));
        let os = strides(&out_shape);
        for flat in 0..out.data.len() {
            let (ia, ib) = bcast_indices(flat, &out_shape, &os, &sa, &sb);
            out.data[flat] = x.data[ia] * y.data[ib];
        }
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::MulBcastC(a.id, b.id), Buffer::C(out), rg))
    }

    /// y[p, o] = sum_i x[p, i] w[o, i] + b[o]
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value_real(x)?;
        let wv = self.value_real(w)?;
        let bv = self.value_real(b)?;
        if xv.shape.len() != 2 || wv.shape.len() != 2 || bv.shape.len() != 1 {
            return Err(Error::shape("affine expects x[p,i], w[o,i], b[o]"));
        }
        let (batch, din) = (xv.shape[0], xv.shape[1]);
        let (dout, win) = (wv.shape[0], wv.shape[1]);
        if win != din || bv.shape[0] != dout {
            return Err(Error::shape(format!(
                "affine: x{:?} w{:?} b{:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        if x.id == w.id || x.id == b.id || w.id == b.id {
            return Err(Error::invalid("affine operands must be distinct nodes"));
        }
        let mut out = Tensor::zeros(&[batch, dout]);
        affine_fwd(&xv.data, &wv.data, &bv.data, batch, din, dout, &mut out.data);
        let rg = self.requires(x.id) || self.requires(w.id) || self.requires(b.id);
        Ok(self.push(Op::Affine { x: x.id, w: w.id, b: b.id }, Buffer::R(out), rg))
    }

    /// y[o, g...] = sum_i w[o, i] x[i, g...] + b[o]  (pointwise map over
    /// the grid, channels contracted).
    pub fn channel_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value_real(x)?;
        let wv = self.value_real(w)?;
        let bv = self.value_real(b)?;
        if xv.shape.len() < 2 || wv.shape.len() != 2 || bv.shape.len() != 1 {
            return Err(Error::shape(
                "channel_affine expects x[i,g...], w[o,i], b[o]",
            ));
        }
        let cin = xv.shape[0];
        let grid = numel(&xv.shape[1..]);
        let (cout, win) = (wv.shape[0], wv.shape[1]);
        if win != cin || bv.shape[0] != cout {
            return Err(Error::shape(format!(
                "channel_affine: x{:?} w{:?} b{:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        if x.id == w.id || x.id == b.id || w.id == b.id {
            return Err(Error::invalid("affine operands must be distinct nodes"));
        }
        let mut out_shape = vec![cout];
        out_shape.extend_from_slice(&xv.shape[1..]);
        let mut out = Tensor::zeros(&out_shape);
        channel_affine_fwd(&xv.data, &wv.data, &bv.data, cin, cout, grid, &mut out.data);
        let rg = self.requires(x.id) || self.requires(w.id) || self.requires(b.id);
        Ok(self.push(Op::ChannelAffine { x: x.id, w: w.id, b: b.id }, Buffer::R(out), rg))
    }

    /// Batched pointwise map: y[s, o, g...] = sum_i w[o, i] x[s, i, g...] + b[o].
    pub fn channel_affine_batched(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value_real(x)?;
        let wv = self.value_real(w)?;
        let bv = self.value_real(b)?;
        if xv.shape.len() < 3 || wv.shape.len() != 2 || bv.shape.len() != 1 {
            return Err(Error::shape(
                "channel_affine_batched expects x[s,i,g...], w[o,i], b[o]",
            ));
        }
        if x.id == w.id || x.id == b.id || w.id == b.id {
            return Err(Error::invalid("affine operands must be distinct nodes"));
        }
        let (samples, cin) = (xv.shape[0], xv.shape[1]);
        let grid = numel(&xv.shape[2..]);
        let (cout, win) = (wv.shape[0], wv.shape[1]);
        if win != cin || bv.shape[0] != cout {
            return Err(Error::shape(format!(
                "channel_affine_batched: x{:?} w{:?} b{:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        let mut out_shape = vec![samples, cout];
        out_shape.extend_from_slice(&xv.shape[2..]);
        let mut out = Tensor::zeros(&out_shape);
        let (xd, wd, bd) = (&xv.data, &wv.data, &bv.data);
        let par = samples * cin * cout * grid >= 1 << 18;
        par_chunks_mut(par, &mut out.data, cout * grid, |srow, oblock| {
            channel_affine_fwd(
                &xd[srow * cin * grid..(srow + 1) * cin * grid],
                wd,
                bd,
                cin,
                cout,
                grid,
                oblock,
            );
        });
        let rg = self.requires(x.id) || self.requires(w.id) || self.requires(b.id);
        Ok(self.push(Op::ChannelAffineB { x: x.id, w: w.id, b: b.id }, Buffer::R(out), rg))
    }

    /// Batched channel contraction: out[s, j, q] = sum_i sym[i, j, q]
    /// spec[s, i, q]. The symbol tensor streams once per sample block
    /// instead of once per sample.
    pub fn channel_contract_batched(&mut self, sym: Var, spec: Var) -> Result<Var> {
        let sv = self.value_complex(sym)?;
        let fv = self.value_complex(spec)?;
        if sv.shape.len() < 3 || fv.shape.len() < 3 {
            return Err(Error::shape(
                "channel_contract_batched expects sym[i,j,q...], spec[s,i,q...]",
            ));
        }
        let (ci, co) = (sv.shape[0], sv.shape[1]);
        let m = numel(&sv.shape[2..]);
        let samples = fv.shape[0];
        if fv.shape[1] != ci || numel(&fv.shape[2..]) != m {
            return Err(Error::shape(format!(
                "channel_contract_batched: sym{:?} vs spec{:?}",
                sv.shape, fv.shape
            )));
        }
        let mut out_shape = vec![samples, co];
        out_shape.extend_from_slice(&sv.shape[2..]);
        let mut out = CTensor::zeros(&out_shape);
        let (sd, fd) = (&sv.data, &fv.data);
        let par = samples * ci * co * m >= 1 << 16;
        par_chunks_mut(par, &mut out.data, co * m, |srow, oblock| {
            for j in 0..co {
                let o_row = &mut oblock[j * m..(j + 1) * m];
                for i in 0..ci {
                    let s_row = &sd[(i * co + j) * m..(i * co + j + 1) * m];
                    let f_row = &fd[(srow * ci + i) * m..(srow * ci + i + 1) * m];
                    for ((o, sq), fq) in o_row.iter_mut().zip(s_row).zip(f_row) {
                        *o += *sq * *fq;
                    }
                }
            }
        });
        let rg = self.requires(sym.id) || self.requires(spec.id);
        Ok(self.push(
            Op::ChannelContractB { sym: sym.id, spec: spec.id },
            Buffer::C(out),
            rg,
        ))
    }

    /// Mean over samples of the per-sample relative L2 error; `targets`
    /// is `[samples, ...]` matching `pred`.
    pub fn batch_relative_l2(&mut self, pred: Var, targets: &Tensor) -> Result<Var> {
        let pv = self.value_real(pred)?;
        if pv.shape != targets.shape || pv.shape.is_empty() {
            return Err(Error::shape(format!(
                "batch_relative_l2: {:?} vs {:?}",
                pv.shape, targets.shape
            )));
        }
        let samples = pv.shape[0];
        let per = numel(&pv.shape[1..]);
        let mut acc = 0.0;
        for s in 0..samples {
            let p = &pv.data[s * per..(s + 1) * per];
            let t = &targets.data[s * per..(s + 1) * per];
            let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if tn == 0.0 {
                return Err(Error::invalid("batch_relative_l2: zero-norm target"));
            }
            let dn = p
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            acc += dn / tn;
        }
        let rg = self.requires(pred.id);
        Ok(self.push(
            Op::BatchRelL2 { pred: pred.id, targets: Arc::new(targets.clone()) },
            Buffer::R(Tensor::scalar(acc / samples as f64)),
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: ActKind) -> Result<Var> {
        let xv = self.value_real(x)?;
        let n = xv.data.len();
        let mut value = Tensor::zeros(&xv.shape);
        if n >= 1 << 13 {
            let block = n.div_ceil(crate::tensor::compute_threads().max(1)).max(1024);
            let src = &xv.data;
            par_chunks_mut_ragged(&mut value.data, block, |start, out| {
                let chunk = &src[start..start + out.len()];
                for (o, &z) in out.iter_mut().zip(chunk) {
                    *o = kind.apply(z);
                }
            });
        } else {
            for (o, &z) in value.data.iter_mut().zip(&xv.data) {
                *o = kind.apply(z);
            }
        }
        let rg = self.requires(x.id);
        Ok(self.push(Op::Act { x: x.id, kind }, Buffer::R(value), rg))
    }

    /// Combine two real arrays into a complex one (re + i im).
    pub fn complex_join(&mut self, re: Var, im: Var) -> Result<Var> {
        let rv = self.value_real(re)?;
        let iv = self.value_real(im)?;
        if rv.shape != iv.shape {
            return Err(Error::shape(format!(
                "complex_join: {:?} vs {:?}",
                rv.shape, iv.shape
            )));
        }
        let value = CTensor {
            shape: rv.shape.clone(),
            data: rv
                .data
                .iter()
                .zip(&iv.data)
                .map(|(&r, &i)| Complex64::new(r, i))
                .collect(),
        };
        let rg = self.requires(re.id) || self.requires(im.id);
        Ok(self.push(Op::ComplexJoin { re: re.id, im: im.id }, Buffer::C(value), rg))
    }

    /// Fused complex join and transpose: re and im are `[points, k]`
    /// real arrays; the output is `[k, points]` complex (symbol-network
    /// outputs reshaped to channel-pair-major without intermediate
    /// copies).
    pub fn complex_join_transposed(&mut self, re: Var, im: Var) -> Result<Var> {
        let rv = self.value_real(re)?;
        let iv = self.value_real(im)?;
        if rv.shape != iv.shape || rv.shape.len() != 2 {
            return Err(Error::shape(format!(
                "complex_join_transposed: {:?} vs {:?}",
                rv.shape, iv.shape
            )));
        }
        let (m, k) = (rv.shape[0], rv.shape[1]);
        let mut out = CTensor::zeros(&[k, m]);
        const B: usize = 64;
        for p0 in (0..m).step_by(B) {
            let p1 = (p0 + B).min(m);
            for pair in 0..k {
                let col = &mut out.data[pair * m..(pair + 1) * m];
                for p in p0..p1 {
                    col[p] = Complex64::new(rv.data[p * k + pair], iv.data[p * k + pair]);
                }
            }
        }
        let rg = self.requires(re.id) || self.requires(im.id);
        Ok(self.push(Op::ComplexJoinT { re: re.id, im: im.id }, Buffer::C(out), rg))
    }

    /// Elementwise |z|^2 of a complex array, producing a real array.
    pub fn complex_abs_sq(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_complex(x)?;
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|z| z.norm_sqr()).collect(),
        };
        let rg = self.requires(x.id);
        Ok(self.push(Op::CAbsSq(x.id), Buffer::R(value), rg))
    }

    /// Sum a real array over its leading axis.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_real(x)?;
        if xv.shape.len() < 2 {
            return Err(Error::shape("sum_axis0 needs rank >= 2"));
        }
        let lead = xv.shape[0];
        let rest = numel(&xv.shape[1..]);
        let mut out = Tensor::zeros(&xv.shape[1..]);
        for l in 0..lead {
            let row = &xv.data[l * rest..(l + 1) * rest];
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let rg = self.requires(x.id);
        Ok(self.push(Op::SumAxis0(x.id), Buffer::R(out), rg))
    }

    /// Sum of all entries of a real array (scalar output).
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_real(x)?;
        let s: f64 = xv.data.iter().sum();
        let rg = self.requires(x.id);
        Ok(self.push(Op::SumAll(x.id), Buffer::R(Tensor::scalar(s)), rg))
    }

    /// Transpose a rank-2 array (real or complex).
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let value = match &self.nodes[x.id].value {
            Buffer::R(t) => {
                if t.shape.len() != 2 {
                    return Err(Error::shape("transpose2 needs rank 2"));
                }
                let (a, b) = (t.shape[0], t.shape[1]);
                let mut out = Tensor::zeros(&[b, a]);
                for i in 0..a {
                    for j in 0..b {
                        out.data[j * a + i] = t.data[i * b + j];
                    }
                }
                Buffer::R(out)
            }
            Buffer::C(t) => {
                if t.shape.len() != 2 {
                    return Err(Error::shape("transpose2 needs rank 2"));
                }
                let (a, b) = (t.shape[0], t.shape[1]);
                let mut out = CTensor::zeros(&[b, a]);
                for i in 0..a {
                    for j in 0..b {
                        out.data[j * a + i] = t.data[i * b + j];
                    }
                }
                Buffer::C(out)
            }
        };
        let rg = self.requires(x.id);
        Ok(self.push(Op::Transpose2(x.id), value, rg))
    }

    /// Reinterpret the shape (row-major data unchanged).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = match &self.nodes[x.id].value {
            Buffer::R(t) => Buffer::R(t.clone().reshaped(shape)?),
            Buffer::C(t) => Buffer::C(t.clone().reshaped(shape)?),
        };
        let rg = self.requires(x.id);
        Ok(self.push(Op::Reshape(x.id), value, rg))
    }

    /// out[j, q] = sum_i sym[i, j, q] spec[i, q] over the channel axis,
    /// at every spectral position q.
    pub fn channel_contract(&mut self, sym: Var, spec: Var) -> Result<Var> {
        let sv = self.value_complex(sym)?;
        let fv = self.value_complex(spec)?;
        if sv.shape.len() < 3 || fv.shape.len() < 2 {
            return Err(Error::shape(
                "channel_contract expects sym[i,j,q...], spec[i,q...]",
            ));
        }
        let (ci, co) = (sv.shape[0], sv.shape[1]);
        let m = numel(&sv.shape[2..]);
        if fv.shape[0] != ci || numel(&fv.shape[1..]) != m {
            return Err(Error::shape(format!(
                "channel_contract: sym{:?} vs spec{:?}",
                sv.shape, fv.shape
            )));
        }
        let mut out_shape = vec![co];
        out_shape.extend_from_slice(&sv.shape[2..]);
        let mut out = CTensor::zeros(&out_shape);
        let (sd, fd) = (&sv.data, &fv.data);
        let par = ci * co * m >= 1 << 15;
        par_chunks_mut(par, &mut out.data, m, |j, o_row| {
            for i in 0..ci {
                let f_row = &fd[i * m..(i + 1) * m];
                let s_row = &sd[(i * co + j) * m..(i * co + j + 1) * m];
                for ((o, s), f) in o_row.iter_mut().zip(s_row).zip(f_row) {
                    *o += *s * *f;
                }
            }
        });
        let rg = self.requires(sym.id) || self.requires(spec.id);
        Ok(self.push(Op::ChannelContract { sym: sym.id, spec: spec.id }, Buffer::C(out), rg))
    }

    /// Differentiable forward FFT of the trailing `sdims` axes of a real
    /// array (1/N normalization, half-spectrum last axis).
    pub fn fft(&mut self, x: Var, sdims: usize) -> Result<Var> {
        let xv = self.value_real(x)?;
        let rank = xv.shape.len();
        if sdims == 0 || sdims >= rank {
            return Err(Error::shape("fft: bad spatial dimension count"));
        }
        let res: Vec<usize> = xv.shape[rank - sdims..].to_vec();
        for &n in &res {
            if !n.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "FFT requires power-of-two axis lengths, got {n}"
                )));
            }
        }
        let grid = numel(&res);
        let half = res[sdims - 1] / 2 + 1;
        let rows = grid / res[sdims - 1];
        let spec_len = rows * half;
        let scale = 1.0 / grid as f64;
        let mut out_shape = xv.shape[..rank - sdims].to_vec();
        out_shape.extend_from_slice(&res[..sdims - 1]);
        out_shape.push(half);
        let mut out = CTensor::zeros(&out_shape);
        let src_all = &xv.data;
        let batch = numel(&xv.shape[..rank - sdims]);
        let par = batch >= 2 && batch * grid >= 1 << 14;
        par_chunks_mut(par, &mut out.data, spec_len, |bi, dst| {
            let mut cube = vec![Complex64::new(0.0, 0.0); grid];
            let src = &src_all[bi * grid..(bi + 1) * grid];
            for (c, v) in cube.iter_mut().zip(src) {
                *c = Complex64::new(*v, 0.0);
            }
            fft_full(&mut cube, &res, false).expect("power-of-two lengths checked above");
            for r in 0..rows {
                let src_row = &cube[r * res[sdims - 1]..r * res[sdims - 1] + half];
                let dst_row = &mut dst[r * half..(r + 1) * half];
                for (o, v) in dst_row.iter_mut().zip(src_row) {
                    *o = v * scale;
                }
            }
        });
        let rg = self.requires(x.id);
        Ok(self.push(Op::Rfft { x: x.id, sdims }, Buffer::C(out), rg))
    }

    /// Differentiable inverse FFT: trailing axes of the complex input are
    /// a half-spectrum of spatial resolution `res`; output is real.
    pub fn ifft(&mut self, y: Var, res: &[usize]) -> Result<Var> {
        let yv = self.value_complex(y)?;
        let sdims = res.len();
        let rank = yv.shape.len();
        if sdims == 0 || sdims >= rank {
            return Err(Error::shape("ifft: bad spatial dimension count"));
        }
        let half = res[sdims - 1] / 2 + 1;
        let mut want = res[..sdims - 1].to_vec();
        want.push(half);
        if yv.shape[rank - sdims..] != want[..] {
            return Err(Error::shape(format!(
                "ifft: spectrum shape {:?} inconsistent with resolution {:?}",
                &yv.shape[rank - sdims..],
                res
            )));
        }
        for &n in res {
            if !n.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "FFT requires power-of-two axis lengths, got {n}"
                )));
            }
        }
        let grid = numel(res);
        let spec_len = numel(&want);
        let mut out_shape = yv.shape[..rank - sdims].to_vec();
        out_shape.extend_from_slice(res);
        let mut out = Tensor::zeros(&out_shape);
        let src_all = &yv.data;
        let batch = numel(&yv.shape[..rank - sdims]);
        let par = batch >= 2 && batch * grid >= 1 << 14;
        par_chunks_mut(par, &mut out.data, grid, |bi, dst| {
            let mut cube = vec![Complex64::new(0.0, 0.0); grid];
            let src = &src_all[bi * spec_len..(bi + 1) * spec_len];
            hermitian_expand(src, res, &mut cube);
            fft_full(&mut cube, res, true).expect("power-of-two lengths checked above");
            for (o, v) in dst.iter_mut().zip(&cube) {
                *o = v.re;
            }
        });
        let rg = self.requires(y.id);
        Ok(self.push(Op::Irfft { y: y.id, res: res.to_vec() }, Buffer::R(out), rg))
    }

    /// Gather positions `idx` (flat indices into the trailing spectral
    /// block spanning the last `spectral_rank` axes) from every leading
    /// slice.
    pub fn gather_modes(
        &mut self,
        x: Var,
        idx: Arc<Vec<usize>>,
        spectral_rank: usize,
    ) -> Result<Var> {
        let xv = self.value_complex(x)?;
        let rank = xv.shape.len();
        if spectral_rank == 0 || spectral_rank >= rank {
            return Err(Error::shape("gather_modes: bad spectral rank"));
        }
        let src_len = numel(&xv.shape[rank - spectral_rank..]);
        let lead_dims = xv.shape[..rank - spectral_rank].to_vec();
        let lead = numel(&lead_dims);
        let k = idx.len();
        let mut out_shape = lead_dims;
        out_shape.push(k);
        let mut out = CTensor::zeros(&out_shape);
        for b in 0..lead {
            let src = &xv.data[b * src_len..(b + 1) * src_len];
            let dst = &mut out.data[b * k..(b + 1) * k];
            for (o, &i) in dst.iter_mut().zip(idx.iter()) {
                *o = src[i];
            }
        }
        let rg = self.requires(x.id);
        Ok(self.push(Op::GatherLast { x: x.id, idx, src_len }, Buffer::C(out), rg))
    }

    /// Scatter the trailing axis back into a spectral block of shape
    /// `spectral_shape`, zero elsewhere.
    pub fn scatter_modes(
        &mut self,
        x: Var,
        idx: Arc<Vec<usize>>,
        spectral_shape: &[usize],
    ) -> Result<Var> {
        let xv = self.value_complex(x)?;
        let k = idx.len();
        let rank = xv.shape.len();
        if xv.shape[rank - 1] != k {
            return Err(Error::shape("scatter_modes: trailing axis != index count"));
        }
        let full = numel(spectral_shape);
        let lead = numel(&xv.shape[..rank - 1]);
        let mut out_shape = xv.shape[..rank - 1].to_vec();
        out_shape.extend_from_slice(spectral_shape);
        let mut out = CTensor::zeros(&out_shape);
        for b in 0..lead {
            let src = &xv.data[b * k..(b + 1) * k];
            let dst = &mut out.data[b * full..(b + 1) * full];
            for (&i, v) in idx.iter().zip(src) {
                dst[i] = *v;
            }
        }
        let rg = self.requires(x.id);
        Ok(self.push(Op::ScatterLast { x: x.id, idx }, Buffer::C(out), rg))
    }

    /// Per-sample relative L2 error ||pred - target|| / ||target||.
    pub fn relative_l2(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value_real(pred)?;
        if pv.shape != target.shape {
            return Err(Error::shape(format!(
                "relative_l2: {:?} vs {:?}",
                pv.shape, target.shape
            )));
        }
        let tnorm = target.norm2();
        if tnorm == 0.0 {
            return Err(Error::invalid("relative_l2: zero-norm target"));
        }
        let diff: f64 = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            .sqrt();
        let rg = self.requires(pred.id);
        Ok(self.push(
            Op::RelL2 { pred: pred.id, target: Arc::new(target.clone()) },
            Buffer::R(Tensor::scalar(diff / tnorm)),
            rg,
        ))
    }

    /// Arithmetic mean of scalar nodes (batch loss).
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of empty set"));
        }
        let mut acc = 0.0;
        let mut rg = false;
        for &v in xs {
            acc += self.scalar(v)?;
            rg |= self.requires(v.id);
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        Ok(self.push(
            Op::MeanScalars(ids),
            Buffer::R(Tensor::scalar(acc / xs.len() as f64)),
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients of parameters are
    /// accumulated into `store`; gradients of `input` leaves stay on the
    /// tape (see `grad_of`). The tape is consumed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::invalid(
                "tape already consumed by backward; run a new forward pass",
            ));
        }
        self.consumed = true;
        match &self.nodes[loss.id].value {
            Buffer::R(t) if t.len() == 1 => {}
            _ => return Err(Error::invalid("backward requires a real scalar loss")),
        }
        self.grads[loss.id] = Some(Buffer::R(Tensor::scalar(1.0)));
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                self.grads[id] = None;
                continue;
            }
            let g = match &self.nodes[id].op {
                // Leaf gradients stay in place for `grad_of`.
                Op::Leaf => continue,
                Op::LeafParam(pidx) => {
                    if let Some(Buffer::R(g)) = &self.grads[id] {
                        let dst = &mut store.params[*pidx].grad;
                        for (d, s) in dst.data.iter_mut().zip(&g.data) {
                            *d += *s;
                        }
                    }
                    continue;
                }
                _ => match self.grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(id, g)?;
        }
        Ok(())
    }

    /// Gradient of a leaf input after backward.
    pub fn grad_of(&self, v: Var) -> Option<&Buffer> {
        self.grads[v.id].as_ref()
    }

    /// Move a parent's gradient slot out for in-place accumulation
    /// (zero-allocated on first touch); `put_grad` returns it. Returns
    /// `None` when the parent does not require gradients.
    fn take_grad(&mut self, id: usize) -> Option<Buffer> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        Some(
            self.grads[id]
                .take()
                .unwrap_or_else(|| self.nodes[id].value.zeros_like()),
        )
    }

    fn put_grad(&mut self, id: usize, g: Buffer) {
        self.grads[id] = Some(g);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&mut self, id: usize, g: Buffer) -> Result<()> {
        // Every arm accumulates the upstream gradient `g` directly into
        // the parents' slots; nothing allocates per-node scratch beyond
        // the slots themselves.
        match &self.nodes[id].op {
            Op::Leaf | Op::LeafParam(_) => unreachable!(),
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                for parent in [a, b] {
                    if let Some(mut slot) = self.take_grad(parent) {
                        slot.add_assign(&g);
                        self.put_grad(parent, slot);
                    }
                }
            }
            Op::Scale(a, f) => {
                let (a, f) = (*a, *f);
                if let Some(mut slot) = self.take_grad(a) {
                    match (&mut slot, &g) {
                        (Buffer::R(s), Buffer::R(gt)) => {
                            for (o, v) in s.data.iter_mut().zip(&gt.data) {
                                *o += v * f;
                            }
                        }
                        (Buffer::C(s), Buffer::C(gt)) => {
                            for (o, v) in s.data.iter_mut().zip(&gt.data) {
                                *o += v * f;
                            }
                        }
                        _ => unreachable!(),
                    }
                    self.put_grad(a, slot);
                }
            }
            Op::MulR(a, b) => {
                let (a, b) = (*a, *b);
                let gr: &[f64] = &as_real(&g).data;
                if let Some(mut slot) = self.take_grad(a) {
                    let bv = real_value(&self.nodes[b].value);
                    let s = real_mut(&mut slot);
                    for ((o, gv), v) in s.data.iter_mut().zip(gr).zip(&bv.data) {
                        *o += gv * v;
                    }
                    self.put_grad(a, slot);
                }
                if let Some(mut slot) = self.take_grad(b) {
                    let av = real_value(&self.nodes[a].value);
                    let s = real_mut(&mut slot);
                    for ((o, gv), v) in s.data.iter_mut().zip(gr).zip(&av.data) {
                        *o += gv * v;
                    }
                    self.put_grad(b, slot);
                }
            }
            Op::MulBcastC(a, b) => {
                let (a, b) = (*a, *b);
                let gc = as_complex(&g);
                let (ash, bsh) = (
                    self.nodes[a].value.shape().to_vec(),
                    self.nodes[b].value.shape().to_vec(),
                );
                let os = strides(&gc.shape);
                let (sa, sb) =
                    (bcast_strides(&ash, &gc.shape), bcast_strides(&bsh, &gc.shape));
                let gdata = gc.data.clone();
                let gshape = gc.shape.clone();
                if let Some(mut slot) = self.take_grad(a) {
                    let bv = complex_value(&self.nodes[b].value);
                    let s = complex_mut(&mut slot);
                    for (flat, gv) in gdata.iter().enumerate() {
                        let (ia, ib) = bcast_indices(flat, &gshape, &os, &sa, &sb);
                        s.data[ia] += gv * bv.data[ib].conj();
                    }
                    self.put_grad(a, slot);
                }
                if let Some(mut slot) = self.take_grad(b) {
                    let av = complex_value(&self.nodes[a].value);
                    let s = complex_mut(&mut slot);
                    for (flat, gv) in gdata.iter().enumerate() {
                        let (ia, ib) = bcast_indices(flat, &gshape, &os, &sa, &sb);
                        s.data[ib] += gv * av.data[ia].conj();
                    }
                    self.put_grad(b, slot);
                }
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gr: &[f64] = &as_real(&g).data;
                let (batch, din) = {
                    let xsh = self.nodes[x].value.shape();
                    (xsh[0], xsh[1])
                };
                let dout = self.nodes[w].value.shape()[0];
                let mut wslot = self.take_grad(w);
                let mut bslot = self.take_grad(b);
                let mut xslot = self.take_grad(x);
                {
                    let xv = real_value(&self.nodes[x].value);
                    let wv = real_value(&self.nodes[w].value);
                    let mut scratch_w;
                    let mut scratch_b;
                    let dw = match &mut wslot {
                        Some(sl) => &mut real_mut(sl).data,
                        None => {
                            scratch_w = vec![0.0; dout * din];
                            &mut scratch_w
                        }
                    };
                    let db = match &mut bslot {
                        Some(sl) => &mut real_mut(sl).data,
                        None => {
                            scratch_b = vec![0.0; dout];
                            &mut scratch_b
                        }
                    };
                    let dx = xslot.as_mut().map(|sl| real_mut(sl).data.as_mut_slice());
                    affine_bwd(gr, &xv.data, &wv.data, batch, din, dout, dw, db, dx);
                }
                if let Some(sl) = wslot {
                    self.put_grad(w, sl);
                }
                if let Some(sl) = bslot {
                    self.put_grad(b, sl);
                }
                if let Some(sl) = xslot {
                    self.put_grad(x, sl);
                }
            }
            Op::ChannelAffine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gr: &[f64] = &as_real(&g).data;
                let (cin, grid) = {
                    let xsh = self.nodes[x].value.shape();
                    (xsh[0], numel(&xsh[1..]))
                };
                let cout = self.nodes[w].value.shape()[0];
                let mut wslot = self.take_grad(w);
                let mut bslot = self.take_grad(b);
                let mut xslot = self.take_grad(x);
                {
                    let xv = real_value(&self.nodes[x].value);
                    let wv = real_value(&self.nodes[w].value);
                    let mut scratch_w;
                    let mut scratch_b;
                    let dw = match &mut wslot {
                        Some(sl) => &mut real_mut(sl).data,
                        None => {
                            scratch_w = vec![0.0; cout * cin];
                            &mut scratch_w
                        }
                    };
                    let db = match &mut bslot {
                        Some(sl) => &mut real_mut(sl).data,
                        None => {
                            scratch_b = vec![0.0; cout];
                            &mut scratch_b
                        }
                    };
                    let dx = xslot.as_mut().map(|sl| real_mut(sl).data.as_mut_slice());
                    channel_affine_bwd(gr, &xv.data, &wv.data, cin, cout, grid, dw, db, dx);
                }
                if let Some(sl) = wslot {
                    self.put_grad(w, sl);
                }
                if let Some(sl) = bslot {
                    self.put_grad(b, sl);
                }
                if let Some(sl) = xslot {
                    self.put_grad(x, sl);
                }
            }
            Op::Act { x, kind } => {
                let (x, kind) = (*x, *kind);
                let gr: &[f64] = &as_real(&g).data;
                let out_vals = real_value(&self.nodes[id].value).data.clone();
                if let Some(mut slot) = self.take_grad(x) {
                    let xv = &real_value(&self.nodes[x].value).data;
                    let s = real_mut(&mut slot);
                    let n = s.data.len();
                    if n >= 1 << 13 {
                        let block =
                            n.div_ceil(crate::tensor::compute_threads().max(1)).max(1024);
                        par_chunks_mut_ragged(&mut s.data, block, |start, outs| {
                            for (k, o) in outs.iter_mut().enumerate() {
                                let i = start + k;
                                *o += gr[i] * kind.derivative_from(xv[i], out_vals[i]);
                            }
                        });
                    } else {
                        for i in 0..n {
                            s.data[i] += gr[i] * kind.derivative_from(xv[i], out_vals[i]);
                        }
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::ComplexJoin { re, im } => {
                let (re, im) = (*re, *im);
                let gc: &[Complex64] = &as_complex(&g).data;
                if let Some(mut slot) = self.take_grad(re) {
                    let s = real_mut(&mut slot);
                    for (o, z) in s.data.iter_mut().zip(gc) {
                        *o += z.re;
                    }
                    self.put_grad(re, slot);
                }
                if let Some(mut slot) = self.take_grad(im) {
                    let s = real_mut(&mut slot);
                    for (o, z) in s.data.iter_mut().zip(gc) {
                        *o += z.im;
                    }
                    self.put_grad(im, slot);
                }
            }
            Op::ComplexJoinT { re, im } => {
                let (re, im) = (*re, *im);
                let gc = as_complex(&g);
                let (k, m) = (gc.shape[0], gc.shape[1]);
                if let Some(mut slot) = self.take_grad(re) {
                    let s = real_mut(&mut slot);
                    for pair in 0..k {
                        let col = &gc.data[pair * m..(pair + 1) * m];
                        for (p, z) in col.iter().enumerate() {
                            s.data[p * k + pair] += z.re;
                        }
                    }
                    self.put_grad(re, slot);
                }
                if let Some(mut slot) = self.take_grad(im) {
                    let s = real_mut(&mut slot);
                    for pair in 0..k {
                        let col = &gc.data[pair * m..(pair + 1) * m];
                        for (p, z) in col.iter().enumerate() {
                            s.data[p * k + pair] += z.im;
                        }
                    }
                    self.put_grad(im, slot);
                }
            }
            Op::CAbsSq(x) => {
                let x = *x;
                let gr: &[f64] = &as_real(&g).data;
                if let Some(mut slot) = self.take_grad(x) {
                    let xv = complex_value(&self.nodes[x].value);
                    let s = complex_mut(&mut slot);
                    for ((o, gv), z) in s.data.iter_mut().zip(gr).zip(&xv.data) {
                        *o += z * (2.0 * gv);
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::SumAxis0(x) => {
                let x = *x;
                let gr: &[f64] = &as_real(&g).data;
                if let Some(mut slot) = self.take_grad(x) {
                    let s = real_mut(&mut slot);
                    let rest = gr.len();
                    for chunk in s.data.chunks_exact_mut(rest) {
                        for (o, gv) in chunk.iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = as_real(&g).data[0];
                if let Some(mut slot) = self.take_grad(x) {
                    let s = real_mut(&mut slot);
                    for o in s.data.iter_mut() {
                        *o += gv;
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::Transpose2(x) => {
                let x = *x;
                if let Some(mut slot) = self.take_grad(x) {
                    match (&mut slot, &g) {
                        (Buffer::R(s), Buffer::R(gt)) => {
                            let (a, b) = (gt.shape[0], gt.shape[1]);
                            for i in 0..a {
                                for j in 0..b {
                                    s.data[j * a + i] += gt.data[i * b + j];
                                }
                            }
                        }
                        (Buffer::C(s), Buffer::C(gt)) => {
                            let (a, b) = (gt.shape[0], gt.shape[1]);
                            for i in 0..a {
                                for j in 0..b {
                                    s.data[j * a + i] += gt.data[i * b + j];
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if let Some(mut slot) = self.take_grad(x) {
                    match (&mut slot, &g) {
                        (Buffer::R(s), Buffer::R(gt)) => {
                            for (o, v) in s.data.iter_mut().zip(&gt.data) {
                                *o += v;
                            }
                        }
                        (Buffer::C(s), Buffer::C(gt)) => {
                            for (o, v) in s.data.iter_mut().zip(&gt.data) {
                                *o += v;
                            }
                        }
                        _ => unreachable!(),
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::ChannelContract { sym, spec } => {
                let (sym, spec) = (*sym, *spec);
                let gc: &[Complex64] = &as_complex(&g).data;
                let (ci, co, m) = {
                    let ssh = self.nodes[sym].value.shape();
                    (ssh[0], ssh[1], numel(&ssh[2..]))
                };
                let _ = ci;
                let par = co * m * 4 >= 1 << 15;
                if let Some(mut slot) = self.take_grad(sym) {
                    let fv = &complex_value(&self.nodes[spec].value).data;
                    let ds = complex_mut(&mut slot);
                    par_chunks_mut(par, &mut ds.data, m, |row, d_row| {
                        let (i, j) = (row / co, row % co);
                        let f_row = &fv[i * m..(i + 1) * m];
                        let g_row = &gc[j * m..(j + 1) * m];
                        for ((d, gq), fq) in d_row.iter_mut().zip(g_row).zip(f_row) {
                            *d += *gq * fq.conj();
                        }
                    });
                    self.put_grad(sym, slot);
                }
                if let Some(mut slot) = self.take_grad(spec) {
                    let sv = &complex_value(&self.nodes[sym].value).data;
                    let df = complex_mut(&mut slot);
                    par_chunks_mut(par, &mut df.data, m, |i, d_row| {
                        for j in 0..co {
                            let g_row = &gc[j * m..(j + 1) * m];
                            let s_row = &sv[(i * co + j) * m..(i * co + j + 1) * m];
                            for ((d, gq), sq) in d_row.iter_mut().zip(g_row).zip(s_row) {
                                *d += *gq * sq.conj();
                            }
                        }
                    });
                    self.put_grad(spec, slot);
                }
            }
            Op::Rfft { x, sdims } => {
                // Adjoint of the 1/N forward transform restricted to
                // stored modes: zero-pad the upper half (no Hermitian
                // mirror), inverse transform, real part, times 1/N.
                let (x, sdims) = (*x, *sdims);
                let gc: &[Complex64] = &as_complex(&g).data;
                let xsh = self.nodes[x].value.shape().to_vec();
                let rank = xsh.len();
                let res: Vec<usize> = xsh[rank - sdims..].to_vec();
                let grid = numel(&res);
                let half = res[sdims - 1] / 2 + 1;
                let rows = grid / res[sdims - 1];
                let spec_len = rows * half;
                let scale = 1.0 / grid as f64;
                if let Some(mut slot) = self.take_grad(x) {
                    let dx = real_mut(&mut slot);
                    let par = dx.data.len() >= 1 << 14 && dx.data.len() > grid;
                    par_chunks_mut(par, &mut dx.data, grid, |bi, dst| {
                        let mut cube = vec![Complex64::new(0.0, 0.0); grid];
                        let src = &gc[bi * spec_len..(bi + 1) * spec_len];
                        for r in 0..rows {
                            let dst_row =
                                &mut cube[r * res[sdims - 1]..r * res[sdims - 1] + half];
                            dst_row.copy_from_slice(&src[r * half..(r + 1) * half]);
                        }
                        fft_full(&mut cube, &res, true).expect("checked lengths");
                        for (o, v) in dst.iter_mut().zip(&cube) {
                            *o += v.re * scale;
                        }
                    });
                    self.put_grad(x, slot);
                }
            }
            Op::Irfft { y, res } => {
                // Adjoint of Hermitian completion followed by the
                // unnormalized inverse transform: forward-transform the
                // output gradient and weight interior last-axis modes by 2.
                let (y, res) = (*y, res.clone());
                let gr: &[f64] = &as_real(&g).data;
                let sdims = res.len();
                let grid = numel(&res);
                let nd = res[sdims - 1];
                let half = nd / 2 + 1;
                let rows = grid / nd;
                let spec_len = rows * half;
                if let Some(mut slot) = self.take_grad(y) {
                    let dy = complex_mut(&mut slot);
                    let par = gr.len() >= 1 << 14 && dy.data.len() > spec_len;
                    par_chunks_mut(par, &mut dy.data, spec_len, |bi, dst| {
                        let mut cube = vec![Complex64::new(0.0, 0.0); grid];
                        let src = &gr[bi * grid..(bi + 1) * grid];
                        for (c, v) in cube.iter_mut().zip(src) {
                            *c = Complex64::new(*v, 0.0);
                        }
                        fft_full(&mut cube, &res, false).expect("checked lengths");
                        for r in 0..rows {
                            for k in 0..half {
                                let w = if k == 0 || (nd % 2 == 0 && k == nd / 2) {
                                    1.0
                                } else {
                                    2.0
                                };
                                dst[r * half + k] += cube[r * nd + k] * w;
                            }
                        }
                    });
                    self.put_grad(y, slot);
                }
            }
            Op::GatherLast { x, idx, src_len } => {
                let (x, idx, src_len) = (*x, idx.clone(), *src_len);
                let gc: &[Complex64] = &as_complex(&g).data;
                let xsh = self.nodes[x].value.shape().to_vec();
                let lead = numel(&xsh) / src_len;
                let k = idx.len();
                if let Some(mut slot) = self.take_grad(x) {
                    let dx = complex_mut(&mut slot);
                    for b in 0..lead {
                        let src = &gc[b * k..(b + 1) * k];
                        let dst = &mut dx.data[b * src_len..(b + 1) * src_len];
                        for (&i, v) in idx.iter().zip(src) {
                            dst[i] += *v;
                        }
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::ScatterLast { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let gc: &[Complex64] = &as_complex(&g).data;
                let xsh = self.nodes[x].value.shape().to_vec();
                let k = idx.len();
                let lead = numel(&xsh) / k;
                let full = gc.len() / lead;
                if let Some(mut slot) = self.take_grad(x) {
                    let dx = complex_mut(&mut slot);
                    for b in 0..lead {
                        let src = &gc[b * full..(b + 1) * full];
                        let dst = &mut dx.data[b * k..(b + 1) * k];
                        for (d, &i) in dst.iter_mut().zip(idx.iter()) {
                            *d += src[i];
                        }
                    }
                    self.put_grad(x, slot);
                }
            }
            Op::RelL2 { pred, target } => {
                let (pred, target) = (*pred, target.clone());
                let gv = as_real(&g).data[0];
                if let Some(mut slot) = self.take_grad(pred) {
                    let pv = real_value(&self.nodes[pred].value);
                    let tnorm = target.norm2();
                    let mut dnorm = 0.0f64;
                    for (p, t) in pv.data.iter().zip(&target.data) {
                        dnorm += (p - t) * (p - t);
                    }
                    let dnorm = dnorm.sqrt();
                    if dnorm > 1e-300 {
                        let c = gv / (dnorm * tnorm);
                        let s = real_mut(&mut slot);
                        for ((o, p), t) in s.data.iter_mut().zip(&pv.data).zip(&target.data) {
                            *o += c * (p - t);
                        }
                    }
                    self.put_grad(pred, slot);
                }
            }
            Op::ChannelAffineB { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gr: &[f64] = &as_real(&g).data;
                let (samples, cin, grid) = {
                    let xsh = self.nodes[x].value.shape();
                    (xsh[0], xsh[1], numel(&xsh[2..]))
                };
                let cout = self.nodes[w].value.shape()[0];
                let mut wslot = self.take_grad(w);
                let mut bslot = self.take_grad(b);
                let mut xslot = self.take_grad(x);
                {
                    let xv = &real_value(&self.nodes[x].value).data;
                    let wv = &real_value(&self.nodes[w].value).data;
                    // dW, db: accumulate per output row across samples
                    // (deterministic: each row owned by one worker).
                    if let Some(sl) = &mut wslot {
                        let dw = &mut real_mut(sl).data;
                        let par = samples * cin * cout * grid >= 1 << 18;
                        par_chunks_mut(par, dw, cin, |o, dwr| {
                            for s in 0..samples {
                                let gro = &gr[(s * cout + o) * grid..(s * cout + o + 1) * grid];
                                for (i, dwv) in dwr.iter_mut().enumerate() {
                                    let xr = &xv[(s * cin + i) * grid..(s * cin + i + 1) * grid];
                                    let mut acc = 0.0;
                                    for (gq, xq) in gro.iter().zip(xr) {
                                        acc += gq * xq;
                                    }
                                    *dwv += acc;
                                }
                            }
                        });
                    }
                    if let Some(sl) = &mut bslot {
                        let db = &mut real_mut(sl).data;
                        for (o, dbo) in db.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for s in 0..samples {
                                acc += gr[(s * cout + o) * grid..(s * cout + o + 1) * grid]
                                    .iter()
                                    .sum::<f64>();
                            }
                            *dbo += acc;
                        }
                    }
                    if let Some(sl) = &mut xslot {
                        let dx = &mut real_mut(sl).data;
                        let par = samples * cin * cout * grid >= 1 << 18;
                        par_chunks_mut(par, dx, cin * grid, |s, dxb| {
                            let gb = &gr[s * cout * grid..(s + 1) * cout * grid];
                            for i in 0..cin {
                                let dxr = &mut dxb[i * grid..(i + 1) * grid];
                                for o in 0..cout {
                                    let wq = wv[o * cin + i];
                                    if wq == 0.0 {
                                        continue;
                                    }
                                    let gro = &gb[o * grid..(o + 1) * grid];
                                    for (d, gq) in dxr.iter_mut().zip(gro) {
                                        *d += wq * gq;
                                    }
                                }
                            }
                        });
                    }
                }
                if let Some(sl) = wslot {
                    self.put_grad(w, sl);
                }
                if let Some(sl) = bslot {
                    self.put_grad(b, sl);
                }
                if let Some(sl) = xslot {
                    self.put_grad(x, sl);
                }
            }
            Op::ChannelContractB { sym, spec } => {
                let (sym, spec) = (*sym, *spec);
                let gc: &[Complex64] = &as_complex(&g).data;
                let (ci, co, m) = {
                    let ssh = self.nodes[sym].value.shape();
                    (ssh[0], ssh[1], numel(&ssh[2..]))
                };
                let samples = self.nodes[spec].value.shape()[0];
                let par = samples * ci * co * m >= 1 << 16;
                if let Some(mut slot) = self.take_grad(sym) {
                    let fv = &complex_value(&self.nodes[spec].value).data;
                    let ds = complex_mut(&mut slot);
                    // ds[i, j, :] += sum_s g[s, j, :] conj(spec[s, i, :]),
                    // parallel over i blocks (each worker owns [co, m] rows).
                    par_chunks_mut(par, &mut ds.data, co * m, |i, dsb| {
                        for s in 0..samples {
                            let f_row = &fv[(s * ci + i) * m..(s * ci + i + 1) * m];
                            for j in 0..co {
                                let g_row = &gc[(s * co + j) * m..(s * co + j + 1) * m];
                                let d_row = &mut dsb[j * m..(j + 1) * m];
                                for ((d, gq), fq) in d_row.iter_mut().zip(g_row).zip(f_row) {
                                    *d += *gq * fq.conj();
                                }
                            }
                        }
                    });
                    self.put_grad(sym, slot);
                }
                if let Some(mut slot) = self.take_grad(spec) {
                    let sv = &complex_value(&self.nodes[sym].value).data;
                    let df = complex_mut(&mut slot);
                    // df[s, i, :] += sum_j conj(sym[i, j, :]) g[s, j, :],
                    // parallel over samples.
                    par_chunks_mut(par, &mut df.data, ci * m, |s, dfb| {
                        for i in 0..ci {
                            let d_row = &mut dfb[i * m..(i + 1) * m];
                            for j in 0..co {
                                let s_row = &sv[(i * co + j) * m..(i * co + j + 1) * m];
                                let g_row = &gc[(s * co + j) * m..(s * co + j + 1) * m];
                                for ((d, gq), sq) in d_row.iter_mut().zip(g_row).zip(s_row) {
                                    *d += *gq * sq.conj();
                                }
                            }
                        }
                    });
                    self.put_grad(spec, slot);
                }
            }
            Op::BatchRelL2 { pred, targets } => {
                let (pred, targets) = (*pred, targets.clone());
                let gv = as_real(&g).data[0];
                if let Some(mut slot) = self.take_grad(pred) {
                    let pv = real_value(&self.nodes[pred].value);
                    let samples = pv.shape[0];
                    let per = numel(&pv.shape[1..]);
                    let s = real_mut(&mut slot);
                    let share = gv / samples as f64;
                    for si in 0..samples {
                        let p = &pv.data[si * per..(si + 1) * per];
                        let t = &targets.data[si * per..(si + 1) * per];
                        let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dn = p
                            .iter()
                            .zip(t)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        if dn <= 1e-300 {
                            continue;
                        }
                        let c = share / (dn * tn);
                        let d = &mut s.data[si * per..(si + 1) * per];
                        for ((o, pq), tq) in d.iter_mut().zip(p).zip(t) {
                            *o += c * (pq - tq);
                        }
                    }
                    self.put_grad(pred, slot);
                }
            }
            Op::MeanScalars(ids) => {
                let ids = ids.clone();
                let gv = as_real(&g).data[0] / ids.len() as f64;
                for pid in ids {
                    if let Some(mut slot) = self.take_grad(pid) {
                        if let Buffer::R(s) = &mut slot {
                            s.data[0] += gv;
                        }
                        self.put_grad(pid, slot);
                    }
                }
            }
        }
        Ok(())
    }
}


/// Parallel over contiguous blocks whose last block may be shorter; the
/// closure receives the global start offset of its block.
fn par_chunks_mut_ragged<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    block: usize,
    f: F,
) {
    let n = data.len();
    if n == 0 {
        return;
    }
    let threads = crate::tensor::compute_threads().min(n.div_ceil(block)).max(1);
    if threads <= 1 {
        f(0, data);
        return;
    }
    std::thread::scope(|scope| {
        let mut rest = data;
        let mut start = 0usize;
        while !rest.is_empty() {
            let take = block.min(rest.len());
            let (slab, tail) = rest.split_at_mut(take);
            let fref = &f;
            scope.spawn(move || fref(start, slab));
            start += take;
            rest = tail;
        }
    });
}

fn as_real(b: &Buffer) -> &Tensor {
    match b {
        Buffer::R(t) => t,
        Buffer::C(_) => unreachable!("expected real gradient"),
    }
}

fn as_complex(b: &Buffer) -> &CTensor {
    match b {
        Buffer::C(t) => t,
        Buffer::R(_) => unreachable!("expected complex gradient"),
    }
}

fn real_mut(b: &mut Buffer) -> &mut Tensor {
    match b {
        Buffer::R(t) => t,
        Buffer::C(_) => unreachable!(),
    }
}

fn complex_mut(b: &mut Buffer) -> &mut CTensor {
    match b {
        Buffer::C(t) => t,
        Buffer::R(_) => unreachable!(),
    }
}

fn real_value(b: &Buffer) -> &Tensor {
    match b {
        Buffer::R(t) => t,
        Buffer::C(_) => unreachable!(),
    }
}

fn complex_value(b: &Buffer) -> &CTensor {
    match b {
        Buffer::C(t) => t,
        Buffer::R(_) => unreachable!(),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let d = shape.len();
    let mut s = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "broadcast requires equal ranks, got {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

/// Strides for reading a possibly-broadcast operand at output indices
/// (zero stride on broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(own)
        .map(|((&s, &o), st)| if s == o { st } else { 0 })
        .collect()
}

fn bcast_indices(
    flat: usize,
    out_shape: &[usize],
    out_strides: &[usize],
    sa: &[usize],
    sb: &[usize],
) -> (usize, usize) {
    let mut ia = 0usize;
    let mut ib = 0usize;
    for a in 0..out_shape.len() {
        let coord = (flat / out_strides[a]) % out_shape[a];
        ia += coord * sa[a];
        ib += coord * sb[a];
    }
    (ia, ib)
}

// ---- gradient checking --------------------------------------------------

fn rel_discrepancy(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if d < 1e-12 {
        return 0.0;
    }
    d / a.abs().max(n.abs()).max(1e-12)
}

/// Central-difference check of a scalar function of a real input array.
/// Returns the worst per-coordinate relative discrepancy between the
/// backward gradient and central differences.
pub fn grad_check<F>(mut f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss, &mut store)?;
    let analytic = match tape.grad_of(x) {
        Some(Buffer::R(t)) => t.data.clone(),
        _ => vec![0.0; point.len()],
    };
    let mut worst = 0.0f64;
    let mut p = point.clone();
    for ci in 0..p.len() {
        let orig = p.data[ci];
        p.data[ci] = orig + eps;
        let mut tp = Tape::new();
        let xv = tp.input(p.clone());
        let lp = f(&mut tp, xv)?;
        let fp = tp.scalar(lp)?;
        p.data[ci] = orig - eps;
        let mut tm = Tape::new();
        let xv = tm.input(p.clone());
        let lm = f(&mut tm, xv)?;
        let fm = tm.scalar(lm)?;
        p.data[ci] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_discrepancy(analytic[ci], numeric));
    }
    Ok(worst)
}

/// Central-difference check of a scalar function of every parameter in
/// the store (used for whole-model gradient verification).
pub fn grad_check_params<F>(store: &mut ParamStore, mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.params.iter().map(|p| p.grad.data.clone()).collect();
    let mut worst = 0.0f64;
    for pi in 0..store.params.len() {
        for ci in 0..store.params[pi].value.len() {
            let orig = store.params[pi].value.data[ci];
            store.params[pi].value.data[ci] = orig + eps;
            let mut tp = Tape::new();
            let fp = {
                let l = f(&mut tp, store)?;
                tp.scalar(l)?
            };
            store.params[pi].value.data[ci] = orig - eps;
            let mut tm = Tape::new();
            let fm = {
                let l = f(&mut tm, store)?;
                tm.scalar(l)?
            };
            store.params[pi].value.data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_discrepancy(analytic[pi][ci], numeric));
        }
    }
    Ok(worst)
}
