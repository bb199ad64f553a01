//! Minimal dense-array differentiable operations with reverse-mode gradients.
//!
//! Everything is 64-bit: this crate verifies numerics, not throughput. A
//! [`Tape`] records forward ops and replays them in exact reverse order in
//! [`Tape::backward`]; the same ops run through an inference-mode tape when
//! no gradients are needed, so there is a single forward implementation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Contiguous f64 buffer with up to 4 axes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DenseArray { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(DenseArray { shape: shape.to_vec(), data })
    }

    pub fn constant(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        DenseArray { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        DenseArray { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Channel count of a [C, H, W] array.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// (height, width) of the trailing two axes.
    pub fn hw(&self) -> (usize, usize) {
        let n = self.shape.len();
        (self.shape[n - 2], self.shape[n - 1])
    }

    pub fn seeded_gaussian(shape: &[usize], seed: u64, stddev: f64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| stddev * sample_standard_normal(&mut rng)).collect();
        DenseArray { shape: shape.to_vec(), data }
    }
}

/// Box-Muller draw from N(0, 1).
pub fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Spatial padding rule for conv2d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by (k-1)/2 so stride-1 output keeps the input size.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    fn amount(&self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Record,
    Inference,
}

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
    // the addend is not needed for the pullback; gradient passes through
    AddScalar,
}

#[derive(Debug, Clone)]
enum Record {
    Leaf,
    Unary { parent: usize, kind: Unary },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Conv2d { input: usize, kernel: usize, bias: Option<usize>, stride: usize, pad: Padding },
    ConcatCh { parents: Vec<usize> },
    SliceCh { parent: usize, from: usize },
    SoftmaxRows { parent: usize },
    BilinearWarp { field: usize, flow: usize, mask: Vec<bool> },
    Sum { parent: usize },
}

struct Node {
    value: DenseArray,
    record: Record,
}

/// Ordered record of executed differentiable ops.
pub struct Tape {
    mode: Mode,
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

/// Gradients for every recorded input, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { mode: Mode::Record, nodes: Vec::new(), consumed: false, check_finite: true }
    }

    pub fn inference() -> Self {
        Tape { mode: Mode::Inference, nodes: Vec::new(), consumed: false, check_finite: true }
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseArray, record: Record) -> Var {
        if self.check_finite {
            assert!(value.is_finite(), "non-finite value produced by {record:?}");
        }
        let record = match self.mode {
            Mode::Record => record,
            // inference tapes keep values (later ops read them) but no history
            Mode::Inference => match record {
                Record::BilinearWarp { field, flow, mask } => {
                    // mask is part of the op's observable output; keep it
                    Record::BilinearWarp { field, flow, mask }
                }
                _ => Record::Leaf,
            },
        };
        self.nodes.push(Node { value, record });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: DenseArray) -> Var {
        self.push(value, Record::Leaf)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        let out = DenseArray {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.max(0.0)).collect(),
        };
        self.push(out, Record::Unary { parent: x.0, kind: Unary::Relu })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        let out = DenseArray {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect(),
        };
        self.push(out, Record::Unary { parent: x.0, kind: Unary::Sigmoid })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        let out =
            DenseArray { shape: v.shape.clone(), data: v.data.iter().map(|a| a.tanh()).collect() };
        self.push(out, Record::Unary { parent: x.0, kind: Unary::Tanh })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).clone();
        let out =
            DenseArray { shape: v.shape.clone(), data: v.data.iter().map(|a| a * s).collect() };
        self.push(out, Record::Unary { parent: x.0, kind: Unary::Scale(s) })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).clone();
        let out =
            DenseArray { shape: v.shape.clone(), data: v.data.iter().map(|a| a + s).collect() };
        self.push(out, Record::Unary { parent: x.0, kind: Unary::AddScalar })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::ShapeMismatch(format!("add {:?} vs {:?}", va.shape, vb.shape)));
        }
        let out = DenseArray {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(out, Record::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::ShapeMismatch(format!("mul {:?} vs {:?}", va.shape, vb.shape)));
        }
        let out = DenseArray {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(out, Record::Mul { a: a.0, b: b.0 }))
    }

    /// Standard cross-correlation convolution over [C_in, H, W].
    /// Kernel shape [C_out, C_in, kh, kw], odd spatial size.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Record::Conv2d { input: input.0, kernel: kernel.0, bias: bias.map(|b| b.0), stride, pad },
        ))
    }

    /// Concatenate [C, H, W] arrays along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (h, w) = self.value(parts[0]).hw();
        let mut channels = 0;
        for p in parts {
            let v = self.value(*p);
            if v.shape.len() != 3 || v.hw() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {:?} does not match {h}x{w}",
                    v.shape
                )));
            }
            channels += v.channels();
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let out = DenseArray { shape: vec![channels, h, w], data };
        Ok(self.push(out, Record::ConcatCh { parents: parts.iter().map(|p| p.0).collect() }))
    }

    /// Channels `from..to` of a [C, H, W] array.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let v = self.value(x);
        let (h, w) = v.hw();
        if v.shape.len() != 3 || to > v.channels() || from >= to {
            return Err(Error::ShapeMismatch(format!(
                "slice_channels {from}..{to} of {:?}",
                v.shape
            )));
        }
        let data = v.data[from * h * w..to * h * w].to_vec();
        let out = DenseArray { shape: vec![to - from, h, w], data };
        Ok(self.push(out, Record::SliceCh { parent: x.0, from }))
    }

    /// Row-wise max-subtracted softmax of an [N, M] array.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows_forward(self.value(x));
        self.push(out, Record::SoftmaxRows { parent: x.0 })
    }

    /// Backward-warp `field` by `flow`: out[p] = bilinear sample at p + flow[p].
    /// Out-of-bounds samples are zero with a false mask entry.
    pub fn bilinear_warp(&mut self, field: Var, flow: Var) -> Result<(Var, Vec<bool>)> {
        let (out, mask) = bilinear_warp_forward(self.value(field), self.value(flow))?;
        let v = self.push(
            out,
            Record::BilinearWarp { field: field.0, flow: flow.0, mask: mask.clone() },
        );
        Ok((v, mask))
    }

    /// Sum of all entries, as a [1] scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(DenseArray::scalar(s), Record::Sum { parent: x.0 })
    }

    /// Reverse-mode sweep from `loss`, seeded with `loss_grad`.
    /// Consumes the tape: a second call is `TapeConsumed`.
    pub fn backward(&mut self, loss: Var, loss_grad: &DenseArray) -> Result<Gradients> {
        if self.mode == Mode::Inference {
            return Err(Error::TapeNotRecording);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if loss_grad.shape != self.nodes[loss.0].value.shape {
            return Err(Error::ShapeMismatch("loss gradient shape".into()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(loss_grad.clone());

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].record {
                Record::Leaf => {
                    grads[i] = Some(g); // keep for retrieval
                    continue;
                }
                Record::Unary { parent, kind } => {
                    let p = *parent;
                    let mut gp = DenseArray::zeros(&self.nodes[p].value.shape.clone());
                    match kind {
                        Unary::Relu => {
                            let x = &self.nodes[p].value;
                            for k in 0..g.data.len() {
                                gp.data[k] = if x.data[k] > 0.0 { g.data[k] } else { 0.0 };
                            }
                        }
                        Unary::Sigmoid => {
                            let y = &self.nodes[i].value;
                            for k in 0..g.data.len() {
                                gp.data[k] = g.data[k] * y.data[k] * (1.0 - y.data[k]);
                            }
                        }
                        Unary::Tanh => {
                            let y = &self.nodes[i].value;
                            for k in 0..g.data.len() {
                                gp.data[k] = g.data[k] * (1.0 - y.data[k] * y.data[k]);
                            }
                        }
                        Unary::Scale(s) => {
                            for k in 0..g.data.len() {
                                gp.data[k] = g.data[k] * s;
                            }
                        }
                        Unary::AddScalar => gp.data.copy_from_slice(&g.data),
                    }
                    accumulate(&mut grads, p, gp);
                }
                Record::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Record::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let mut ga = g.clone();
                    for k in 0..ga.data.len() {
                        ga.data[k] *= self.nodes[b].value.data[k];
                    }
                    let mut gb = g;
                    for k in 0..gb.data.len() {
                        gb.data[k] *= self.nodes[a].value.data[k];
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Record::Conv2d { input, kernel, bias, stride, pad } => {
                    let (inp, ker, b, stride, pad) = (*input, *kernel, *bias, *stride, *pad);
                    let (gi, gk, gb) = conv2d_backward(
                        &self.nodes[inp].value,
                        &self.nodes[ker].value,
                        &g,
                        stride,
                        pad,
                    );
                    accumulate(&mut grads, inp, gi);
                    accumulate(&mut grads, ker, gk);
                    if let Some(b) = b {
                        accumulate(&mut grads, b, gb);
                    }
                }
                Record::ConcatCh { parents } => {
                    let parents = parents.clone();
                    let mut offset = 0;
                    for p in parents {
                        let shape = self.nodes[p].value.shape.clone();
                        let n = self.nodes[p].value.len();
                        let gp = DenseArray {
                            shape,
                            data: g.data[offset..offset + n].to_vec(),
                        };
                        offset += n;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Record::SliceCh { parent, from } => {
                    let (p, from) = (*parent, *from);
                    let (h, w) = self.nodes[p].value.hw();
                    let mut gp = DenseArray::zeros(&self.nodes[p].value.shape.clone());
                    gp.data[from * h * w..from * h * w + g.data.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, p, gp);
                }
                Record::SoftmaxRows { parent } => {
                    let p = *parent;
                    let y = &self.nodes[i].value;
                    let m = y.shape[1];
                    let mut gp = DenseArray::zeros(&y.shape.clone());
                    for r in 0..y.shape[0] {
                        let row = &y.data[r * m..(r + 1) * m];
                        let grow = &g.data[r * m..(r + 1) * m];
                        let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            gp.data[r * m + c] = row[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, p, gp);
                }
                Record::BilinearWarp { field, flow, mask } => {
                    let (f, fl) = (*field, *flow);
                    let mask = mask.clone();
                    let (gf, gflow) = bilinear_warp_backward(
                        &self.nodes[f].value,
                        &self.nodes[fl].value,
                        &g,
                        &mask,
                    );
                    accumulate(&mut grads, f, gf);
                    accumulate(&mut grads, fl, gflow);
                }
                Record::Sum { parent } => {
                    let p = *parent;
                    let gp = DenseArray::constant(&self.nodes[p].value.shape.clone(), g.data[0]);
                    accumulate(&mut grads, p, gp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], idx: usize, g: DenseArray) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => grads[idx] = Some(g),
    }
}

pub fn conv2d_forward(
    input: &DenseArray,
    kernel: &DenseArray,
    bias: Option<&DenseArray>,
    stride: usize,
    pad: Padding,
) -> Result<DenseArray> {
    if input.shape.len() != 3 || kernel.shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input {:?}, kernel {:?}",
            input.shape, kernel.shape
        )));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kc != c_in {
        return Err(Error::ShapeMismatch(format!("conv2d channels {kc} vs {c_in}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("kernel spatial size {kh}x{kw} must be odd")));
    }
    if let Some(b) = bias {
        if b.shape != [c_out] {
            return Err(Error::ShapeMismatch(format!("bias {:?} for {c_out} outputs", b.shape)));
        }
    }
    let (ph, pw) = (pad.amount(kh), pad.amount(kw));
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let mut out = DenseArray::zeros(&[c_out, oh, ow]);
    for co in 0..c_out {
        let b = bias.map_or(0.0, |b| b.data[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ci * h * w + iy as usize * w;
                        let krow = ((co * c_in + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input.data[irow + ix as usize] * kernel.data[krow + kx];
                        }
                    }
                }
                out.data[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    input: &DenseArray,
    kernel: &DenseArray,
    grad_out: &DenseArray,
    stride: usize,
    pad: Padding,
) -> (DenseArray, DenseArray, DenseArray) {
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, _, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    let (oh, ow) = (grad_out.shape[1], grad_out.shape[2]);
    let (ph, pw) = (pad.amount(kh), pad.amount(kw));
    let mut gi = DenseArray::zeros(&input.shape);
    let mut gk = DenseArray::zeros(&kernel.shape);
    let mut gb = DenseArray::zeros(&[c_out]);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                gb.data[co] += g;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ci * h * w + iy as usize * w;
                        let krow = ((co * c_in + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gi.data[irow + ix as usize] += g * kernel.data[krow + kx];
                            gk.data[krow + kx] += g * input.data[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

pub fn softmax_rows_forward(x: &DenseArray) -> DenseArray {
    assert_eq!(x.shape.len(), 2, "softmax_rows expects [N, M]");
    let (n, m) = (x.shape[0], x.shape[1]);
    let mut out = DenseArray::zeros(&[n, m]);
    for r in 0..n {
        let row = &x.data[r * m..(r + 1) * m];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let mut sum = 0.0;
        for c in 0..m {
            let e = (row[c] - max).exp();
            out.data[r * m + c] = e;
            sum += e;
        }
        for c in 0..m {
            out.data[r * m + c] /= sum;
        }
    }
    out
}

/// Sample positions and corner weights for one warp target.
/// Returns None when any needed corner is out of bounds.
fn warp_corners(
    w: usize,
    h: usize,
    sx: f64,
    sy: f64,
) -> Option<([usize; 2], [usize; 2], f64, f64)> {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    // When the fraction is exactly zero only one corner is needed.
    let x1 = if fx == 0.0 { x0 } else { x0 + 1.0 };
    let y1 = if fy == 0.0 { y0 } else { y0 + 1.0 };
    let inb = |v: f64, n: usize| v >= 0.0 && v <= (n - 1) as f64;
    if inb(x0, w) && inb(x1, w) && inb(y0, h) && inb(y1, h) {
        Some(([x0 as usize, x1 as usize], [y0 as usize, y1 as usize], fx, fy))
    } else {
        None
    }
}

pub fn bilinear_warp_forward(
    field: &DenseArray,
    flow: &DenseArray,
) -> Result<(DenseArray, Vec<bool>)> {
    if field.shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("warp field {:?}", field.shape)));
    }
    let (c, h, w) = (field.shape[0], field.shape[1], field.shape[2]);
    if flow.shape != [2, h, w] {
        return Err(Error::ShapeMismatch(format!("warp flow {:?} for {h}x{w}", flow.shape)));
    }
    let mut out = DenseArray::zeros(&field.shape);
    let mut mask = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow.data[i];
            let sy = y as f64 + flow.data[h * w + i];
            match warp_corners(w, h, sx, sy) {
                Some(([x0, x1], [y0, y1], fx, fy)) => {
                    let (w00, w01, w10, w11) = (
                        (1.0 - fx) * (1.0 - fy),
                        fx * (1.0 - fy),
                        (1.0 - fx) * fy,
                        fx * fy,
                    );
                    for ch in 0..c {
                        let plane = ch * h * w;
                        out.data[plane + i] = w00 * field.data[plane + y0 * w + x0]
                            + w01 * field.data[plane + y0 * w + x1]
                            + w10 * field.data[plane + y1 * w + x0]
                            + w11 * field.data[plane + y1 * w + x1];
                    }
                }
                None => mask[i] = false,
            }
        }
    }
    Ok((out, mask))
}

fn bilinear_warp_backward(
    field: &DenseArray,
    flow: &DenseArray,
    grad_out: &DenseArray,
    mask: &[bool],
) -> (DenseArray, DenseArray) {
    let (c, h, w) = (field.shape[0], field.shape[1], field.shape[2]);
    let mut gf = DenseArray::zeros(&field.shape);
    let mut gflow = DenseArray::zeros(&flow.shape);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let sx = x as f64 + flow.data[i];
            let sy = y as f64 + flow.data[h * w + i];
            let Some(([x0, x1], [y0, y1], fx, fy)) = warp_corners(w, h, sx, sy) else { continue };
            for ch in 0..c {
                let plane = ch * h * w;
                let g = grad_out.data[plane + i];
                if g == 0.0 {
                    continue;
                }
                let v00 = field.data[plane + y0 * w + x0];
                let v01 = field.data[plane + y0 * w + x1];
                let v10 = field.data[plane + y1 * w + x0];
                let v11 = field.data[plane + y1 * w + x1];
                gf.data[plane + y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                gf.data[plane + y0 * w + x1] += g * fx * (1.0 - fy);
                gf.data[plane + y1 * w + x0] += g * (1.0 - fx) * fy;
                gf.data[plane + y1 * w + x1] += g * fx * fy;
                gflow.data[i] += g * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                gflow.data[h * w + i] += g * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
            }
        }
    }
    (gf, gflow)
}

/// Weights for one convolutional GRU cell: z, r and candidate convolutions
/// over the channel-concatenated [hidden, input].
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub conv_z: Var,
    pub bias_z: Var,
    pub conv_r: Var,
    pub bias_r: Var,
    pub conv_h: Var,
    pub bias_h: Var,
}

/// Convolutional GRU step:
/// z = sigmoid(Conv([h, x])), r = sigmoid(Conv([h, x])),
/// h~ = tanh(Conv([r * h, x])), h' = (1 - z) * h + z * h~.
pub fn gru_cell(tape: &mut Tape, hidden: Var, input: Var, weights: &GruWeights) -> Result<Var> {
    let hx = tape.concat_channels(&[hidden, input])?;
    let z_pre = tape.conv2d(hx, weights.conv_z, Some(weights.bias_z), 1, Padding::Same)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.conv2d(hx, weights.conv_r, Some(weights.bias_r), 1, Padding::Same)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, hidden)?;
    let rhx = tape.concat_channels(&[rh, input])?;
    let cand_pre = tape.conv2d(rhx, weights.conv_h, Some(weights.bias_h), 1, Padding::Same)?;
    let cand = tape.tanh(cand_pre);
    // h' = h + z * (h~ - h)
    let diff = tape.sub(cand, hidden)?;
    let step = tape.mul(z, diff)?;
    tape.add(hidden, step)
}

/// Named weight container. Lookup by unknown name is an error, never a
/// silent default.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, DenseArray>,
    pub seed: u64,
    pub init_scheme: String,
}

impl WeightStore {
    pub fn new(seed: u64, init_scheme: &str) -> Self {
        WeightStore { tensors: BTreeMap::new(), seed, init_scheme: init_scheme.to_string() }
    }

    pub fn insert(&mut self, name: &str, value: DenseArray) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownWeight(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Kaiming-uniform conv kernel [c_out, c_in, kh, kw] plus zero bias.
    pub fn init_conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ name_hash(name));
        let n = c_out * c_in * k * k;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, DenseArray::from_vec(&[c_out, c_in, k, k], data).unwrap());
        self.insert(&format!("{name}.bias"), DenseArray::zeros(&[c_out]));
    }

    pub fn init_vector(&mut self, name: &str, len: usize, bound: f64) {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ name_hash(name));
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, DenseArray::from_vec(&[len], data).unwrap());
    }

    pub fn init_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, DenseArray::scalar(value));
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across runs and platforms
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
