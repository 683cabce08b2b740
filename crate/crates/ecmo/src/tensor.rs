//! Dense f64 tensors recorded on a tape, with reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass and the
//! operation that produced it, in topological order. [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into every
//! `requires_grad` ancestor of the loss. A tape is single use: build it,
//! run backward once, read the gradients, drop it. Model parameters live
//! outside tapes as named [`Param`] buffers and are copied onto a tape at
//! the start of each pass.
//!
//! All arithmetic is in f64. Broadcasting is limited to adding a bias row
//! vector to a matrix; everything else requires exact shape agreement,
//! which keeps every backward rule short and auditable.

use crate::error::{Error, Result};

/// Handle to a tensor on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

/// A named parameter buffer owned by a model (not by any tape).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param data length must match shape");
        Param { name: name.into(), shape, data }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; numel])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Matvec { w: TensorId, x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    OneMinus { a: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Concat { a: TensorId, b: TensorId },
    StackRows { rows: Vec<TensorId> },
    /// Column-wise max over rows; `argmax[j]` is the first row attaining it.
    MaxOverTime { m: TensorId, argmax: Vec<usize> },
    SelectRow { m: TensorId, row: usize },
    Sum { a: TensorId },
    Scale { a: TensorId, factor: f64 },
    /// Cached softmax from the forward pass drives the backward rule.
    SoftmaxXent { logits: TensorId, target: usize, softmax: Vec<f64> },
    BceLogit { logit: TensorId, label: f64, prob: f64 },
}

/// One recorded tensor: value, shape, and the operation that made it.
#[derive(Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
    /// True when this node is a grad leaf or has one among its ancestors.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    backward_done: bool,
}

fn shape_of(s: &[usize]) -> String {
    format!("{s:?}")
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient buffer of `id`, if backward reached or allocated it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        let node = &self.nodes[id.0];
        assert_eq!(node.data.len(), 1, "value() requires a scalar tensor");
        node.data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "leaf data has {} elements but shape {} implies {}",
                data.len(),
                shape_of(&shape),
                numel
            )));
        }
        let id = self.push(shape, data, Op::Leaf, requires_grad);
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let numel: usize = shape.iter().product();
        self.push(shape, vec![0.0; numel], Op::Leaf, false)
    }

    /// Copy a parameter onto the tape; `trainable` decides whether backward
    /// will produce a gradient for it.
    pub fn param(&mut self, p: &Param, trainable: bool) -> TensorId {
        let id = self.push(p.shape.clone(), p.data.clone(), Op::Leaf, trainable);
        self.nodes[id.0].requires_grad = trainable;
        id
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul needs [m x k] by [k x n], got {} by {}",
                shape_of(&sa),
                shape_of(&sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b }, needs))
    }

    /// Matrix-vector product [m×k]·[k] → [m].
    pub fn matvec(&mut self, w: TensorId, x: TensorId) -> Result<TensorId> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Dimension(format!(
                "matvec needs [m x k] by [k], got {} by {}",
                shape_of(&sw),
                shape_of(&sx)
            )));
        }
        let (m, k) = (sw[0], sw[1]);
        let wd = self.data(w);
        let xd = self.data(x);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..k {
                s += wd[i * k + j] * xd[j];
            }
            out[i] = s;
        }
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(vec![m], out, Op::Matvec { w, x }, needs))
    }

    /// Elementwise sum. Also accepts matrix + bias row vector ([r×c] + [c]).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let needs = self.needs(a) || self.needs(b);
        if sa == sb {
            let data: Vec<f64> = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.push(sa, data, Op::Add { a, b }, needs));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (r, c) = (sa[0], sa[1]);
            let ad = self.data(a);
            let bd = self.data(b);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] = ad[i * c + j] + bd[j];
                }
            }
            return Ok(self.push(sa, data, Op::AddBias { a, bias: b }, needs));
        }
        Err(Error::Dimension(format!(
            "add needs equal shapes or matrix+bias, got {} and {}",
            shape_of(&sa),
            shape_of(&sb)
        )))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "sub needs equal shapes, got {} and {}",
                shape_of(&sa),
                shape_of(&sb)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, data, Op::Sub { a, b }, needs))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "mul needs equal shapes, got {} and {}",
                shape_of(&sa),
                shape_of(&sb)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, data, Op::Mul { a, b }, needs))
    }

    pub fn one_minus(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| 1.0 - x).collect();
        let needs = self.needs(a);
        self.push(shape, data, Op::OneMinus { a }, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let needs = self.needs(a);
        self.push(shape, data, Op::Sigmoid { a }, needs)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(shape, data, Op::Tanh { a }, needs)
    }

    /// Last-axis concatenation of two vectors or two matrices with equal
    /// leading dimension. A zero-length operand acts as the identity.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let needs = self.needs(a) || self.needs(b);
        if sa.len() == 1 && sb.len() == 1 {
            let mut data = self.data(a).to_vec();
            data.extend_from_slice(self.data(b));
            return Ok(self.push(vec![sa[0] + sb[0]], data, Op::Concat { a, b }, needs));
        }
        if sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0] {
            let (r, ca, cb) = (sa[0], sa[1], sb[1]);
            let ad = self.data(a);
            let bd = self.data(b);
            let mut data = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
            }
            return Ok(self.push(vec![r, ca + cb], data, Op::Concat { a, b }, needs));
        }
        Err(Error::Dimension(format!(
            "concat needs matching leading dimensions, got {} and {}",
            shape_of(&sa),
            shape_of(&sb)
        )))
    }

    /// Stack T vectors of equal width d into a [T×d] matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::EmptySequence("stack_rows got no rows".into()));
        }
        let d = {
            let s = self.shape(rows[0]);
            if s.len() != 1 {
                return Err(Error::Dimension(format!(
                    "stack_rows needs vectors, got {}",
                    shape_of(s)
                )));
            }
            s[0]
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut needs = false;
        for &r in rows {
            let s = self.shape(r);
            if s.len() != 1 || s[0] != d {
                return Err(Error::Dimension(format!(
                    "stack_rows needs uniform width [{d}], got {}",
                    shape_of(s)
                )));
            }
            data.extend_from_slice(self.data(r));
            needs |= self.needs(r);
        }
        Ok(self.push(vec![rows.len(), d], data, Op::StackRows { rows: rows.to_vec() }, needs))
    }

    /// Column-wise max over the rows of a [T×d] matrix, T ≥ 1. The gradient
    /// of each output component flows to the earliest row attaining the max.
    pub fn max_over_time(&mut self, m: TensorId) -> Result<TensorId> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "max_over_time needs a [T x d] matrix, got {}",
                shape_of(&s)
            )));
        }
        let (t, d) = (s[0], s[1]);
        if t == 0 {
            return Err(Error::EmptySequence("max_over_time over zero timesteps".into()));
        }
        let md = self.data(m);
        let mut out = vec![0.0; d];
        let mut argmax = vec![0usize; d];
        for j in 0..d {
            let mut best = md[j];
            let mut best_t = 0;
            for ti in 1..t {
                let v = md[ti * d + j];
                if v > best {
                    best = v;
                    best_t = ti;
                }
            }
            out[j] = best;
            argmax[j] = best_t;
        }
        let needs = self.needs(m);
        Ok(self.push(vec![d], out, Op::MaxOverTime { m, argmax }, needs))
    }

    /// Row `row` of a [r×c] matrix as a [c] vector; the embedding lookup.
    pub fn select_row(&mut self, m: TensorId, row: usize) -> Result<TensorId> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "select_row needs a matrix, got {}",
                shape_of(&s)
            )));
        }
        if row >= s[0] {
            return Err(Error::Index(format!(
                "row {row} out of range for {} rows",
                s[0]
            )));
        }
        let c = s[1];
        let data = self.data(m)[row * c..(row + 1) * c].to_vec();
        let needs = self.needs(m);
        Ok(self.push(vec![c], data, Op::SelectRow { m, row }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum { a }, needs)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        self.push(shape, data, Op::Scale { a, factor }, needs)
    }

    /// −log softmax(logits)[target], computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy needs a logit vector, got {}",
                shape_of(&s)
            )));
        }
        let v = s[0];
        if target >= v {
            return Err(Error::Index(format!(
                "target {target} out of range for {v} classes"
            )));
        }
        let ld = self.data(logits);
        let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ld.iter().map(|x| (x - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|e| e / norm).collect();
        let loss = norm.ln() + max - ld[target];
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent { logits, target, softmax },
            needs,
        ))
    }

    /// Binary cross entropy of a scalar logit against label y ∈ {0,1},
    /// computed in the numerically stable logit form.
    pub fn bce_with_logit(&mut self, logit: TensorId, label: f64) -> Result<TensorId> {
        if self.data(logit).len() != 1 {
            return Err(Error::Dimension(format!(
                "bce_with_logit needs a scalar logit, got {}",
                shape_of(self.shape(logit))
            )));
        }
        if label != 0.0 && label != 1.0 {
            return Err(Error::Contract(format!("label must be 0 or 1, got {label}")));
        }
        let l = self.data(logit)[0];
        // max(l,0) − l·y + ln(1 + e^{−|l|})
        let loss = l.max(0.0) - l * label + (-l.abs()).exp().ln_1p();
        let prob = 1.0 / (1.0 + (-l).exp());
        let needs = self.needs(logit);
        Ok(self.push(vec![1], vec![loss], Op::BceLogit { logit, label, prob }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients for every `requires_grad` ancestor of `loss`.
    /// Parameters not on any path to the loss keep an all-zero gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_of(&self.nodes[loss.0].shape)
            )));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss has no trainable ancestors; every gradient stays zero.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(a) {
                        // dA += dC · Bᵀ
                        let bd = self.nodes[b.0].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[r * n + j] * bd[p * n + j];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    }
                    if self.needs(b) {
                        // dB += Aᵀ · dC
                        let ad = self.nodes[a.0].data.clone();
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for r in 0..m {
                                    s += ad[r * k + p] * g[r * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::Matvec { w, x } => {
                    let (w, x) = (*w, *x);
                    let (m, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                    if self.needs(w) {
                        let xd = self.nodes[x.0].data.clone();
                        let gw = self.nodes[w.0].grad.as_mut().unwrap();
                        for i2 in 0..m {
                            for j in 0..k {
                                gw[i2 * k + j] += g[i2] * xd[j];
                            }
                        }
                    }
                    if self.needs(x) {
                        let wd = self.nodes[w.0].data.clone();
                        let gx = self.nodes[x.0].grad.as_mut().unwrap();
                        for j in 0..k {
                            let mut s = 0.0;
                            for i2 in 0..m {
                                s += wd[i2 * k + j] * g[i2];
                            }
                            gx[j] += s;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    self.accumulate(a, &g);
                    if self.needs(bias) {
                        let c = self.nodes[bias.0].data.len();
                        let gb = self.nodes[bias.0].grad.as_mut().unwrap();
                        for (idx, gv) in g.iter().enumerate() {
                            gb[idx % c] += gv;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    if self.needs(b) {
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for (gv, dst) in g.iter().zip(gb.iter_mut()) {
                            *dst -= gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bd = self.nodes[b.0].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for ((gv, bv), dst) in g.iter().zip(bd.iter()).zip(ga.iter_mut()) {
                            *dst += gv * bv;
                        }
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].data.clone();
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for ((gv, av), dst) in g.iter().zip(ad.iter()).zip(gb.iter_mut()) {
                            *dst += gv * av;
                        }
                    }
                }
                Op::OneMinus { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (gv, dst) in g.iter().zip(ga.iter_mut()) {
                            *dst -= gv;
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let out = self.nodes[i].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for ((gv, s), dst) in g.iter().zip(out.iter()).zip(ga.iter_mut()) {
                            *dst += gv * s * (1.0 - s);
                        }
                    }
                }
                Op::Tanh { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let out = self.nodes[i].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for ((gv, t), dst) in g.iter().zip(out.iter()).zip(ga.iter_mut()) {
                            *dst += gv * (1.0 - t * t);
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    if sa.len() == 1 {
                        let p = sa[0];
                        if self.needs(a) {
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            for j in 0..p {
                                ga[j] += g[j];
                            }
                        }
                        if self.needs(b) {
                            let q = sb[0];
                            let gb = self.nodes[b.0].grad.as_mut().unwrap();
                            for j in 0..q {
                                gb[j] += g[p + j];
                            }
                        }
                    } else {
                        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
                        let cw = ca + cb;
                        if self.needs(a) {
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            for row in 0..r {
                                for j in 0..ca {
                                    ga[row * ca + j] += g[row * cw + j];
                                }
                            }
                        }
                        if self.needs(b) {
                            let gb = self.nodes[b.0].grad.as_mut().unwrap();
                            for row in 0..r {
                                for j in 0..cb {
                                    gb[row * cb + j] += g[row * cw + ca + j];
                                }
                            }
                        }
                    }
                }
                Op::StackRows { rows } => {
                    let rows = rows.clone();
                    let d = self.nodes[i].shape[1];
                    for (t, r) in rows.iter().enumerate() {
                        if self.needs(*r) {
                            let gr = self.nodes[r.0].grad.as_mut().unwrap();
                            for j in 0..d {
                                gr[j] += g[t * d + j];
                            }
                        }
                    }
                }
                Op::MaxOverTime { m, argmax } => {
                    let m = *m;
                    let argmax = argmax.clone();
                    if self.needs(m) {
                        let d = argmax.len();
                        let gm = self.nodes[m.0].grad.as_mut().unwrap();
                        for j in 0..d {
                            gm[argmax[j] * d + j] += g[j];
                        }
                    }
                }
                Op::SelectRow { m, row } => {
                    let (m, row) = (*m, *row);
                    if self.needs(m) {
                        let c = self.nodes[i].data.len();
                        let gm = self.nodes[m.0].grad.as_mut().unwrap();
                        for j in 0..c {
                            gm[row * c + j] += g[j];
                        }
                    }
                }
                Op::Sum { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for dst in ga.iter_mut() {
                            *dst += g[0];
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let (a, factor) = (*a, *factor);
                    if self.needs(a) {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (gv, dst) in g.iter().zip(ga.iter_mut()) {
                            *dst += gv * factor;
                        }
                    }
                }
                Op::SoftmaxXent { logits, target, softmax } => {
                    let (logits, target) = (*logits, *target);
                    let softmax = softmax.clone();
                    if self.needs(logits) {
                        let gl = self.nodes[logits.0].grad.as_mut().unwrap();
                        for (j, s) in softmax.iter().enumerate() {
                            let one_hot = if j == target { 1.0 } else { 0.0 };
                            gl[j] += g[0] * (s - one_hot);
                        }
                    }
                }
                Op::BceLogit { logit, label, prob } => {
                    let (logit, label, prob) = (*logit, *label, *prob);
                    if self.needs(logit) {
                        let gl = self.nodes[logit.0].grad.as_mut().unwrap();
                        gl[0] += g[0] * (prob - label);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, g: &[f64]) {
        if self.needs(id) {
            let dst = self.nodes[id.0].grad.as_mut().unwrap();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}
