use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use super::MathError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<F> {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Elu(Var),
    Exp(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Softmax { x: Var },
    Dropout { x: Var, mask: Vec<F> },
    GatherRows { x: Var, width: usize, idx: Arc<Vec<Option<u32>>> },
    ConcatCols(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Arc<Vec<F>>, weights: Option<Arc<Vec<F>>>, denom: F },
    GaussianLogProb { mean: Var, log_std: Var, actions: Arc<Vec<F>> },
    Clamp { x: Var, lo: F, hi: F },
    Minimum(Var, Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Elu(_) => "elu",
            Op::Exp(_) => "exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse { .. } => "mse",
            Op::GaussianLogProb { .. } => "gaussian_log_prob",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    grad: bool,
}

/// Records a forward computation for one reverse pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. [`Tape::backward`] can run once; afterwards the tape is
/// marked consumed and further calls fail with [`MathError::TapeConsumed`].
#[derive(Debug)]
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    seed: u64,
    step: u64,
    consumed: bool,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) from a counter-based hash of `(seed, layer, step, index)`.
pub fn counter_uniform(seed: u64, layer: u64, step: u64, index: u64) -> f64 {
    let h = mix64(mix64(mix64(seed ^ mix64(layer)) ^ step) ^ index);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl<F: Scalar> Tape<F> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
            seed: 0,
            step: 0,
            consumed: false,
        }
    }

    /// Training-mode tape whose dropout masks derive from `(seed, layer, step)`.
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            ..Self::new(Mode::Train)
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var, MathError> {
        if !value.all_finite() {
            return Err(MathError::NonFinite { op: op.name() });
        }
        let grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            _ => inputs(&op).iter().any(|v| self.nodes[v.0].grad),
        };
        let mut value = value;
        value.requires_grad = grad;
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var, MathError> {
        self.push(t, Op::Const)
    }

    /// Registers a parameter as a differentiable leaf. Registering the same
    /// parameter twice returns the same handle.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> Result<Var, MathError> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(params.get(id).clone(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), MathError> {
        if self.shape(a) != self.shape(b) {
            return Err(MathError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var, MathError> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.zip(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var, MathError> {
        let cols = self.nodes[a.0].value.cols();
        if self.nodes[row.0].value.numel() != cols {
            return Err(MathError::ShapeMismatch {
                op: op.name(),
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.data(row);
        let data = self
            .data(a)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, op)
    }

    /// `a + row`, broadcasting `row` across the leading dimensions of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, MathError> {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a * row`, broadcasting `row` across the leading dimensions of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, MathError> {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var, MathError> {
        let t = self.nodes[a.0].value.map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    /// 2-D product `a @ b` (or `a @ b^T` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, MathError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || MathError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(bad());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![F::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        F::gemm(m, k, n, self.data(a), k as isize, 1, self.data(b), rsb, csb, F::zero(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul { a, b, trans_b })
    }

    /// Batched product over the leading dimension of two rank-3 tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, MathError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || MathError::ShapeMismatch {
            op: "batch_matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![F::zero(); g * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            F::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &db[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                F::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(&[g, m, n], out)?;
        self.push(t, Op::BatchMatMul { a, b, trans_b })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var, MathError> {
        let t = self.nodes[a.0]
            .value
            .map(|x| if x > F::zero() { x } else { x.exp() - F::one() });
        self.push(t, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, MathError> {
        let t = self.nodes[a.0].value.map(|x| x.exp());
        self.push(t, Op::Exp(a))
    }

    /// Normalizes the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, MathError> {
        let x = &self.nodes[a.0].value;
        let cols = x.cols();
        let nf = F::of(cols as f64);
        let mut out = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(x.rows());
        for row in x.data().chunks(cols) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + F::of(eps)).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let t = Tensor::new(x.shape(), out)?;
        self.push(t, Op::LayerNorm { x: a, rstd })
    }

    /// Softmax over the last dimension. With `causal`, the input is read as
    /// `[.., L, L]` query-by-key blocks and keys after the query get weight 0.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var, MathError> {
        let x = &self.nodes[a.0].value;
        let cols = x.cols();
        if causal {
            let s = x.shape();
            if s.len() < 2 || s[s.len() - 2] != cols {
                return Err(MathError::ShapeMismatch {
                    op: "softmax",
                    lhs: s.to_vec(),
                    rhs: vec![cols, cols],
                });
            }
        }
        let mut out = vec![F::zero(); x.numel()];
        for (r, (row, o)) in x.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let valid = if causal { r % cols + 1 } else { cols };
            let max = row[..valid].iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..valid {
                let e = (row[j] - max).exp();
                o[j] = e;
                total += e;
            }
            for v in &mut o[..valid] {
                *v = *v / total;
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        self.push(t, Op::Softmax { x: a })
    }

    /// Inverted dropout. In eval mode (or with `rate == 0`) returns `a` itself.
    pub fn dropout(&mut self, a: Var, rate: f64, layer: u64) -> Result<Var, MathError> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[a.0].value.numel())
            .map(|i| {
                if counter_uniform(self.seed, layer, self.step, i as u64) >= rate {
                    keep
                } else {
                    F::zero()
                }
            })
            .collect();
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(x.shape(), data)?;
        self.push(t, Op::Dropout { x: a, mask })
    }

    /// Views `a` as rows of `width` elements and gathers them by index;
    /// `None` yields a zero row. Output shape is `[idx.len(), width]`.
    pub fn gather_rows(&mut self, a: Var, width: usize, idx: Arc<Vec<Option<u32>>>) -> Result<Var, MathError> {
        let x = &self.nodes[a.0].value;
        if width == 0 || x.numel() % width != 0 {
            return Err(MathError::ShapeMismatch {
                op: "gather_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![width],
            });
        }
        let nrows = x.numel() / width;
        let mut out = vec![F::zero(); idx.len() * width];
        for (o, i) in out.chunks_mut(width).zip(idx.iter()) {
            if let Some(i) = *i {
                let i = i as usize;
                if i >= nrows {
                    return Err(MathError::IndexOutOfRange { index: i, len: nrows });
                }
                o.copy_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
        }
        let t = Tensor::new(&[idx.len(), width], out)?;
        self.push(t, Op::GatherRows { x: a, width, idx })
    }

    /// Concatenates two 2-D tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(MathError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (ca + cb));
        let (da, db) = (self.data(a), self.data(b));
        for r in 0..n {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(&[n, ca + cb], out)?;
        self.push(t, Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, MathError> {
        let t = self.nodes[a.0].value.reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, MathError> {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, MathError> {
        let x = &self.nodes[a.0].value;
        let t = Tensor::scalar(x.sum() / F::of(x.numel().max(1) as f64));
        self.push(t, Op::Mean(a))
    }

    /// Weighted squared error: `sum_r w_r * ||pred_r - target_r||^2 / sum_r w_r`,
    /// rows being the last dimension. Without weights every row has weight 1.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>, weights: Option<&[F]>) -> Result<Var, MathError> {
        let p = &self.nodes[pred.0].value;
        if p.shape() != target.shape() {
            return Err(MathError::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if !target.all_finite() {
            return Err(MathError::NonFinite { op: "mse" });
        }
        let cols = p.cols();
        let rows = p.rows();
        if let Some(w) = weights {
            if w.len() != rows {
                return Err(MathError::ShapeMismatch {
                    op: "mse",
                    lhs: vec![rows],
                    rhs: vec![w.len()],
                });
            }
        }
        let denom = match weights {
            Some(w) => w.iter().copied().sum::<F>(),
            None => F::of(rows as f64),
        };
        if denom <= F::zero() {
            return Err(MathError::EmptyReduction { op: "mse" });
        }
        let mut total = F::zero();
        for (r, (pr, tr)) in p.data().chunks(cols).zip(target.data().chunks(cols)).enumerate() {
            let w = weights.map_or(F::one(), |w| w[r]);
            if w == F::zero() {
                continue;
            }
            total += w * pr.iter().zip(tr).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>();
        }
        let t = Tensor::scalar(total / denom);
        let op = Op::Mse {
            pred,
            target: Arc::new(target.to_vec()),
            weights: weights.map(|w| Arc::new(w.to_vec())),
            denom,
        };
        self.push(t, op)
    }

    /// Per-row log-density of `actions` under a diagonal Gaussian with
    /// per-row `mean` (`[n, a]`) and shared `log_std` (`[a]`). Output `[n]`.
    pub fn gaussian_log_prob(&mut self, mean: Var, log_std: Var, actions: &Tensor<F>) -> Result<Var, MathError> {
        let m = &self.nodes[mean.0].value;
        let ls = &self.nodes[log_std.0].value;
        let a = m.cols();
        if m.shape() != actions.shape() || ls.numel() != a {
            return Err(MathError::ShapeMismatch {
                op: "gaussian_log_prob",
                lhs: m.shape().to_vec(),
                rhs: actions.shape().to_vec(),
            });
        }
        let half_log_2pi = F::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let out: Vec<F> = m
            .data()
            .chunks(a)
            .zip(actions.data().chunks(a))
            .map(|(mr, xr)| {
                let mut lp = F::zero();
                for j in 0..a {
                    let s = ls.data()[j];
                    let z = (xr[j] - mr[j]) / s.exp();
                    lp += -F::of(0.5) * z * z - s - half_log_2pi;
                }
                lp
            })
            .collect();
        let t = Tensor::new(&[m.rows()], out)?;
        self.push(
            t,
            Op::GaussianLogProb {
                mean,
                log_std,
                actions: Arc::new(actions.to_vec()),
            },
        )
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var, MathError> {
        let t = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        self.push(t, Op::Clamp { x: a, lo, hi })
    }

    /// Reverse pass from a scalar `loss`. Parameters never reached get zero
    /// gradients. The tape can only be differentiated once.
    pub fn backward(&mut self, loss: Var, params: &ParamSet<F>) -> Result<Gradients<F>, MathError> {
        if self.consumed {
            return Err(MathError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(MathError::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(MathError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = params.zero_grads();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        gy: &[F],
        grads: &mut [Option<Vec<F>>],
        out: &mut Gradients<F>,
    ) -> Result<(), MathError> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {
                if let Some($g) = slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Const => {}
            Op::Param(id) => out.accumulate(*id, gy),
            Op::Add(a, b) => {
                with_grad!(*a, |g| add_into(g, gy));
                with_grad!(*b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |g| add_into(g, gy));
                with_grad!(*b, |g| for (gi, &d) in g.iter_mut().zip(gy) {
                    *gi -= d;
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |g| for ((gi, &d), &bv) in g.iter_mut().zip(gy).zip(db) {
                    *gi += d * bv;
                });
                with_grad!(*b, |g| for ((gi, &d), &av) in g.iter_mut().zip(gy).zip(da) {
                    *gi += d * av;
                });
            }
            Op::Minimum(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |g| for k in 0..g.len() {
                    if da[k] <= db[k] {
                        g[k] += gy[k];
                    }
                });
                with_grad!(*b, |g| for k in 0..g.len() {
                    if da[k] > db[k] {
                        g[k] += gy[k];
                    }
                });
            }
            Op::AddRow(a, r) => {
                with_grad!(*a, |g| add_into(g, gy));
                with_grad!(*r, |g| {
                    let c = g.len();
                    for chunk in gy.chunks(c) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (da, dr) = (self.data(*a), self.data(*r));
                let c = dr.len();
                with_grad!(*a, |g| for k in 0..g.len() {
                    g[k] += gy[k] * dr[k % c];
                });
                with_grad!(*r, |g| for k in 0..gy.len() {
                    g[k % c] += gy[k] * da[k];
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |g| for (gi, &d) in g.iter_mut().zip(gy) {
                    *gi += d * *c;
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |g| matmul_grad_a(m, k, n, gy, db, *trans_b, g));
                with_grad!(*b, |g| matmul_grad_b(m, k, n, gy, da, *trans_b, g));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |g| for i in 0..bs {
                    matmul_grad_a(
                        m,
                        k,
                        n,
                        &gy[i * m * n..(i + 1) * m * n],
                        &db[i * k * n..(i + 1) * k * n],
                        *trans_b,
                        &mut g[i * m * k..(i + 1) * m * k],
                    );
                });
                with_grad!(*b, |g| for i in 0..bs {
                    matmul_grad_b(
                        m,
                        k,
                        n,
                        &gy[i * m * n..(i + 1) * m * n],
                        &da[i * m * k..(i + 1) * m * k],
                        *trans_b,
                        &mut g[i * k * n..(i + 1) * k * n],
                    );
                });
            }
            Op::Elu(a) => {
                let x = self.data(*a);
                with_grad!(*a, |g| for k in 0..g.len() {
                    let d = if x[k] > F::zero() { F::one() } else { y[k] + F::one() };
                    g[k] += gy[k] * d;
                });
            }
            Op::Exp(a) => {
                with_grad!(*a, |g| for k in 0..g.len() {
                    g[k] += gy[k] * y[k];
                });
            }
            Op::LayerNorm { x, rstd } => {
                let c = node.value.cols();
                let nf = F::of(c as f64);
                with_grad!(*x, |g| for (r, ((gr, yr), dyr)) in g
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(gy.chunks(c))
                    .enumerate()
                {
                    let mean_dy = dyr.iter().copied().sum::<F>() / nf;
                    let mean_dyy = dyr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<F>() / nf;
                    for j in 0..c {
                        gr[j] += rstd[r] * (dyr[j] - mean_dy - yr[j] * mean_dyy);
                    }
                });
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                with_grad!(*x, |g| for ((gr, yr), dyr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)) {
                    let dot = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..c {
                        gr[j] += yr[j] * (dyr[j] - dot);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |g| for k in 0..g.len() {
                    g[k] += gy[k] * mask[k];
                });
            }
            Op::GatherRows { x, width, idx } => {
                let w = *width;
                with_grad!(*x, |g| for (dyr, i) in gy.chunks(w).zip(idx.iter()) {
                    if let Some(i) = *i {
                        let i = i as usize;
                        add_into(&mut g[i * w..(i + 1) * w], dyr);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.cols();
                let cb = self.nodes[b.0].value.cols();
                with_grad!(*a, |g| for (gr, dyr) in g.chunks_mut(ca).zip(gy.chunks(ca + cb)) {
                    add_into(gr, &dyr[..ca]);
                });
                with_grad!(*b, |g| for (gr, dyr) in g.chunks_mut(cb).zip(gy.chunks(ca + cb)) {
                    add_into(gr, &dyr[ca..]);
                });
            }
            Op::Reshape(a) => {
                with_grad!(*a, |g| add_into(g, gy));
            }
            Op::Sum(a) => {
                with_grad!(*a, |g| for gi in g.iter_mut() {
                    *gi += gy[0];
                });
            }
            Op::Mean(a) => {
                let n = F::of(self.nodes[a.0].value.numel().max(1) as f64);
                with_grad!(*a, |g| for gi in g.iter_mut() {
                    *gi += gy[0] / n;
                });
            }
            Op::Mse { pred, target, weights, denom } => {
                let p = self.data(*pred);
                let c = self.nodes[pred.0].value.cols();
                let s = F::of(2.0) * gy[0] / *denom;
                with_grad!(*pred, |g| for k in 0..g.len() {
                    let w = weights.as_ref().map_or(F::one(), |w| w[k / c]);
                    g[k] += s * w * (p[k] - target[k]);
                });
            }
            Op::GaussianLogProb { mean, log_std, actions } => {
                let m = self.data(*mean);
                let ls = self.data(*log_std);
                let a = ls.len();
                with_grad!(*mean, |g| for k in 0..g.len() {
                    let var = (F::of(2.0) * ls[k % a]).exp();
                    g[k] += gy[k / a] * (actions[k] - m[k]) / var;
                });
                with_grad!(*log_std, |g| for k in 0..m.len() {
                    let z = (actions[k] - m[k]) / ls[k % a].exp();
                    g[k % a] += gy[k / a] * (z * z - F::one());
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                with_grad!(*x, |g| for k in 0..g.len() {
                    if xv[k] > *lo && xv[k] < *hi {
                        g[k] += gy[k];
                    }
                });
            }
        }
        Ok(())
    }
}

fn inputs<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Const | Op::Param(_) => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::ConcatCols(a, b)
        | Op::Minimum(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
        Op::GaussianLogProb { mean, log_std, .. } => vec![*mean, *log_std],
        Op::Scale(a, _) | Op::Elu(a) | Op::Exp(a) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
        Op::LayerNorm { x, .. }
        | Op::Softmax { x }
        | Op::Dropout { x, .. }
        | Op::GatherRows { x, .. }
        | Op::Clamp { x, .. } => vec![*x],
        Op::Mse { pred, .. } => vec![*pred],
    }
}

// Gradient accumulator of `v`, or None when `v` does not require a gradient.
fn slot<'a, F: Scalar>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn add_into<F: Scalar>(g: &mut [F], d: &[F]) {
    for (gi, &di) in g.iter_mut().zip(d) {
        *gi += di;
    }
}

// C[m,n] = A[m,k] B[k,n] (or A B^T with B stored [n,k]); dA += dC B^T.
fn matmul_grad_a<F: Scalar>(m: usize, k: usize, n: usize, dc: &[F], b: &[F], trans_b: bool, g: &mut [F]) {
    let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
    F::gemm(m, n, k, dc, n as isize, 1, b, rsb, csb, F::one(), g);
}

// dB += A^T dC, or dC^T A when B is stored transposed.
fn matmul_grad_b<F: Scalar>(m: usize, k: usize, n: usize, dc: &[F], a: &[F], trans_b: bool, g: &mut [F]) {
    if trans_b {
        F::gemm(n, m, k, dc, 1, n as isize, a, k as isize, 1, F::one(), g);
    } else {
        F::gemm(k, m, n, a, 1, k as isize, dc, n as isize, 1, F::one(), g);
    }
}
