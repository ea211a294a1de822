use std::sync::Arc;

use crate::autodiff::tensor::{gemm_into, MatRef};
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What to do when an operation produces NaN or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonFinitePolicy {
    /// Fail the operation with [`AutodiffError::NonFinite`].
    Error,
    /// Replace NaN by zero and infinities by the largest finite value, then
    /// log a warning.
    Clamp,
}

impl Default for NonFinitePolicy {
    fn default() -> Self {
        if cfg!(debug_assertions) {
            NonFinitePolicy::Error
        } else {
            NonFinitePolicy::Clamp
        }
    }
}

/// A differentiable operation implemented outside the primitive set, with a
/// hand-written vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError>;

    /// Returns one gradient per input, `None` where the input is not
    /// differentiable. Only inputs flagged in `needs_grad` must be filled.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Param,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulCol(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Maximum(Var, Var),
    Recip(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    RowSum(Var),
    RowDot(Var, Var),
    RowNorm(Var),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
    Custom(Arc<dyn CustomOp<T>>, Vec<Var>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulCol(..) => "mul_col",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Relu(_) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Maximum(..) => "maximum",
            Op::Recip(_) => "recip",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::RowSum(_) => "row_sum",
            Op::RowDot(..) => "row_dot",
            Op::RowNorm(_) => "row_norm",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::StopGradient => "stop_gradient",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

enum SgTrace<T> {
    Record(Vec<Tensor<T>>),
    Replay { values: Vec<Tensor<T>>, cursor: usize },
}

/// Define-by-run computation graph. Every operation evaluates eagerly and is
/// appended in topological order; [`Graph::backward`] walks the list in
/// reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    sg: SgTrace<T>,
    policy: NonFinitePolicy,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_policy(NonFinitePolicy::default())
    }

    pub fn with_policy(policy: NonFinitePolicy) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            sg: SgTrace::Record(Vec::new()),
            policy,
        }
    }

    /// A graph whose `stop_gradient` nodes return previously recorded values
    /// in call order instead of their live inputs. Used by finite-difference
    /// checks so that stop-gradient subexpressions stay constant under
    /// perturbation.
    pub fn replaying(values: Vec<Tensor<T>>, policy: NonFinitePolicy) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            sg: SgTrace::Replay { values, cursor: 0 },
            policy,
        }
    }

    /// Values produced by `stop_gradient` so far, in call order.
    pub fn stop_gradient_trace(&self) -> &[Tensor<T>] {
        match &self.sg {
            SgTrace::Record(v) => v,
            SgTrace::Replay { values, .. } => values,
        }
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

    fn push(&mut self, op: Op<T>, mut value: Tensor<T>, needs_grad: bool) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            match self.policy {
                NonFinitePolicy::Error => {
                    return Err(AutodiffError::NonFinite {
                        node: id,
                        op: op.name(),
                    })
                }
                NonFinitePolicy::Clamp => {
                    log::warn!("non-finite output at node {id} ({}), clamping", op.name());
                    for x in value.data_mut() {
                        if x.is_nan() {
                            *x = T::zero();
                        } else if x.is_infinite() {
                            *x = x.signum() * T::max_value();
                        }
                    }
                }
            }
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: Some(self.nodes.len()),
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Leaf for a trainable parameter. Repeated calls for the same parameter
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let id_node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Param,
            value: store.get(id).clone(),
            needs_grad: true,
        });
        let v = Var(id_node);
        self.params.push((id, v));
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            needs_grad: false,
        });
        Var(id)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), v, ng)
    }

    /// `s - a`, elementwise.
    pub fn rsub_scalar(&mut self, s: T, a: Var) -> Result<Var, AutodiffError> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, s)
    }

    /// Multiplies each row of `a` (`[r, c]`) by the matching entry of `col` (`[r, 1]`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, AutodiffError> {
        let [r, c] = self.value(a).shape();
        if self.value(col).shape() != [r, 1] {
            return Err(self.mismatch("mul_col", a, col));
        }
        let (av, bv) = (self.value(a), self.value(col));
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let s = bv.get(i, 0);
            for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(i)) {
                *o = x * s;
            }
        }
        let ng = self.needs(a) || self.needs(col);
        self.push(Op::MulCol(a, col), out, ng)
    }

    /// Adds the row vector `row` (`[1, c]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let [r, c] = self.value(a).shape();
        if self.value(row).shape() != [1, c] {
            return Err(self.mismatch("add_row", a, row));
        }
        let (av, bv) = (self.value(a), self.value(row));
        let mut out = av.clone();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), out, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul(self.value(b)).map_err(|_| self.mismatch("matmul", a, b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(Op::Softplus(a), v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.needs(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.sin());
        let ng = self.needs(a);
        self.push(Op::Sin(a), v, ng)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.cos());
        let ng = self.needs(a);
        self.push(Op::Cos(a), v, ng)
    }

    /// Elementwise `max(a, 0)`.
    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.needs(a);
        self.push(Op::Clamp(a, lo, hi), v, ng)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("maximum", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y });
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Maximum(a, b), v, ng)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.recip());
        let ng = self.needs(a);
        self.push(Op::Recip(a), v, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let [r, ca] = self.value(a).shape();
        let [rb, cb] = self.value(b).shape();
        if r != rb {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(r, ca + cb, data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), out, ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let [r, c] = self.value(a).shape();
        if start >= end || end > c {
            return Err(AutodiffError::ShapeMismatch {
                node: Some(self.nodes.len()),
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.value(a).row(i)[start..end]);
        }
        let out = Tensor::new(r, end - start, data)?;
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start), out, ng)
    }

    /// Rows `idx[k]` of `a`, in order; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let [r, c] = self.value(a).shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::ShapeMismatch {
                node: Some(self.nodes.len()),
                op: "gather_rows",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        let out = Tensor::new(idx.len(), c, data)?;
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, Arc::new(idx.to_vec())), out, ng)
    }

    /// `[r, c] -> [r, 1]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().copied().sum()).collect();
        let out = Tensor::new(av.rows(), 1, data)?;
        let ng = self.needs(a);
        self.push(Op::RowSum(a), out, ng)
    }

    /// `[r, c] x [r, c] -> [r, 1]` per-row dot products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..av.rows()).map(|i| dot(av.row(i), bv.row(i))).collect();
        let out = Tensor::new(av.rows(), 1, data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::RowDot(a, b), out, ng)
    }

    /// `[r, c] -> [r, 1]` per-row Euclidean norms.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| dot(av.row(i), av.row(i)).sqrt()).collect();
        let out = Tensor::new(av.rows(), 1, data)?;
        let ng = self.needs(a);
        self.push(Op::RowNorm(a), out, ng)
    }

    /// Projects every row onto the unit sphere.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        let ng = self.needs(a);
        self.push(Op::NormalizeRows(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), out, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let out = Tensor::scalar(av.sum() / T::lit(av.len() as f64));
        let ng = self.needs(a);
        self.push(Op::Mean(a), out, ng)
    }

    /// Forwards the value of `a` unchanged and blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = match &mut self.sg {
            SgTrace::Record(rec) => {
                let v = self.nodes[a.0].value.clone();
                rec.push(v.clone());
                v
            }
            SgTrace::Replay { values, cursor } => {
                let v = values
                    .get(*cursor)
                    .cloned()
                    .ok_or(AutodiffError::ReplayExhausted { index: *cursor })?;
                *cursor += 1;
                if v.shape() != self.nodes[a.0].value.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        node: Some(self.nodes.len()),
                        op: "stop_gradient",
                        lhs: self.nodes[a.0].value.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                v
            }
        };
        self.push(Op::StopGradient, value, false)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals)?;
        let ng = inputs.iter().any(|v| self.needs(*v));
        self.push(Op::Custom(op, inputs.to_vec()), out, ng)
    }

    /// Reverse pass from the scalar `loss`, returning gradients for every
    /// node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Param | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || g.zip_map(bv, |x, y| x * y));
                self.acc(grads, *b, || g.zip_map(av, |x, y| x * y));
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.map(|x| x * *s)),
            Op::AddScalar(a) => self.acc(grads, *a, || g.clone()),
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                self.acc(grads, *a, || {
                    let mut out = g.clone();
                    for i in 0..out.rows() {
                        let s = cv.get(i, 0);
                        for x in out.row_mut(i) {
                            *x *= s;
                        }
                    }
                    out
                });
                self.acc(grads, *col, || {
                    let data = (0..g.rows()).map(|i| dot(g.row(i), av.row(i))).collect();
                    Tensor::new(g.rows(), 1, data).expect("shape")
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *row, || {
                    let mut out = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &x) in out.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    out
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(&mut ga, MatRef::new(g, false), MatRef::new(bv, true), T::zero());
                    add_into(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(&mut gb, MatRef::new(av, true), MatRef::new(g, false), T::zero());
                    add_into(grads, *b, gb);
                }
            }
            Op::Sigmoid(a) => self.acc(grads, *a, || g.zip_map(y, |g, s| g * s * (T::one() - s))),
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |g, x| g * sigmoid(x)))
            }
            Op::Exp(a) => self.acc(grads, *a, || g.zip_map(y, |g, e| g * e)),
            Op::Sin(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |g, x| g * x.cos()))
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |g, x| -g * x.sin()))
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    g.zip_map(av, |g, x| if x > T::zero() { g } else { T::zero() })
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    g.zip_map(av, |g, x| if x > *lo && x < *hi { g } else { T::zero() })
                })
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mask_a = av.zip_map(bv, |x, y| if x >= y { T::one() } else { T::zero() });
                self.acc(grads, *a, || g.zip_map(&mask_a, |g, m| g * m));
                self.acc(grads, *b, || g.zip_map(&mask_a, |g, m| g * (T::one() - m)));
            }
            Op::Recip(a) => self.acc(grads, *a, || g.zip_map(y, |g, r| -g * r * r)),
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                self.acc(grads, *a, || slice_cols(g, 0, ca));
                self.acc(grads, *b, || slice_cols(g, ca, ca + cb));
            }
            Op::GatherRows(a, idx) => {
                let [r, c] = self.value(*a).shape();
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &x) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    out
                });
            }
            Op::SliceCols(a, start) => {
                let [r, c] = self.value(*a).shape();
                let width = y.cols();
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.row_mut(i)[*start..*start + width].copy_from_slice(g.row(i));
                    }
                    out
                });
            }
            Op::RowSum(a) => {
                let [r, c] = self.value(*a).shape();
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        out.row_mut(i).iter_mut().for_each(|x| *x = gi);
                    }
                    out
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || scale_rows(bv, g));
                self.acc(grads, *b, || scale_rows(av, g));
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    let mut out = av.clone();
                    for i in 0..out.rows() {
                        let n = y.get(i, 0);
                        let s = if n > T::zero() { g.get(i, 0) / n } else { T::zero() };
                        out.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    out
                });
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let n = dot(av.row(i), av.row(i)).sqrt();
                        let yg = dot(y.row(i), g.row(i));
                        for ((o, &yy), &gg) in out.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
                            *o = (gg - yy * yg) / n;
                        }
                    }
                    out
                });
            }
            Op::Sum(a) => {
                let [r, c] = self.value(*a).shape();
                self.acc(grads, *a, || Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.value(*a).shape();
                let s = g.item() / T::lit((r * c) as f64);
                self.acc(grads, *a, || Tensor::full(r, c, s));
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let gs = op.backward(&vals, y, g, &needs);
                for ((v, gi), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        add_into(grads, *v, gi);
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.needs(v) {
            add_into(grads, v, f());
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn slice_cols<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.rows() * (end - start));
    for i in 0..t.rows() {
        data.extend_from_slice(&t.row(i)[start..end]);
    }
    Tensor::new(t.rows(), end - start, data).expect("slice shape")
}

/// Row `i` of `t` scaled by `s[i, 0]`.
fn scale_rows<T: Scalar>(t: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let k = s.get(i, 0);
        out.row_mut(i).iter_mut().for_each(|x| *x *= k);
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a node, if it depends on a parameter.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter used in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// `(parameter, gradient)` for every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(move |(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}
