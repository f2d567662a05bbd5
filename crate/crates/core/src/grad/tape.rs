use std::collections::BTreeMap;
use std::sync::Arc;

use crate::masks::PositionalMask;
use crate::numkit::{
    activation, add_column_inplace, masked_exp_inplace, matmul, matmul_nt, matmul_tn, row_softmax,
    Activation, Matrix,
};
use crate::{Error, Result};

/// Named parameter values.
pub type ParamMap = BTreeMap<String, Matrix<f64>>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivEps(Var, Var, f64),
    AddColumn(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    Exp(Var),
    MaskedExp(Var, Arc<PositionalMask<f64>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    SumRows(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix<f64>,
}

/// Records matrix operations in execution order for reverse-mode
/// differentiation. Every node's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients keyed by parameter name, shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    grads: BTreeMap<String, Matrix<f64>>,
}

impl GradientSet {
    pub fn from_map(grads: BTreeMap<String, Matrix<f64>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<f64>)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Matrix<f64>> {
        self.grads
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().map(|m| m.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|m| m.is_finite())
    }
}

fn binary_same_shape(op: &'static str, a: &Matrix<f64>, b: &Matrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip(
    op: &'static str,
    a: &Matrix<f64>,
    b: &Matrix<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Matrix<f64>> {
    binary_same_shape(op, a, b)?;
    let mut out = a.clone();
    out.zip_inplace(b, f)?;
    Ok(out)
}

fn row_sums(m: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum())
}

pub(crate) fn cross_entropy(logits: &Matrix<f64>, labels: &[usize]) -> Result<(f64, Matrix<f64>)> {
    let (classes, batch) = logits.shape();
    if labels.len() != batch || batch == 0 {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {batch} columns", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::dim(
            "cross_entropy",
            format!("label {bad} with {classes} classes"),
        ));
    }
    let probs = row_softmax(&logits.transpose())?.transpose();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let col = logits.col(b);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - col[label];
    }
    Ok((total / batch as f64, probs))
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Matrix<f64>> {
    let val = |v: &Var| &nodes[v.0].value;
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::MatMul(a, b) => matmul(val(a), val(b))?,
        Op::MatMulTn(a, b) => matmul_tn(val(a), val(b))?,
        Op::Add(a, b) => zip("add", val(a), val(b), |x, y| x + y)?,
        Op::Sub(a, b) => zip("sub", val(a), val(b), |x, y| x - y)?,
        Op::Mul(a, b) => zip("mul", val(a), val(b), |x, y| x * y)?,
        Op::DivEps(a, b, eps) => zip("div_eps", val(a), val(b), |x, y| x / (y + eps))?,
        Op::AddColumn(a, b) => {
            let mut out = val(a).clone();
            add_column_inplace(&mut out, val(b))?;
            out
        }
        Op::Scale(a, c) => val(a).scale(*c),
        Op::Activation(a, act) => activation(*act, val(a)),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::MaskedExp(a, mask) => {
            let mut out = val(a).clone();
            masked_exp_inplace(&mut out, mask.multiplicative())?;
            out
        }
        Op::ConcatRows(parts) => {
            let refs: Vec<&Matrix<f64>> = parts.iter().map(val).collect();
            Matrix::vstack(&refs)?
        }
        Op::ConcatCols(parts) => {
            let refs: Vec<&Matrix<f64>> = parts.iter().map(val).collect();
            Matrix::hstack(&refs)?
        }
        Op::GatherCols(a, idx) => val(a).select_cols(idx)?,
        Op::SoftmaxRows(a) => row_softmax(val(a))?,
        Op::SumRows(a) => row_sums(val(a)),
        Op::Sum(a) => Matrix::filled(1, 1, val(a).sum()),
        Op::CrossEntropy(a, labels) => Matrix::filled(1, 1, cross_entropy(val(a), labels)?.0),
    })
}

fn accumulate(adj: &mut [Option<Matrix<f64>>], v: Var, g: Matrix<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc
            .zip_inplace(&g, |a, b| a + b)
            .expect("adjoint shapes are fixed by the forward pass"),
        slot => *slot = Some(g),
    }
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

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient entry.
    pub fn constant(&mut self, value: Matrix<f64>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable leaf. Registering a name twice returns the first
    /// handle, so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, value: &Matrix<f64>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.constant(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn value(&self, v: Var) -> &Matrix<f64> {
        &self.nodes[v.0].value
    }

    /// Replaces a leaf's value; call [`Tape::replay`] afterwards.
    pub fn set_value(&mut self, v: Var, value: Matrix<f64>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Config("only leaves can be reassigned".into()));
        }
        binary_same_shape("set_value", &node.value, &value)?;
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node from the current leaves with the same
    /// kernels used while recording.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !matches!(node.op, Op::Leaf) {
                node.value = eval(&node.op, done)?;
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `aᵀ b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulTn(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `a ⊘ (b + eps)`.
    pub fn div_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.push(Op::DivEps(a, b, eps))
    }

    /// Adds a column vector to every column.
    pub fn add_column(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddColumn(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.push(Op::Activation(a, act))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    /// `exp(a)` where the mask admits the pair, exactly 0 elsewhere.
    pub fn masked_exp(&mut self, a: Var, mask: Arc<PositionalMask<f64>>) -> Result<Var> {
        self.push(Op::MaskedExp(a, mask))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// Columns of `a` at `idx`, repeats allowed; an embedding lookup.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.push(Op::GatherCols(a, idx.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Sum over columns, giving a column vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Mean softmax cross-entropy of the logit columns against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, labels.to_vec()))
    }

    /// Reverse sweep from a `1 × 1` node. Every registered parameter must
    /// be reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradientSet> {
        let adj = self.adjoints(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &v) in &self.params {
            match adj.get(v.0).and_then(|g| g.as_ref()) {
                Some(g) => {
                    grads.insert(name.clone(), g.clone());
                }
                None => return Err(Error::DetachedParameter(name.clone())),
            }
        }
        Ok(GradientSet { grads })
    }

    /// Gradient of `loss` with respect to any earlier node, or `None` if the
    /// node does not reach it.
    pub fn gradient_of(&self, loss: Var, v: Var) -> Result<Option<Matrix<f64>>> {
        let mut adj = self.adjoints(loss)?;
        Ok(adj.get_mut(v.0).and_then(Option::take))
    }

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Matrix<f64>>>> {
        let (rows, cols) = self.nodes[loss.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut adj: Vec<Option<Matrix<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::ones(1, 1));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &Matrix<f64>, adj: &mut [Option<Matrix<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(adj, *a, matmul_nt(g, val(b))?);
                accumulate(adj, *b, matmul_tn(val(a), g)?);
            }
            Op::MatMulTn(a, b) => {
                accumulate(adj, *a, matmul_nt(val(b), g)?);
                accumulate(adj, *b, matmul(val(a), g)?);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, zip("mul", g, val(b), |x, y| x * y)?);
                accumulate(adj, *b, zip("mul", g, val(a), |x, y| x * y)?);
            }
            Op::DivEps(a, b, eps) => {
                let den = val(b).map(|d| d + eps);
                accumulate(adj, *a, zip("div_eps", g, &den, |x, d| x / d)?);
                let mut db = zip("div_eps", g, y, |x, q| -x * q)?;
                db.zip_inplace(&den, |x, d| x / d)?;
                accumulate(adj, *b, db);
            }
            Op::AddColumn(a, bias) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *bias, row_sums(g));
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.scale(*c)),
            Op::Activation(a, act) => {
                let x = val(a);
                let mut d = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    act.derivative(x.get(r, c), y.get(r, c))
                });
                d.zip_inplace(g, |dv, gv| dv * gv)?;
                accumulate(adj, *a, d);
            }
            Op::Exp(a) | Op::MaskedExp(a, _) => {
                accumulate(adj, *a, zip("exp", g, y, |x, e| x * e)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).rows();
                    accumulate(adj, *p, g.slice_rows(start, rows)?);
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = val(p).cols();
                    let idx: Vec<usize> = (start..start + cols).collect();
                    accumulate(adj, *p, g.select_cols(&idx)?);
                    start += cols;
                }
            }
            Op::GatherCols(a, idx) => {
                let mut d = Matrix::zeros(val(a).rows(), val(a).cols());
                for (k, &col) in idx.iter().enumerate() {
                    for r in 0..d.rows() {
                        let cur = d.get(r, col);
                        d.set(r, col, cur + g.get(r, k));
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − Σ g⊙y) per row
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dst, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dst = yv * (gv - dot);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SumRows(a) => {
                let x = val(a);
                accumulate(adj, *a, Matrix::from_fn(x.rows(), x.cols(), |r, _| g.get(r, 0)));
            }
            Op::Sum(a) => {
                let x = val(a);
                accumulate(adj, *a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)));
            }
            Op::CrossEntropy(a, labels) => {
                let (_, mut probs) = cross_entropy(val(a), labels)?;
                for (b, &l) in labels.iter().enumerate() {
                    probs.set(l, b, probs.get(l, b) - 1.0);
                }
                let s = g.get(0, 0) / labels.len() as f64;
                accumulate(adj, *a, probs.scale(s));
            }
        }
        Ok(())
    }
}
