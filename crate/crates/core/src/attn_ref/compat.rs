use crate::masks::{MaskKind, PositionalMask};
use crate::numkit::{
    add_column_inplace, glorot_init, matmul, row_softmax, softmax_slice_inplace, Activation,
    Matrix, Real, Rng,
};
use crate::{Error, Result};

/// `⟨W_d1 x_i, W_d2 q⟩`.
#[derive(Debug, Clone)]
pub struct DotCompat<T: Real> {
    pub w_d1: Matrix<T>,
    pub w_d2: Matrix<T>,
}

/// `wᵀ σ_a(W_a [x_i; q] + b_a) + b`.
#[derive(Debug, Clone)]
pub struct AdditiveCompat<T: Real> {
    pub w_a: Matrix<T>,
    pub w: Matrix<T>,
    pub b_a: Matrix<T>,
    pub b: T,
    pub sigma_a: Activation,
}

/// Additive compatibility with `wᵀ` widened to a `d_e × d_a` matrix, one
/// score per feature.
#[derive(Debug, Clone)]
pub struct MultiDimCompat<T: Real> {
    pub w_a: Matrix<T>,
    pub w: Matrix<T>,
    pub b_a: Matrix<T>,
    pub b: Matrix<T>,
    pub sigma_a: Activation,
}

/// `c · tanh((W_m [x_i; x_j] + b_m) / c) + M_ij`, one score per feature.
#[derive(Debug, Clone)]
pub struct MaskedCompat<T: Real> {
    pub w_m: Matrix<T>,
    pub b_m: Matrix<T>,
    pub c: T,
}

impl<T: Real> MaskedCompat<T> {
    pub const DEFAULT_C: f64 = 5.0;

    pub fn init(d_e: usize, rng: &mut Rng) -> Self {
        Self {
            w_m: glorot_init(d_e, 2 * d_e, rng),
            b_m: Matrix::zeros(d_e, 1),
            c: T::of(Self::DEFAULT_C),
        }
    }
}

#[derive(Debug, Clone)]
pub enum CompatParams<T: Real> {
    Dot(DotCompat<T>),
    Additive(AdditiveCompat<T>),
    MultiDim(MultiDimCompat<T>),
    Masked(MaskedCompat<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Score<T> {
    Scalar(T),
    Vector(Vec<T>),
}

fn matvec<T: Real>(w: &Matrix<T>, x: &[T], op: &'static str) -> Result<Vec<T>> {
    if w.cols() != x.len() {
        return Err(Error::dim(
            op,
            format!("{}x{} weight on a {}-vector", w.rows(), w.cols(), x.len()),
        ));
    }
    Ok((0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect())
}

fn concat<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().chain(b).copied().collect()
}

fn check_bias<T: Real>(b: &Matrix<T>, rows: usize, op: &'static str) -> Result<()> {
    if b.shape() != (rows, 1) {
        return Err(Error::dim(op, format!("bias {:?}, expected ({rows}, 1)", b.shape())));
    }
    Ok(())
}

/// Alignment score of token `x_i` against query `q`. The masked variant
/// needs the mask entry `m_ij`; the others add it when given.
pub fn compat_score<T: Real>(
    params: &CompatParams<T>,
    x_i: &[T],
    q: &[T],
    m_ij: Option<T>,
) -> Result<Score<T>> {
    let m = m_ij.unwrap_or_else(T::zero);
    match params {
        CompatParams::Dot(p) => {
            let a = matvec(&p.w_d1, x_i, "compat_score(dot)")?;
            let b = matvec(&p.w_d2, q, "compat_score(dot)")?;
            if a.len() != b.len() {
                return Err(Error::dim("compat_score(dot)", "projection widths differ"));
            }
            Ok(Score::Scalar(
                a.iter().zip(&b).map(|(&x, &y)| x * y).sum::<T>() + m,
            ))
        }
        CompatParams::Additive(p) => {
            let mut h = matvec(&p.w_a, &concat(x_i, q), "compat_score(additive)")?;
            check_bias(&p.b_a, h.len(), "compat_score(additive)")?;
            check_bias(&p.w, h.len(), "compat_score(additive)")?;
            for (r, v) in h.iter_mut().enumerate() {
                *v = p.sigma_a.apply(*v + p.b_a.get(r, 0));
            }
            let s: T = h.iter().enumerate().map(|(r, &v)| p.w.get(r, 0) * v).sum();
            Ok(Score::Scalar(s + p.b + m))
        }
        CompatParams::MultiDim(p) => {
            let mut h = matvec(&p.w_a, &concat(x_i, q), "compat_score(multidim)")?;
            check_bias(&p.b_a, h.len(), "compat_score(multidim)")?;
            for (r, v) in h.iter_mut().enumerate() {
                *v = p.sigma_a.apply(*v + p.b_a.get(r, 0));
            }
            let mut s = matvec(&p.w, &h, "compat_score(multidim)")?;
            check_bias(&p.b, s.len(), "compat_score(multidim)")?;
            for (r, v) in s.iter_mut().enumerate() {
                *v += p.b.get(r, 0) + m;
            }
            Ok(Score::Vector(s))
        }
        CompatParams::Masked(p) => {
            let m = m_ij.ok_or_else(|| {
                Error::Config("masked compatibility needs the mask entry M_ij".into())
            })?;
            let mut s = matvec(&p.w_m, &concat(x_i, q), "compat_score(masked)")?;
            check_bias(&p.b_m, s.len(), "compat_score(masked)")?;
            for (r, v) in s.iter_mut().enumerate() {
                *v = p.c * ((*v + p.b_m.get(r, 0)) / p.c).tanh() + m;
            }
            Ok(Score::Vector(s))
        }
    }
}

/// Multi-dim masked self-attention: for each query `j` and feature `l`,
/// softmax over keys `i` of the masked scores, then the weighted sum of `x`.
pub fn masked_self_attention<T: Real>(
    x: &Matrix<T>,
    mask: &PositionalMask<T>,
    params: &MaskedCompat<T>,
) -> Result<Matrix<T>> {
    let (d_e, n) = x.shape();
    if mask.n() != n {
        return Err(Error::dim("masked_self_attention", "mask length differs from sequence"));
    }
    if params.w_m.shape() != (d_e, 2 * d_e) {
        return Err(Error::dim("masked_self_attention", "W_m must be d_e x 2d_e"));
    }
    check_bias(&params.b_m, d_e, "masked_self_attention")?;
    // W_m [x_i; x_j] = W_left x_i + W_right x_j
    let left = Matrix::from_fn(d_e, d_e, |r, c| params.w_m.get(r, c));
    let right = Matrix::from_fn(d_e, d_e, |r, c| params.w_m.get(r, d_e + c));
    let a = matmul(&left, x)?;
    let b = matmul(&right, x)?;
    let c = params.c;
    let mut out = Matrix::zeros(d_e, n);
    let mut scores = vec![T::zero(); n];
    for j in 0..n {
        for l in 0..d_e {
            for (i, s) in scores.iter_mut().enumerate() {
                let pre = a.get(l, i) + b.get(l, j) + params.b_m.get(l, 0);
                *s = c * (pre / c).tanh() + mask.additive().get(i, j);
            }
            softmax_slice_inplace(&mut scores);
            let v: T = scores.iter().enumerate().map(|(i, &p)| p * x.get(l, i)).sum();
            out.set(l, j, v);
        }
    }
    Ok(out)
}

/// Forward- and backward-masked self-attention stacked vertically.
pub fn disa<T: Real>(
    x: &Matrix<T>,
    params_fw: &MaskedCompat<T>,
    params_bw: &MaskedCompat<T>,
) -> Result<Matrix<T>> {
    let n = x.cols();
    let fw = masked_self_attention(x, &PositionalMask::new(MaskKind::Forward, n)?, params_fw)?;
    let bw = masked_self_attention(x, &PositionalMask::new(MaskKind::Backward, n)?, params_bw)?;
    Matrix::vstack(&[&fw, &bw])
}

/// Multi-dim source2token scorer `W_s2 σ_m(W_s1 x + b_s1) + b_s2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Source2Token<T: Real> {
    pub w_s1: Matrix<T>,
    pub b_s1: Matrix<T>,
    pub w_s2: Matrix<T>,
    pub b_s2: Matrix<T>,
    pub sigma_m: Activation,
}

impl<T: Real> Source2Token<T> {
    pub fn init(d: usize, d_a: usize, sigma_m: Activation, rng: &mut Rng) -> Self {
        Self {
            w_s1: glorot_init(d_a, d, rng),
            b_s1: Matrix::zeros(d_a, 1),
            w_s2: glorot_init(d, d_a, rng),
            b_s2: Matrix::zeros(d, 1),
            sigma_m,
        }
    }

    /// Feature-wise scores, one column per token.
    pub fn scores(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = matmul(&self.w_s1, x)?;
        add_column_inplace(&mut h, &self.b_s1)?;
        let act = self.sigma_m;
        h.map_inplace(|v| act.apply(v));
        let mut s = matmul(&self.w_s2, &h)?;
        add_column_inplace(&mut s, &self.b_s2)?;
        Ok(s)
    }
}

/// Sentence embedding: per feature `l`, softmax over tokens of the
/// source2token scores, then the weighted sum of row `l` of `x`. Returns a
/// `d × 1` column.
pub fn source2token_pool<T: Real>(x: &Matrix<T>, params: &Source2Token<T>) -> Result<Matrix<T>> {
    let scores = params.scores(x)?;
    if scores.rows() != x.rows() {
        return Err(Error::dim(
            "source2token_pool",
            format!("scores have {} rows for {} features", scores.rows(), x.rows()),
        ));
    }
    let probs = row_softmax(&scores)?;
    Ok(Matrix::from_fn(x.rows(), 1, |l, _| {
        probs
            .row(l)
            .iter()
            .zip(x.row(l))
            .map(|(&p, &v)| p * v)
            .sum()
    }))
}
