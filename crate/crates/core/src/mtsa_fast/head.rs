use super::{AttentionConfig, DropoutMaskPair, ScoreDivisor, DENOM_EPS};
use crate::attn_ref::TsaParams;
use crate::masks::PositionalMask;
use crate::numkit::{add_column_inplace, masked_exp_inplace, matmul, matmul_tn, Matrix, Real};
use crate::{Error, Result};

fn check_inputs<T: Real>(
    op: &'static str,
    x: &Matrix<T>,
    mask: &PositionalMask<T>,
    params: &TsaParams<T>,
) -> Result<()> {
    params.validate()?;
    if x.rows() != params.d_e() {
        return Err(Error::dim(
            op,
            format!("input has {} features, params expect {}", x.rows(), params.d_e()),
        ));
    }
    if x.cols() == 0 {
        return Err(Error::dim(op, "empty sequence"));
    }
    if mask.n() != x.cols() {
        return Err(Error::dim(
            op,
            format!("mask is {0}x{0} for a sequence of {1}", mask.n(), x.cols()),
        ));
    }
    Ok(())
}

pub(crate) fn score_scale<T: Real>(divisor: ScoreDivisor, d_i: usize, d_h: usize) -> T {
    let d = match divisor {
        ScoreDivisor::KeyDim => d_i,
        ScoreDivisor::HeadDim => d_h,
    };
    T::one() / T::of(d as f64).sqrt()
}

/// Per-query maximum over the admissible keys, for each column of a
/// `[key, query]` score matrix. Columns without admissible keys get 0.
pub(crate) fn masked_column_max<T: Real>(scores: &Matrix<T>, mask: &PositionalMask<T>) -> Vec<T> {
    let mut max = vec![T::neg_infinity(); scores.cols()];
    for i in 0..scores.rows() {
        for (j, (mx, &v)) in max.iter_mut().zip(scores.row(i)).enumerate() {
            if mask.allows(i, j) && v > *mx {
                *mx = v;
            }
        }
    }
    for mx in &mut max {
        if *mx == T::neg_infinity() {
            *mx = T::zero();
        }
    }
    max
}

pub(crate) fn row_max<T: Real>(m: &Matrix<T>) -> Vec<T> {
    (0..m.rows())
        .map(|r| m.row(r).iter().fold(T::neg_infinity(), |a, &b| a.max(b)))
        .collect()
}

/// The denominator epsilon in shifted units. Subtracting the feature shift
/// `row` and query shift `col` scales numerator and denominator by
/// `exp(-(row + col))`; scaling the epsilon the same way keeps the output
/// equal to the unshifted formula, so it cannot depend on keys the query
/// never sees. Floored at the smallest positive value so an empty column
/// still divides to 0.
#[inline]
pub(crate) fn shifted_eps<T: Real>(row: T, col: T) -> T {
    (T::of(DENOM_EPS) * (-(row + col)).exp()).max(T::min_positive_value())
}

/// Scaled token2token scores `σ_t(kᵀq · scale)`, `[key, query]`, and the
/// raw source2token scores before `σ_s`.
fn scores<T: Real>(
    x: &Matrix<T>,
    params: &TsaParams<T>,
    cfg: &AttentionConfig,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let fns = cfg.fns;
    let q = matmul(&params.w_t1, x)?;
    let k = matmul(&params.w_t2, x)?;
    let mut t2t = matmul_tn(&k, &q)?;
    drop(q);
    let inv = score_scale(cfg.score_divisor, params.d_i(), params.d_h());
    t2t.map_inplace(|r| fns.sigma_t.apply(r * inv));

    let mut hidden = matmul(&params.w_s1, &k)?;
    drop(k);
    add_column_inplace(&mut hidden, &params.b_s1)?;
    hidden.map_inplace(|h| fns.sigma_m.apply(h));
    let mut s2t = matmul(&params.w_s2, &hidden)?;
    drop(hidden);
    add_column_inplace(&mut s2t, &params.b_s2)?;
    Ok((t2t, s2t))
}

/// One tensorized self-attention head evaluated with matrix products only;
/// no `n × n × d_h` tensor is ever formed. Output is `d_h × n`. Queries that
/// admit no key produce zero columns.
pub fn tsa_head_fast<T: Real>(
    x: &Matrix<T>,
    mask: &PositionalMask<T>,
    params: &TsaParams<T>,
    cfg: &AttentionConfig,
    dropout: Option<&DropoutMaskPair<T>>,
) -> Result<Matrix<T>> {
    check_inputs("tsa_head_fast", x, mask, params)?;
    let n = x.cols();
    if let Some(d) = dropout {
        if d.mask_x.shape() != (params.d_h(), n) || d.mask_r.shape() != (n, n) {
            return Err(Error::dim("tsa_head_fast", "dropout masks do not match the head"));
        }
    }
    let sigma_s = cfg.fns.sigma_s;
    let (mut e_r, mut e_s) = scores(x, params, cfg)?;
    e_s.map_inplace(|s| sigma_s.apply(s));
    let mut shifts = None;
    if cfg.stabilize_enabled() {
        let col = masked_column_max(&e_r, mask);
        for i in 0..n {
            for (v, &m) in e_r.row_mut(i).iter_mut().zip(&col) {
                *v -= m;
            }
        }
        let row = row_max(&e_s);
        for (l, &m) in row.iter().enumerate() {
            e_s.row_mut(l).iter_mut().for_each(|v| *v -= m);
        }
        shifts = Some((row, col));
    }
    masked_exp_inplace(&mut e_r, mask.multiplicative())?;
    e_s.map_inplace(|s| s.exp());

    let mut e_x = matmul(&params.w_t3, x)?;
    e_x.zip_inplace(&e_s, |v, s| v * s)?;
    let den = matmul(&e_s, &e_r)?;
    drop(e_s);
    if let Some(d) = dropout {
        e_x.zip_inplace(&d.mask_x, |a, b| a * b)?;
        e_r.zip_inplace(&d.mask_r, |a, b| a * b)?;
    }
    let mut out = matmul(&e_x, &e_r)?;
    drop(e_x);
    drop(e_r);
    match &shifts {
        Some((row, col)) => {
            for (l, &m) in row.iter().enumerate() {
                let den_row = den.row(l);
                for ((o, &d), &c) in out.row_mut(l).iter_mut().zip(den_row).zip(col) {
                    *o /= d + shifted_eps(m, c);
                }
            }
        }
        None => {
            let eps = T::of(DENOM_EPS);
            out.zip_inplace(&den, |a, b| a / (b + eps))?;
        }
    }
    if !out.is_finite() {
        return Err(Error::numeric(
            "tsa_head_fast",
            "non-finite head output; enable stabilization",
        ));
    }
    Ok(out)
}

/// Attention weights of one head for inspection.
#[derive(Debug, Clone)]
pub struct HeadTrace<T: Real> {
    /// `n × n`, `[key, query]`; every admissible column sums to 1.
    pub token2token: Matrix<T>,
    /// `d_h × n` source2token scores before the scale function.
    pub source2token: Matrix<T>,
}

/// Token2token weights normalized per query (always computed with the
/// column shift) together with the raw source2token scores.
pub fn tsa_head_trace<T: Real>(
    x: &Matrix<T>,
    mask: &PositionalMask<T>,
    params: &TsaParams<T>,
    cfg: &AttentionConfig,
) -> Result<HeadTrace<T>> {
    check_inputs("tsa_head_trace", x, mask, params)?;
    let (mut t2t, s2t) = scores(x, params, cfg)?;
    let col = masked_column_max(&t2t, mask);
    for i in 0..t2t.rows() {
        for (v, &m) in t2t.row_mut(i).iter_mut().zip(&col) {
            *v -= m;
        }
    }
    masked_exp_inplace(&mut t2t, mask.multiplicative())?;
    let mut sums = vec![T::zero(); t2t.cols()];
    for i in 0..t2t.rows() {
        for (s, &v) in sums.iter_mut().zip(t2t.row(i)) {
            *s += v;
        }
    }
    for i in 0..t2t.rows() {
        for (v, &s) in t2t.row_mut(i).iter_mut().zip(&sums) {
            if s > T::zero() {
                *v /= s;
            }
        }
    }
    Ok(HeadTrace {
        token2token: t2t,
        source2token: s2t,
    })
}
