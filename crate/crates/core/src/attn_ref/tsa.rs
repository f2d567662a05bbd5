use super::{ScaleFns, TsaParams};
use crate::masks::PositionalMask;
use crate::numkit::{add_column_inplace, column_softmax, matmul, matmul_tn, Matrix, Real};
use crate::{Error, Result};

/// Everything the naive path materializes for one head: the score tensor
/// and the probability tensor, each stored as `d_h` stacked `n × n` slices
/// indexed `[key, query]`, plus the head output.
#[derive(Debug)]
pub struct TsaTensors<T: Real> {
    pub scores: Vec<Matrix<T>>,
    pub probs: Vec<Matrix<T>>,
    pub output: Matrix<T>,
}

/// Tensorized self-attention computed the direct way. Output is `d_h × n`.
pub fn tsa_naive<T: Real>(
    x: &Matrix<T>,
    mask: &PositionalMask<T>,
    params: &TsaParams<T>,
    fns: ScaleFns,
) -> Result<Matrix<T>> {
    Ok(tsa_naive_probs(x, mask, params, fns)?.output)
}

/// [`tsa_naive`] returning the materialized tensors as well.
pub fn tsa_naive_probs<T: Real>(
    x: &Matrix<T>,
    mask: &PositionalMask<T>,
    params: &TsaParams<T>,
    fns: ScaleFns,
) -> Result<TsaTensors<T>> {
    params.validate()?;
    let n = x.cols();
    if x.rows() != params.d_e() {
        return Err(Error::dim(
            "tsa_naive",
            format!("input has {} features, params expect {}", x.rows(), params.d_e()),
        ));
    }
    if mask.n() != n {
        return Err(Error::dim("tsa_naive", "mask length differs from sequence"));
    }
    let q = matmul(&params.w_t1, x)?;
    let k = matmul(&params.w_t2, x)?;
    let v = matmul(&params.w_t3, x)?;

    // token2token: <k_i, q_j> / sqrt(d_i), laid out [key, query]
    let inv = T::one() / T::of(params.d_i() as f64).sqrt();
    let mut t2t = matmul_tn(&k, &q)?;
    t2t.map_inplace(|r| fns.sigma_t.apply(r * inv));

    // source2token: W_s2 σ_m(W_s1 k + b_s1) + b_s2, one column per key
    let mut hidden = matmul(&params.w_s1, &k)?;
    add_column_inplace(&mut hidden, &params.b_s1)?;
    hidden.map_inplace(|h| fns.sigma_m.apply(h));
    let mut s2t = matmul(&params.w_s2, &hidden)?;
    add_column_inplace(&mut s2t, &params.b_s2)?;
    s2t.map_inplace(|s| fns.sigma_s.apply(s));

    let d_h = params.d_h();
    let additive = mask.additive();
    let scores: Vec<Matrix<T>> = (0..d_h)
        .map(|l| {
            Matrix::from_fn(n, n, |i, j| {
                t2t.get(i, j) + s2t.get(l, i) + additive.get(i, j)
            })
        })
        .collect();
    let probs = scores
        .iter()
        .map(|f| column_softmax(f, true))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Numeric { detail, .. } => Error::numeric("tsa_naive", detail),
            other => other,
        })?;

    let mut output = Matrix::zeros(d_h, n);
    for (l, p) in probs.iter().enumerate() {
        let row_v = Matrix::from_vec(1, n, v.row(l).to_vec())?;
        let s = matmul(&row_v, p)?;
        output.row_mut(l).copy_from_slice(s.as_slice());
    }
    Ok(TsaTensors {
        scores,
        probs,
        output,
    })
}

/// Naive multi-mask composition: `W_o · [TSA_1(x, M_1); …; TSA_h(x, M_h)]`.
pub fn mtsa_naive<T: Real>(
    x: &Matrix<T>,
    heads: &[TsaParams<T>],
    masks: &[&PositionalMask<T>],
    w_o: &Matrix<T>,
    fns: ScaleFns,
) -> Result<Matrix<T>> {
    if heads.is_empty() || heads.len() != masks.len() {
        return Err(Error::dim(
            "mtsa_naive",
            format!("{} heads, {} masks", heads.len(), masks.len()),
        ));
    }
    let outs = heads
        .iter()
        .zip(masks)
        .map(|(p, m)| tsa_naive(x, m, p, fns))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix<T>> = outs.iter().collect();
    let concat = Matrix::vstack(&refs)?;
    if w_o.shape() != (concat.rows(), concat.rows()) {
        return Err(Error::dim("mtsa_naive", "W_o must be square with side h·d_h"));
    }
    matmul(w_o, &concat)
}
