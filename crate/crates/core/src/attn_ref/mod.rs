//! Reference attention: plain attention, the compatibility functions,
//! scaled dot-product and multi-head attention, masked self-attention,
//! directional composition, source2token pooling, and the naive tensorized
//! self-attention that materializes every `(key, query, feature)` score.
//!
//! Everything here favours directness over speed; it is the oracle the
//! matrix-only path in [`crate::mtsa_fast`] is checked against.

mod compat;
mod tsa;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use compat::{
    compat_score, disa, masked_self_attention, source2token_pool, AdditiveCompat, CompatParams,
    DotCompat, MaskedCompat, MultiDimCompat, Score, Source2Token,
};
pub use tsa::{mtsa_naive, tsa_naive, tsa_naive_probs, TsaTensors};

use crate::numkit::{column_softmax, glorot_init, matmul, matmul_tn, Activation, Matrix, Real, Rng};
use crate::{Error, Result};

/// Scale function applied to a score before the scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFn {
    LogSigmoid,
    Identity,
}

impl ScaleFn {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        self.activation().apply(x)
    }

    pub fn activation(self) -> Activation {
        match self {
            ScaleFn::LogSigmoid => Activation::LogSigmoid,
            ScaleFn::Identity => Activation::Identity,
        }
    }
}

impl fmt::Display for ScaleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.activation().name())
    }
}

impl FromStr for ScaleFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_sigmoid" => Ok(ScaleFn::LogSigmoid),
            "identity" => Ok(ScaleFn::Identity),
            other => Err(Error::Config(format!(
                "scale function must be log_sigmoid or identity, got `{other}`"
            ))),
        }
    }
}

/// `sigma_t` scales token2token scores, `sigma_s` source2token scores and
/// `sigma_m` is the hidden activation inside the source2token scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleFns {
    pub sigma_t: ScaleFn,
    pub sigma_s: ScaleFn,
    pub sigma_m: Activation,
}

impl Default for ScaleFns {
    fn default() -> Self {
        Self {
            sigma_t: ScaleFn::LogSigmoid,
            sigma_s: ScaleFn::Identity,
            sigma_m: Activation::Relu,
        }
    }
}

/// Weights of one tensorized self-attention block. Biases are stored as
/// column vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TsaParams<T: Real> {
    pub w_t1: Matrix<T>,
    pub w_t2: Matrix<T>,
    pub w_t3: Matrix<T>,
    pub w_s1: Matrix<T>,
    pub b_s1: Matrix<T>,
    pub w_s2: Matrix<T>,
    pub b_s2: Matrix<T>,
}

/// Field names in declaration order; used for serialization and gradients.
pub const TSA_PARAM_NAMES: [&str; 7] = ["w_t1", "w_t2", "w_t3", "w_s1", "b_s1", "w_s2", "b_s2"];

impl<T: Real> TsaParams<T> {
    /// Glorot weights, zero biases.
    pub fn init(d_e: usize, d_i: usize, d_h: usize, d_a: usize, rng: &mut Rng) -> Self {
        Self {
            w_t1: glorot_init(d_i, d_e, rng),
            w_t2: glorot_init(d_i, d_e, rng),
            w_t3: glorot_init(d_h, d_e, rng),
            w_s1: glorot_init(d_a, d_i, rng),
            b_s1: Matrix::zeros(d_a, 1),
            w_s2: glorot_init(d_h, d_a, rng),
            b_s2: Matrix::zeros(d_h, 1),
        }
    }

    pub fn d_e(&self) -> usize {
        self.w_t1.cols()
    }

    pub fn d_i(&self) -> usize {
        self.w_t1.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w_t3.rows()
    }

    pub fn d_a(&self) -> usize {
        self.w_s1.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_e, d_i, d_h, d_a) = (self.d_e(), self.d_i(), self.d_h(), self.d_a());
        let expect = [
            ("w_t1", &self.w_t1, (d_i, d_e)),
            ("w_t2", &self.w_t2, (d_i, d_e)),
            ("w_t3", &self.w_t3, (d_h, d_e)),
            ("w_s1", &self.w_s1, (d_a, d_i)),
            ("b_s1", &self.b_s1, (d_a, 1)),
            ("w_s2", &self.w_s2, (d_h, d_a)),
            ("b_s2", &self.b_s2, (d_h, 1)),
        ];
        if d_e == 0 || d_i == 0 || d_h == 0 || d_a == 0 {
            return Err(Error::dim("TsaParams", "all dimensions must be >= 1"));
        }
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::dim(
                    "TsaParams",
                    format!("{name} is {:?}, expected {shape:?}", m.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Matrix<T>); 7] {
        [
            ("w_t1", &self.w_t1),
            ("w_t2", &self.w_t2),
            ("w_t3", &self.w_t3),
            ("w_s1", &self.w_s1),
            ("b_s1", &self.b_s1),
            ("w_s2", &self.w_s2),
            ("b_s2", &self.b_s2),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 7] {
        [
            ("w_t1", &mut self.w_t1),
            ("w_t2", &mut self.w_t2),
            ("w_t3", &mut self.w_t3),
            ("w_s1", &mut self.w_s1),
            ("b_s1", &mut self.b_s1),
            ("w_s2", &mut self.w_s2),
            ("b_s2", &mut self.b_s2),
        ]
    }

    pub fn cast<U: Real>(&self) -> TsaParams<U> {
        TsaParams {
            w_t1: self.w_t1.cast(),
            w_t2: self.w_t2.cast(),
            w_t3: self.w_t3.cast(),
            w_s1: self.w_s1.cast(),
            b_s1: self.b_s1.cast(),
            w_s2: self.w_s2.cast(),
            b_s2: self.b_s2.cast(),
        }
    }
}

/// Softmax-weighted sum of the columns of `values`.
pub fn attend<T: Real>(scores: &[T], values: &Matrix<T>) -> Result<Vec<T>> {
    if scores.len() != values.cols() {
        return Err(Error::dim(
            "attend",
            format!("{} scores for {} values", scores.len(), values.cols()),
        ));
    }
    let probs = column_softmax(&Matrix::column(scores), true)?;
    let mut out = vec![T::zero(); values.rows()];
    for (i, &p) in probs.as_slice().iter().enumerate() {
        for (o, r) in out.iter_mut().zip(0..values.rows()) {
            *o += p * values.get(r, i);
        }
    }
    Ok(out)
}

/// `v · softmax(qᵀk / √d_i)ᵀ`, normalizing over keys for every query.
/// `q` is `d_i × m`, `k` is `d_i × n`, `v` is `d_h × n`; the result is `d_h × m`.
pub fn scaled_dot_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    scaled_dot_attention_masked(q, k, v, None)
}

/// As [`scaled_dot_attention`] with an optional additive `n × m` mask laid
/// out key-by-query.
pub fn scaled_dot_attention_masked<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: Option<&Matrix<T>>,
) -> Result<Matrix<T>> {
    if q.rows() != k.rows() || k.cols() != v.cols() {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!(
                "q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    let scale = T::one() / T::of(q.rows() as f64).sqrt();
    // key-by-query scores, so the softmax runs down each column
    let mut scores = matmul_tn(k, q)?;
    scores.map_inplace(|x| x * scale);
    if let Some(m) = mask {
        scores.zip_inplace(m, |s, a| s + a)?;
    }
    let probs = column_softmax(&scores, true)?;
    matmul(v, &probs)
}

/// Per-head projections for [`multi_head_attention`].
#[derive(Debug, Clone)]
pub struct HeadProjection<T: Real> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

/// `W_o · [H_1; …; H_h]` with `H_c` the scaled dot-product attention of the
/// projected inputs.
pub fn multi_head_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: &[HeadProjection<T>],
    w_o: &Matrix<T>,
) -> Result<Matrix<T>> {
    if heads.is_empty() {
        return Err(Error::dim("multi_head_attention", "no heads"));
    }
    let outs = heads
        .iter()
        .map(|h| {
            scaled_dot_attention(
                &matmul(&h.w_q, q)?,
                &matmul(&h.w_k, k)?,
                &matmul(&h.w_v, v)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix<T>> = outs.iter().collect();
    let concat = Matrix::vstack(&refs)?;
    if w_o.cols() != concat.rows() {
        return Err(Error::dim(
            "multi_head_attention",
            format!("W_o has {} cols, heads give {}", w_o.cols(), concat.rows()),
        ));
    }
    matmul(w_o, &concat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn attend_cases() {
        let v = Matrix::<f64>::from_rows(&[&[1.0, 3.0], &[2.0, -4.0]]);
        assert_eq!(attend(&[0.0, 0.0], &v).unwrap(), vec![2.0, -1.0]);
        let s = attend(&[50.0, -50.0], &v).unwrap();
        assert!((s[0] - 1.0).abs() <= 1e-12 && (s[1] - 2.0).abs() <= 1e-12);
        assert!(attend(&[0.0], &v).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn attend_matches_loop() {
        let mut rng = Rng::new(31);
        let v = random(3, 5, &mut rng);
        let scores: Vec<f64> = (0..5).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let got = attend(&scores, &v).unwrap();
        for r in 0..3 {
            let want: f64 = (0..5).map(|i| scores[i].exp() / z * v.get(r, i)).sum();
            assert!((got[r] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn scaled_dot_single_key_and_uniform_keys() {
        let mut rng = Rng::new(2);
        let q = random(3, 1, &mut rng);
        let k = random(3, 1, &mut rng);
        let v = random(2, 1, &mut rng);
        assert!(scaled_dot_attention(&q, &k, &v).unwrap().max_abs_diff(&v).unwrap() <= 1e-15);

        let q = random(2, 3, &mut rng);
        let col = random(2, 1, &mut rng);
        let k = Matrix::hstack(&[&col, &col, &col, &col]).unwrap();
        let v = random(2, 4, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for j in 0..3 {
            for r in 0..2 {
                let mean: f64 = v.row(r).iter().sum::<f64>() / 4.0;
                assert!((out.get(r, j) - mean).abs() <= 1e-12);
            }
        }
    }

    fn loop_sdpa(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Matrix<f64> {
        let d = q.rows() as f64;
        Matrix::from_fn(v.rows(), q.cols(), |r, j| {
            let s: Vec<f64> = (0..k.cols())
                .map(|i| (0..q.rows()).map(|t| q.get(t, j) * k.get(t, i)).sum::<f64>() / d.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            (0..k.cols()).map(|i| s[i].exp() / z * v.get(r, i)).sum()
        })
    }

    #[test]
    fn scaled_dot_matches_loop_oracle() {
        let mut rng = Rng::new(8);
        let (q, k, v) = (random(2, 3, &mut rng), random(2, 4, &mut rng), random(2, 4, &mut rng));
        let got = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&loop_sdpa(&q, &k, &v)).unwrap() <= 1e-12);
        assert!(scaled_dot_attention(&q, &random(3, 4, &mut rng), &v).is_err());
    }

    #[test]
    fn multi_head_reductions() {
        let mut rng = Rng::new(5);
        let x = random(3, 4, &mut rng);
        let id = HeadProjection {
            w_q: Matrix::identity(3),
            w_k: Matrix::identity(3),
            w_v: Matrix::identity(3),
        };
        let one = multi_head_attention(&x, &x, &x, std::slice::from_ref(&id), &Matrix::identity(3)).unwrap();
        let sd = scaled_dot_attention(&x, &x, &x).unwrap();
        assert!(one.max_abs_diff(&sd).unwrap() <= 1e-15);

        let mut dead = id.clone();
        dead.w_v = Matrix::zeros(3, 3);
        let two = multi_head_attention(&x, &x, &x, &[id, dead], &Matrix::identity(6)).unwrap();
        for r in 3..6 {
            assert!(two.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn multi_head_matches_per_head_loop() {
        let mut rng = Rng::new(77);
        let x = random(4, 5, &mut rng);
        let heads: Vec<_> = (0..2)
            .map(|_| HeadProjection {
                w_q: random(3, 4, &mut rng),
                w_k: random(3, 4, &mut rng),
                w_v: random(2, 4, &mut rng),
            })
            .collect();
        let w_o = random(4, 4, &mut rng);
        let got = multi_head_attention(&x, &x, &x, &heads, &w_o).unwrap();
        let parts: Vec<Matrix<f64>> = heads
            .iter()
            .map(|h| {
                let p = |w: &Matrix<f64>| {
                    Matrix::from_fn(w.rows(), x.cols(), |r, c| {
                        (0..x.rows()).map(|t| w.get(r, t) * x.get(t, c)).sum()
                    })
                };
                loop_sdpa(&p(&h.w_q), &p(&h.w_k), &p(&h.w_v))
            })
            .collect();
        let want = Matrix::from_fn(4, 5, |r, j| {
            (0..4)
                .map(|t| w_o.get(r, t) * parts[t / 2].get(t % 2, j))
                .sum()
        });
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn tsa_params_validation() {
        let mut rng = Rng::new(1);
        let mut p = TsaParams::<f64>::init(5, 3, 4, 2, &mut rng);
        p.validate().unwrap();
        assert_eq!((p.d_e(), p.d_i(), p.d_h(), p.d_a()), (5, 3, 4, 2));
        assert!(p.b_s1.as_slice().iter().all(|&b| b == 0.0));
        p.w_s2 = Matrix::zeros(4, 3);
        assert!(p.validate().is_err());
    }
}
