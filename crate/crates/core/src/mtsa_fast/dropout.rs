use super::AttentionConfig;
use crate::numkit::{Matrix, Real, Rng};
use crate::{Error, Result};

/// Attention-dropout masks for one head: `mask_x` multiplies the weighted
/// values (`d_h × n`), `mask_r` the token2token weights (`n × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMaskPair<T: Real> {
    pub mask_x: Matrix<T>,
    pub mask_r: Matrix<T>,
    pub rng_seed: u64,
}

impl<T: Real> DropoutMaskPair<T> {
    pub fn ones(d_h: usize, n: usize) -> Self {
        Self {
            mask_x: Matrix::ones(d_h, n),
            mask_r: Matrix::ones(n, n),
            rng_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mask_x.as_slice().iter().chain(self.mask_r.as_slice()).all(|&v| v == T::one())
    }
}

/// Draws both masks for a sequence of length `n`. Every entry survives with
/// probability `sqrt(p_ad)` and survivors are scaled by `1/sqrt(p_ad)`, so
/// each key/query/feature contribution survives with probability `p_ad`
/// and the expectation is unchanged. With `p_ad = 1` no randomness is
/// consumed.
pub fn sample_dropout<T: Real>(
    cfg: &AttentionConfig,
    n: usize,
    rng: &mut Rng,
) -> Result<DropoutMaskPair<T>> {
    if !(cfg.p_ad > 0.0 && cfg.p_ad <= 1.0) {
        return Err(Error::Config(format!("p_ad must lie in (0, 1], got {}", cfg.p_ad)));
    }
    if cfg.p_ad == 1.0 {
        let mut pair = DropoutMaskPair::ones(cfg.d_h, n);
        pair.rng_seed = rng.seed();
        return Ok(pair);
    }
    let keep = cfg.p_ad.sqrt();
    let kept = T::of(1.0 / keep);
    let mut draw = |_, _| if rng.bernoulli(keep) { kept } else { T::zero() };
    let mask_x = Matrix::from_fn(cfg.d_h, n, &mut draw);
    let mask_r = Matrix::from_fn(n, n, &mut draw);
    Ok(DropoutMaskPair {
        mask_x,
        mask_r,
        rng_seed: rng.seed(),
    })
}
