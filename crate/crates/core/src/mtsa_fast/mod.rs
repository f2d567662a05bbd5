//! Matrix-only multi-mask tensorized self-attention: the fast per-head
//! kernel, multi-head composition, numerical stabilization, attention
//! dropout and the parameter file format.

mod config;
mod dropout;
mod head;
mod io;

pub use config::{AttentionConfig, ScoreDivisor, DENOM_EPS};
pub use dropout::{sample_dropout, DropoutMaskPair};
pub use head::{tsa_head_fast, tsa_head_trace, HeadTrace};
pub(crate) use head::{masked_column_max, row_max, score_scale, shifted_eps};
pub use io::{read_params, sidecar_path, write_params, ParamsSidecar, PARAMS_MAGIC};

use std::sync::Arc;

use crate::attn_ref::{TsaParams, TSA_PARAM_NAMES};
use crate::masks::{MaskCache, MaskKind, PositionalMask};
use crate::numkit::{active_meter, glorot_init, matmul, AllocMeter, Matrix, Real, Rng};
use crate::{Error, Result};

/// Evaluation ignores attention dropout; training draws masks from the rng.
#[derive(Debug)]
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Parameters of a multi-mask layer: one independent head per mask plus
/// the square output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsaParams<T: Real> {
    pub heads: Vec<TsaParams<T>>,
    pub w_o: Matrix<T>,
    pub masks: Vec<MaskKind>,
}

/// First `ceil(h/2)` heads forward, the rest backward.
pub fn default_masks(heads: usize) -> Vec<MaskKind> {
    let fw = heads.div_ceil(2);
    (0..heads)
        .map(|c| if c < fw { MaskKind::Forward } else { MaskKind::Backward })
        .collect()
}

impl<T: Real> MtsaParams<T> {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let heads = (0..cfg.heads)
            .map(|_| TsaParams::init(cfg.d_e, cfg.d_i, cfg.d_h, cfg.d_a, rng))
            .collect();
        let side = cfg.output_dim();
        Ok(Self {
            heads,
            w_o: glorot_init(side, side, rng),
            masks: default_masks(cfg.heads),
        })
    }

    pub fn with_masks(mut self, masks: Vec<MaskKind>) -> Self {
        self.masks = masks;
        self
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        cfg.validate()?;
        if self.heads.len() != cfg.heads || self.masks.len() != cfg.heads {
            return Err(Error::dim(
                "MtsaParams",
                format!(
                    "{} head parameter sets and {} masks for {} heads",
                    self.heads.len(),
                    self.masks.len(),
                    cfg.heads
                ),
            ));
        }
        for (c, p) in self.heads.iter().enumerate() {
            p.validate()?;
            let dims = (p.d_e(), p.d_i(), p.d_h(), p.d_a());
            if dims != (cfg.d_e, cfg.d_i, cfg.d_h, cfg.d_a) {
                return Err(Error::dim(
                    "MtsaParams",
                    format!("head {c} has dims {dims:?}, config differs"),
                ));
            }
        }
        let side = cfg.output_dim();
        if self.w_o.shape() != (side, side) {
            return Err(Error::dim(
                "MtsaParams",
                format!("w_o is {:?}, expected {side}x{side}", self.w_o.shape()),
            ));
        }
        Ok(())
    }

    /// `head{c}.{name}` for every head in order, then `w_o`.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.heads.len())
            .flat_map(|c| TSA_PARAM_NAMES.iter().map(move |n| format!("head{c}.{n}")))
            .collect();
        out.push("w_o".into());
        out
    }

    pub fn matrices(&self) -> Vec<&Matrix<T>> {
        let mut out: Vec<&Matrix<T>> = self
            .heads
            .iter()
            .flat_map(|p| p.named().map(|(_, m)| m))
            .collect();
        out.push(&self.w_o);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = self
            .heads
            .iter_mut()
            .flat_map(|p| p.named_mut().map(|(_, m)| m))
            .collect();
        out.push(&mut self.w_o);
        out
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> MtsaParams<U> {
        MtsaParams {
            heads: self.heads.iter().map(TsaParams::cast).collect(),
            w_o: self.w_o.cast(),
            masks: self.masks.clone(),
        }
    }
}

pub(crate) fn head_dropout<T: Real>(
    cfg: &AttentionConfig,
    n: usize,
    mode: Mode<'_>,
) -> Result<Vec<Option<DropoutMaskPair<T>>>> {
    match mode {
        Mode::Train(rng) if cfg.p_ad < 1.0 => (0..cfg.heads)
            .map(|_| sample_dropout(cfg, n, rng).map(Some))
            .collect(),
        _ => Ok(vec![None; cfg.heads]),
    }
}

fn compose<T: Real>(
    x: &Matrix<T>,
    params: &MtsaParams<T>,
    cfg: &AttentionConfig,
    mode: Mode<'_>,
    masks: &[Arc<PositionalMask<T>>],
    parallel: bool,
) -> Result<Matrix<T>> {
    params.validate(cfg)?;
    let drops = head_dropout::<T>(cfg, x.cols(), mode)?;
    let outs: Vec<Matrix<T>> = if parallel && cfg.heads > 1 {
        let parent = active_meter();
        let results: Vec<(Result<Matrix<T>>, usize)> = std::thread::scope(|scope| {
            let handles: Vec<_> = params
                .heads
                .iter()
                .zip(masks)
                .zip(&drops)
                .map(|((p, m), d)| {
                    scope.spawn(move || {
                        let meter = AllocMeter::new();
                        let out = meter.measure(|| tsa_head_fast(x, m, p, cfg, d.as_ref()));
                        (out, meter.peak_floats())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("head worker panicked"))
                .collect()
        });
        if let Some(meter) = parent {
            meter.absorb_peak(results.iter().map(|(_, peak)| peak).sum());
        }
        results.into_iter().map(|(r, _)| r).collect::<Result<_>>()?
    } else {
        params
            .heads
            .iter()
            .zip(masks)
            .zip(&drops)
            .map(|((p, m), d)| tsa_head_fast(x, m, p, cfg, d.as_ref()))
            .collect::<Result<_>>()?
    };
    let refs: Vec<&Matrix<T>> = outs.iter().collect();
    let concat = Matrix::vstack(&refs)?;
    drop(outs);
    matmul(&params.w_o, &concat)
}

fn build_masks<T: Real>(
    params: &MtsaParams<T>,
    n: usize,
    cache: Option<&MaskCache<T>>,
) -> Result<Vec<Arc<PositionalMask<T>>>> {
    params
        .masks
        .iter()
        .map(|&k| match cache {
            Some(c) => c.get(k, n),
            None => PositionalMask::new(k, n).map(Arc::new),
        })
        .collect()
}

/// `W_o · [H_1; …; H_h]`, each `H_c` from [`tsa_head_fast`] under the
/// head's own mask. Output is `(h·d_h) × n`.
pub fn mtsa_forward<T: Real>(
    x: &Matrix<T>,
    params: &MtsaParams<T>,
    cfg: &AttentionConfig,
    mode: Mode<'_>,
) -> Result<Matrix<T>> {
    let masks = build_masks(params, x.cols(), None)?;
    compose(x, params, cfg, mode, &masks, false)
}

/// A configured layer with a mask cache, for repeated forward passes.
#[derive(Debug)]
pub struct Mtsa<T: Real> {
    pub cfg: AttentionConfig,
    pub params: MtsaParams<T>,
    cache: MaskCache<T>,
}

impl<T: Real> Mtsa<T> {
    pub fn new(cfg: AttentionConfig, params: MtsaParams<T>) -> Result<Self> {
        params.validate(&cfg)?;
        Ok(Self {
            cfg,
            params,
            cache: MaskCache::new(),
        })
    }

    pub fn init(cfg: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        let params = MtsaParams::init(&cfg, rng)?;
        Self::new(cfg, params)
    }

    pub fn forward(&self, x: &Matrix<T>, mode: Mode<'_>) -> Result<Matrix<T>> {
        let masks = build_masks(&self.params, x.cols(), Some(&self.cache))?;
        compose(x, &self.params, &self.cfg, mode, &masks, false)
    }

    /// Like [`Mtsa::forward`] with one thread per head. Dropout masks are
    /// drawn up front in head order, so results match the sequential path
    /// bitwise. An active [`AllocMeter`] sees the summed head peaks.
    pub fn forward_parallel(&self, x: &Matrix<T>, mode: Mode<'_>) -> Result<Matrix<T>> {
        let masks = build_masks(&self.params, x.cols(), Some(&self.cache))?;
        compose(x, &self.params, &self.cfg, mode, &masks, true)
    }

    pub fn traces(&self, x: &Matrix<T>) -> Result<Vec<HeadTrace<T>>> {
        let masks = build_masks(&self.params, x.cols(), Some(&self.cache))?;
        self.params
            .heads
            .iter()
            .zip(&masks)
            .map(|(p, m)| tsa_head_trace(x, m, p, &self.cfg))
            .collect()
    }
}
