//! Randomized equivalence suite: the fast path against the naive path.
//!
//! Each trial draws a sequence length, layer dimensions, a head count, scale
//! functions and one directional-or-open mask per head, builds random
//! parameters (biases included) and compares [`mtsa_forward`] with
//! [`mtsa_naive`] run in the same precision. Double precision is judged by
//! absolute difference, single precision by difference relative to the
//! larger of `max |naive|` and 1.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::attn_ref::{mtsa_naive, ScaleFn, ScaleFns};
use crate::masks::{MaskKind, PositionalMask};
use crate::mtsa_fast::{mtsa_forward, AttentionConfig, Mode, MtsaParams, ScoreDivisor};
use crate::numkit::{DType, Matrix, Real, Rng};
use crate::{Error, Result};

/// Largest `n` or width the suite accepts.
pub const MAX_SUPPORTED: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivOptions {
    pub trials: usize,
    pub n_max: usize,
    pub dims_max: usize,
    pub heads: Vec<usize>,
    pub dtype: DType,
    pub seed: u64,
    /// Divisor used by the fast path; the naive path always uses `sqrt(d_i)`.
    pub score_divisor: ScoreDivisor,
}

impl Default for EquivOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            n_max: 32,
            dims_max: 16,
            heads: vec![1, 2, 4],
            dtype: DType::F64,
            seed: 0,
            score_divisor: ScoreDivisor::KeyDim,
        }
    }
}

impl EquivOptions {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        for (name, v) in [("n-max", self.n_max), ("dims-max", self.dims_max)] {
            if v == 0 || v > MAX_SUPPORTED {
                return Err(Error::Config(format!(
                    "{name} must be in 1..={MAX_SUPPORTED}, got {v}"
                )));
            }
        }
        if self.heads.is_empty() || self.heads.iter().any(|&h| h == 0 || h > 16) {
            return Err(Error::Config("heads must be a non-empty list of 1..=16".into()));
        }
        Ok(())
    }

    pub fn tolerance(&self) -> f64 {
        match self.dtype {
            DType::F64 => 1e-9,
            DType::F32 => 1e-4,
        }
    }
}

/// One sampled configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialConfig {
    pub seed: u64,
    pub n: usize,
    pub d_e: usize,
    pub d_i: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub heads: usize,
    pub masks: Vec<MaskKind>,
    pub sigma_t: ScaleFn,
    pub sigma_s: ScaleFn,
}

impl TrialConfig {
    /// Configurations are grouped by head count and scale functions.
    pub fn class(&self) -> String {
        format!("h={} sigma_t={} sigma_s={}", self.heads, self.sigma_t, self.sigma_s)
    }

    fn sample(opts: &EquivOptions, rng: &mut Rng) -> Self {
        let scale = |rng: &mut Rng| {
            if rng.bernoulli(0.5) {
                ScaleFn::LogSigmoid
            } else {
                ScaleFn::Identity
            }
        };
        let kinds = [MaskKind::Forward, MaskKind::Backward, MaskKind::None];
        let heads = opts.heads[rng.below(opts.heads.len())];
        let dim = |rng: &mut Rng| rng.range_inclusive(1, opts.dims_max);
        Self {
            seed: rng.next_u64(),
            n: rng.range_inclusive(1, opts.n_max),
            d_e: dim(rng),
            d_i: dim(rng),
            d_h: dim(rng),
            d_a: dim(rng),
            heads,
            masks: (0..heads).map(|_| kinds[rng.below(3)]).collect(),
            sigma_t: scale(rng),
            sigma_s: scale(rng),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class: String,
    pub trials: usize,
    pub failures: usize,
    pub max_diff: f64,
    pub worst: TrialConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivReport {
    pub dtype: DType,
    pub trials: usize,
    pub seed: u64,
    pub score_divisor: ScoreDivisor,
    /// `abs` for double precision, `rel` for single.
    pub metric: &'static str,
    pub tolerance: f64,
    pub max_diff: f64,
    pub failures: usize,
    pub passed: bool,
    pub classes: Vec<ClassSummary>,
}

impl fmt::Display for EquivReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} trials ({}), max {} diff {:.3e} (tol {:.0e}), {} failing",
            self.trials, self.dtype, self.metric, self.max_diff, self.tolerance, self.failures
        )?;
        for c in &self.classes {
            writeln!(f, "  {:<40} {:>4} trials  max {:.3e}", c.class, c.trials, c.max_diff)?;
        }
        Ok(())
    }
}

fn uniform<T: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.uniform_in(-1.0, 1.0)))
}

/// Runs one trial in precision `T` and returns the diff under the suite's
/// metric.
pub fn run_trial<T: Real>(trial: &TrialConfig, divisor: ScoreDivisor) -> Result<f64> {
    let mut cfg = AttentionConfig::new(trial.d_e, trial.d_i, trial.d_h, trial.d_a, trial.heads)
        .with_fns(ScaleFns {
            sigma_t: trial.sigma_t,
            sigma_s: trial.sigma_s,
            ..ScaleFns::default()
        });
    cfg.score_divisor = divisor;
    let mut rng = Rng::new(trial.seed);
    let mut params = MtsaParams::<f64>::init(&cfg, &mut rng)?.with_masks(trial.masks.clone());
    for h in &mut params.heads {
        h.b_s1 = uniform(trial.d_a, 1, &mut rng);
        h.b_s2 = uniform(trial.d_h, 1, &mut rng);
    }
    let x = uniform::<f64>(trial.d_e, trial.n, &mut rng).cast::<T>();
    let params = params.cast::<T>();

    let fast = mtsa_forward(&x, &params, &cfg, Mode::Eval)?;
    let masks = trial
        .masks
        .iter()
        .map(|&k| PositionalMask::<T>::new(k, trial.n))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PositionalMask<T>> = masks.iter().collect();
    let naive = mtsa_naive(&x, &params.heads, &refs, &params.w_o, cfg.fns)?;
    let diff = fast
        .max_abs_diff(&naive)
        .ok_or_else(|| Error::dim("equiv", "fast and naive shapes differ"))?
        .to_f64_lossy();
    Ok(match T::DTYPE {
        DType::F64 => diff,
        DType::F32 => diff / naive.max_abs().to_f64_lossy().max(1.0),
    })
}

pub fn run_equiv(opts: &EquivOptions) -> Result<EquivReport> {
    opts.validate()?;
    let tol = opts.tolerance();
    let mut rng = Rng::new(opts.seed);
    let mut classes: BTreeMap<String, ClassSummary> = BTreeMap::new();
    let mut max_diff = 0.0f64;
    let mut failures = 0;
    for _ in 0..opts.trials {
        let trial = TrialConfig::sample(opts, &mut rng);
        let diff = match opts.dtype {
            DType::F64 => run_trial::<f64>(&trial, opts.score_divisor)?,
            DType::F32 => run_trial::<f32>(&trial, opts.score_divisor)?,
        };
        let failed = diff.is_nan() || diff > tol;
        failures += failed as usize;
        max_diff = max_diff.max(diff);
        let entry = classes.entry(trial.class()).or_insert_with(|| ClassSummary {
            class: trial.class(),
            trials: 0,
            failures: 0,
            max_diff: f64::NEG_INFINITY,
            worst: trial.clone(),
        });
        entry.trials += 1;
        entry.failures += failed as usize;
        if diff > entry.max_diff || diff.is_nan() {
            entry.max_diff = diff;
            entry.worst = trial;
        }
    }
    Ok(EquivReport {
        dtype: opts.dtype,
        trials: opts.trials,
        seed: opts.seed,
        score_divisor: opts.score_divisor,
        metric: match opts.dtype {
            DType::F64 => "abs",
            DType::F32 => "rel",
        },
        tolerance: tol,
        max_diff,
        failures,
        passed: failures == 0,
        classes: classes.into_values().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> EquivOptions {
        EquivOptions {
            trials: 24,
            n_max: 12,
            dims_max: 6,
            seed,
            ..EquivOptions::default()
        }
    }

    #[test]
    fn double_precision_suite_passes() {
        let r = run_equiv(&quick(1)).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.max_diff <= 1e-9);
        assert_eq!(r.classes.iter().map(|c| c.trials).sum::<usize>(), 24);
    }

    #[test]
    fn single_precision_suite_passes() {
        let r = run_equiv(&EquivOptions {
            dtype: DType::F32,
            ..quick(2)
        })
        .unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.metric, "rel");
    }

    #[test]
    fn single_token_cases_pass() {
        let r = run_equiv(&EquivOptions {
            n_max: 1,
            ..quick(3)
        })
        .unwrap();
        assert!(r.passed);
        assert!(r.classes.iter().all(|c| c.worst.n == 1));
    }

    #[test]
    fn head_dim_divisor_is_caught() {
        let r = run_equiv(&EquivOptions {
            score_divisor: ScoreDivisor::HeadDim,
            ..quick(4)
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_diff > 1e-6);
    }

    #[test]
    fn head_dim_divisor_agrees_when_widths_match() {
        let t = TrialConfig {
            seed: 9,
            n: 7,
            d_e: 5,
            d_i: 4,
            d_h: 4,
            d_a: 3,
            heads: 2,
            masks: vec![MaskKind::Forward, MaskKind::None],
            sigma_t: ScaleFn::Identity,
            sigma_s: ScaleFn::LogSigmoid,
        };
        assert!(run_trial::<f64>(&t, ScoreDivisor::HeadDim).unwrap() <= 1e-9);
    }

    #[test]
    fn same_seed_same_report() {
        let a = serde_json::to_string(&run_equiv(&quick(5)).unwrap()).unwrap();
        let b = serde_json::to_string(&run_equiv(&quick(5)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_options() {
        for bad in [
            EquivOptions { trials: 0, ..quick(0) },
            EquivOptions { n_max: 0, ..quick(0) },
            EquivOptions { dims_max: MAX_SUPPORTED + 1, ..quick(0) },
            EquivOptions { heads: vec![], ..quick(0) },
        ] {
            assert!(matches!(run_equiv(&bad), Err(Error::Config(_))));
        }
    }
}
