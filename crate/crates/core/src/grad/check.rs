use serde::{Deserialize, Serialize};

use super::model::SequenceClassifier;
use super::tape::{GradientSet, ParamMap, Tape};
use crate::attn_ref::{ScaleFn, ScaleFns};
use crate::mtsa_fast::AttentionConfig;
use crate::numkit::{Activation, Matrix, Rng};
use crate::{Error, Result};

/// Central differences `(f(θ+εe) − f(θ−εe)) / 2ε`, one coordinate at a time.
pub fn finite_diff(
    mut f: impl FnMut(&ParamMap) -> Result<f64>,
    theta: &ParamMap,
    eps: f64,
) -> Result<GradientSet> {
    let mut work = theta.clone();
    let mut grads = ParamMap::new();
    let names: Vec<String> = theta.keys().cloned().collect();
    for name in names {
        let (rows, cols) = theta[&name].shape();
        let mut g = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let orig = theta[&name].get(r, c);
                work.get_mut(&name).expect("cloned").set(r, c, orig + eps);
                let up = f(&work)?;
                work.get_mut(&name).expect("cloned").set(r, c, orig - eps);
                let down = f(&work)?;
                work.get_mut(&name).expect("cloned").set(r, c, orig);
                g.set(r, c, (up - down) / (2.0 * eps));
            }
        }
        grads.insert(name, g);
    }
    Ok(GradientSet::from_map(grads))
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of comparing two gradient sets coordinate by coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub coordinates: usize,
    /// Coordinates with relative error at most `1e-6`.
    pub within_1e6: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn fraction_within_1e6(&self) -> f64 {
        if self.coordinates == 0 {
            1.0
        } else {
            self.within_1e6 as f64 / self.coordinates as f64
        }
    }

    /// Folds another report into this one, keeping the worst coordinate.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_param = other.worst_param.clone();
            self.worst_index = other.worst_index;
        }
        self.coordinates += other.coordinates;
        self.within_1e6 += other.within_1e6;
        self.passed = self.max_rel_error <= self.tol;
    }
}

pub fn compare_gradients(
    analytic: &GradientSet,
    numeric: &GradientSet,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        coordinates: 0,
        within_1e6: 0,
        tol,
        passed: true,
    };
    if analytic.len() != numeric.len() {
        return Err(Error::Config(format!(
            "{} analytic vs {} numeric gradients",
            analytic.len(),
            numeric.len()
        )));
    }
    for (name, a) in analytic.iter() {
        let n = numeric
            .get(name)
            .ok_or_else(|| Error::Config(format!("no numeric gradient for `{name}`")))?;
        if a.shape() != n.shape() {
            return Err(Error::dim("compare_gradients", format!("`{name}` shapes differ")));
        }
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                let e = relative_error(a.get(r, c), n.get(r, c));
                report.coordinates += 1;
                if e <= 1e-6 {
                    report.within_1e6 += 1;
                }
                if e.is_nan() || e > report.max_rel_error {
                    report.max_rel_error = e;
                    report.worst_param = name.clone();
                    report.worst_index = (r, c);
                }
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Shape of a random gradient-check instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub n: usize,
    pub batch: usize,
    pub d_e: usize,
    pub d_i: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub heads: usize,
    pub fns: ScaleFns,
    /// Every weight and bias is redrawn uniformly from `±weight_scale`.
    pub weight_scale: f64,
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n: 5,
            batch: 2,
            d_e: 4,
            d_i: 3,
            d_h: 3,
            d_a: 3,
            heads: 2,
            fns: ScaleFns {
                sigma_t: ScaleFn::LogSigmoid,
                sigma_s: ScaleFn::LogSigmoid,
                sigma_m: Activation::Elu,
            },
            weight_scale: 1.0,
            eps: 1e-5,
            tol: 1e-4,
        }
    }
}

/// Builds a random classifier instance, differentiates its loss on a random
/// batch through the tape and compares with central differences of the
/// tape-free forward pass.
pub fn grad_check(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<GradCheckReport> {
    let mut acfg = AttentionConfig::new(cfg.d_e, cfg.d_i, cfg.d_h, cfg.d_a, cfg.heads);
    acfg.fns = cfg.fns;
    let mut model = SequenceClassifier::init(acfg, 2, rng)?;
    let scale = cfg.weight_scale;
    for (_, m) in model.named_params_mut() {
        let (r, c) = m.shape();
        *m = Matrix::from_fn(r, c, |_, _| rng.uniform_in(-scale, scale));
    }
    let xs: Vec<Matrix<f64>> = (0..cfg.batch)
        .map(|_| Matrix::from_fn(cfg.d_e, cfg.n, |_, _| rng.uniform_in(-1.0, 1.0)))
        .collect();
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.below(2)).collect();

    let mut tape = Tape::new();
    let inputs: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let rec = model.record(&mut tape, &inputs, &labels, None)?;
    let analytic = tape.backward(rec.loss)?;

    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let mut probe = model.clone();
    let numeric = finite_diff(
        |theta| {
            probe.load_map(theta)?;
            probe.loss(&refs, &labels)
        },
        &model.param_map(),
        cfg.eps,
    )?;
    compare_gradients(&analytic, &numeric, cfg.tol)
}
