use std::collections::BTreeMap;

use crate::grad::GradientSet;
use crate::numkit::Matrix;
use crate::{Error, Result};

/// Bias-corrected Adam moments for a set of named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Matrix<f64>>,
    second: BTreeMap<String, Matrix<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Matrix<f64>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Matrix<f64>> {
        self.second.get(name)
    }
}

/// One Adam update of every parameter that has a gradient.
pub fn adam_step<'a>(
    state: &mut AdamState,
    params: impl IntoIterator<Item = (String, &'a mut Matrix<f64>)>,
    grads: &GradientSet,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params {
        let Some(g) = grads.get(&name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::dim("adam_step", format!("gradient of `{name}` has wrong shape")));
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        m.zip_inplace(g, |m, g| b1 * m + (1.0 - b1) * g)?;
        let v = state
            .second
            .entry(name)
            .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        v.zip_inplace(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
        let (lr, eps) = (state.lr, state.eps);
        let data = p.as_mut_slice();
        for ((x, &m), &v) in data.iter_mut().zip(m.as_slice()).zip(v.as_slice()) {
            *x -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}
