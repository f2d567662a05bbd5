use serde::{Deserialize, Serialize};

use crate::attn_ref::{ScaleFn, ScaleFns};
use crate::{Error, Result};

/// Divisor used for the token2token scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDivisor {
    /// `sqrt(d_i)`, the key/query width. Matches the reference path.
    #[default]
    KeyDim,
    /// `sqrt(d_h)`, the per-head value width.
    HeadDim,
}

/// Dimensions and switches of one multi-mask attention layer. `d_h` is the
/// per-head width, so the layer output has `heads * d_h` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_e: usize,
    pub d_i: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub heads: usize,
    #[serde(flatten)]
    pub fns: ScaleFns,
    /// Attention-dropout keep probability; each of the two dividend factors
    /// keeps entries with probability `sqrt(p_ad)`.
    #[serde(default = "one")]
    pub p_ad: f64,
    /// `None` picks the default: on unless both scale functions are
    /// log-sigmoid (whose scores are already bounded above by 0).
    #[serde(default)]
    pub stabilize: Option<bool>,
    #[serde(default)]
    pub score_divisor: ScoreDivisor,
}

fn one() -> f64 {
    1.0
}

/// Added to the normalizer so fully masked queries come out as 0.
pub const DENOM_EPS: f64 = 1e-12;

impl AttentionConfig {
    pub fn new(d_e: usize, d_i: usize, d_h: usize, d_a: usize, heads: usize) -> Self {
        Self {
            d_e,
            d_i,
            d_h,
            d_a,
            heads,
            fns: ScaleFns::default(),
            p_ad: 1.0,
            stabilize: None,
            score_divisor: ScoreDivisor::KeyDim,
        }
    }

    pub fn with_fns(mut self, fns: ScaleFns) -> Self {
        self.fns = fns;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_e", self.d_e),
            ("d_i", self.d_i),
            ("d_h", self.d_h),
            ("d_a", self.d_a),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.p_ad > 0.0 && self.p_ad <= 1.0) {
            return Err(Error::Config(format!("p_ad must lie in (0, 1], got {}", self.p_ad)));
        }
        Ok(())
    }

    pub fn stabilize_enabled(&self) -> bool {
        self.stabilize.unwrap_or(
            !(self.fns.sigma_t == ScaleFn::LogSigmoid && self.fns.sigma_s == ScaleFn::LogSigmoid),
        )
    }

    pub fn output_dim(&self) -> usize {
        self.heads * self.d_h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Activation;

    #[test]
    fn dimensions_alone_deserialize_to_defaults() {
        let cfg: AttentionConfig =
            serde_json::from_str(r#"{"d_e": 4, "d_i": 3, "d_h": 3, "d_a": 2, "heads": 2}"#).unwrap();
        assert_eq!(cfg, AttentionConfig::new(4, 3, 3, 2, 2));
        let cfg: AttentionConfig =
            serde_json::from_str(r#"{"d_e": 4, "d_i": 3, "d_h": 3, "d_a": 2, "heads": 1, "sigma_s": "log_sigmoid"}"#)
                .unwrap();
        assert_eq!(cfg.fns.sigma_s, ScaleFn::LogSigmoid);
        assert_eq!(cfg.fns.sigma_t, ScaleFns::default().sigma_t);
    }

    #[test]
    fn stabilization_default_rule() {
        let mut cfg = AttentionConfig::new(4, 3, 2, 2, 1);
        assert!(cfg.stabilize_enabled());
        cfg.fns.sigma_s = ScaleFn::LogSigmoid;
        assert!(!cfg.stabilize_enabled());
        cfg.stabilize = Some(true);
        assert!(cfg.stabilize_enabled());
    }

    #[test]
    fn validation() {
        let mut cfg = AttentionConfig::new(4, 3, 2, 2, 1);
        cfg.validate().unwrap();
        cfg.p_ad = 0.0;
        assert!(cfg.validate().is_err());
        cfg.p_ad = 1.0;
        cfg.heads = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_shape() {
        let mut cfg = AttentionConfig::new(8, 4, 4, 4, 2);
        cfg.fns.sigma_m = Activation::Elu;
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["sigma_t"], "log_sigmoid");
        assert_eq!(v["sigma_m"], "elu");
        assert_eq!(v["score_divisor"], "key_dim");
        let back: AttentionConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        let minimal: AttentionConfig = serde_json::from_str(
            r#"{"d_e":2,"d_i":2,"d_h":2,"d_a":2,"heads":1,"sigma_t":"identity","sigma_s":"identity","sigma_m":"relu"}"#,
        )
        .unwrap();
        assert_eq!(minimal.p_ad, 1.0);
        assert_eq!(minimal.stabilize, None);
    }
}
