use std::sync::Arc;

use super::tape::{cross_entropy, ParamMap, Tape, Var};
use crate::attn_ref::{source2token_pool, Source2Token};
use crate::masks::{MaskCache, PositionalMask};
use crate::mtsa_fast::{
    head_dropout, masked_column_max, mtsa_forward, row_max, score_scale, shifted_eps,
    AttentionConfig, DropoutMaskPair, Mode, MtsaParams, DENOM_EPS,
};
use crate::numkit::{add_column_inplace, glorot_init, matmul, Activation, Matrix, Rng};
use crate::{Error, Result};

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone)]
pub struct MtsaVars {
    pub heads: Vec<[Var; 7]>,
    pub w_o: Var,
}

/// Registers every layer parameter under `{prefix}head{c}.{name}` and
/// `{prefix}w_o`.
pub fn register_mtsa(tape: &mut Tape, params: &MtsaParams<f64>, prefix: &str) -> MtsaVars {
    let heads = params
        .heads
        .iter()
        .enumerate()
        .map(|(c, p)| p.named().map(|(name, m)| tape.param(&format!("{prefix}head{c}.{name}"), m)))
        .collect();
    let w_o = tape.param(&format!("{prefix}w_o"), &params.w_o);
    MtsaVars { heads, w_o }
}

/// Records one head exactly as [`crate::mtsa_fast::tsa_head_fast`] computes
/// it. Stabilization shifts enter as constants.
pub fn record_tsa_head(
    tape: &mut Tape,
    x: Var,
    vars: &[Var; 7],
    mask: Arc<PositionalMask<f64>>,
    cfg: &AttentionConfig,
    dropout: Option<&DropoutMaskPair<f64>>,
) -> Result<Var> {
    let [w_t1, w_t2, w_t3, w_s1, b_s1, w_s2, b_s2] = *vars;
    let (d_i, d_h) = (tape.value(w_t1).rows(), tape.value(w_t3).rows());
    let fns = cfg.fns;
    let q = tape.matmul(w_t1, x)?;
    let k = tape.matmul(w_t2, x)?;
    let v = tape.matmul(w_t3, x)?;
    let r = tape.matmul_tn(k, q)?;
    let r = tape.scale(r, score_scale(cfg.score_divisor, d_i, d_h))?;
    let mut t = tape.activation(r, fns.sigma_t.activation())?;

    let h = tape.matmul(w_s1, k)?;
    let h = tape.add_column(h, b_s1)?;
    let h = tape.activation(h, fns.sigma_m)?;
    let s = tape.matmul(w_s2, h)?;
    let s = tape.add_column(s, b_s2)?;
    let mut u = tape.activation(s, fns.sigma_s.activation())?;

    let mut eps = None;
    if cfg.stabilize_enabled() {
        let tv = tape.value(t);
        let col = masked_column_max(tv, &mask);
        let shift = Matrix::from_fn(tv.rows(), tv.cols(), |_, j| col[j]);
        let shift = tape.constant(shift);
        t = tape.sub(t, shift)?;
        let uv = tape.value(u);
        let row = row_max(uv);
        let shift = Matrix::from_fn(uv.rows(), uv.cols(), |l, _| row[l]);
        let shift = tape.constant(shift);
        u = tape.sub(u, shift)?;
        let per_entry = Matrix::from_fn(row.len(), col.len(), |l, j| shifted_eps(row[l], col[j]));
        eps = Some(tape.constant(per_entry));
    }
    let mut e_r = tape.masked_exp(t, mask)?;
    let e_s = tape.exp(u)?;
    let mut e_x = tape.mul(v, e_s)?;
    let den = tape.matmul(e_s, e_r)?;
    if let Some(d) = dropout {
        let mx = tape.constant(d.mask_x.clone());
        let mr = tape.constant(d.mask_r.clone());
        e_x = tape.mul(e_x, mx)?;
        e_r = tape.mul(e_r, mr)?;
    }
    let num = tape.matmul(e_x, e_r)?;
    match eps {
        Some(e) => {
            let den = tape.add(den, e)?;
            tape.div_eps(num, den, 0.0)
        }
        None => tape.div_eps(num, den, DENOM_EPS),
    }
}

/// Records the full layer `W_o · [H_1; …; H_h]` for the input node `x`.
pub fn record_mtsa(
    tape: &mut Tape,
    x: Var,
    vars: &MtsaVars,
    params: &MtsaParams<f64>,
    cfg: &AttentionConfig,
    cache: &MaskCache<f64>,
    mode: Mode<'_>,
) -> Result<Var> {
    params.validate(cfg)?;
    let n = tape.value(x).cols();
    let drops = head_dropout::<f64>(cfg, n, mode)?;
    let mut outs = Vec::with_capacity(cfg.heads);
    for ((hv, &kind), d) in vars.heads.iter().zip(&params.masks).zip(&drops) {
        let mask = cache.get(kind, n)?;
        outs.push(record_tsa_head(tape, x, hv, mask, cfg, d.as_ref())?);
    }
    let concat = tape.concat_rows(&outs)?;
    tape.matmul(vars.w_o, concat)
}

/// MTSA layer, source2token pooling and an affine classifier over the
/// pooled vector. The pool's output bias is held fixed: a per-feature
/// constant added before the softmax over tokens cancels exactly, so it
/// has no gradient to learn from. For the same reason the pool's hidden
/// activation is tanh, which has no linear piece that could make a hidden
/// bias cancel the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClassifier {
    pub cfg: AttentionConfig,
    pub mtsa: MtsaParams<f64>,
    pub pool: Source2Token<f64>,
    pub w_c: Matrix<f64>,
    pub b_c: Matrix<f64>,
    /// Keep probability of inverted dropout on the pooled vector.
    pub p_kp: f64,
}

/// Output of [`SequenceClassifier::record`].
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    pub loss: Var,
    pub logits: Var,
}

fn reborrow<'a>(rng: &'a mut Option<&mut Rng>) -> Mode<'a> {
    match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    }
}

impl SequenceClassifier {
    pub fn init(cfg: AttentionConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mtsa = MtsaParams::init(&cfg, rng)?;
        let d = cfg.output_dim();
        let pool = Source2Token::init(d, cfg.d_a, Activation::Tanh, rng);
        Ok(Self {
            w_c: glorot_init(classes, d, rng),
            b_c: Matrix::zeros(classes, 1),
            cfg,
            mtsa,
            pool,
            p_kp: 1.0,
        })
    }

    pub fn classes(&self) -> usize {
        self.w_c.rows()
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix<f64>)> {
        let mut out: Vec<(String, &Matrix<f64>)> =
            self.mtsa.names().into_iter().zip(self.mtsa.matrices()).collect();
        out.push(("pool.w_s1".into(), &self.pool.w_s1));
        out.push(("pool.b_s1".into(), &self.pool.b_s1));
        out.push(("pool.w_s2".into(), &self.pool.w_s2));
        out.push(("cls.w".into(), &self.w_c));
        out.push(("cls.b".into(), &self.b_c));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Matrix<f64>)> {
        let names = self.mtsa.names();
        let mut out: Vec<(String, &mut Matrix<f64>)> =
            names.into_iter().zip(self.mtsa.matrices_mut()).collect();
        out.push(("pool.w_s1".into(), &mut self.pool.w_s1));
        out.push(("pool.b_s1".into(), &mut self.pool.b_s1));
        out.push(("pool.w_s2".into(), &mut self.pool.w_s2));
        out.push(("cls.w".into(), &mut self.w_c));
        out.push(("cls.b".into(), &mut self.b_c));
        out
    }

    pub fn param_map(&self) -> ParamMap {
        self.named_params()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect()
    }

    pub fn load_map(&mut self, map: &ParamMap) -> Result<()> {
        for (name, m) in self.named_params_mut() {
            let src = map
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if src.shape() != m.shape() {
                return Err(Error::dim("load_map", format!("`{name}` changed shape")));
            }
            *m = src.clone();
        }
        Ok(())
    }

    /// Records the classifier for a batch of `d_e × n` input nodes. With an
    /// rng, attention dropout and pooled-vector dropout are sampled from it.
    pub fn record(
        &self,
        tape: &mut Tape,
        inputs: &[Var],
        labels: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<Recorded> {
        let vars = register_mtsa(tape, &self.mtsa, "");
        let w1 = tape.param("pool.w_s1", &self.pool.w_s1);
        let b1 = tape.param("pool.b_s1", &self.pool.b_s1);
        let w2 = tape.param("pool.w_s2", &self.pool.w_s2);
        let b2 = tape.constant(self.pool.b_s2.clone());
        let wc = tape.param("cls.w", &self.w_c);
        let bc = tape.param("cls.b", &self.b_c);
        let cache = MaskCache::new();
        let mut pooled = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let s = record_mtsa(tape, x, &vars, &self.mtsa, &self.cfg, &cache, reborrow(&mut rng))?;
            let h = tape.matmul(w1, s)?;
            let h = tape.add_column(h, b1)?;
            let h = tape.activation(h, self.pool.sigma_m)?;
            let sc = tape.matmul(w2, h)?;
            let sc = tape.add_column(sc, b2)?;
            let p = tape.softmax_rows(sc)?;
            let weighted = tape.mul(p, s)?;
            let mut z = tape.sum_rows(weighted)?;
            if let Some(r) = rng.as_deref_mut() {
                if self.p_kp < 1.0 {
                    let keep = self.p_kp;
                    let mask = Matrix::from_fn(tape.value(z).rows(), 1, |_, _| {
                        if r.bernoulli(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let m = tape.constant(mask);
                    z = tape.mul(z, m)?;
                }
            }
            pooled.push(z);
        }
        let z = tape.concat_cols(&pooled)?;
        let logits = tape.matmul(wc, z)?;
        let logits = tape.add_column(logits, bc)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok(Recorded { loss, logits })
    }

    /// Evaluation-mode logits without a tape; `classes × batch`.
    pub fn logits(&self, inputs: &[&Matrix<f64>]) -> Result<Matrix<f64>> {
        let pooled = inputs
            .iter()
            .map(|x| {
                let s = mtsa_forward(x, &self.mtsa, &self.cfg, Mode::Eval)?;
                source2token_pool(&s, &self.pool)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix<f64>> = pooled.iter().collect();
        let z = Matrix::hstack(&refs)?;
        let mut logits = matmul(&self.w_c, &z)?;
        add_column_inplace(&mut logits, &self.b_c)?;
        Ok(logits)
    }

    /// Evaluation-mode mean cross-entropy without a tape.
    pub fn loss(&self, inputs: &[&Matrix<f64>], labels: &[usize]) -> Result<f64> {
        Ok(cross_entropy(&self.logits(inputs)?, labels)?.0)
    }
}
