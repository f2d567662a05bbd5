//! Synthetic order task: does `A` come before `B`? Only attention with
//! directional masks can see token order here, so the unmasked variant is
//! stuck at chance.

mod adam;
mod dataset;

pub use adam::{adam_step, AdamState};
pub use dataset::{gen_dataset, order_label, ToyDataset, TOKEN_A, TOKEN_B};

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attn_ref::ScaleFns;
use crate::grad::{SequenceClassifier, Tape};
use crate::masks::MaskKind;
use crate::mtsa_fast::AttentionConfig;
use crate::numkit::{glorot_init, Matrix, Rng};
use crate::{Error, Result};

/// Head mask layout under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Half the heads forward, half backward.
    Fwbw,
    /// No positional mask on any head.
    Nomask,
}

impl Variant {
    pub fn masks(self, heads: usize) -> Vec<MaskKind> {
        match self {
            Variant::Fwbw => crate::mtsa_fast::default_masks(heads),
            Variant::Nomask => vec![MaskKind::None; heads],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fwbw => "fwbw",
            Variant::Nomask => "nomask",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwbw" => Ok(Variant::Fwbw),
            "nomask" => Ok(Variant::Nomask),
            other => Err(Error::Config(format!("variant must be fwbw or nomask, got `{other}`"))),
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab: usize,
    pub n: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub d_e: usize,
    pub d_i: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub heads: usize,
    pub fns: ScaleFns,
    pub p_kp: f64,
    pub p_ad: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 12,
            n: 16,
            train_count: 4000,
            eval_count: 1000,
            d_e: 16,
            d_i: 8,
            d_h: 8,
            d_a: 8,
            heads: 2,
            fns: ScaleFns::default(),
            p_kp: 1.0,
            p_ad: 1.0,
            lr: 1e-3,
            batch: 16,
            steps: 3000,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn attention(&self) -> AttentionConfig {
        let mut cfg = AttentionConfig::new(self.d_e, self.d_i, self.d_h, self.d_a, self.heads);
        cfg.fns = self.fns;
        cfg.p_ad = self.p_ad;
        cfg
    }
}

/// Token embedding in front of a [`SequenceClassifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub embed: Matrix<f64>,
    pub clf: SequenceClassifier,
}

/// Logits (`2 × batch`) and mean cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix<f64>,
    pub loss: f64,
}

impl ToyModel {
    /// Glorot embedding and attention weights; the classifier starts at
    /// zero, so an untrained model ties on every input.
    pub fn init(cfg: &ToyConfig, variant: Variant, rng: &mut Rng) -> Result<Self> {
        let embed = glorot_init(cfg.d_e, cfg.vocab, rng);
        let mut clf = SequenceClassifier::init(cfg.attention(), 2, rng)?;
        clf.w_c = Matrix::zeros(clf.w_c.rows(), clf.w_c.cols());
        clf.mtsa.masks = variant.masks(cfg.heads);
        clf.p_kp = cfg.p_kp;
        Ok(Self { embed, clf })
    }

    pub fn vocab(&self) -> usize {
        self.embed.cols()
    }

    fn embed_seq(&self, seq: &[usize]) -> Result<Matrix<f64>> {
        self.check_ids(seq)?;
        self.embed.select_cols(seq)
    }

    fn check_ids(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&t| t >= self.vocab()) {
            Some(t) => Err(Error::Config(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab()
            ))),
            None => Ok(()),
        }
    }

    /// Evaluation-mode forward pass without a tape.
    pub fn forward(&self, seqs: &[&[usize]], labels: &[usize]) -> Result<ForwardOutput> {
        let xs = seqs
            .iter()
            .map(|s| self.embed_seq(s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix<f64>> = xs.iter().collect();
        let logits = self.clf.logits(&refs)?;
        let loss = crate::grad::cross_entropy(&logits, labels)?.0;
        Ok(ForwardOutput { logits, loss })
    }

    /// Predicted class per sequence.
    pub fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<usize>> {
        let xs = seqs
            .iter()
            .map(|s| self.embed_seq(s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix<f64>> = xs.iter().collect();
        let logits = self.clf.logits(&refs)?;
        Ok((0..logits.cols())
            .map(|b| usize::from(logits.get(1, b) > logits.get(0, b)))
            .collect())
    }

    pub fn accuracy(&self, data: &ToyDataset) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for (seqs, labels) in data.sequences.chunks(256).zip(data.labels.chunks(256)) {
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            let pred = self.predict(&refs)?;
            correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// One recorded mini-batch: returns the loss and applies an Adam step.
    pub fn train_step(
        &mut self,
        seqs: &[&[usize]],
        labels: &[usize],
        adam: &mut AdamState,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let table = tape.param("embed", &self.embed);
        let mut inputs = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_ids(s)?;
            inputs.push(tape.gather_cols(table, s)?);
        }
        let rec = self.clf.record(&mut tape, &inputs, labels, Some(rng))?;
        let loss = tape.value(rec.loss).get(0, 0);
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = tape.backward(rec.loss)?;
        let mut params = self.clf.named_params_mut();
        params.push(("embed".into(), &mut self.embed));
        adam_step(adam, params, &grads)?;
        Ok(loss)
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub variant: Variant,
    pub eval_accuracy: f64,
    pub metrics: Vec<MetricRow>,
}

pub fn write_metrics<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Trains one variant from `cfg.seed` and reports held-out accuracy. Rows
/// are logged every `eval_every` steps with the mean training loss since
/// the previous row. A non-finite loss aborts with [`Error::Divergence`].
pub fn train_eval(cfg: &ToyConfig, variant: Variant) -> Result<TrainReport> {
    let root = Rng::new(cfg.seed);
    let train = gen_dataset(root.fork(1).next_u64(), cfg.train_count, cfg.n, cfg.vocab)?;
    let eval = gen_dataset(root.fork(2).next_u64(), cfg.eval_count, cfg.n, cfg.vocab)?;
    let mut model = ToyModel::init(cfg, variant, &mut root.fork(3))?;
    let mut order_rng = root.fork(4);
    let mut drop_rng = root.fork(5);
    let mut adam = AdamState::new(cfg.lr);
    let batch = cfg.batch.max(1);
    let every = cfg.eval_every.max(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut metrics = Vec::new();
    let mut window = (0.0, 0usize);
    let mut last_finite = f64::NAN;
    for step in 1..=cfg.steps {
        if train.is_empty() {
            break;
        }
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| train.sequences[i].as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let loss = match model.train_step(&seqs, &labels, &mut adam, &mut drop_rng) {
            Err(Error::Numeric { .. }) => f64::NAN,
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss;
        window.0 += loss;
        window.1 += 1;
        if step % every == 0 || step == cfg.steps {
            metrics.push(MetricRow {
                step,
                loss: window.0 / window.1 as f64,
                eval_acc: model.accuracy(&eval)?,
            });
            window = (0.0, 0);
        }
    }
    let eval_accuracy = match metrics.last() {
        Some(r) if r.step == cfg.steps => r.eval_acc,
        _ => model.accuracy(&eval)?,
    };
    if cfg.steps == 0 {
        metrics.push(MetricRow {
            step: 0,
            loss: model
                .forward(
                    &eval.sequences.iter().map(Vec::as_slice).collect::<Vec<_>>(),
                    &eval.labels,
                )?
                .loss,
            eval_acc: eval_accuracy,
        });
    }
    Ok(TrainReport {
        variant,
        eval_accuracy,
        metrics,
    })
}
