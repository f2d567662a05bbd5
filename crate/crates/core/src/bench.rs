//! Scaling benchmarks: wall time and peak kernel memory per implementation
//! and sequence length.
//!
//! Every measurement runs the whole batch sequence by sequence, discarding
//! each output, so `peak_floats` is the working set of one sequence on top
//! of the (unmetered) inputs and weights. Times are the median of
//! [`BenchOptions::repeats`] runs after [`BenchOptions::warmup`] unmeasured
//! ones.

use std::fmt;
use std::hint::black_box;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attn_ref::{multi_head_attention, mtsa_naive, HeadProjection, ScaleFns};
use crate::masks::PositionalMask;
use crate::mtsa_fast::{AttentionConfig, Mode, Mtsa, MtsaParams};
use crate::numkit::{glorot_init, matmul, AllocMeter, DType, Matrix, Real, Rng};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "impl",
    "n",
    "batch",
    "d_model",
    "heads",
    "wall_ms",
    "peak_floats",
    "seed",
];

/// Extra column present only when heads ran concurrently.
pub const PARALLEL_COLUMN: &str = "parallel_heads";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchImpl {
    Naive,
    Fast,
    MultiheadDot,
    /// Untrained bank of width-3/4/5 convolutions, a scaling reference only.
    ConvBaseline,
}

impl BenchImpl {
    pub const ALL: [BenchImpl; 4] = [
        BenchImpl::Naive,
        BenchImpl::Fast,
        BenchImpl::MultiheadDot,
        BenchImpl::ConvBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchImpl::Naive => "naive",
            BenchImpl::Fast => "fast",
            BenchImpl::MultiheadDot => "multihead_dot",
            BenchImpl::ConvBaseline => "conv_baseline",
        }
    }
}

impl fmt::Display for BenchImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchImpl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchImpl::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown impl `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(rename = "impl")]
    pub implementation: BenchImpl,
    pub n: usize,
    pub batch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub wall_ms: f64,
    pub peak_floats: usize,
    pub seed: u64,
    /// `Some` only for runs made with concurrent heads.
    #[serde(skip)]
    pub parallel_heads: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub impls: Vec<BenchImpl>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub seed: u64,
    pub dtype: DType,
    pub parallel_heads: bool,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            impls: BenchImpl::ALL.to_vec(),
            lens: vec![16, 32, 64, 128, 256, 512, 1024],
            batch: 8,
            d_model: 64,
            heads: 1,
            seed: 0,
            dtype: DType::F32,
            parallel_heads: false,
            warmup: 2,
            repeats: 5,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.impls.is_empty() || self.lens.is_empty() {
            return Err(Error::Config("need at least one impl and one length".into()));
        }
        if self.lens[0] == 0 || self.lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lens must be positive and strictly ascending".into()));
        }
        if self.batch == 0 || self.heads == 0 || self.repeats == 0 {
            return Err(Error::Config("batch, heads and repeats must be >= 1".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head width; also used for `d_i` and `d_a`.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn attention(&self) -> AttentionConfig {
        let d = self.head_dim();
        AttentionConfig::new(self.d_model, d, d, d, self.heads)
    }
}

struct ConvBank<T: Real> {
    /// `filters[w][o]` multiplies the input shifted by `o - w_len/2`.
    filters: Vec<Vec<Matrix<T>>>,
}

impl<T: Real> ConvBank<T> {
    const WIDTHS: [usize; 3] = [3, 4, 5];

    fn init(d: usize, rng: &mut Rng) -> Self {
        let filters = Self::WIDTHS
            .iter()
            .map(|&w| (0..w).map(|_| glorot_init(d, d, rng)).collect())
            .collect();
        Self { filters }
    }

    fn run(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let (d, n) = x.shape();
        let mut outs = Vec::with_capacity(self.filters.len());
        for taps in &self.filters {
            let half = taps.len() / 2;
            let mut out = Matrix::zeros(d, n);
            for (o, w) in taps.iter().enumerate() {
                let shifted = Matrix::from_fn(d, n, |r, c| {
                    (c + o)
                        .checked_sub(half)
                        .filter(|&src| src < n)
                        .map_or(T::zero(), |src| x.get(r, src))
                });
                out.zip_inplace(&matmul(w, &shifted)?, |a, b| a + b)?;
            }
            out.map_inplace(|v| v.max(T::zero()));
            outs.push(out);
        }
        let refs: Vec<&Matrix<T>> = outs.iter().collect();
        Matrix::vstack(&refs)
    }
}

enum Subject<T: Real> {
    Naive {
        params: MtsaParams<T>,
        masks: Vec<PositionalMask<T>>,
        fns: ScaleFns,
    },
    Fast {
        layer: Mtsa<T>,
        parallel: bool,
    },
    MultiheadDot {
        heads: Vec<HeadProjection<T>>,
        w_o: Matrix<T>,
    },
    Conv(ConvBank<T>),
}

impl<T: Real> Subject<T> {
    fn build(imp: BenchImpl, opts: &BenchOptions, n: usize, rng: &mut Rng) -> Result<Self> {
        let cfg = opts.attention();
        let d = opts.head_dim();
        Ok(match imp {
            BenchImpl::Naive => {
                let params = MtsaParams::init(&cfg, rng)?;
                let masks = params
                    .masks
                    .iter()
                    .map(|&k| PositionalMask::new(k, n))
                    .collect::<Result<_>>()?;
                Subject::Naive {
                    params,
                    masks,
                    fns: cfg.fns,
                }
            }
            BenchImpl::Fast => Subject::Fast {
                layer: Mtsa::init(cfg, rng)?,
                parallel: opts.parallel_heads,
            },
            BenchImpl::MultiheadDot => Subject::MultiheadDot {
                heads: (0..opts.heads)
                    .map(|_| HeadProjection {
                        w_q: glorot_init(d, opts.d_model, rng),
                        w_k: glorot_init(d, opts.d_model, rng),
                        w_v: glorot_init(d, opts.d_model, rng),
                    })
                    .collect(),
                w_o: glorot_init(opts.d_model, opts.d_model, rng),
            },
            BenchImpl::ConvBaseline => Subject::Conv(ConvBank::init(opts.d_model, rng)),
        })
    }

    fn run(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Subject::Naive { params, masks, fns } => {
                let refs: Vec<&PositionalMask<T>> = masks.iter().collect();
                mtsa_naive(x, &params.heads, &refs, &params.w_o, *fns)
            }
            Subject::Fast { layer, parallel: true } => layer.forward_parallel(x, Mode::Eval),
            Subject::Fast { layer, .. } => layer.forward(x, Mode::Eval),
            Subject::MultiheadDot { heads, w_o } => multi_head_attention(x, x, x, heads, w_o),
            Subject::Conv(bank) => bank.run(x),
        }
    }

    fn run_batch(&self, xs: &[Matrix<T>]) -> Result<()> {
        for x in xs {
            black_box(self.run(x)?);
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

fn measure<T: Real>(imp: BenchImpl, n: usize, opts: &BenchOptions) -> Result<BenchRecord> {
    // inputs and weights depend only on (seed, n), so every impl sees the
    // same batch
    let root = Rng::new(opts.seed).fork(n as u64);
    let mut data_rng = root.fork(0);
    let xs: Vec<Matrix<T>> = (0..opts.batch)
        .map(|_| Matrix::from_fn(opts.d_model, n, |_, _| T::of(data_rng.uniform_in(-1.0, 1.0))))
        .collect();
    let subject = Subject::<T>::build(imp, opts, n, &mut root.fork(1))?;

    // the first run also fills the layer's mask cache before metering
    for _ in 0..opts.warmup.max(1) {
        subject.run_batch(&xs)?;
    }
    let meter = AllocMeter::new();
    meter.measure(|| subject.run(&xs[0]).map(drop))?;
    let times = (0..opts.repeats)
        .map(|_| {
            let t = Instant::now();
            subject.run_batch(&xs)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<Vec<_>>>()?;
    let parallel = matches!(subject, Subject::Fast { parallel: true, .. }) && opts.heads > 1;
    Ok(BenchRecord {
        implementation: imp,
        n,
        batch: opts.batch,
        d_model: opts.d_model,
        heads: opts.heads,
        wall_ms: median(times),
        peak_floats: meter.peak_floats(),
        seed: opts.seed,
        parallel_heads: opts.parallel_heads.then_some(parallel),
    })
}

/// Measures one `(impl, n)` point.
pub fn bench_point(imp: BenchImpl, n: usize, opts: &BenchOptions) -> Result<BenchRecord> {
    opts.validate()?;
    match opts.dtype {
        DType::F32 => measure::<f32>(imp, n, opts),
        DType::F64 => measure::<f64>(imp, n, opts),
    }
}

/// One record per `(impl, n)`, impls outermost.
pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    opts.validate()?;
    let mut out = Vec::with_capacity(opts.impls.len() * opts.lens.len());
    for &imp in &opts.impls {
        for &n in &opts.lens {
            out.push(bench_point(imp, n, opts)?);
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Writes the records with the fixed header, plus the concurrency column
/// when any record carries one.
pub fn write_bench_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let parallel = records.iter().any(|r| r.parallel_heads.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = CSV_HEADER.to_vec();
    if parallel {
        header.push(PARALLEL_COLUMN);
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.implementation.to_string(),
            r.n.to_string(),
            r.batch.to_string(),
            r.d_model.to_string(),
            r.heads.to_string(),
            r.wall_ms.to_string(),
            r.peak_floats.to_string(),
            r.seed.to_string(),
        ];
        if parallel {
            row.push(r.parallel_heads.unwrap_or(false).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let parallel = match header.len() {
        8 => false,
        9 if &header[8] == PARALLEL_COLUMN => true,
        _ => return Err(Error::Config(format!("unexpected bench header {header:?}"))),
    };
    if header.iter().take(8).ne(CSV_HEADER) {
        return Err(Error::Config(format!("unexpected bench header {header:?}")));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let mut r: BenchRecord = rec.deserialize(Some(&header))?;
            if parallel {
                r.parallel_heads = Some(rec[8].parse().map_err(|_| {
                    Error::Config(format!("bad {PARALLEL_COLUMN} value `{}`", &rec[8]))
                })?);
            }
            Ok(r)
        })
        .collect()
}
