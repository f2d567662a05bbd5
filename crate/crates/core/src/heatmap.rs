//! Attention heatmap export.
//!
//! For every head: an 8-bit binary PGM of the normalized token2token
//! weights (rows are keys, columns are queries, `[0, 1]` mapped linearly to
//! `[0, 255]`), the same matrix as CSV, and a one-row CSV of source2token
//! scores averaged over features.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::masks::MaskKind;
use crate::mtsa_fast::{AttentionConfig, Mtsa, MtsaParams};
use crate::numkit::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadHeatmap {
    pub mask: MaskKind,
    /// `n × n`, `[key, query]`.
    pub token2token: Matrix<f64>,
    /// One score per token.
    pub source2token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapBundle {
    pub labels: Vec<String>,
    pub heads: Vec<HeadHeatmap>,
}

/// Parses one token per line: `label<TAB>v1 v2 … v_de`. Blank lines are
/// skipped. Returns the labels and the `d_e × n` input.
pub fn parse_tokens(text: &str, d_e: usize) -> Result<(Vec<String>, Matrix<f64>)> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: String| Error::Config(format!("token line {}: {what}", lineno + 1));
        let (label, rest) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `label<TAB>values`".into()))?;
        let row = rest
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != d_e {
            return Err(bad(format!("{} values, embedding width is {d_e}", row.len())));
        }
        labels.push(label.to_string());
        values.push(row);
    }
    if labels.is_empty() {
        return Err(Error::Config("token file has no tokens".into()));
    }
    let x = Matrix::from_fn(d_e, labels.len(), |r, c| values[c][r]);
    Ok((labels, x))
}

pub fn heatmap_bundle(
    params: &MtsaParams<f64>,
    cfg: &AttentionConfig,
    labels: Vec<String>,
    x: &Matrix<f64>,
) -> Result<HeatmapBundle> {
    if labels.len() != x.cols() {
        return Err(Error::dim("heatmap", "one label per token"));
    }
    let layer = Mtsa::new(cfg.clone(), params.clone())?;
    let heads = layer
        .traces(x)?
        .into_iter()
        .zip(&params.masks)
        .map(|(t, &mask)| {
            let d_h = t.source2token.rows() as f64;
            let source2token = (0..t.source2token.cols())
                .map(|j| t.source2token.col(j).iter().sum::<f64>() / d_h)
                .collect();
            HeadHeatmap {
                mask,
                token2token: t.token2token,
                source2token,
            }
        })
        .collect();
    Ok(HeatmapBundle { labels, heads })
}

/// Binary PGM, one byte per weight.
pub fn to_pgm(weights: &Matrix<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", weights.cols(), weights.rows()).into_bytes();
    out.extend(
        weights
            .as_slice()
            .iter()
            .map(|&w| (w.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Key-by-query CSV: header `key,<query labels>`, then one row per key.
pub fn write_matrix_csv<W: Write>(labels: &[String], m: &Matrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("key").chain(labels.iter().map(String::as_str)))?;
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        w.write_record(std::iter::once(label.as_str()).chain(row.iter().map(String::as_str)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<(Vec<String>, Matrix<f64>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let labels: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut data = Vec::with_capacity(labels.len() * labels.len());
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for v in rec.iter().skip(1) {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad weight `{v}`")))?,
            );
        }
        rows += 1;
    }
    Ok((labels.clone(), Matrix::from_vec(rows, labels.len(), data)?))
}

/// Header of token labels and a single row of scores.
pub fn write_scores_csv<W: Write>(labels: &[String], scores: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    w.write_record(scores.iter().map(f64::to_string))?;
    w.flush()?;
    Ok(())
}

/// Writes `{prefix}_head{c}_t2t.pgm`, `{prefix}_head{c}_t2t.csv` and
/// `{prefix}_head{c}_s2t.csv` for every head; returns the paths written.
pub fn write_heatmaps(bundle: &HeatmapBundle, prefix: &Path) -> Result<Vec<PathBuf>> {
    let named = |c: usize, suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(format!("_head{c}_{suffix}"));
        PathBuf::from(s)
    };
    let mut written = Vec::new();
    for (c, head) in bundle.heads.iter().enumerate() {
        let pgm = named(c, "t2t.pgm");
        fs::write(&pgm, to_pgm(&head.token2token))?;
        let t2t = named(c, "t2t.csv");
        write_matrix_csv(&bundle.labels, &head.token2token, fs::File::create(&t2t)?)?;
        let s2t = named(c, "s2t.csv");
        write_scores_csv(&bundle.labels, &head.source2token, fs::File::create(&s2t)?)?;
        written.extend([pgm, t2t, s2t]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn setup(n: usize, masks: Vec<MaskKind>) -> (MtsaParams<f64>, AttentionConfig, Vec<String>, Matrix<f64>) {
        let cfg = AttentionConfig::new(4, 3, 3, 2, masks.len());
        let mut rng = Rng::new(11);
        let params = MtsaParams::init(&cfg, &mut rng).unwrap().with_masks(masks);
        let x = Matrix::from_fn(4, n, |_, _| rng.uniform_in(-1.0, 1.0));
        let labels = (0..n).map(|i| format!("t{i}")).collect();
        (params, cfg, labels, x)
    }

    fn pixels(pgm: &[u8], n: usize) -> &[u8] {
        &pgm[pgm.len() - n * n..]
    }

    #[test]
    fn forward_head_is_black_on_and_below_diagonal() {
        let n = 6;
        let (p, cfg, labels, x) = setup(n, vec![MaskKind::Forward, MaskKind::Backward]);
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        let pgm = to_pgm(&b.heads[0].token2token);
        assert!(pgm.starts_with(b"P5\n6 6\n255\n"));
        let px = pixels(&pgm, n);
        for i in 0..n {
            for j in 0..n {
                if i >= j {
                    assert_eq!(px[i * n + j], 0, "key {i} query {j}");
                }
            }
        }
        // query 1 sees only key 0
        assert_eq!(px[1], 255);
    }

    #[test]
    fn columns_are_distributions() {
        let (p, cfg, labels, x) = setup(7, vec![MaskKind::Forward, MaskKind::None]);
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        for head in &b.heads {
            let w = &head.token2token;
            for j in 0..7 {
                let col = w.col(j);
                let s: f64 = col.iter().sum();
                assert!(col.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12);
            }
            assert_eq!(head.source2token.len(), 7);
        }
    }

    #[test]
    fn zeroed_score_weights_give_flat_gray() {
        let n = 5;
        let (mut p, cfg, labels, x) = setup(n, vec![MaskKind::None]);
        for h in &mut p.heads {
            h.w_t1 = Matrix::zeros(3, 4);
            h.w_s2 = Matrix::zeros(3, 2);
        }
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        let px = pixels(&to_pgm(&b.heads[0].token2token), n).to_vec();
        assert!(px.iter().all(|&v| v == px[0]));
        assert_eq!(px[0], (255.0f64 / 5.0).round() as u8);
    }

    #[test]
    fn single_token_is_one_black_pixel() {
        let (p, cfg, labels, x) = setup(1, vec![MaskKind::Forward, MaskKind::Backward]);
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        for head in &b.heads {
            assert_eq!(to_pgm(&head.token2token), b"P5\n1 1\n255\n\0".to_vec());
        }
    }

    #[test]
    fn source2token_is_feature_mean() {
        let (p, cfg, labels, x) = setup(4, vec![MaskKind::None]);
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        let layer = Mtsa::new(cfg, p).unwrap();
        let raw = &layer.traces(&x).unwrap()[0].source2token;
        for j in 0..4 {
            let mean = raw.col(j).iter().sum::<f64>() / 3.0;
            assert_eq!(b.heads[0].source2token[j], mean);
        }
    }

    #[test]
    fn token_file_parsing() {
        let (labels, x) = parse_tokens("the\t1 2\n\ncat\t3 4.5\n", 2).unwrap();
        assert_eq!(labels, ["the", "cat"]);
        assert_eq!(x, Matrix::from_rows(&[&[1.0, 3.0], &[2.0, 4.5]]));
        assert!(parse_tokens("the 1 2\n", 2).is_err());
        assert!(parse_tokens("the\t1\n", 2).is_err());
        assert!(parse_tokens("the\t1 x\n", 2).is_err());
        assert!(parse_tokens("\n", 2).is_err());
    }

    #[test]
    fn csv_round_trips_byte_for_byte() {
        let (p, cfg, labels, x) = setup(5, vec![MaskKind::Backward]);
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&b.labels, &b.heads[0].token2token, &mut buf).unwrap();
        let (l, m) = read_matrix_csv(&buf[..]).unwrap();
        assert_eq!(m, b.heads[0].token2token);
        let mut again = Vec::new();
        write_matrix_csv(&l, &m, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn writes_three_files_per_head() {
        let dir = tempfile::tempdir().unwrap();
        let (p, cfg, labels, x) = setup(3, vec![MaskKind::Forward, MaskKind::Backward]);
        let b = heatmap_bundle(&p, &cfg, labels, &x).unwrap();
        let files = write_heatmaps(&b, &dir.path().join("viz")).unwrap();
        assert_eq!(files.len(), 6);
        assert!(dir.path().join("viz_head1_s2t.csv").exists());
        let s2t = fs::read_to_string(dir.path().join("viz_head0_s2t.csv")).unwrap();
        assert_eq!(s2t.lines().count(), 2);
        assert_eq!(s2t.lines().next().unwrap(), "t0,t1,t2");
    }
}
