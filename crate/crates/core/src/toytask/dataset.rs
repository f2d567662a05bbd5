use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::numkit::Rng;
use crate::{Error, Result};

pub const TOKEN_A: usize = 0;
pub const TOKEN_B: usize = 1;

/// Sequences holding each marker exactly once among random fillers; the
/// label is 1 iff `A` comes before `B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyDataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub vocab: usize,
}

/// 1 if `A` precedes `B`, 0 if it follows, `None` unless both appear
/// exactly once.
pub fn order_label(seq: &[usize]) -> Option<usize> {
    let pos = |t| {
        let mut it = seq.iter().enumerate().filter(|(_, &x)| x == t);
        match (it.next(), it.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    };
    let (a, b) = (pos(TOKEN_A)?, pos(TOKEN_B)?);
    Some(usize::from(a < b))
}

/// `count` sequences of length `n` over a vocabulary of `vocab` tokens.
/// Labels alternate with the example index, so classes are balanced.
pub fn gen_dataset(seed: u64, count: usize, n: usize, vocab: usize) -> Result<ToyDataset> {
    if n < 2 {
        return Err(Error::Config(format!("sequence length must be >= 2, got {n}")));
    }
    if vocab < 3 {
        return Err(Error::Config(format!("vocabulary must be >= 3, got {vocab}")));
    }
    let mut rng = Rng::new(seed);
    let mut sequences = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for idx in 0..count {
        let label = idx % 2;
        let mut seq: Vec<usize> = (0..n).map(|_| 2 + rng.below(vocab - 2)).collect();
        let p = rng.below(n);
        let mut q = rng.below(n - 1);
        if q >= p {
            q += 1;
        }
        let (first, second) = (p.min(q), p.max(q));
        let (a, b) = if label == 1 { (first, second) } else { (second, first) };
        seq[a] = TOKEN_A;
        seq[b] = TOKEN_B;
        sequences.push(seq);
        labels.push(label);
    }
    Ok(ToyDataset {
        sequences,
        labels,
        vocab,
    })
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// One line per example: space-separated ids, a tab, the label.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (seq, label) in self.sequences.iter().zip(&self.labels) {
            let ids: Vec<String> = seq.iter().map(usize::to_string).collect();
            writeln!(out, "{}\t{label}", ids.join(" ")).expect("writing to a String");
        }
        out
    }

    pub fn from_text(text: &str, vocab: usize) -> Result<Self> {
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            let (ids, label) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let seq = ids
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| bad("bad token id")))
                .collect::<Result<Vec<_>>>()?;
            if let Some(&id) = seq.iter().find(|&&id| id >= vocab) {
                return Err(bad(&format!("token {id} outside vocabulary of {vocab}")));
            }
            let label: usize = label.trim().parse().map_err(|_| bad("bad label"))?;
            if label > 1 {
                return Err(bad("label must be 0 or 1"));
            }
            sequences.push(seq);
            labels.push(label);
        }
        Ok(Self {
            sequences,
            labels,
            vocab,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path, vocab: usize) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_marker_order() {
        // C A D B
        assert_eq!(order_label(&[2, 0, 3, 1]), Some(1));
        // B C A
        assert_eq!(order_label(&[1, 2, 0]), Some(0));
        assert_eq!(order_label(&[0, 0, 1]), None);
        assert_eq!(order_label(&[2, 3]), None);
    }

    #[test]
    fn generated_examples_are_valid_and_balanced() {
        let ds = gen_dataset(3, 1001, 16, 12).unwrap();
        assert_eq!(ds.len(), 1001);
        for (seq, &label) in ds.sequences.iter().zip(&ds.labels) {
            assert_eq!(seq.len(), 16);
            assert!(seq.iter().all(|&t| t < 12));
            assert_eq!(order_label(seq), Some(label));
        }
        let ones = ds.labels.iter().filter(|&&l| l == 1).count();
        assert!((ones as f64 / 1001.0 - 0.5).abs() <= 0.02);
        let short = gen_dataset(4, 50, 2, 3).unwrap();
        assert!(short.sequences.iter().all(|s| s.contains(&0) && s.contains(&1)));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_dataset(9, 40, 8, 6).unwrap(), gen_dataset(9, 40, 8, 6).unwrap());
        assert_ne!(gen_dataset(9, 40, 8, 6).unwrap(), gen_dataset(10, 40, 8, 6).unwrap());
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(gen_dataset(0, 4, 1, 12).is_err());
        assert!(gen_dataset(0, 4, 4, 2).is_err());
    }

    #[test]
    fn text_round_trip() {
        let ds = gen_dataset(5, 7, 5, 9).unwrap();
        let text = ds.to_text();
        assert!(text.lines().next().unwrap().contains('\t'));
        assert_eq!(ToyDataset::from_text(&text, 9).unwrap(), ds);
        assert!(ToyDataset::from_text("0 1 12\t1\n", 9).is_err());
        assert!(ToyDataset::from_text("0 1 2 1\n", 9).is_err());
    }
}
