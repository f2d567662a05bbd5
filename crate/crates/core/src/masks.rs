//! Positional masks.
//!
//! Index convention: row `i` is the key (dependent) token, column `j` the
//! query (governing) token. A forward mask lets query `j` see keys `i < j`,
//! a backward mask keys `i > j`; the diagonal is masked in both, so the
//! first (forward) or last (backward) query sees nothing.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::numkit::{Matrix, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Forward,
    Backward,
    None,
    /// Symmetric band `0 < |i - j| <= w`.
    Window(usize),
}

impl MaskKind {
    /// Whether key `i` may be attended by query `j`.
    #[inline]
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Forward => i < j,
            MaskKind::Backward => i > j,
            MaskKind::None => true,
            MaskKind::Window(w) => i != j && i.abs_diff(j) <= w,
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Forward => f.write_str("forward"),
            MaskKind::Backward => f.write_str("backward"),
            MaskKind::None => f.write_str("none"),
            MaskKind::Window(w) => write!(f, "window:{w}"),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "fw" => Ok(MaskKind::Forward),
            "backward" | "bw" => Ok(MaskKind::Backward),
            "none" => Ok(MaskKind::None),
            other => {
                let w = other
                    .strip_prefix("window:")
                    .and_then(|w| w.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown mask kind `{other}`")))?;
                if w == 0 {
                    return Err(Error::Config("window width must be >= 1".into()));
                }
                Ok(MaskKind::Window(w))
            }
        }
    }
}

impl Serialize for MaskKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An `n × n` mask in both additive (`0 / -inf`) and multiplicative
/// (`1 / 0`) form.
#[derive(Debug, Clone)]
pub struct PositionalMask<T: Real> {
    kind: MaskKind,
    additive: Matrix<T>,
    multiplicative: Matrix<T>,
}

impl<T: Real> PositionalMask<T> {
    pub fn new(kind: MaskKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("mask length must be >= 1".into()));
        }
        if let MaskKind::Window(0) = kind {
            return Err(Error::Config("window width must be >= 1".into()));
        }
        let multiplicative = Matrix::from_fn(n, n, |i, j| {
            if kind.allows(i, j) {
                T::one()
            } else {
                T::zero()
            }
        });
        let additive = multiplicative.map(|m| {
            if m == T::one() {
                T::zero()
            } else {
                T::neg_infinity()
            }
        });
        Ok(Self {
            kind,
            additive,
            multiplicative,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.additive.rows()
    }

    pub fn additive(&self) -> &Matrix<T> {
        &self.additive
    }

    pub fn multiplicative(&self) -> &Matrix<T> {
        &self.multiplicative
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.multiplicative.get(i, j) != T::zero()
    }

    /// Query indices (0-based) whose column admits no key at all.
    pub fn fully_masked_queries(&self) -> BTreeSet<usize> {
        let n = self.n();
        (0..n)
            .filter(|&j| (0..n).all(|i| !self.allows(i, j)))
            .collect()
    }
}

type MaskTable<T> = HashMap<(MaskKind, usize), Arc<PositionalMask<T>>>;

/// Shared cache of masks keyed by `(kind, n)`; the window width is part of
/// the kind.
#[derive(Debug)]
pub struct MaskCache<T: Real> {
    entries: RwLock<MaskTable<T>>,
}

impl<T: Real> Default for MaskCache<T> {
    fn default() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
        }
    }
}

impl<T: Real> MaskCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, kind: MaskKind, n: usize) -> Result<Arc<PositionalMask<T>>> {
        if let Some(m) = self.entries.read().expect("mask cache poisoned").get(&(kind, n)) {
            return Ok(Arc::clone(m));
        }
        let mask = Arc::new(PositionalMask::new(kind, n)?);
        let mut w = self.entries.write().expect("mask cache poisoned");
        Ok(Arc::clone(w.entry((kind, n)).or_insert(mask)))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("mask cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NINF: f64 = f64::NEG_INFINITY;

    #[test]
    fn forward_three() {
        let m = PositionalMask::<f64>::new(MaskKind::Forward, 3).unwrap();
        let expected = Matrix::from_rows(&[&[NINF, 0.0, 0.0], &[NINF, NINF, 0.0], &[NINF, NINF, NINF]]);
        assert_eq!(m.additive(), &expected);
    }

    #[test]
    fn backward_is_forward_transposed() {
        let fw = PositionalMask::<f64>::new(MaskKind::Forward, 3).unwrap();
        let bw = PositionalMask::<f64>::new(MaskKind::Backward, 3).unwrap();
        assert_eq!(bw.additive(), &fw.additive().transpose());
    }

    #[test]
    fn none_mask() {
        let m = PositionalMask::<f64>::new(MaskKind::None, 2).unwrap();
        assert_eq!(m.additive(), &Matrix::zeros(2, 2));
        assert_eq!(m.multiplicative(), &Matrix::ones(2, 2));
    }

    #[test]
    fn fully_masked_query_sets() {
        let q = |k, n| PositionalMask::<f64>::new(k, n).unwrap().fully_masked_queries();
        assert_eq!(q(MaskKind::Forward, 3), BTreeSet::from([0]));
        assert_eq!(q(MaskKind::Backward, 3), BTreeSet::from([2]));
        assert!(q(MaskKind::None, 5).is_empty());
        assert_eq!(q(MaskKind::Window(1), 1), BTreeSet::from([0]));
    }

    #[test]
    fn window_band() {
        let m = PositionalMask::<f64>::new(MaskKind::Window(1), 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allows(i, j), i.abs_diff(j) == 1);
            }
        }
    }

    #[test]
    fn invalid_requests() {
        assert!(PositionalMask::<f64>::new(MaskKind::Forward, 0).is_err());
        assert!(PositionalMask::<f64>::new(MaskKind::Window(0), 3).is_err());
        assert!("sideways".parse::<MaskKind>().is_err());
        assert!("window:0".parse::<MaskKind>().is_err());
        assert_eq!("window:4".parse::<MaskKind>().unwrap(), MaskKind::Window(4));
        for k in [MaskKind::Forward, MaskKind::Backward, MaskKind::None, MaskKind::Window(2)] {
            assert_eq!(k.to_string().parse::<MaskKind>().unwrap(), k);
        }
    }

    #[test]
    fn cache_reuses_entries() {
        let cache = MaskCache::<f32>::new();
        let a = cache.get(MaskKind::Forward, 8).unwrap();
        let b = cache.get(MaskKind::Forward, 8).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get(MaskKind::Window(2), 8).unwrap();
        cache.get(MaskKind::Window(3), 8).unwrap();
        assert_eq!(cache.len(), 3);
    }

    proptest! {
        #[test]
        fn forms_agree_under_exp(n in 1usize..20, w in 1usize..5, k in 0usize..4) {
            let kind = [MaskKind::Forward, MaskKind::Backward, MaskKind::None, MaskKind::Window(w)][k];
            let m = PositionalMask::<f64>::new(kind, n).unwrap();
            prop_assert_eq!(&m.additive().map(|x| x.exp()), m.multiplicative());
        }

        #[test]
        fn forward_and_backward_partition_off_diagonal(n in 2usize..24) {
            let fw = PositionalMask::<f64>::new(MaskKind::Forward, n).unwrap();
            let bw = PositionalMask::<f64>::new(MaskKind::Backward, n).unwrap();
            prop_assert_eq!(&fw.multiplicative().transpose(), bw.multiplicative());
            for i in 0..n {
                prop_assert!(!fw.allows(i, i) && !bw.allows(i, i));
                for j in 0..n {
                    if i != j {
                        prop_assert!(fw.allows(i, j) ^ bw.allows(i, j));
                    }
                }
            }
        }
    }
}
