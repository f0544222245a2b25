use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;

/// Named parameter matrices. Names are stable across runs and are what
/// freeze sets, checkpoints and gradients are keyed on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    /// Names matching any of the glob patterns.
    pub fn matching<'a>(&'a self, patterns: &'a [String]) -> BTreeSet<String> {
        self.params
            .keys()
            .filter(|n| patterns.iter().any(|p| glob_match(p, n)))
            .cloned()
            .collect()
    }

    /// SHA-256 over the names, shapes and exact bits of the selected
    /// parameters.
    pub fn digest<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> String {
        let mut h = Sha256::new();
        let selected: BTreeSet<&String> = names.into_iter().collect();
        for name in selected {
            let Some(m) = self.params.get(name) else {
                continue;
            };
            h.update(name.as_bytes());
            h.update([0]);
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn digest_all(&self) -> String {
        self.digest(self.params.keys())
    }
}

/// Glob match where `*` matches any (possibly empty) run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p = pattern.as_bytes();
    let n = name.as_bytes();
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn glob_patterns() {
        assert!(glob_match("enc_ego.*", "enc_ego.block0.fc1.weight"));
        assert!(!glob_match("enc_ego.*", "enc_exo.block0.fc1.weight"));
        assert!(glob_match("lm.*.attn.w*", "lm.block1.attn.wq"));
        assert!(glob_match("*", ""));
        assert!(glob_match("a*b*c", "aXXbYc"));
        assert!(!glob_match("a*b*c", "aXXbY"));
    }

    #[test]
    fn digest_tracks_exact_bits() {
        let mut s = ParamStore::new();
        s.insert("a", array![[1.0, 2.0]]);
        s.insert("b", array![[3.0]]);
        let before = s.digest_all();
        let only_b = s.digest([&"b".to_string()]);
        s.get_mut("a").unwrap()[[0, 0]] = 1.0 + f64::EPSILON;
        assert_ne!(before, s.digest_all());
        assert_eq!(only_b, s.digest([&"b".to_string()]));
    }
}
