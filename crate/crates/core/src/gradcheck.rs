//! Central finite-difference checks of tape gradients against parameters.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GradScope, Graph, Var};
use crate::error::{Error, Result};
use crate::models::ParamStore;

/// Relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// gradients that are zero up to rounding from dividing by nothing.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub eps: f64,
    pub floor: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-7,
            samples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckedEntry {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<CheckedEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CheckedEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

impl GradCheck {
    /// Compares the backward pass of `loss` with central differences on
    /// `samples` entries drawn uniformly from the parameters in `among`.
    /// `loss` must build a scalar on the graph it is given.
    pub fn run(
        &self,
        store: &ParamStore,
        among: &[String],
        loss: impl Fn(&ParamStore, &mut Graph) -> Result<Var>,
    ) -> Result<GradCheckReport> {
        let mut slots = Vec::new();
        for name in among {
            let p = store.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    slots.push((name.as_str(), (i, j)));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let picks: Vec<(&str, (usize, usize))> = (0..self.samples)
            .map(|_| *slots.choose(&mut rng).expect("no parameters to check"))
            .collect();

        let mut g = Graph::new(GradScope::Only(among.iter().cloned().collect()));
        let root = loss(store, &mut g)?;
        let grads = g.backward(root).into_param_grads();

        let eval = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::new(GradScope::None);
            let v = loss(s, &mut g)?;
            Ok(g.scalar(v))
        };
        let mut work = store.clone();
        let mut entries = Vec::with_capacity(picks.len());
        for (name, idx) in picks {
            let analytic = grads.get(name).map_or(0.0, |m| m[idx]);
            let orig = store.get(name).unwrap()[idx];
            work.get_mut(name).unwrap()[idx] = orig + self.eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap()[idx] = orig - self.eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * self.eps);
            entries.push(CheckedEntry {
                param: name.to_string(),
                index: idx,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, self.floor),
            });
        }
        Ok(GradCheckReport { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut s = ParamStore::new();
        s.insert("w", array![[0.3, -1.1], [0.7, 2.0]]);
        let names = vec!["w".to_string()];
        let check = GradCheck {
            samples: 20,
            ..GradCheck::default()
        };
        let ok = check
            .run(&s, &names, |s, g| {
                let w = g.param(s, "w")?;
                let sq = g.mul(w, w);
                Ok(g.mean(sq))
            })
            .unwrap();
        assert!(ok.max_rel_err() < 1e-8, "{:?}", ok.worst());

        // a constant copy hides the dependence from the tape
        let bad = check
            .run(&s, &names, |s, g| {
                let w = g.param(s, "w")?;
                let c = g.constant(s.get("w").unwrap().clone());
                let sq = g.mul(w, c);
                Ok(g.mean(sq))
            })
            .unwrap();
        assert!(bad.max_rel_err() > 0.4);
    }
}
