//! Training objectives: vision-grounded text generation (VTG), the two-way
//! cycle-consistency loss between the feature spaces, and KL alignment of
//! real and estimated exocentric features.
//!
//! All losses are built on the autograd [`Graph`] so the trainer gets
//! gradients for free; the scalar values are read back with
//! [`Graph::scalar`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Mean next-token cross-entropy over the positions where `mask` is true.
pub fn vtg_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    g.cross_entropy(logits, targets, mask)
}

/// Mean absolute elementwise error of a cycle, averaged per sample and then
/// over the batch.
fn cycle_term<A, B>(g: &mut Graph, there: &mut A, back: &mut B, batch: &[Var]) -> Result<Var>
where
    A: FnMut(&mut Graph, Var) -> Result<Var>,
    B: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut per_sample = Vec::with_capacity(batch.len());
    for &x in batch {
        let mid = there(g, x)?;
        let round = back(g, mid)?;
        if g.shape(round) != g.shape(x) {
            return Err(Error::Shape(format!(
                "cycle returned {:?} for input {:?}",
                g.shape(round),
                g.shape(x)
            )));
        }
        let diff = g.sub(round, x);
        let a = g.abs(diff);
        per_sample.push(g.mean(a));
    }
    g.mean_of(&per_sample)
}

/// Cycle-consistency loss `(E‖G(F(x)) − x‖₁, E‖F(G(y)) − y‖₁)`.
///
/// With `forward_only` the backward cycle is not built and a constant zero
/// is returned in its place.
pub fn ccl<F, G>(
    g: &mut Graph,
    f: &mut F,
    gmap: &mut G,
    x_batch: &[Var],
    y_batch: &[Var],
    forward_only: bool,
) -> Result<(Var, Var)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
    G: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if x_batch.is_empty() || (!forward_only && y_batch.is_empty()) {
        return Err(Error::EmptyBatch);
    }
    let forward = cycle_term(g, f, gmap, x_batch)?;
    let backward = if forward_only {
        g.constant(crate::autograd::Mat::zeros((1, 1)))
    } else {
        cycle_term(g, gmap, f, y_batch)?
    };
    Ok((forward, backward))
}

/// Mean over frames of `KL(softmax(y/τ) ‖ softmax(ŷ/τ))`, real features
/// first.
pub fn kl_align(g: &mut Graph, y: Var, y_hat: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::NonFinite(format!("KL temperature {temperature}")));
    }
    for (v, what) in [(y, "real features"), (y_hat, "estimated features")] {
        if g.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
    }
    g.kl_softmax(y, y_hat, temperature)
}

/// Which objectives a stage optimizes and with what weight. `None` marks an
/// inactive loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub vtg: Option<f64>,
    pub ccl: Option<f64>,
    pub kl: Option<f64>,
    /// drop the `F(G(y)) ≈ y` direction
    pub forward_only_ccl: bool,
    pub kl_temperature: f64,
}

impl LossSpec {
    pub fn vtg_only() -> Self {
        Self {
            vtg: Some(1.0),
            ccl: None,
            kl: None,
            forward_only_ccl: false,
            kl_temperature: 1.0,
        }
    }

    pub fn all() -> Self {
        Self {
            ccl: Some(1.0),
            kl: Some(1.0),
            ..Self::vtg_only()
        }
    }

    /// `(w_vtg, w_ccl, w_kl)` with inactive terms at 0.
    pub fn weights(&self) -> (f64, f64, f64) {
        (
            self.vtg.unwrap_or(0.0),
            self.ccl.unwrap_or(0.0),
            self.kl.unwrap_or(0.0),
        )
    }

    /// Weight applied to the backward cycle term.
    pub fn ccl_backward_weight(&self) -> f64 {
        if self.forward_only_ccl {
            0.0
        } else {
            self.ccl.unwrap_or(0.0)
        }
    }
}

/// Raw loss values of one step; `None` where a loss was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub vtg: Option<f64>,
    pub ccl_forward: Option<f64>,
    pub ccl_backward: Option<f64>,
    pub kl: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vtg: f64,
    pub ccl_forward: f64,
    pub ccl_backward: f64,
    pub kl: f64,
    pub total: f64,
    /// `(w_vtg, w_ccl, w_kl)`
    pub weights: (f64, f64, f64),
}

/// Weighted composition of the active losses.
pub fn total_stage_loss(spec: &LossSpec, parts: &LossParts) -> Result<LossBreakdown> {
    let need = |active: bool, v: Option<f64>, name: &'static str| -> Result<f64> {
        if !active {
            return Ok(0.0);
        }
        let v = v.ok_or(Error::MissingLossInput(name))?;
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(v)
    };
    let vtg = need(spec.vtg.is_some(), parts.vtg, "vtg")?;
    let ccl_forward = need(spec.ccl.is_some(), parts.ccl_forward, "ccl_forward")?;
    let ccl_backward = need(
        spec.ccl.is_some() && !spec.forward_only_ccl,
        parts.ccl_backward,
        "ccl_backward",
    )?;
    let kl = need(spec.kl.is_some(), parts.kl, "kl")?;
    let weights = spec.weights();
    let total = weights.0 * vtg + weights.1 * (ccl_forward + ccl_backward) + weights.2 * kl;
    Ok(LossBreakdown {
        vtg,
        ccl_forward,
        ccl_backward,
        kl,
        total,
        weights,
    })
}

/// Graph-side counterpart of [`total_stage_loss`].
pub fn combine(g: &mut Graph, spec: &LossSpec, vtg: Option<Var>, ccl: Option<(Var, Var)>, kl: Option<Var>) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(w) = spec.vtg {
        let v = vtg.ok_or(Error::MissingLossInput("vtg"))?;
        terms.push(g.scale(v, w));
    }
    if let Some(w) = spec.ccl {
        let (fwd, bwd) = ccl.ok_or(Error::MissingLossInput("ccl"))?;
        terms.push(g.scale(fwd, w));
        if !spec.forward_only_ccl {
            terms.push(g.scale(bwd, w));
        }
    }
    if let Some(w) = spec.kl {
        let v = kl.ok_or(Error::MissingLossInput("kl"))?;
        terms.push(g.scale(v, w));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(crate::autograd::Mat::zeros((1, 1)))),
    };
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mat;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn vtg_hand_values() {
        let mut g = Graph::default();
        let l = g.constant(Mat::zeros((1, 4)));
        let v = vtg_loss(&mut g, l, &[2], &[true]).unwrap();
        assert_abs_diff_eq!(g.scalar(v), 4f64.ln(), epsilon = 1e-12);

        let l = g.constant(array![[2f64.ln(), 0.0]]);
        let v = vtg_loss(&mut g, l, &[0], &[true]).unwrap();
        assert_abs_diff_eq!(g.scalar(v), 0.405465, epsilon = 1e-6);

        let l = g.constant(array![[1e6, 0.0, 0.0]]);
        let v = vtg_loss(&mut g, l, &[0], &[true]).unwrap();
        assert!(g.scalar(v) < 1e-9);
    }

    #[test]
    fn vtg_all_masked_fails() {
        let mut g = Graph::default();
        let l = g.constant(Mat::zeros((2, 4)));
        let err = vtg_loss(&mut g, l, &[0, 1], &[false, false]).unwrap_err();
        assert_eq!(err.to_string(), "no supervised positions");
    }

    #[test]
    fn ccl_doubling_example() {
        let mut g = Graph::default();
        let xs = [g.constant(array![[1.0]]), g.constant(array![[2.0]])];
        let ys = [g.constant(array![[5.0]])];
        let mut f = |g: &mut Graph, v: Var| Ok(g.scale(v, 2.0));
        let mut id = |_: &mut Graph, v: Var| Ok(v);
        let (fw, bw) = ccl(&mut g, &mut f, &mut id, &xs, &ys, false).unwrap();
        assert_abs_diff_eq!(g.scalar(fw), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.scalar(bw), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn ccl_exact_inverse_is_zero() {
        let mut g = Graph::default();
        let xs = [g.constant(array![[0.25, -1.5]])];
        let ys = [g.constant(array![[2.0, 4.0]])];
        let one = g.constant(array![[1.0, 1.0]]);
        let mut f = |g: &mut Graph, v: Var| Ok(g.add_row(v, one));
        let minus = g.constant(array![[-1.0, -1.0]]);
        let mut inv = |g: &mut Graph, v: Var| Ok(g.add_row(v, minus));
        let (fw, bw) = ccl(&mut g, &mut f, &mut inv, &xs, &ys, false).unwrap();
        assert_eq!(g.scalar(fw), 0.0);
        assert_eq!(g.scalar(bw), 0.0);
    }

    #[test]
    fn ccl_forward_only_reports_zero_backward() {
        let mut g = Graph::default();
        let xs = [g.constant(array![[1.0]])];
        let ys = [g.constant(array![[5.0]])];
        let mut f = |g: &mut Graph, v: Var| Ok(g.scale(v, 2.0));
        let mut id = |_: &mut Graph, v: Var| Ok(v);
        let (_, bw) = ccl(&mut g, &mut f, &mut id, &xs, &ys, true).unwrap();
        assert_eq!(g.scalar(bw), 0.0);

        let spec = LossSpec {
            forward_only_ccl: true,
            ..LossSpec::all()
        };
        let parts = LossParts {
            vtg: Some(1.0),
            ccl_forward: Some(1.0),
            ccl_backward: Some(5.0),
            kl: Some(0.5),
        };
        let b = total_stage_loss(&spec, &parts).unwrap();
        assert_eq!(b.ccl_backward, 0.0);
        assert_eq!(b.total, 2.5);
    }

    #[test]
    fn ccl_empty_batch_fails() {
        let mut g = Graph::default();
        let mut id = |_: &mut Graph, v: Var| Ok(v);
        let mut id2 = |_: &mut Graph, v: Var| Ok(v);
        assert!(matches!(
            ccl(&mut g, &mut id, &mut id2, &[], &[], false),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn kl_hand_values() {
        let p = array![[(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln()]];
        let q = array![[0.0, 0.0]];
        let mut g = Graph::default();
        let (pv, qv) = (g.constant(p), g.constant(q));
        let pq = kl_align(&mut g, pv, qv, 1.0).unwrap();
        let qp = kl_align(&mut g, qv, pv, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar(pq), 0.056633, epsilon = 1e-6);
        assert_abs_diff_eq!(g.scalar(qp), 0.058892, epsilon = 1e-6);
        let same = kl_align(&mut g, pv, pv, 1.0).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn kl_rejects_non_finite() {
        let mut g = Graph::default();
        let a = g.constant(array![[f64::NAN, 0.0]]);
        let b = g.constant(array![[0.0, 0.0]]);
        assert!(matches!(kl_align(&mut g, a, b, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn stage_compositions() {
        let parts = LossParts {
            vtg: Some(0.7),
            ccl_forward: Some(0.2),
            ccl_backward: Some(0.3),
            kl: Some(0.1),
        };
        let s1 = total_stage_loss(&LossSpec::vtg_only(), &parts).unwrap();
        assert_eq!(s1.total, 0.7);
        assert_eq!(s1.weights, (1.0, 0.0, 0.0));
        let s2 = total_stage_loss(&LossSpec::all(), &parts).unwrap();
        assert_abs_diff_eq!(s2.total, 0.7 + 0.2 + 0.3 + 0.1, epsilon = 1e-15);
        let zero = LossSpec {
            vtg: Some(0.0),
            ccl: Some(0.0),
            kl: Some(0.0),
            ..LossSpec::all()
        };
        assert_eq!(total_stage_loss(&zero, &parts).unwrap().total, 0.0);
        let missing = LossParts {
            kl: None,
            ..parts
        };
        assert!(matches!(
            total_stage_loss(&LossSpec::all(), &missing),
            Err(Error::MissingLossInput("kl"))
        ));
    }
}
