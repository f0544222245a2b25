use exo2ego::autograd::{Graph, Mat, Var};
use exo2ego::losses::{ccl, kl_align, total_stage_loss, vtg_loss, LossParts, LossSpec};
use ndarray::Array2;
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn linear(a: Mat) -> impl FnMut(&mut Graph, Var) -> exo2ego::Result<Var> {
    move |g: &mut Graph, v: Var| {
        let w = g.constant(a.clone());
        Ok(g.matmul(v, w))
    }
}

fn cycle_values(fa: &Mat, ga: &Mat, xs: &[Mat], ys: &[Mat]) -> (f64, f64) {
    let mut g = Graph::default();
    let xv: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let yv: Vec<Var> = ys.iter().map(|y| g.constant(y.clone())).collect();
    let (mut f, mut gm) = (linear(fa.clone()), linear(ga.clone()));
    let (a, b) = ccl(&mut g, &mut f, &mut gm, &xv, &yv, false).unwrap();
    (g.scalar(a), g.scalar(b))
}

proptest! {
    #[test]
    fn cycle_loss_is_symmetric_under_swap(
        fa in mat(4, 4), ga in mat(4, 4),
        xs in prop::collection::vec(mat(3, 4), 1..4),
        ys in prop::collection::vec(mat(3, 4), 1..4),
    ) {
        let (fwd, bwd) = cycle_values(&fa, &ga, &xs, &ys);
        let (fwd2, bwd2) = cycle_values(&ga, &fa, &ys, &xs);
        prop_assert_eq!(fwd, bwd2);
        prop_assert_eq!(bwd, fwd2);
        prop_assert!(fwd >= 0.0 && bwd >= 0.0 && fwd.is_finite() && bwd.is_finite());
    }

    #[test]
    fn kl_is_non_negative_and_finite(y in mat(5, 6), y_hat in mat(5, 6), tau in 0.1f64..4.0) {
        let mut g = Graph::default();
        let (a, b) = (g.constant(y), g.constant(y_hat));
        let v = kl_align(&mut g, a, b, tau).unwrap();
        prop_assert!(g.scalar(v) >= -1e-15 && g.scalar(v).is_finite());
    }

    #[test]
    fn vtg_falls_as_the_correct_logit_rises(
        logits in mat(4, 7),
        targets in prop::collection::vec(0usize..7, 4),
        row in 0usize..4,
        bump in 0.01f64..5.0,
    ) {
        let mask = vec![true; 4];
        let eval = |l: &Mat| {
            let mut g = Graph::default();
            let v = g.constant(l.clone());
            let loss = vtg_loss(&mut g, v, &targets, &mask).unwrap();
            g.scalar(loss)
        };
        let before = eval(&logits);
        let mut raised = logits.clone();
        raised[[row, targets[row]]] += bump;
        let after = eval(&raised);
        prop_assert!(after < before, "{after} !< {before}");
        prop_assert!(after >= 0.0);
    }

    #[test]
    fn weighted_total_is_the_weighted_sum(
        vtg in 0.0f64..10.0, cf in 0.0f64..10.0, cb in 0.0f64..10.0, kl in 0.0f64..10.0,
        wv in 0.0f64..2.0, wc in 0.0f64..2.0, wk in 0.0f64..2.0,
    ) {
        let spec = LossSpec { vtg: Some(wv), ccl: Some(wc), kl: Some(wk), ..LossSpec::all() };
        let parts = LossParts { vtg: Some(vtg), ccl_forward: Some(cf), ccl_backward: Some(cb), kl: Some(kl) };
        let b = total_stage_loss(&spec, &parts).unwrap();
        prop_assert!((b.total - (wv * vtg + wc * (cf + cb) + wk * kl)).abs() < 1e-12);
        prop_assert!(b.total >= 0.0);
    }
}

#[test]
fn kl_of_a_distribution_with_itself_vanishes() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = (1usize..8, 1usize..12, 0.05f64..5.0).prop_flat_map(|(r, c, t)| (mat(r, c), Just(t)));
    for _ in 0..1000 {
        let (y, tau) = strategy.new_tree(&mut runner).unwrap().current();
        let mut g = Graph::default();
        let a = g.constant(y.clone());
        let b = g.constant(y);
        let v = kl_align(&mut g, a, b, tau).unwrap();
        assert!(g.scalar(v).abs() <= 1e-12, "KL(p, p) = {}", g.scalar(v));
    }
}
