//! Checks shared by the unit-level suites and the acceptance target. Each
//! returns a one-line summary, as `Err` when the check fails.

use super::tracking::{max_rel_err, naive_heatmap, random_filter, random_frame};
use ptrack::backend::*;
use ptrack::belief::{Action, Appearance, Belief, Frame, Motion};
use ptrack::geometry::{BoundingBox, Cell};
use ptrack::heatmap::Heatmap;
use ptrack::heuristics::{discounted_horizon, q_init_target};
use ptrack::qnet::{QNet, N_TENSORS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // negated so that NaN fails
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Backend heatmaps against the loop reference on 20 random fixtures.
pub fn correlation_oracle() -> Outcome {
    let cfg = TrackerConfig::default();
    let mut worst = 0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(24..72), rng.random_range(24..72));
        let size = (2 * rng.random_range(1..5) + 1, 2 * rng.random_range(1..5) + 1);
        let frame = random_frame(seed + 1000, w, h);
        let theta = random_filter(seed + 2000, size);
        let center = Cell::new(rng.random_range(0..h), rng.random_range(0..w));
        let roi = roi_at(center, &cfg, size, w, h);
        let got = correlate_roi(&theta, &FeatureMap::from_frame(&frame), roi);
        let err = max_rel_err(got.scores(), &naive_heatmap(&frame, &theta, roi));
        worst = worst.max(err);
        ensure!(err <= 1e-5, "fixture {seed}: relative error {err:e}");
    }
    Ok(format!("20 fixtures, worst relative error {worst:.2e}"))
}

/// TRACK and REINIT spend the same number of candidate evaluations.
pub fn budget_equality(draws: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..draws {
        let cfg = TrackerConfig {
            roi_ratio: rng.random_range(0.2..8.0),
            ..TrackerConfig::default()
        };
        let size = (2 * rng.random_range(0..4) + 1, 2 * rng.random_range(0..4) + 1);
        let (w, h) = (rng.random_range(size.0 as usize..48), rng.random_range(size.1 as usize..48));
        let frame = random_frame(rng.random(), w, h);
        let fm = FeatureMap::from_frame(&frame);
        let theta = random_filter(rng.random(), size);
        let prev = Heatmap::delta(w, h, Cell::new(rng.random_range(0..h), rng.random_range(0..w)));
        let (_, bt) = track_features(&prev, &theta, &fm, &cfg);
        let (_, br) = reinit_features(&theta, &fm, &cfg, &mut rng);
        ensure!(bt == br, "draw {i}: track {bt:?} vs reinit {br:?}");
        let side = roi_side(&cfg, size);
        let ((r0, r1), (c0, c1)) = valid_centers(w, h, size).unwrap();
        let expect = side.min(r1 - r0 + 1) * side.min(c1 - c0 + 1);
        ensure!(
            bt.candidates_evaluated == expect,
            "draw {i}: {} candidates, expected {expect}",
            bt.candidates_evaluated
        );
    }
    Ok(format!("{draws} draws, identical budgets"))
}

/// Textured 9x9 target on a noise background; the second frame moves it by
/// (2, 3).
pub fn golden_scene() -> (Frame, Frame, BoundingBox, Cell) {
    let (w, h) = (64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let bg: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..0.3)).collect();
    let tex: Vec<f32> = (0..81).map(|_| rng.random_range(0.5..1.0)).collect();
    let paint = |cr: usize, cc: usize| {
        let mut p = bg.clone();
        for r in 0..9 {
            for c in 0..9 {
                p[(cr - 4 + r) * w + cc - 4 + c] = tex[r * 9 + c];
            }
        }
        p
    };
    let f0 = Frame::new(0, w, h, paint(30, 30));
    let f1 = Frame::new(1, w, h, paint(32, 33));
    (f0, f1, BoundingBox::new(26, 26, 9, 9), Cell::new(32, 33))
}

/// All four (motion, appearance) branches of a belief step on the golden
/// scene.
pub fn branch_table() -> Outcome {
    let cfg = TrackerConfig::default();
    let (f0, f1, init, moved) = golden_scene();
    let b0 = init_belief(&f0, init, &cfg);
    ensure!(b0.heatmap.argmax() == Cell::new(30, 30), "initial peak at {:?}", b0.heatmap.argmax());
    ensure!(b0.heatmap.sum() == 1.0, "initial heatmap is not a unit delta");
    let fm = FeatureMap::from_frame(&f1);
    let side = roi_side(&cfg, (9, 9));
    ensure!(side == 27, "ROI side {side}");

    let run = |a: Action, seed: u64| -> (Belief, Budget) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        step_belief_features(&b0, &fm, a, &cfg, &mut rng)
    };
    let tu = run(Action::new(Motion::Track, Appearance::Update), 0);
    let ti = run(Action::new(Motion::Track, Appearance::Ignore), 0);
    let ru = run(Action::new(Motion::Reinit, Appearance::Update), 5);
    let ri = run(Action::new(Motion::Reinit, Appearance::Ignore), 5);

    // TRACK finds the moved target inside the ROI around the old peak; the
    // init filter is fitted against negatives, so the target scores well
    // below 1 but clearly above everything else
    let roi = roi_at(Cell::new(30, 30), &cfg, (9, 9), 64, 64);
    for (b, budget) in [&tu, &ti] {
        ensure!(b.heatmap.argmax() == moved, "TRACK peak at {:?}", b.heatmap.argmax());
        ensure!(b.heatmap.max() > 0.5, "TRACK peak score {}", b.heatmap.max());
        ensure!(budget.candidates_evaluated == side * side, "TRACK budget {budget:?}");
        for (i, &s) in b.heatmap.scores().iter().enumerate() {
            ensure!(roi.contains(Cell::new(i / 64, i % 64)) || s == 0.0, "score outside the ROI at {i}");
        }
    }
    ensure!(tu.0.heatmap == ti.0.heatmap, "TRACK heatmap depends on the appearance action");

    // REINIT searches an ROI drawn from the rng, identically for both
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let center = draw_reinit_center(&cfg, (9, 9), 64, 64, &mut rng);
    let roi = roi_at(center, &cfg, (9, 9), 64, 64);
    ensure!(ru.0.heatmap == ri.0.heatmap, "REINIT heatmap depends on the appearance action");
    ensure!(ru.0.heatmap == correlate_roi(&b0.appearance, &fm, roi), "REINIT heatmap differs from its ROI search");
    ensure!(ru.1 == tu.1, "REINIT budget {:?} vs TRACK {:?}", ru.1, tu.1);

    // IGNORE carries the filter over bit for bit; UPDATE refits it at the
    // new peak
    ensure!(ti.0.appearance == b0.appearance, "TRACK+IGNORE changed the filter");
    ensure!(ri.0.appearance == b0.appearance, "REINIT+IGNORE changed the filter");
    ensure!(
        tu.0.appearance == update_appearance_features(&b0.appearance, &tu.0.heatmap, &fm, &cfg),
        "TRACK+UPDATE filter differs from a refit at the new peak"
    );
    ensure!(
        ru.0.appearance == update_appearance_features(&b0.appearance, &ru.0.heatmap, &fm, &cfg),
        "REINIT+UPDATE filter differs from a refit at the new peak"
    );
    ensure!(tu.0.appearance != b0.appearance, "UPDATE left the filter unchanged");
    Ok("TRACK/REINIT x UPDATE/IGNORE reproduced, IGNORE bit-exact".into())
}

/// Closed-form discounted horizon against the explicit finite sum.
pub fn q_init_closed_forms(pairs: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Action::new(Motion::Track, Appearance::Update);
    let mut worst = 0f64;
    for i in 0..pairs {
        let gamma: f64 = if i == 0 { 0.95 } else { rng.random_range(0.0..0.99) };
        let remaining: u64 = rng.random_range(0..500);
        let sum: f64 = (0..remaining).map(|k| gamma.powi(k as i32)).sum();
        let (m, u) = q_init_target(a, a, Some(remaining), gamma);
        let err = (m - sum).abs().max((u - sum).abs());
        worst = worst.max(err);
        ensure!(err <= 1e-9, "gamma {gamma}, remaining {remaining}: {m} vs {sum}");
    }
    let capped = q_init_target(a, a, None, 0.95).0;
    ensure!((capped - 20.0).abs() <= 1e-9, "unbounded horizon at 0.95 gives {capped}");
    ensure!(
        (discounted_horizon(Some(100_000), 0.95) - 20.0).abs() <= 1e-9,
        "long horizon does not approach 20"
    );
    Ok(format!("{pairs} pairs, worst error {worst:.1e}, capped value {capped}"))
}

/// Backprop against central differences on five kink-free cases.
pub fn gradient_check(eps: f32, tol: f64) -> Outcome {
    let mut worst = 0f64;
    for case in 0..5 {
        let seed = super::smooth_case(case);
        let r = super::gradcheck(seed, eps);
        worst = worst.max(r.max_rel);
        ensure!(r.max_rel <= tol, "seed {seed}: worst {} (rel {:e})", r.worst, r.max_rel);
        ensure!(r.checked == QNet::zeros().n_params(), "seed {seed}: only {} parameters checked", r.checked);
        for k in 0..N_TENSORS {
            ensure!(r.nonzero[k] > 0, "seed {seed}: tensor {k} has no gradient");
        }
    }
    Ok(format!("5 cases, every parameter, worst relative error {worst:.2e}"))
}
