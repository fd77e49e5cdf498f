use osmosis_core::denoiser::GaussianOracleDenoiser;
use osmosis_core::diffusion::{NoiseSchedule, ScheduleParams};
use osmosis_core::formation::{apply_formation, WaterParams};
use osmosis_core::guidance::{
    ablation_preset, clip_gradient, compute_losses, forward_model, loss_gradient, restore_with_depth, GuidanceConfig,
    PhiOptimizer,
};
use osmosis_core::Raster;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
    Raster::from_fn(4, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// The reconstruction term with the depth weights frozen at `w0`, plus the
/// auxiliary terms, evaluated from the forward model alone.
fn frozen_weight_loss(x: &Raster, y: &Raster, phi: &WaterParams, cfg: &GuidanceConfig, w0: &[f64]) -> f64 {
    let f = forward_model(x, phi, cfg).unwrap();
    let n = x.plane_len();
    let mut rec = 0.0;
    for c in 0..3 {
        for i in 0..n {
            let r = y.plane(c)[i] - f.plane(c)[i];
            rec += w0[i] * w0[i] * r * r;
        }
    }
    let aux = compute_losses(x, y, phi, cfg).unwrap();
    rec + aux.l_val + aux.l_avrg
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let mut cfg = if k % 2 == 0 { GuidanceConfig::real_world() } else { GuidanceConfig::simulation() };
        cfg.lambda_a = 0.5;
        let x = state(&mut rng, 3, 3);
        let y = Raster::from_fn(3, 3, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let phi = WaterParams::new(
            std::array::from_fn(|_| rng.gen_range(0.2..1.8)),
            std::array::from_fn(|_| rng.gen_range(0.2..1.8)),
            std::array::from_fn(|_| rng.gen_range(0.05..0.9)),
        );
        let w0: Vec<f64> = x.plane(3).iter().map(|&d| cfg.weight_scaling.apply(d)).collect();
        let (_, g) = loss_gradient(&x, &y, &phi, &cfg).unwrap();
        for i in 0..x.len() {
            let bump = |s: f64| {
                let mut xx = x.clone();
                xx.data_mut()[i] += s;
                frozen_weight_loss(&xx, &y, &phi, &cfg, &w0)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let rel = (g.data()[i] - fd).abs() / g.data()[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn far_out_of_range_depth_stays_finite() {
    let cfg = GuidanceConfig::simulation();
    let mut x = Raster::filled(4, 2, 2, 0.3);
    for (i, v) in x.plane_mut(3).iter_mut().enumerate() {
        *v = [-150.0, 40.0, 0.5, -1.0][i];
    }
    let y = Raster::filled(3, 2, 2, 0.4);
    let (loss, g) = loss_gradient(&x, &y, &WaterParams::simulation_init(), &cfg).unwrap();
    assert!(loss.total.is_finite() && g.all_finite());
    // Clamped pixels get no depth gradient; in-range ones do.
    assert_eq!(&g.plane(3)[..2], &[0.0, 0.0]);
    assert!(g.plane(3)[2] != 0.0);
}

#[test]
fn phi_is_recovered_from_a_known_clean_state() {
    let cfg = GuidanceConfig::real_world();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..2 {
        let x0 = state(&mut rng, 24, 24);
        let truth = WaterParams::new(
            std::array::from_fn(|_| rng.gen_range(0.5..1.6)),
            std::array::from_fn(|_| rng.gen_range(0.4..1.3)),
            std::array::from_fn(|_| rng.gen_range(0.1..0.8)),
        );
        let y = forward_model(&x0, &truth, &cfg).unwrap();
        let mut phi = cfg.initial_phi();
        let mut opt = PhiOptimizer::new(&cfg);
        for _ in 0..700 {
            phi = opt.run(&x0, &y, &phi, &cfg).unwrap();
        }
        for (a, b) in phi.to_array().iter().zip(truth.to_array()) {
            assert!((a - b).abs() <= 0.05, "{phi:?} vs {truth:?}");
        }
    }
}

#[test]
fn ablation_presets_switch_one_thing() {
    let base = GuidanceConfig::simulation();
    let v1 = ablation_preset(&base, 1).unwrap();
    assert!(!v1.use_l_val && !v1.use_l_avrg && v1.use_depth_weighting);
    let v2 = ablation_preset(&base, 2).unwrap();
    assert_eq!(GuidanceConfig { use_depth_weighting: true, ..v2 }, base);
    let v3 = ablation_preset(&base, 3).unwrap();
    assert_eq!(v3.scale_depth, 4.0);
    assert!(ablation_preset(&base, 7).is_err());
}

#[test]
fn frozen_depth_is_returned_and_only_colour_moves_under_guidance() {
    let s = NoiseSchedule::new(ScheduleParams::compressed(30)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let oracle = GaussianOracleDenoiser::new(state(&mut rng, 4, 4).map(|v| 0.5 * v), 0.1, s.clone()).unwrap();
    let j = Raster::from_fn(3, 4, 4, |_, _, _| rng.gen_range(0.2..0.8));
    let d_hat = Raster::from_fn(1, 4, 4, |_, y, x| -0.8 + 0.1 * (y + x) as f64);
    let cfg = GuidanceConfig::simulation();
    let depth = d_hat.map(|v| cfg.depth_scaling.apply(v) + 0.05);
    let y = apply_formation(&j, &depth, &WaterParams::simulation_init()).unwrap();
    let r = restore_with_depth(&y, &oracle, &s, &cfg, Some(&d_hat), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(r.depth_hat_raw, d_hat);
    assert_eq!(r.depth, d_hat.map(|v| cfg.depth_scaling.apply(v)));
    assert!(r.j.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(r.loss_trace.len(), 30);
    assert!(!r.unconditional);
}

proptest! {
    #[test]
    fn clipping_is_idempotent_and_bounded(vals in prop::collection::vec(-1.0f64..1.0, 1..40), c in 1e-4f64..0.5) {
        let g = Raster::from_vec(1, 1, vals.len(), vals).unwrap();
        let once = clip_gradient(&g, c);
        prop_assert_eq!(clip_gradient(&once, c), once.clone());
        prop_assert!(once.data().iter().all(|v| v.abs() <= c));
    }
}
