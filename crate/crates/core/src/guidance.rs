//! Physics-guided posterior sampling: the underwater forward model on the
//! clean-image estimate, the reconstruction and auxiliary losses, clipped
//! per-channel guidance, and in-loop fitting of the water parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{predict_x0, reverse_step_from_prediction, standard_normal, NoiseSchedule, StepOptions, VarianceMode};
use crate::error::{Error, Result};
use crate::formation::{formation_unchecked, jacobian_unchecked, DepthScaling, WaterGrad, WaterParams};
use crate::nn::{Adam, AdamConfig};
use crate::raster::Raster;

/// Starting point of the water-parameter fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiInit {
    pub phi_a: [f64; 3],
    /// Ignored when the parameters are tied.
    pub phi_b: [f64; 3],
    pub phi_inf: [f64; 3],
}

impl PhiInit {
    pub const REAL_WORLD: PhiInit = PhiInit {
        phi_a: [1.1, 0.95, 0.95],
        phi_b: [0.95, 0.8, 0.8],
        phi_inf: [0.14, 0.29, 0.49],
    };

    pub const SIMULATION: PhiInit = PhiInit {
        phi_a: [1.1, 0.95, 0.95],
        phi_b: [1.1, 0.95, 0.95],
        phi_inf: [0.2, 0.4, 0.7],
    };
}

/// Every hyperparameter of the guided sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance scale for the red, green and blue state channels.
    pub scale_rgb: [f64; 3],
    /// Guidance scale for the depth state channel.
    pub scale_depth: f64,
    pub lambda_v: f64,
    pub lambda_a: f64,
    /// Valid-range threshold on `|Ĵ|` in the [-1, 1] frame.
    pub t_v: f64,
    /// Target channel mean in the [0, 1] frame.
    pub t_a: f64,
    /// Elementwise clip applied to the gradient with respect to `x_t`.
    pub clip_value: f64,
    /// Water parameters are fitted while `optim_end <= t/T <= optim_start`.
    pub optim_start: f64,
    pub optim_end: f64,
    pub n_phi_iters: usize,
    pub phi_optimizer: PhiOptimizerKind,
    pub phi_lr: f64,
    pub phi_init: PhiInit,
    /// Map from diffusion depth to the metric depth used in the forward model.
    pub depth_scaling: DepthScaling,
    /// Map from diffusion depth to the reconstruction-loss weight.
    pub weight_scaling: DepthScaling,
    pub use_depth_weighting: bool,
    pub use_l_val: bool,
    pub use_l_avrg: bool,
    pub tie_phi: bool,
    /// One shared tied coefficient for all channels.
    pub haze: bool,
    pub variance: VarianceMode,
    /// Clamp `x̂_0` to [-1, 1] when forming the ancestral step mean. The loss
    /// sees the unclamped colour either way.
    pub clip_denoised: bool,
    /// Drop the denoiser Jacobian from the guidance gradient (diagnostics only).
    pub jacobian_free: bool,
    /// Keep `x̂_0` every this many steps; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::real_world()
    }
}

impl GuidanceConfig {
    /// Defaults for real-world imagery.
    pub fn real_world() -> Self {
        Self {
            scale_rgb: [7.0; 3],
            scale_depth: 0.9,
            lambda_v: 20.0,
            lambda_a: 0.5,
            t_v: 0.7,
            t_a: 0.5,
            clip_value: 0.005,
            optim_start: 0.7,
            optim_end: 0.0,
            n_phi_iters: 20,
            phi_optimizer: PhiOptimizerKind::Adam,
            phi_lr: 1e-3,
            phi_init: PhiInit::REAL_WORLD,
            depth_scaling: DepthScaling::REAL_WORLD,
            weight_scaling: DepthScaling::REAL_WORLD,
            use_depth_weighting: true,
            use_l_val: true,
            use_l_avrg: true,
            tie_phi: false,
            haze: false,
            variance: VarianceMode::Learned,
            clip_denoised: true,
            jacobian_free: false,
            snapshot_every: 50,
        }
    }

    /// Defaults for the simulated benchmark (tied model, [0, 1] depth).
    pub fn simulation() -> Self {
        Self {
            scale_rgb: [4.0; 3],
            scale_depth: 1.0,
            lambda_v: 40.0,
            lambda_a: 0.0,
            clip_value: 0.001,
            phi_init: PhiInit::SIMULATION,
            depth_scaling: DepthScaling::SIMULATION,
            tie_phi: true,
            ..Self::real_world()
        }
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            variance: self.variance,
            clip_denoised: self.clip_denoised,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self
            .scale_rgb
            .iter()
            .chain(std::iter::once(&self.scale_depth))
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("guidance scales must be finite and >= 0".into());
        }
        if !(self.clip_value > 0.0 && self.clip_value.is_finite()) {
            return bad(format!("clip_value must be > 0, got {}", self.clip_value));
        }
        if !(0.0 <= self.optim_end && self.optim_end <= self.optim_start && self.optim_start <= 1.0) {
            return bad(format!(
                "optimization window must satisfy 0 <= {} <= {} <= 1",
                self.optim_end, self.optim_start
            ));
        }
        for (name, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_a", self.lambda_a),
            ("t_v", self.t_v),
            ("phi_lr", self.phi_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.t_a.is_finite() {
            return bad("t_a must be finite".into());
        }
        let p = &self.phi_init;
        if p.phi_a.iter().chain(&p.phi_b).any(|v| !(v.is_finite() && *v >= 0.0))
            || p.phi_inf.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return bad("phi_init violates the water-parameter ranges".into());
        }
        self.depth_scaling.validate()?;
        self.weight_scaling.validate()?;
        Ok(())
    }

    /// Water parameters at the start of sampling, with tie and haze applied.
    pub fn initial_phi(&self) -> WaterParams {
        let p = &self.phi_init;
        let mut phi = if self.tie_phi || self.haze {
            WaterParams::tied(p.phi_a, p.phi_inf)
        } else {
            WaterParams::new(p.phi_a, p.phi_b, p.phi_inf)
        };
        if self.haze {
            phi.set_haze(true);
        }
        phi
    }

    /// Whether every guidance scale is zero (plain prior sampling).
    pub fn is_unguided(&self) -> bool {
        self.scale_rgb.iter().all(|&s| s == 0.0) && self.scale_depth == 0.0
    }

    fn channel_scales(&self) -> [f64; 4] {
        [self.scale_rgb[0], self.scale_rgb[1], self.scale_rgb[2], self.scale_depth]
    }

    fn in_optim_window(&self, t: usize, steps: usize) -> bool {
        let frac = t as f64 / steps as f64;
        self.optim_end <= frac && frac <= self.optim_start
    }
}

/// The guidance loss and its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_val: f64,
    pub l_avrg: f64,
    pub total: f64,
}

fn check_state(x0: &Raster) -> Result<()> {
    if x0.channels() != 4 {
        return Err(Error::Shape(format!(
            "state has {} channels, expected 4",
            x0.channels()
        )));
    }
    Ok(())
}

fn check_observation(x0: &Raster, y: &Raster) -> Result<()> {
    if y.shape() != (3, x0.height(), x0.width()) {
        return Err(Error::Shape(format!(
            "observation {:?} does not match state {:?}",
            y.shape(),
            x0.shape()
        )));
    }
    Ok(())
}

/// Colour in [0, 1] and metric depth from a diffusion-range state. Depth is
/// clamped to [-1, 1] first: early estimates can sit far outside it, where
/// the scaled depth turns negative and the exponentials overflow.
fn physical(x0: &Raster, scaling: &DepthScaling) -> (Raster, Raster) {
    let j = x0.select_channels(0, 3).to_unit_range();
    let d = x0.select_channels(3, 4).map(|v| scaling.apply(v.clamp(-1.0, 1.0)));
    (j, d)
}

/// Predicted underwater image `f_φ(x̂_0)` in [0, 1] units. Colour is used
/// as is; depth goes through the same clamp as the restored depth map.
pub fn forward_model(x0: &Raster, phi: &WaterParams, cfg: &GuidanceConfig) -> Result<Raster> {
    check_state(x0)?;
    let (j, d) = physical(x0, &cfg.depth_scaling);
    Ok(formation_unchecked(&j, &d, phi))
}

/// Per-pixel weight of the reconstruction loss (treated as a constant).
fn rec_weights(x0: &Raster, cfg: &GuidanceConfig) -> Vec<f64> {
    let d = x0.plane(3);
    if cfg.use_depth_weighting {
        d.iter().map(|&v| cfg.weight_scaling.apply(v.clamp(-1.0, 1.0))).collect()
    } else {
        vec![1.0; d.len()]
    }
}

/// Loss terms at `x̂_0`.
pub fn compute_losses(x0: &Raster, y: &Raster, phi: &WaterParams, cfg: &GuidanceConfig) -> Result<LossBreakdown> {
    Ok(loss_and_gradient(x0, y, phi, cfg, false)?.0)
}

/// Loss terms and `∂L/∂x̂_0` (4 channels). The depth weight of the
/// reconstruction term is held constant.
pub fn loss_gradient(x0: &Raster, y: &Raster, phi: &WaterParams, cfg: &GuidanceConfig) -> Result<(LossBreakdown, Raster)> {
    let (l, g) = loss_and_gradient(x0, y, phi, cfg, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn loss_and_gradient(
    x0: &Raster,
    y: &Raster,
    phi: &WaterParams,
    cfg: &GuidanceConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Raster>)> {
    check_state(x0)?;
    check_observation(x0, y)?;
    let n = x0.plane_len();
    let (j, d) = physical(x0, &cfg.depth_scaling);
    let f = formation_unchecked(&j, &d, phi);
    let w = rec_weights(x0, cfg);
    let mut out = LossBreakdown::default();
    let mut grad = want_grad.then(|| Raster::zeros(4, x0.height(), x0.width()));

    let jac = want_grad.then(|| jacobian_unchecked(&j, &d, phi));
    for c in 0..3 {
        let (fc, yc) = (f.plane(c), y.plane(c));
        for i in 0..n {
            let r = yc[i] - fc[i];
            let w2 = w[i] * w[i];
            out.l_rec += w2 * r * r;
            if let (Some(g), Some(jac)) = (grad.as_mut(), jac.as_ref()) {
                let k = c * n + i;
                let dl_df = -2.0 * w2 * r;
                // dĴ'/dĴ = 1/2, dD/dD̂ = scale
                g.data_mut()[k] += dl_df * jac.d_i_d_j.data()[k] * 0.5;
                if x0.data()[3 * n + i].abs() <= 1.0 {
                    g.data_mut()[3 * n + i] += dl_df * jac.d_i_d_d.data()[k] * cfg.depth_scaling.scale;
                }
            }
        }
    }

    if cfg.use_l_val && cfg.lambda_v != 0.0 {
        for k in 0..3 * n {
            let v = x0.data()[k];
            let excess = (v.abs() - cfg.t_v).max(0.0);
            out.l_val += cfg.lambda_v * excess * excess;
            if let Some(g) = grad.as_mut() {
                g.data_mut()[k] += 2.0 * cfg.lambda_v * excess * v.signum();
            }
        }
    }

    if cfg.use_l_avrg && cfg.lambda_a != 0.0 {
        for c in 0..3 {
            let dev = j.channel_mean(c) - cfg.t_a;
            out.l_avrg += cfg.lambda_a * dev.abs();
            if let Some(g) = grad.as_mut() {
                let s = cfg.lambda_a * sign(dev) * 0.5 / n as f64;
                for v in g.plane_mut(c) {
                    *v += s;
                }
            }
        }
    }

    out.total = out.l_rec + out.l_val + out.l_avrg;
    Ok((out, grad))
}

/// Sign with `sign(0) = 0`, the subgradient used for `|·|`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise clip to `[-c, c]`.
pub fn clip_gradient(g: &Raster, c: f64) -> Raster {
    g.map(|v| v.clamp(-c, c))
}

/// Gradient of the pixel-mean reconstruction loss with respect to φ at a
/// fixed `x̂_0`.
pub fn phi_gradient(x0: &Raster, y: &Raster, phi: &WaterParams, cfg: &GuidanceConfig) -> Result<WaterGrad> {
    check_state(x0)?;
    check_observation(x0, y)?;
    let n = x0.plane_len();
    let (j, d) = physical(x0, &cfg.depth_scaling);
    let f = formation_unchecked(&j, &d, phi);
    let jac = jacobian_unchecked(&j, &d, phi);
    let w = rec_weights(x0, cfg);
    let mut g = WaterGrad::default();
    for c in 0..3 {
        let (mut ga, mut gb, mut gi) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let k = c * n + i;
            let dl_df = -2.0 * w[i] * w[i] * (y.data()[k] - f.data()[k]);
            ga += dl_df * jac.d_i_d_phi_a.data()[k];
            gb += dl_df * jac.d_i_d_phi_b.data()[k];
            gi += dl_df * jac.d_i_d_phi_inf.data()[k];
        }
        g.phi_a[c] = ga / n as f64;
        g.phi_b[c] = gb / n as f64;
        g.phi_inf[c] = gi / n as f64;
    }
    Ok(g)
}

/// Update rule for the water parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiOptimizerKind {
    /// Adam with step `phi_lr`; moments persist over a whole restoration.
    #[default]
    Adam,
    /// Plain gradient descent with step `phi_lr`.
    GradientDescent,
}

/// Stateful φ optimizer. Every update is followed by projection onto the
/// valid set.
#[derive(Clone, Debug)]
pub struct PhiOptimizer {
    kind: PhiOptimizerKind,
    adam: Adam,
}

impl PhiOptimizer {
    pub fn new(cfg: &GuidanceConfig) -> Self {
        let adam = AdamConfig {
            lr: cfg.phi_lr,
            max_grad_norm: 0.0,
            warmup: 0,
            ..AdamConfig::default()
        };
        Self {
            kind: cfg.phi_optimizer,
            adam: Adam::new(adam, 9),
        }
    }

    /// Updates taken so far.
    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Runs `n_phi_iters` updates with `x̂_0` held fixed. Gradients are
    /// those of [`phi_gradient`].
    pub fn run(&mut self, x0: &Raster, y: &Raster, phi: &WaterParams, cfg: &GuidanceConfig) -> Result<WaterParams> {
        check_state(x0)?;
        check_observation(x0, y)?;
        let mut phi = phi.clone();
        if cfg.n_phi_iters == 0 {
            return Ok(phi);
        }
        let (j, d) = physical(x0, &cfg.depth_scaling);
        let w2: Vec<f64> = rec_weights(x0, cfg).iter().map(|w| w * w).collect();
        for _ in 0..cfg.n_phi_iters {
            let g = fused_phi_gradient(&j, d.plane(0), &w2, y, &phi);
            match self.kind {
                PhiOptimizerKind::GradientDescent => phi.descend(&g, cfg.phi_lr),
                PhiOptimizerKind::Adam => {
                    let grads = phi.merge_grad(&g).to_array();
                    let mut p = phi.to_array();
                    self.adam.update(&mut p, &grads);
                    phi.set_array(&p);
                }
            }
        }
        Ok(phi)
    }
}

/// Same value as [`phi_gradient`] from precomputed colour, depth and
/// squared weights.
fn fused_phi_gradient(j: &Raster, d: &[f64], w2: &[f64], y: &Raster, phi: &WaterParams) -> WaterGrad {
    let n = d.len();
    let mut g = WaterGrad::default();
    let (a, b, inf) = (phi.phi_a(), phi.phi_b(), phi.phi_inf());
    for c in 0..3 {
        let (jc, yc) = (j.plane(c), y.plane(c));
        let (mut ga, mut gb, mut gi) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let ea = (-a[c] * d[i]).exp();
            let eb = if a[c] == b[c] { ea } else { (-b[c] * d[i]).exp() };
            let f = jc[i] * ea + inf[c] * (1.0 - eb);
            let dl_df = -2.0 * w2[i] * (yc[i] - f);
            ga -= dl_df * jc[i] * d[i] * ea;
            gb += dl_df * inf[c] * d[i] * eb;
            gi += dl_df * (1.0 - eb);
        }
        g.phi_a[c] = ga / n as f64;
        g.phi_b[c] = gb / n as f64;
        g.phi_inf[c] = gi / n as f64;
    }
    g
}

/// Runs `n_phi_iters` updates of φ from a fresh optimizer state.
pub fn optimize_phi(x0: &Raster, y: &Raster, phi: &WaterParams, cfg: &GuidanceConfig) -> Result<WaterParams> {
    PhiOptimizer::new(cfg).run(x0, y, phi, cfg)
}

/// Outcome of one guided reverse step.
#[derive(Clone, Debug)]
pub struct GuidedStep {
    pub x_prev: Raster,
    /// Clean-image estimate the loss was evaluated on.
    pub x0_hat: Raster,
    pub losses: LossBreakdown,
    /// Clipped gradient with respect to `x_t`.
    pub grad: Raster,
}

/// One step `x_t -> x_{t-1}` of guided ancestral sampling.
#[allow(clippy::too_many_arguments)]
pub fn guided_step<D: Denoiser, R: Rng + ?Sized>(
    x_t: &Raster,
    t: usize,
    y: &Raster,
    phi: &WaterParams,
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<GuidedStep> {
    guided_step_with(x_t, t, y, phi, denoiser, sched, cfg, None, rng)
}

#[allow(clippy::too_many_arguments)]
fn guided_step_with<D: Denoiser, R: Rng + ?Sized>(
    x_t: &Raster,
    t: usize,
    y: &Raster,
    phi: &WaterParams,
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    frozen_depth: Option<&Raster>,
    rng: &mut R,
) -> Result<GuidedStep> {
    sched.check_step(t)?;
    check_state(x_t)?;
    check_observation(x_t, y)?;
    let (pred, trace) = denoiser.predict_traced(x_t, t)?;
    let mut x0 = predict_x0(x_t, t, &pred.eps, sched)?;
    if let Some(fd) = frozen_depth {
        x0.plane_mut(3).copy_from_slice(fd.plane(0));
    }
    let (losses, mut g) = loss_gradient(&x0, y, phi, cfg)?;
    if frozen_depth.is_some() {
        g.plane_mut(3).fill(0.0);
    }

    let ab = sched.alpha_bar(t);
    let inv_sqrt_ab = ab.sqrt().recip();
    // x̂_0 = (x_t − √(1−ᾱ)·ε(x_t)) / √ᾱ
    let mut grad = g.map(|v| v * inv_sqrt_ab);
    if !cfg.jacobian_free && !cfg.is_unguided() {
        let k = -(1.0 - ab).sqrt() * inv_sqrt_ab;
        let through_eps = denoiser.pullback(trace, &g.map(|v| v * k))?;
        grad.axpy(1.0, &through_eps)?;
    }
    if !grad.all_finite() || !losses.total.is_finite() {
        return Err(Error::Numerical {
            t,
            detail: format!("non-finite guidance gradient (loss {:?})", losses),
        });
    }
    let grad = clip_gradient(&grad, cfg.clip_value);

    let mut x_prev = reverse_step_from_prediction(x_t, t, &pred, sched, cfg.step_options(), rng)?;
    for (c, s) in cfg.channel_scales().into_iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (v, &gv) in x_prev.plane_mut(c).iter_mut().zip(grad.plane(c)) {
            *v -= s * gv;
        }
    }
    Ok(GuidedStep {
        x_prev,
        x0_hat: x0,
        losses,
        grad,
    })
}

/// Output of a full restoration run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestorationResult {
    /// Restored colour in [0, 1].
    pub j: Raster,
    /// Metric depth `g(D̂)`, with `D̂` clamped to [-1, 1].
    pub depth: Raster,
    /// Raw final depth channel in the diffusion range.
    pub depth_hat_raw: Raster,
    /// Final 4-channel sampler state.
    pub final_state: Raster,
    pub phi: WaterParams,
    /// Loss at every step, from `t = T-1` down to `0`.
    pub loss_trace: Vec<LossBreakdown>,
    /// `(t, x̂_0)` pairs.
    pub snapshots: Vec<(usize, Raster)>,
    /// All guidance scales were zero.
    pub unconditional: bool,
}

/// Restores an underwater image `y` (3 channels in [0, 1]).
pub fn restore<D: Denoiser, R: Rng + ?Sized>(
    y: &Raster,
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<RestorationResult> {
    restore_with_depth(y, denoiser, sched, cfg, None, rng)
}

/// [`restore`] with an optional externally supplied depth channel (diffusion
/// range, 1 channel) that replaces the sampled depth inside the loss.
pub fn restore_with_depth<D: Denoiser, R: Rng + ?Sized>(
    y: &Raster,
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    frozen_depth: Option<&Raster>,
    rng: &mut R,
) -> Result<RestorationResult> {
    cfg.validate()?;
    if y.channels() != 3 {
        return Err(Error::Shape(format!("observation has {} channels, expected 3", y.channels())));
    }
    if y.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("observation values must lie in [0, 1]".into()));
    }
    if let Some(fd) = frozen_depth {
        if fd.shape() != (1, y.height(), y.width()) {
            return Err(Error::Shape("frozen depth must be one channel matching the image".into()));
        }
    }
    let steps = sched.steps();
    let mut phi = cfg.initial_phi();
    let mut phi_opt = PhiOptimizer::new(cfg);
    let mut x = standard_normal(4, y.height(), y.width(), rng);
    let mut loss_trace = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    for t in (0..steps).rev() {
        let step = guided_step_with(&x, t, y, &phi, denoiser, sched, cfg, frozen_depth, rng)?;
        if cfg.n_phi_iters > 0 && cfg.in_optim_window(t, steps) {
            phi = phi_opt.run(&step.x0_hat, y, &phi, cfg)?;
        }
        loss_trace.push(step.losses);
        if cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0 {
            snapshots.push((t, step.x0_hat));
        }
        x = step.x_prev;
        if !x.all_finite() {
            return Err(Error::Numerical {
                t,
                detail: "sampler state became non-finite".into(),
            });
        }
    }
    let mut d_hat = x.select_channels(3, 4);
    if let Some(fd) = frozen_depth {
        d_hat = fd.clone();
    }
    Ok(RestorationResult {
        j: x.select_channels(0, 3).to_unit_range().clamped(0.0, 1.0),
        depth: d_hat.map(|v| cfg.depth_scaling.apply(v.clamp(-1.0, 1.0))),
        depth_hat_raw: d_hat,
        final_state: x,
        phi,
        loss_trace,
        snapshots,
        unconditional: cfg.is_unguided(),
    })
}

/// Configuration of ablation variant 1..=6 derived from `base`.
///
/// 1: reconstruction loss only; 2: no depth weighting; 3: depth guidance
/// scale equal to the colour scale; 4: tied coefficients; 5: no mean-colour
/// loss; 6: no valid-range loss.
pub fn ablation_preset(base: &GuidanceConfig, variant: u8) -> Result<GuidanceConfig> {
    let mut cfg = base.clone();
    match variant {
        1 => {
            cfg.use_l_val = false;
            cfg.use_l_avrg = false;
        }
        2 => cfg.use_depth_weighting = false,
        3 => cfg.scale_depth = cfg.scale_rgb.iter().sum::<f64>() / 3.0,
        4 => cfg.tie_phi = true,
        5 => cfg.use_l_avrg = false,
        6 => cfg.use_l_val = false,
        v => return Err(Error::Config(format!("unknown ablation variant {v}, expected 1..=6"))),
    }
    Ok(cfg)
}
