//! DDPM machinery: noise schedule, forward corruption, clean-image estimate,
//! ancestral reverse step, unconditional sampling and the hybrid training
//! objective.

use std::f64::consts::{LN_2, SQRT_2};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    check_prediction, BatchLoss, Denoiser, Prediction, PredictionGrad, TrainableDenoiser,
};
use crate::error::{Error, Result};
use crate::raster::{Raster, RgbdImage};

/// Parameters of a linear variance schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// 1000 steps from 1e-4 to 2e-2.
    pub const STANDARD: ScheduleParams = ScheduleParams {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 2e-2,
    };

    /// Shorter chain whose betas are stretched by `1000 / steps`, so that
    /// `ᾱ` at the final step matches the 1000-step schedule.
    pub fn compressed(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * k,
            beta_end: 2e-2 * k,
        }
    }
}

/// β/α/ᾱ tables of the diffusion Markov chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Builds a linear schedule of `steps` betas from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    #[inline]
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        }
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `ᾱ_{t-1}`, with `ᾱ_{-1} = 1`.
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance `β̃_t` of the true posterior `q(x_{t-1} | x_t, x_0)`.
    #[inline]
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.betas[t] * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bars[t])
    }

    /// `log β̃_t`, with the `t = 0` entry (where `β̃ = 0`) replaced by `t = 1`.
    #[inline]
    pub fn posterior_log_variance_clipped(&self, t: usize) -> f64 {
        if t == 0 {
            if self.steps() > 1 {
                self.posterior_variance(1).ln()
            } else {
                self.betas[0].ln()
            }
        } else {
            self.posterior_variance(t).ln()
        }
    }

    /// Coefficients `(c0, ct)` with `μ̃(x_t, x_0) = c0·x_0 + ct·x_t`.
    #[inline]
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        let abp = self.alpha_bar_prev(t);
        (
            self.betas[t] * abp.sqrt() / (1.0 - ab),
            (1.0 - abp) * self.alphas[t].sqrt() / (1.0 - ab),
        )
    }
}

/// Closed-form marginal `x_t = √ᾱ_t·x_0 + √(1-ᾱ_t)·ε`.
pub fn q_sample(x0: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Clean-image estimate `x̂_0 = (x_t − √(1-ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(x_t: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (inv, b) = (ab.sqrt().recip(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| (x - b * e) * inv)
}

/// Reverse-step mean `μ_θ = (x_t − (1-α_t)/√(1-ᾱ_t)·ε̂)/√α_t`.
pub fn posterior_mean(x_t: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let a = sched.alpha(t);
    let k = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = a.sqrt().recip();
    x_t.zip_map(eps, |x, e| (x - k * e) * inv)
}

/// Which reverse-step variance the sampler uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// The denoiser's learned variance when it provides one, else `β_t`.
    #[default]
    Learned,
    /// Always `β_t`.
    Fixed,
}

/// Settings of one ancestral step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOptions {
    pub variance: VarianceMode,
    /// Clamp `x̂_0` to [-1, 1] before forming the step mean.
    pub clip_denoised: bool,
}

impl From<VarianceMode> for StepOptions {
    fn from(variance: VarianceMode) -> Self {
        Self {
            variance,
            clip_denoised: false,
        }
    }
}

/// Per-element log-variance of the reverse step.
pub fn step_log_variance(
    t: usize,
    pred: &Prediction,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Raster {
    match (&pred.var, mode) {
        (Some(v), VarianceMode::Learned) => {
            let (lb, lp) = (sched.beta(t).ln(), sched.posterior_log_variance_clipped(t));
            v.map(|raw| {
                let frac = (raw + 1.0) * 0.5;
                frac * lb + (1.0 - frac) * lp
            })
        }
        _ => Raster::filled(
            pred.eps.channels(),
            pred.eps.height(),
            pred.eps.width(),
            sched.beta(t).ln(),
        ),
    }
}

/// Draws a standard-normal raster, consuming the generator in raster order.
pub fn standard_normal<R: Rng + ?Sized>(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Raster {
    Raster::from_fn(channels, height, width, |_, _, _| rng.sample(StandardNormal))
}

/// Ancestral update from an already computed prediction. At `t = 0` the mean
/// is returned and the generator is not touched.
pub fn reverse_step_from_prediction<R: Rng + ?Sized>(
    x_t: &Raster,
    t: usize,
    pred: &Prediction,
    sched: &NoiseSchedule,
    opts: impl Into<StepOptions>,
    rng: &mut R,
) -> Result<Raster> {
    let opts = opts.into();
    check_prediction(x_t, pred)?;
    let mut mean = if opts.clip_denoised {
        let x0 = predict_x0(x_t, t, &pred.eps, sched)?.clamped(-1.0, 1.0);
        let (c0, ct) = sched.posterior_mean_coefs(t);
        x0.zip_map(x_t, |a, b| c0 * a + ct * b)?
    } else {
        posterior_mean(x_t, t, &pred.eps, sched)?
    };
    if t == 0 {
        return Ok(mean);
    }
    let logvar = step_log_variance(t, pred, sched, opts.variance);
    for (m, &lv) in mean.data_mut().iter_mut().zip(logvar.data()) {
        let z: f64 = rng.sample(StandardNormal);
        *m += (0.5 * lv).exp() * z;
    }
    Ok(mean)
}

/// One ancestral step `x_t -> x_{t-1}` of the learned reverse chain.
pub fn ddpm_step<D: Denoiser, R: Rng + ?Sized>(
    x_t: &Raster,
    t: usize,
    denoiser: &D,
    sched: &NoiseSchedule,
    opts: impl Into<StepOptions>,
    rng: &mut R,
) -> Result<Raster> {
    sched.check_step(t)?;
    let pred = denoiser.predict(x_t, t)?;
    reverse_step_from_prediction(x_t, t, &pred, sched, opts, rng)
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` and returns the raw
/// (unclamped) final state as an RGBD image.
pub fn sample_unconditional<D: Denoiser, R: Rng + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    height: usize,
    width: usize,
    opts: impl Into<StepOptions>,
    rng: &mut R,
) -> Result<RgbdImage> {
    let opts = opts.into();
    let mut x = standard_normal(4, height, width, rng);
    for t in (0..sched.steps()).rev() {
        x = ddpm_step(&x, t, denoiser, sched, opts, rng)?;
        if !x.all_finite() {
            return Err(Error::Numerical {
                t,
                detail: "unconditional sample diverged".into(),
            });
        }
    }
    RgbdImage::from_state(&x)
}

/// Losses of one training batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainBatchLoss {
    /// Masked mean-squared noise-prediction error.
    pub l_simple: f64,
    /// Variational-bound term in bits per dimension (trains the variance only).
    pub l_vlb: f64,
    /// `l_simple + vlb_weight·l_vlb`.
    pub total: f64,
}

/// Objective settings for [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainObjective {
    pub vlb_weight: f64,
    /// Value written into invalid depth pixels before noising.
    pub depth_fill: f64,
}

impl Default for TrainObjective {
    fn default() -> Self {
        Self {
            vlb_weight: 1e-3,
            depth_fill: 0.0,
        }
    }
}

/// One optimization step on a batch: uniform `t`, forward corruption,
/// masked noise regression plus the variational bound.
pub fn train_step<D: TrainableDenoiser, R: Rng + ?Sized>(
    batch: &[RgbdImage],
    denoiser: &mut D,
    sched: &NoiseSchedule,
    objective: &TrainObjective,
    rng: &mut R,
) -> Result<TrainBatchLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len());
    let mut items = Vec::with_capacity(batch.len());
    for img in batch {
        let t = rng.gen_range(0..sched.steps());
        let mut x0 = img.to_state();
        let n = x0.plane_len();
        for (d, &valid) in x0.plane_mut(3).iter_mut().zip(&img.mask) {
            if !valid {
                *d = objective.depth_fill;
            }
        }
        debug_assert_eq!(img.mask.len(), n);
        let eps = standard_normal(4, img.height(), img.width(), rng);
        let x_t = q_sample(&x0, t, &eps, sched)?;
        inputs.push(x_t.clone());
        steps.push(t);
        items.push(LossItem {
            x0,
            x_t,
            eps,
            mask: img.mask.clone(),
            t,
        });
    }
    denoiser.fit_batch(
        &inputs,
        &steps,
        HybridLoss {
            items,
            sched,
            objective,
        },
    )
}

struct LossItem {
    x0: Raster,
    x_t: Raster,
    eps: Raster,
    mask: Vec<bool>,
    t: usize,
}

struct HybridLoss<'a> {
    items: Vec<LossItem>,
    sched: &'a NoiseSchedule,
    objective: &'a TrainObjective,
}

impl BatchLoss for HybridLoss<'_> {
    type Output = TrainBatchLoss;

    fn evaluate(self, preds: &[Prediction]) -> Result<(TrainBatchLoss, Vec<PredictionGrad>)> {
        let b = self.items.len() as f64;
        let mut out = TrainBatchLoss::default();
        let mut grads = Vec::with_capacity(preds.len());
        for (item, pred) in self.items.iter().zip(preds) {
            check_prediction(&item.x_t, pred)?;
            let n = item.x0.plane_len();
            let valid = |k: usize| k < 3 * n || item.mask[k - 3 * n];
            let count = (0..4 * n).filter(|&k| valid(k)).count() as f64;

            let mut g_eps = Raster::zeros(4, item.x0.height(), item.x0.width());
            let mut sse = 0.0;
            for k in 0..4 * n {
                if !valid(k) {
                    continue;
                }
                let d = pred.eps.data()[k] - item.eps.data()[k];
                sse += d * d;
                g_eps.data_mut()[k] = 2.0 * d / count / b;
            }
            out.l_simple += sse / count / b;

            let g_var = match &pred.var {
                Some(var) => {
                    let (vlb, g) = vlb_term(item, &pred.eps, var, self.sched, &valid, count)?;
                    out.l_vlb += vlb / b;
                    Some(g.map(|v| v * self.objective.vlb_weight / b))
                }
                None => None,
            };
            grads.push(PredictionGrad {
                eps: g_eps,
                var: g_var,
            });
        }
        out.total = out.l_simple + self.objective.vlb_weight * out.l_vlb;
        if !(out.total.is_finite() && out.l_simple >= 0.0 && out.l_vlb.is_finite()) {
            return Err(Error::Numerical {
                t: self.items[0].t,
                detail: format!("non-finite training loss {out:?}"),
            });
        }
        Ok((out, grads))
    }
}

/// Mean variational-bound term (bits/dim) over valid elements and its
/// gradient with respect to the raw variance output. The mean uses the
/// detached noise prediction.
fn vlb_term(
    item: &LossItem,
    eps: &Raster,
    var: &Raster,
    sched: &NoiseSchedule,
    valid: &dyn Fn(usize) -> bool,
    count: f64,
) -> Result<(f64, Raster)> {
    let t = item.t;
    let mean = posterior_mean(&item.x_t, t, eps, sched)?;
    let (lb, lp) = (sched.beta(t).ln(), sched.posterior_log_variance_clipped(t));
    let dlogvar_dv = 0.5 * (lb - lp);
    let mut grad = Raster::zeros(var.channels(), var.height(), var.width());
    let mut total = 0.0;
    if t == 0 {
        for k in 0..var.len() {
            if !valid(k) {
                continue;
            }
            let frac = (var.data()[k] + 1.0) * 0.5;
            let logvar = frac * lb + (1.0 - frac) * lp;
            let (nll, dnll) = discretized_gaussian_nll(item.x0.data()[k], mean.data()[k], logvar);
            total += nll / LN_2;
            grad.data_mut()[k] = dnll / LN_2 * dlogvar_dv / count;
        }
    } else {
        let (c0, ct) = sched.posterior_mean_coefs(t);
        let true_logvar = sched.posterior_variance(t).ln();
        for k in 0..var.len() {
            if !valid(k) {
                continue;
            }
            let true_mean = c0 * item.x0.data()[k] + ct * item.x_t.data()[k];
            let frac = (var.data()[k] + 1.0) * 0.5;
            let logvar = frac * lb + (1.0 - frac) * lp;
            let diff = true_mean - mean.data()[k];
            let kl = 0.5
                * (-1.0 + logvar - true_logvar
                    + (true_logvar - logvar).exp()
                    + diff * diff * (-logvar).exp());
            let dkl = 0.5 * (1.0 - (true_logvar - logvar).exp() - diff * diff * (-logvar).exp());
            total += kl / LN_2;
            grad.data_mut()[k] = dkl / LN_2 * dlogvar_dv / count;
        }
    }
    Ok((total / count, grad))
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Negative log-likelihood of `x` under a Gaussian discretized to 256 bins
/// on [-1, 1], and its derivative with respect to `logvar`.
pub(crate) fn discretized_gaussian_nll(x: f64, mean: f64, logvar: f64) -> (f64, f64) {
    const HALF_BIN: f64 = 1.0 / 255.0;
    const FLOOR: f64 = 1e-12;
    let inv_std = (-0.5 * logvar).exp();
    let plus = inv_std * (x - mean + HALF_BIN);
    let minus = inv_std * (x - mean - HALF_BIN);
    // d(plus)/d(logvar) = -plus/2
    let (prob, dprob) = if x < -0.999 {
        (std_normal_cdf(plus), std_normal_pdf(plus) * (-0.5 * plus))
    } else if x > 0.999 {
        (
            1.0 - std_normal_cdf(minus),
            -std_normal_pdf(minus) * (-0.5 * minus),
        )
    } else {
        (
            std_normal_cdf(plus) - std_normal_cdf(minus),
            std_normal_pdf(plus) * (-0.5 * plus) - std_normal_pdf(minus) * (-0.5 * minus),
        )
    };
    if prob <= FLOOR {
        (-FLOOR.ln(), 0.0)
    } else {
        (-prob.ln(), -dprob / prob)
    }
}
