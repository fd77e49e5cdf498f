use super::{Denoiser, Prediction};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Exact posterior-mean noise predictor for the prior `x_0 ~ N(μ, σ²I)`:
/// `ε̂ = √(1-ᾱ)·(x_t − √ᾱ·μ) / (ᾱσ² + 1 − ᾱ)`.
#[derive(Clone, Debug)]
pub struct GaussianOracleDenoiser {
    mu: Raster,
    sigma2: f64,
    schedule: NoiseSchedule,
}

impl GaussianOracleDenoiser {
    pub fn new(mu: Raster, sigma2: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!("oracle variance {sigma2} must be >= 0")));
        }
        if !mu.all_finite() {
            return Err(Error::Config("oracle mean is not finite".into()));
        }
        Ok(Self {
            mu,
            sigma2,
            schedule,
        })
    }

    pub fn mean(&self) -> &Raster {
        &self.mu
    }

    pub fn variance(&self) -> f64 {
        self.sigma2
    }

    /// `(√ᾱ, slope)` where `ε̂ = slope·(x_t − √ᾱ·μ)`.
    fn coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt() / (ab * self.sigma2 + 1.0 - ab))
    }
}

impl Denoiser for GaussianOracleDenoiser {
    type Trace = usize;

    fn predict(&self, x_t: &Raster, t: usize) -> Result<Prediction> {
        self.schedule.check_step(t)?;
        x_t.ensure_shape(&self.mu, "oracle input")?;
        let (s, k) = self.coefs(t);
        Ok(Prediction {
            eps: x_t.zip_map(&self.mu, |x, m| k * (x - s * m))?,
            var: None,
        })
    }

    fn predict_traced(&self, x_t: &Raster, t: usize) -> Result<(Prediction, usize)> {
        Ok((self.predict(x_t, t)?, t))
    }

    fn pullback(&self, t: usize, grad_eps: &Raster) -> Result<Raster> {
        self.schedule.check_step(t)?;
        let (_, k) = self.coefs(t);
        Ok(grad_eps.map(|g| k * g))
    }

    fn learns_variance(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{predict_x0, ScheduleParams};

    #[test]
    fn clean_estimate_is_the_gaussian_posterior_mean() {
        let s = NoiseSchedule::new(ScheduleParams::STANDARD).unwrap();
        let mu = Raster::from_fn(4, 2, 2, |c, y, x| 0.1 * c as f64 - 0.05 * (y + x) as f64);
        let o = GaussianOracleDenoiser::new(mu.clone(), 0.3, s.clone()).unwrap();
        let x = Raster::from_fn(4, 2, 2, |c, y, x| 0.7 - 0.2 * c as f64 + 0.1 * (y * 2 + x) as f64);
        for t in [0, 250, 999] {
            let p = o.predict(&x, t).unwrap();
            let x0 = predict_x0(&x, t, &p.eps, &s).unwrap();
            let ab = s.alpha_bar(t);
            // E[x0 | x_t] for a scalar Gaussian prior and Gaussian likelihood.
            for i in 0..x.len() {
                let m = mu.data()[i];
                let want = m + 0.3 * ab.sqrt() / (ab * 0.3 + 1.0 - ab) * (x.data()[i] - ab.sqrt() * m);
                assert!((x0.data()[i] - want).abs() < 1e-9, "t={t}");
            }
        }
    }

    #[test]
    fn pullback_is_the_transposed_slope() {
        let s = NoiseSchedule::new(ScheduleParams::compressed(100)).unwrap();
        let o = GaussianOracleDenoiser::new(Raster::zeros(4, 1, 2), 0.5, s).unwrap();
        let x = Raster::filled(4, 1, 2, 0.3);
        let (p, tr) = o.predict_traced(&x, 40).unwrap();
        assert_eq!(p, o.predict(&x, 40).unwrap());
        let g = Raster::filled(4, 1, 2, 1.0);
        let back = o.pullback(tr, &g).unwrap();
        let h = 1e-6;
        let xp = x.map(|v| v + h);
        let fd = (o.predict(&xp, 40).unwrap().eps.data()[0] - p.eps.data()[0]) / h;
        assert!((fd - back.data()[0]).abs() < 1e-6);
    }
}
