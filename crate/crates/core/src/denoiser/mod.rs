//! Noise-prediction networks: the shared contract, a small trainable
//! U-Net and an exact Gaussian-prior oracle.

mod oracle;
mod unet;

pub use oracle::GaussianOracleDenoiser;
pub use unet::{ToyUNet, ToyUNetConfig, UNetTrace};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Output of a denoiser at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Predicted noise, same shape as the input state.
    pub eps: Raster,
    /// Raw variance-interpolation output `v`; the step log-variance is
    /// `((v+1)/2)·log β_t + (1 − (v+1)/2)·log β̃_t`.
    pub var: Option<Raster>,
}

/// Cotangents on a [`Prediction`].
#[derive(Clone, Debug)]
pub struct PredictionGrad {
    pub eps: Raster,
    pub var: Option<Raster>,
}

/// A function `(x_t, t) -> (ε̂, Σ̂)` that can pull a cotangent on `ε̂`
/// back to `x_t`.
pub trait Denoiser {
    /// State kept by [`Denoiser::predict_traced`] for a later pullback.
    type Trace;

    fn predict(&self, x_t: &Raster, t: usize) -> Result<Prediction>;

    /// Same prediction as [`Denoiser::predict`], bit for bit, plus a trace.
    fn predict_traced(&self, x_t: &Raster, t: usize) -> Result<(Prediction, Self::Trace)>;

    /// Vector-Jacobian product `(∂ε̂/∂x_t)ᵀ·grad_eps`.
    fn pullback(&self, trace: Self::Trace, grad_eps: &Raster) -> Result<Raster>;

    /// Whether [`Prediction::var`] is populated.
    fn learns_variance(&self) -> bool;
}

/// A denoiser whose parameters can be fitted by gradient descent.
pub trait TrainableDenoiser: Denoiser {
    /// Runs the forward pass on a batch, asks `loss` for output cotangents,
    /// backpropagates and applies one optimizer update.
    fn fit_batch<L>(&mut self, inputs: &[Raster], steps: &[usize], loss: L) -> Result<L::Output>
    where
        L: BatchLoss;
}

/// Loss callback used by [`TrainableDenoiser::fit_batch`].
pub trait BatchLoss {
    type Output;
    fn evaluate(self, predictions: &[Prediction]) -> Result<(Self::Output, Vec<PredictionGrad>)>;
}

pub(crate) fn check_prediction(x_t: &Raster, pred: &Prediction) -> Result<()> {
    if !pred.eps.same_shape(x_t) {
        return Err(Error::Shape(format!(
            "denoiser returned eps of shape {:?} for input {:?}",
            pred.eps.shape(),
            x_t.shape()
        )));
    }
    if let Some(v) = &pred.var {
        if !v.same_shape(x_t) {
            return Err(Error::Shape(format!(
                "denoiser returned variance of shape {:?} for input {:?}",
                v.shape(),
                x_t.shape()
            )));
        }
    }
    Ok(())
}
