//! Underwater image formation: `I = J·e^{-φa·D} + φ∞·(1 - e^{-φb·D})`.
//!
//! Intensities are in the physical [0, 1] frame and depth is a single channel
//! shared by the three color channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// The nine water parameters: attenuation, backscatter and veiling light
/// per color channel.
///
/// Fields are private so that the `tied` and `haze` constraints hold after
/// every mutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterParams {
    phi_a: [f64; 3],
    phi_b: [f64; 3],
    phi_inf: [f64; 3],
    tied: bool,
    haze: bool,
}

impl WaterParams {
    /// Untied parameters, projected onto the valid set.
    pub fn new(phi_a: [f64; 3], phi_b: [f64; 3], phi_inf: [f64; 3]) -> Self {
        let mut p = Self {
            phi_a,
            phi_b,
            phi_inf,
            tied: false,
            haze: false,
        };
        p.project();
        p
    }

    /// Parameters with `φa = φb`, taking the values of `phi_a`.
    pub fn tied(phi_a: [f64; 3], phi_inf: [f64; 3]) -> Self {
        let mut p = Self::new(phi_a, phi_a, phi_inf);
        p.tied = true;
        p.project();
        p
    }

    /// Initial values used for real-world scenes.
    pub fn real_world_init() -> Self {
        Self::new([1.1, 0.95, 0.95], [0.95, 0.8, 0.8], [0.14, 0.29, 0.49])
    }

    /// Initial values used for the tied simulation model.
    pub fn simulation_init() -> Self {
        Self::tied([1.1, 0.95, 0.95], [0.2, 0.4, 0.7])
    }

    pub fn phi_a(&self) -> [f64; 3] {
        self.phi_a
    }

    pub fn phi_b(&self) -> [f64; 3] {
        self.phi_b
    }

    pub fn phi_inf(&self) -> [f64; 3] {
        self.phi_inf
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn is_haze(&self) -> bool {
        self.haze
    }

    pub fn set_tied(&mut self, tied: bool) {
        self.tied = tied;
        self.project();
    }

    /// Haze mode: `φa = φb`, one scalar shared by all channels.
    pub fn set_haze(&mut self, haze: bool) {
        self.haze = haze;
        if haze {
            self.tied = true;
        }
        self.project();
    }

    pub fn set_phi_a(&mut self, v: [f64; 3]) {
        self.phi_a = v;
        if self.tied {
            self.phi_b = v;
        }
        self.project();
    }

    pub fn set_phi_b(&mut self, v: [f64; 3]) {
        self.phi_b = v;
        if self.tied {
            self.phi_a = v;
        }
        self.project();
    }

    pub fn set_phi_inf(&mut self, v: [f64; 3]) {
        self.phi_inf = v;
        self.project();
    }

    /// The gradient with respect to the free parameters, laid out per
    /// field. Under `tied` the two coefficient gradients are summed onto the
    /// shared parameter, under `haze` additionally across channels.
    pub fn merge_grad(&self, grad: &WaterGrad) -> WaterGrad {
        let mut ga = grad.phi_a;
        let mut gb = grad.phi_b;
        if self.tied {
            for c in 0..3 {
                ga[c] += gb[c];
                gb[c] = ga[c];
            }
        }
        if self.haze {
            let s: f64 = ga.iter().sum();
            ga = [s; 3];
            gb = [s; 3];
        }
        WaterGrad {
            phi_a: ga,
            phi_b: gb,
            phi_inf: grad.phi_inf,
        }
    }

    /// One projected gradient-descent update along [`Self::merge_grad`].
    pub fn descend(&mut self, grad: &WaterGrad, lr: f64) {
        let g = self.merge_grad(grad);
        for c in 0..3 {
            self.phi_a[c] -= lr * g.phi_a[c];
            self.phi_b[c] -= lr * g.phi_b[c];
            self.phi_inf[c] -= lr * g.phi_inf[c];
        }
        self.project();
    }

    /// `[φa, φb, φ∞]` flattened.
    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(&self.phi_a);
        out[3..6].copy_from_slice(&self.phi_b);
        out[6..].copy_from_slice(&self.phi_inf);
        out
    }

    /// Replaces the values from a [`Self::to_array`] layout, keeping the
    /// flags, and projects.
    pub fn set_array(&mut self, v: &[f64; 9]) {
        self.phi_a.copy_from_slice(&v[..3]);
        self.phi_b.copy_from_slice(&v[3..6]);
        self.phi_inf.copy_from_slice(&v[6..]);
        self.project();
    }

    /// Restores the invariants: nonnegative coefficients, veiling light in
    /// [0, 1], and the tie/haze equalities.
    pub fn project(&mut self) {
        if self.haze {
            self.tied = true;
            let m = self.phi_a.iter().sum::<f64>() / 3.0;
            self.phi_a = [m; 3];
        }
        if self.tied {
            self.phi_b = self.phi_a;
        }
        for c in 0..3 {
            self.phi_a[c] = sanitize(self.phi_a[c]).max(0.0);
            self.phi_b[c] = sanitize(self.phi_b[c]).max(0.0);
            self.phi_inf[c] = sanitize(self.phi_inf[c]).clamp(0.0, 1.0);
        }
    }

    /// Whether every invariant currently holds.
    pub fn is_valid(&self) -> bool {
        let ranges = (0..3).all(|c| {
            self.phi_a[c] >= 0.0
                && self.phi_b[c] >= 0.0
                && (0.0..=1.0).contains(&self.phi_inf[c])
        });
        let tie = !self.tied || self.phi_a == self.phi_b;
        let haze = !self.haze || (self.phi_a[0] == self.phi_a[1] && self.phi_a[1] == self.phi_a[2]);
        ranges && tie && haze
    }

    /// Largest attenuation or backscatter coefficient.
    pub fn max_coefficient(&self) -> f64 {
        self.phi_a
            .iter()
            .chain(&self.phi_b)
            .fold(0.0_f64, |m, &v| m.max(v))
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v
    }
}

/// Gradient of a scalar with respect to the nine water parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WaterGrad {
    pub phi_a: [f64; 3],
    pub phi_b: [f64; 3],
    pub phi_inf: [f64; 3],
}

impl WaterGrad {
    /// `[φa, φb, φ∞]` flattened, as in [`WaterParams::to_array`].
    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(&self.phi_a);
        out[3..6].copy_from_slice(&self.phi_b);
        out[6..].copy_from_slice(&self.phi_inf);
        out
    }
}

/// Affine map `g(D̂) = scale·(D̂ + offset)` from diffusion-range depth to
/// metric depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScaling {
    pub scale: f64,
    pub offset: f64,
}

impl DepthScaling {
    /// Maps [-1, 1] to [0.56, 3.36].
    pub const REAL_WORLD: DepthScaling = DepthScaling {
        scale: 1.4,
        offset: 1.4,
    };

    /// Maps [-1, 1] to [0, 1].
    pub const SIMULATION: DepthScaling = DepthScaling {
        scale: 0.5,
        offset: 1.0,
    };

    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        let s = Self { scale, offset };
        s.validate()?;
        Ok(s)
    }

    /// `[-1, 1]` must map to nonnegative depth; `(0.5, 1.0)` touches zero
    /// exactly at `D̂ = -1`, which is the documented simulation mapping.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.offset.is_finite()) || self.scale <= 0.0 {
            return Err(Error::Config(format!(
                "depth scaling needs a positive finite scale, got {self:?}"
            )));
        }
        if self.scale * (-1.0 + self.offset) < 0.0 {
            return Err(Error::Config(format!(
                "depth scaling {self:?} maps D̂ = -1 to negative depth"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, d_hat: f64) -> f64 {
        self.scale * (d_hat + self.offset)
    }

    /// Inverse map from metric depth back to the diffusion range.
    #[inline]
    pub fn invert(&self, depth: f64) -> f64 {
        depth / self.scale - self.offset
    }
}

/// Tolerance on the diffusion-range depth accepted by [`scale_depth`].
pub const DEPTH_RANGE_SLACK: f64 = 0.05;

/// Maps a diffusion-range depth raster through `g`.
pub fn scale_depth(d_hat: &Raster, scaling: &DepthScaling) -> Result<Raster> {
    scaling.validate()?;
    let bad = d_hat
        .data()
        .iter()
        .filter(|v| !(v.abs() <= 1.0 + DEPTH_RANGE_SLACK))
        .count();
    if bad > 0 {
        return Err(Error::Domain(format!(
            "{bad} depth values outside [-1, 1] (slack {DEPTH_RANGE_SLACK})"
        )));
    }
    Ok(d_hat.map(|v| scaling.apply(v)))
}

fn check_inputs(j: &Raster, depth: &Raster, allow_zero: bool) -> Result<()> {
    if j.channels() != 3 || depth.channels() != 1 {
        return Err(Error::Shape(format!(
            "formation expects a 3-channel image and 1-channel depth, got {} and {}",
            j.channels(),
            depth.channels()
        )));
    }
    if j.height() != depth.height() || j.width() != depth.width() {
        return Err(Error::Shape("image and depth sizes differ".into()));
    }
    let bad = depth
        .data()
        .iter()
        .filter(|&&d| !d.is_finite() || d < 0.0 || (!allow_zero && d == 0.0))
        .count();
    if bad > 0 {
        return Err(Error::Domain(format!(
            "{bad} pixels have non-positive or non-finite depth"
        )));
    }
    if !j.all_finite() {
        return Err(Error::Domain("clean image contains non-finite values".into()));
    }
    Ok(())
}

/// Applies the formation model. Depth must be strictly positive.
pub fn apply_formation(j: &Raster, depth: &Raster, phi: &WaterParams) -> Result<Raster> {
    check_inputs(j, depth, false)?;
    Ok(formation_unchecked(j, depth, phi))
}

/// Like [`apply_formation`] but also accepts zero depth (the `D → 0` limit
/// and simulated scenes whose depth map touches the camera).
pub fn apply_formation_nonneg(j: &Raster, depth: &Raster, phi: &WaterParams) -> Result<Raster> {
    check_inputs(j, depth, true)?;
    Ok(formation_unchecked(j, depth, phi))
}

pub(crate) fn formation_unchecked(j: &Raster, depth: &Raster, phi: &WaterParams) -> Raster {
    let mut out = Raster::zeros(3, j.height(), j.width());
    let d = depth.plane(0);
    for c in 0..3 {
        let (a, b, inf) = (phi.phi_a[c], phi.phi_b[c], phi.phi_inf[c]);
        let jc = j.plane(c);
        for ((o, &jv), &dv) in out.plane_mut(c).iter_mut().zip(jc).zip(d) {
            *o = jv * (-a * dv).exp() + inf * (1.0 - (-b * dv).exp());
        }
    }
    out
}

/// Per-pixel partial derivatives of the formation output.
#[derive(Clone, Debug)]
pub struct FormationJacobian {
    /// `∂I/∂J`, 3 channels.
    pub d_i_d_j: Raster,
    /// `∂I_c/∂D`, 3 channels (one per output channel).
    pub d_i_d_d: Raster,
    /// `∂I_c/∂φa_c`, 3 channels.
    pub d_i_d_phi_a: Raster,
    /// `∂I_c/∂φb_c`, 3 channels.
    pub d_i_d_phi_b: Raster,
    /// `∂I_c/∂φ∞_c`, 3 channels.
    pub d_i_d_phi_inf: Raster,
}

pub fn formation_jacobian(j: &Raster, depth: &Raster, phi: &WaterParams) -> Result<FormationJacobian> {
    check_inputs(j, depth, true)?;
    Ok(jacobian_unchecked(j, depth, phi))
}

pub(crate) fn jacobian_unchecked(j: &Raster, depth: &Raster, phi: &WaterParams) -> FormationJacobian {
    let (h, w) = (j.height(), j.width());
    let mut jac = FormationJacobian {
        d_i_d_j: Raster::zeros(3, h, w),
        d_i_d_d: Raster::zeros(3, h, w),
        d_i_d_phi_a: Raster::zeros(3, h, w),
        d_i_d_phi_b: Raster::zeros(3, h, w),
        d_i_d_phi_inf: Raster::zeros(3, h, w),
    };
    let d = depth.plane(0);
    for c in 0..3 {
        let (a, b, inf) = (phi.phi_a[c], phi.phi_b[c], phi.phi_inf[c]);
        let jc = j.plane(c);
        for i in 0..h * w {
            let ea = (-a * d[i]).exp();
            let eb = (-b * d[i]).exp();
            let k = c * h * w + i;
            jac.d_i_d_j.data_mut()[k] = ea;
            jac.d_i_d_d.data_mut()[k] = -a * jc[i] * ea + inf * b * eb;
            jac.d_i_d_phi_a.data_mut()[k] = -d[i] * jc[i] * ea;
            jac.d_i_d_phi_b.data_mut()[k] = inf * d[i] * eb;
            jac.d_i_d_phi_inf.data_mut()[k] = 1.0 - eb;
        }
    }
    jac
}
