use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BatchLoss, Denoiser, Prediction, PredictionGrad, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_bias_grad, concat_channels, silu,
    silu_backward, silu_backward_slice, silu_slice, split_channels, upsample2, upsample2_backward,
    Adam, AdamConfig, Conv2d, GroupNorm, GroupNormCache, Linear, ParamLayout, Scalar, Tensor,
};
use crate::raster::Raster;

const STATE_CHANNELS: usize = 4;

/// Shape of the small encoder-decoder noise predictor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyUNetConfig {
    /// Width of the first resolution level; deeper levels use twice this.
    pub channels: usize,
    /// Number of 2x downsamplings (resolution levels minus one).
    pub depth_levels: usize,
    /// Upper bound on group-norm groups.
    pub max_groups: usize,
    /// Emit a variance-interpolation output next to the noise.
    pub learn_variance: bool,
    pub init_seed: u64,
}

impl Default for ToyUNetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            depth_levels: 2,
            max_groups: 8,
            learn_variance: true,
            init_seed: 0,
        }
    }
}

impl ToyUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "unet channels must be a positive even number, got {}",
                self.channels
            )));
        }
        if self.max_groups == 0 {
            return Err(Error::Config("unet max_groups must be positive".into()));
        }
        if self.depth_levels > 6 {
            return Err(Error::Config("unet depth_levels must be at most 6".into()));
        }
        Ok(())
    }

    pub fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            self.channels
        } else {
            2 * self.channels
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.learn_variance {
            2 * STATE_CHANNELS
        } else {
            STATE_CHANNELS
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.depth_levels
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let s = self.stride();
        if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
            return Err(Error::Config(format!(
                "image size {height}x{width} is not divisible by {s} (2^depth_levels)"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct ResCache<S> {
    x: Tensor<S>,
    h1: Tensor<S>,
    g1: GroupNormCache<S>,
    a1: Tensor<S>,
    h2: Tensor<S>,
    g2: GroupNormCache<S>,
    a2: Tensor<S>,
}

impl ResBlock {
    fn new(layout: &mut ParamLayout, cin: usize, cout: usize, emb_dim: usize, groups: usize) -> Self {
        Self {
            gn1: GroupNorm::new(layout, cin, groups),
            conv1: Conv2d::new(layout, cin, cout, 3, true),
            emb: Linear::new(layout, emb_dim, cout),
            gn2: GroupNorm::new(layout, cout, groups),
            conv2: Conv2d::new(layout, cout, cout, 3, true),
            skip: (cin != cout).then(|| Conv2d::new(layout, cin, cout, 1, true)),
        }
    }

    fn init<S: Scalar>(&self, p: &mut [S], rng: &mut ChaCha8Rng) {
        init_norm(p, &self.gn1);
        init_conv(p, &self.conv1, rng);
        init_linear(p, &self.emb, rng);
        init_norm(p, &self.gn2);
        // conv2 stays zero so every block starts as its skip path.
        if let Some(s) = &self.skip {
            init_conv(p, s, rng);
        }
    }

    fn forward<S: Scalar>(&self, p: &[S], x: Tensor<S>, semb: &[S]) -> (Tensor<S>, ResCache<S>) {
        let n = x.n;
        let (h1, g1) = self.gn1.forward(p, &x);
        let a1 = silu(&h1);
        let mut c1 = self.conv1.forward(p, &a1);
        let e = self.emb.forward(p, semb, n);
        add_channel_bias(&mut c1, &e);
        let (h2, g2) = self.gn2.forward(p, &c1);
        let a2 = silu(&h2);
        let mut out = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (
            out,
            ResCache {
                x,
                h1,
                g1,
                a1,
                h2,
                g2,
                a2,
            },
        )
    }

    /// Returns `dx`; accumulates parameter gradients and the embedding
    /// cotangent when requested.
    fn backward<S: Scalar>(
        &self,
        p: &[S],
        cache: &ResCache<S>,
        dout: &Tensor<S>,
        mut grads: Option<&mut [S]>,
        semb: &[S],
        dsemb: Option<&mut [S]>,
    ) -> Tensor<S> {
        let n = dout.n;
        let da2 = self
            .conv2
            .backward(p, &cache.a2, dout, grads.as_deref_mut(), true)
            .expect("dx requested");
        let dh2 = silu_backward(&cache.h2, &da2);
        let dc1 = self.gn2.backward(p, &cache.g2, &dh2, grads.as_deref_mut());
        if let Some(dsemb) = dsemb {
            let de = channel_bias_grad(&dc1);
            let ds = self.emb.backward(p, semb, &de, n, grads.as_deref_mut());
            for (a, b) in dsemb.iter_mut().zip(ds) {
                *a = *a + b;
            }
        }
        let da1 = self
            .conv1
            .backward(p, &cache.a1, &dc1, grads.as_deref_mut(), true)
            .expect("dx requested");
        let dh1 = silu_backward(&cache.h1, &da1);
        let mut dx = self.gn1.backward(p, &cache.g1, &dh1, grads.as_deref_mut());
        match &self.skip {
            Some(s) => dx.add_assign(
                &s.backward(p, &cache.x, dout, grads, true)
                    .expect("dx requested"),
            ),
            None => dx.add_assign(dout),
        }
        dx
    }
}

fn init_norm<S: Scalar>(p: &mut [S], gn: &GroupNorm) {
    gn.gamma.of_mut(p).fill(S::one());
    gn.beta.of_mut(p).fill(S::zero());
}

fn init_conv<S: Scalar>(p: &mut [S], conv: &Conv2d, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, (1.0 / conv.fan_in() as f64).sqrt()).expect("positive std");
    for w in conv.weight.of_mut(p) {
        *w = S::from_f64_lossy(dist.sample(rng));
    }
    if let Some(b) = conv.bias {
        b.of_mut(p).fill(S::zero());
    }
}

fn init_linear<S: Scalar>(p: &mut [S], lin: &Linear, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, (1.0 / lin.inp as f64).sqrt()).expect("positive std");
    for w in lin.weight.of_mut(p) {
        *w = S::from_f64_lossy(dist.sample(rng));
    }
    lin.bias.of_mut(p).fill(S::zero());
}

#[derive(Clone, Debug)]
struct Architecture {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    len: usize,
}

impl Architecture {
    fn new(cfg: &ToyUNetConfig) -> Self {
        let mut l = ParamLayout::default();
        let c0 = cfg.channels;
        let emb = 4 * c0;
        let g = cfg.max_groups;
        let levels = cfg.depth_levels + 1;
        let time1 = Linear::new(&mut l, c0, emb);
        let time2 = Linear::new(&mut l, emb, emb);
        let conv_in = Conv2d::new(&mut l, STATE_CHANNELS, c0, 3, true);
        let mut down = Vec::with_capacity(levels);
        for lev in 0..levels {
            let cin = if lev == 0 { c0 } else { cfg.level_width(lev - 1) };
            down.push(ResBlock::new(&mut l, cin, cfg.level_width(lev), emb, g));
        }
        let deepest = cfg.level_width(levels - 1);
        let mid = ResBlock::new(&mut l, deepest, deepest, emb, g);
        let mut up = Vec::with_capacity(levels);
        for lev in 0..levels {
            let incoming = if lev == levels - 1 {
                deepest
            } else {
                cfg.level_width(lev + 1)
            };
            let w = cfg.level_width(lev);
            up.push(ResBlock::new(&mut l, incoming + w, w, emb, g));
        }
        let norm_out = GroupNorm::new(&mut l, c0, g);
        let conv_out = Conv2d::new(&mut l, c0, cfg.out_channels(), 3, false);
        Self {
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            len: l.len(),
        }
    }
}

/// Forward activations of one batch, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct UNetTrace<S> {
    x: Tensor<S>,
    sinus: Vec<S>,
    e1: Vec<S>,
    s1: Vec<S>,
    e2: Vec<S>,
    semb: Vec<S>,
    down: Vec<ResCache<S>>,
    mid: ResCache<S>,
    up: Vec<ResCache<S>>,
    h_top: Tensor<S>,
    go: GroupNormCache<S>,
    ho: Tensor<S>,
    ao: Tensor<S>,
}

/// Small U-Net noise predictor with hand-written backward passes, generic
/// over the element type.
#[derive(Clone, Debug)]
pub struct ToyUNet<S> {
    config: ToyUNetConfig,
    arch: Architecture,
    params: Vec<S>,
    optimizer: Option<Adam>,
    optimizer_config: AdamConfig,
    last_grad_norm: f64,
}

/// Sinusoidal embedding of `t` with `dim` entries (`dim/2` sines then cosines).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

impl<S: Scalar> ToyUNet<S> {
    /// Randomly initialized network; residual branches and the output layer
    /// start at zero so the initial prediction is exactly zero.
    pub fn new(config: ToyUNetConfig) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let mut params = vec![S::zero(); arch.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        init_linear(&mut params, &arch.time1, &mut rng);
        init_linear(&mut params, &arch.time2, &mut rng);
        init_conv(&mut params, &arch.conv_in, &mut rng);
        for b in arch.down.iter().chain(std::iter::once(&arch.mid)).chain(&arch.up) {
            b.init(&mut params, &mut rng);
        }
        init_norm(&mut params, &arch.norm_out);
        Ok(Self::assemble(config, arch, params))
    }

    /// Network with the given flat parameter vector.
    pub fn from_params(config: ToyUNetConfig, params: Vec<S>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        if params.len() != arch.len {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this unet, found {}",
                arch.len,
                params.len()
            )));
        }
        Ok(Self::assemble(config, arch, params))
    }

    fn assemble(config: ToyUNetConfig, arch: Architecture, params: Vec<S>) -> Self {
        Self {
            config,
            arch,
            params,
            optimizer: None,
            optimizer_config: AdamConfig::default(),
            last_grad_norm: 0.0,
        }
    }

    pub fn config(&self) -> &ToyUNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sets optimizer hyperparameters and resets its state.
    pub fn set_optimizer(&mut self, config: AdamConfig) {
        self.optimizer_config = config;
        self.optimizer = None;
    }

    /// Gradient norm (before clipping) of the last training step.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    /// Copy of the network in another element type.
    pub fn cast<T: Scalar>(&self) -> ToyUNet<T> {
        let params = self
            .params
            .iter()
            .map(|p| T::from_f64_lossy(p.to_f64_lossy()))
            .collect();
        ToyUNet::<T>::from_params(self.config.clone(), params).expect("same config")
    }

    fn input_tensor(&self, inputs: &[&Raster]) -> Result<Tensor<S>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("empty denoiser batch".into()))?;
        let (h, w) = (first.height(), first.width());
        self.config.check_size(h, w)?;
        let mut data = Vec::with_capacity(inputs.len() * STATE_CHANNELS * h * w);
        for r in inputs {
            if r.shape() != (STATE_CHANNELS, h, w) {
                return Err(Error::Shape(format!(
                    "denoiser batch item has shape {:?}, expected {:?}",
                    r.shape(),
                    (STATE_CHANNELS, h, w)
                )));
            }
            data.extend(r.data().iter().map(|&v| S::from_f64_lossy(v)));
        }
        Ok(Tensor::from_vec(inputs.len(), STATE_CHANNELS, h, w, data))
    }

    fn forward(&self, x: Tensor<S>, steps: &[usize]) -> (Tensor<S>, UNetTrace<S>) {
        let a = &self.arch;
        let p = &self.params[..];
        let n = x.n;
        let c0 = self.config.channels;
        let mut sinus = Vec::with_capacity(n * c0);
        for &t in steps {
            sinus.extend(timestep_embedding(t, c0).into_iter().map(S::from_f64_lossy));
        }
        let e1 = a.time1.forward(p, &sinus, n);
        let s1 = silu_slice(&e1);
        let e2 = a.time2.forward(p, &s1, n);
        let semb = silu_slice(&e2);

        let levels = a.down.len();
        let mut h = a.conv_in.forward(p, &x);
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        for (lev, block) in a.down.iter().enumerate() {
            let (out, cache) = block.forward(p, h, &semb);
            down.push(cache);
            h = if lev + 1 < levels { avg_pool2(&out) } else { out.clone() };
            skips.push(out);
        }
        let (mut h, mid) = a.mid.forward(p, h, &semb);
        let mut up: Vec<Option<ResCache<S>>> = vec![None; levels];
        for lev in (0..levels).rev() {
            let cat = concat_channels(&h, &skips[lev]);
            let (out, cache) = a.up[lev].forward(p, cat, &semb);
            up[lev] = Some(cache);
            h = if lev > 0 { upsample2(&out) } else { out };
        }
        let (ho, go) = a.norm_out.forward(p, &h);
        let ao = silu(&ho);
        let y = a.conv_out.forward(p, &ao);
        (
            y,
            UNetTrace {
                x,
                sinus,
                e1,
                s1,
                e2,
                semb,
                down,
                mid,
                up: up.into_iter().map(|c| c.expect("every level visited")).collect(),
                h_top: h,
                go,
                ho,
                ao,
            },
        )
    }

    /// Backpropagates `dy` (same shape as the network output). Returns the
    /// input cotangent; parameter gradients are accumulated into `grads`.
    fn backward(&self, trace: &UNetTrace<S>, dy: &Tensor<S>, mut grads: Option<&mut [S]>) -> Tensor<S> {
        let a = &self.arch;
        let p = &self.params[..];
        let n = dy.n;
        let train = grads.is_some();
        let mut dsemb_buf = vec![S::zero(); if train { trace.semb.len() } else { 0 }];

        let dao = a
            .conv_out
            .backward(p, &trace.ao, dy, grads.as_deref_mut(), true)
            .expect("dx requested");
        let dho = silu_backward(&trace.ho, &dao);
        let mut dh = a.norm_out.backward(p, &trace.go, &dho, grads.as_deref_mut());
        debug_assert_eq!(dh.c, trace.h_top.c);

        let levels = a.down.len();
        let mut dskips = Vec::with_capacity(levels);
        for lev in 0..levels {
            if lev > 0 {
                dh = upsample2_backward(&dh);
            }
            let block = &a.up[lev];
            let dcat = block.backward(
                p,
                &trace.up[lev],
                &dh,
                grads.as_deref_mut(),
                &trace.semb,
                train.then_some(&mut dsemb_buf[..]),
            );
            let incoming = block.gn1.c - self.config.level_width(lev);
            let (d_in, d_skip) = split_channels(&dcat, incoming);
            dskips.push(d_skip);
            dh = d_in;
        }
        dh = a.mid.backward(
            p,
            &trace.mid,
            &dh,
            grads.as_deref_mut(),
            &trace.semb,
            train.then_some(&mut dsemb_buf[..]),
        );
        for lev in (0..levels).rev() {
            if lev + 1 < levels {
                dh = avg_pool2_backward(&dh);
            }
            dh.add_assign(&dskips[lev]);
            dh = a.down[lev].backward(
                p,
                &trace.down[lev],
                &dh,
                grads.as_deref_mut(),
                &trace.semb,
                train.then_some(&mut dsemb_buf[..]),
            );
        }
        let dx = a
            .conv_in
            .backward(p, &trace.x, &dh, grads.as_deref_mut(), true)
            .expect("dx requested");

        if let Some(g) = grads {
            let de2 = silu_backward_slice(&trace.e2, &dsemb_buf);
            let ds1 = a.time2.backward(p, &trace.s1, &de2, n, Some(&mut *g));
            let de1 = silu_backward_slice(&trace.e1, &ds1);
            a.time1.backward(p, &trace.sinus, &de1, n, Some(g));
        }
        dx
    }

    fn split_output(&self, y: &Tensor<S>, i: usize) -> Prediction {
        let hw = y.hw();
        let item = y.item(i);
        let to_raster = |s: &[S]| {
            Raster::from_vec(
                STATE_CHANNELS,
                y.h,
                y.w,
                s.iter().map(|v| v.to_f64_lossy()).collect(),
            )
            .expect("output shape")
        };
        Prediction {
            eps: to_raster(&item[..STATE_CHANNELS * hw]),
            var: self
                .config
                .learn_variance
                .then(|| to_raster(&item[STATE_CHANNELS * hw..])),
        }
    }

    fn check_finite(&self, pred: &Prediction, t: usize) -> Result<()> {
        let ok = pred.eps.all_finite() && pred.var.as_ref().map_or(true, Raster::all_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::Numerical {
                t,
                detail: "denoiser produced non-finite output".into(),
            })
        }
    }

    fn output_cotangent(&self, grads: &[PredictionGrad], h: usize, w: usize) -> Result<Tensor<S>> {
        let oc = self.config.out_channels();
        let hw = h * w;
        let mut dy = Tensor::zeros(grads.len(), oc, h, w);
        for (i, g) in grads.iter().enumerate() {
            if g.eps.shape() != (STATE_CHANNELS, h, w) {
                return Err(Error::Shape("loss gradient shape differs from prediction".into()));
            }
            let item = dy.item_mut(i);
            for (d, &v) in item[..STATE_CHANNELS * hw].iter_mut().zip(g.eps.data()) {
                *d = S::from_f64_lossy(v);
            }
            if let (true, Some(gv)) = (self.config.learn_variance, &g.var) {
                for (d, &v) in item[STATE_CHANNELS * hw..].iter_mut().zip(gv.data()) {
                    *d = S::from_f64_lossy(v);
                }
            }
        }
        Ok(dy)
    }
}

impl<S: Scalar> Denoiser for ToyUNet<S> {
    type Trace = UNetTrace<S>;

    fn predict(&self, x_t: &Raster, t: usize) -> Result<Prediction> {
        Ok(self.predict_traced(x_t, t)?.0)
    }

    fn predict_traced(&self, x_t: &Raster, t: usize) -> Result<(Prediction, UNetTrace<S>)> {
        let x = self.input_tensor(&[x_t])?;
        let (y, trace) = self.forward(x, &[t]);
        let pred = self.split_output(&y, 0);
        self.check_finite(&pred, t)?;
        Ok((pred, trace))
    }

    fn pullback(&self, trace: UNetTrace<S>, grad_eps: &Raster) -> Result<Raster> {
        let (h, w) = (trace.x.h, trace.x.w);
        let dy = self.output_cotangent(
            &[PredictionGrad {
                eps: grad_eps.clone(),
                var: None,
            }],
            h,
            w,
        )?;
        let dx = self.backward(&trace, &dy, None);
        Raster::from_vec(
            STATE_CHANNELS,
            h,
            w,
            dx.data.iter().map(|v| v.to_f64_lossy()).collect(),
        )
    }

    fn learns_variance(&self) -> bool {
        self.config.learn_variance
    }
}

impl<S: Scalar> TrainableDenoiser for ToyUNet<S> {
    fn fit_batch<L: BatchLoss>(&mut self, inputs: &[Raster], steps: &[usize], loss: L) -> Result<L::Output> {
        if inputs.len() != steps.len() {
            return Err(Error::Shape("one step index per batch item required".into()));
        }
        let refs: Vec<&Raster> = inputs.iter().collect();
        let x = self.input_tensor(&refs)?;
        let (h, w) = (x.h, x.w);
        let (y, trace) = self.forward(x, steps);
        let preds: Vec<Prediction> = (0..inputs.len()).map(|i| self.split_output(&y, i)).collect();
        for (p, &t) in preds.iter().zip(steps) {
            self.check_finite(p, t)?;
        }
        let (out, pgrads) = loss.evaluate(&preds)?;
        let dy = self.output_cotangent(&pgrads, h, w)?;
        let mut grads = vec![S::zero(); self.params.len()];
        self.backward(&trace, &dy, Some(&mut grads));
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                t: steps[0],
                detail: "non-finite parameter gradient".into(),
            });
        }
        let len = self.params.len();
        let cfg = self.optimizer_config;
        let opt = self.optimizer.get_or_insert_with(|| Adam::new(cfg, len));
        self.last_grad_norm = opt.update(&mut self.params, &grads);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ToyUNetConfig {
        ToyUNetConfig {
            channels: 4,
            depth_levels: 2,
            max_groups: 2,
            learn_variance: true,
            init_seed: 3,
        }
    }

    /// Network with every parameter randomized so no branch is trivially zero.
    fn randomized(cfg: ToyUNetConfig, seed: u64) -> ToyUNet<f64> {
        let mut net = ToyUNet::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        net
    }

    fn random_state(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
        Raster::from_fn(4, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let net = ToyUNet::<f32>::new(small_config()).unwrap();
        let x = Raster::filled(4, 8, 8, 0.3);
        let p = net.predict(&x, 17).unwrap();
        assert!(p.eps.data().iter().all(|&v| v == 0.0));
        assert!(p.var.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_predict_zero() {
        let cfg = small_config();
        let n = ToyUNet::<f64>::new(cfg.clone()).unwrap().param_count();
        let net = ToyUNet::<f64>::from_params(cfg, vec![0.0; n]).unwrap();
        let p = net.predict(&Raster::filled(4, 4, 4, 0.7), 5).unwrap();
        assert!(p.eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let net = ToyUNet::<f32>::new(small_config()).unwrap();
        assert!(matches!(
            net.predict(&Raster::zeros(4, 6, 8), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(net.predict(&Raster::zeros(3, 8, 8), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = randomized(small_config(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_state(&mut rng, 8, 8);
        let t = 33;
        let (_, trace) = net.predict_traced(&x, t).unwrap();
        let ones = Raster::filled(4, 8, 8, 1.0);
        let g = net.pullback(trace, &ones).unwrap();
        let f = |x: &Raster| net.predict(x, t).unwrap().eps.data().iter().sum::<f64>();
        let h = 1e-5;
        for _ in 0..5 {
            let k = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - g.data()[k]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "coordinate {k}: fd {fd} vs {}", g.data()[k]);
        }
    }

    struct ProbeLoss {
        probe_eps: Raster,
        probe_var: Raster,
    }

    impl BatchLoss for ProbeLoss {
        type Output = f64;
        fn evaluate(self, preds: &[Prediction]) -> Result<(f64, Vec<PredictionGrad>)> {
            let p = &preds[0];
            let v = p.var.as_ref().unwrap();
            let val = p.eps.data().iter().zip(self.probe_eps.data()).map(|(a, b)| a * b).sum::<f64>()
                + v.data().iter().zip(self.probe_var.data()).map(|(a, b)| a * b).sum::<f64>();
            Ok((
                val,
                vec![PredictionGrad {
                    eps: self.probe_eps,
                    var: Some(self.probe_var),
                }],
            ))
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = small_config();
        let net = randomized(cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_state(&mut rng, 8, 8);
        let t = 250;
        let probe_eps = random_state(&mut rng, 8, 8);
        let probe_var = random_state(&mut rng, 8, 8);
        let eval = |net: &ToyUNet<f64>| {
            let p = net.predict(&x, t).unwrap();
            p.eps.data().iter().zip(probe_eps.data()).map(|(a, b)| a * b).sum::<f64>()
                + p.var.unwrap().data().iter().zip(probe_var.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let xin = net.input_tensor(&[&x]).unwrap();
        let (_, trace) = net.forward(xin, &[t]);
        let dy = net
            .output_cotangent(
                &[PredictionGrad {
                    eps: probe_eps.clone(),
                    var: Some(probe_var.clone()),
                }],
                8,
                8,
            )
            .unwrap();
        let mut grads = vec![0.0; net.param_count()];
        net.backward(&trace, &dy, Some(&mut grads));
        let h = 1e-6;
        let mut checked = 0;
        for k in (0..net.param_count()).step_by(37) {
            let mut np = net.clone();
            np.params_mut()[k] += h;
            let fp = eval(&np);
            np.params_mut()[k] -= 2.0 * h;
            let fm = eval(&np);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grads[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grads[k]);
            checked += 1;
        }
        assert!(checked > 20);
        // fit_batch consumes the same gradients.
        let mut trained = net.clone();
        trained.set_optimizer(AdamConfig {
            lr: 1e-3,
            warmup: 0,
            max_grad_norm: 0.0,
            ..AdamConfig::default()
        });
        let before = eval(&trained);
        trained
            .fit_batch(&[x.clone()], &[t], ProbeLoss { probe_eps: probe_eps.clone(), probe_var: probe_var.clone() })
            .unwrap();
        assert!(eval(&trained) < before);
    }

    #[test]
    fn translation_moves_interior_output() {
        let cfg = small_config();
        let net = randomized(cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (h, w, s) = (64, 64, 4);
        let x = random_state(&mut rng, h, w);
        let shifted = Raster::from_fn(4, h, w, |c, y, xx| x.get(c, y, (xx + w - s) % w));
        let a = net.predict(&x, 10).unwrap().eps;
        let b = net.predict(&shifted, 10).unwrap().eps;
        // Group norm statistics are global and wrap-around changes the border,
        // so only a loose interior agreement is expected.
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..4 {
            for y in 16..h - 16 {
                for xx in 16..w - 16 - s {
                    let d = a.get(c, y, xx) - b.get(c, y, xx + s);
                    num += d * d;
                    den += a.get(c, y, xx).powi(2);
                }
            }
        }
        assert!(num / den < 0.05, "relative interior mismatch {}", num / den);
    }

    #[test]
    fn cast_round_trip_and_time_embedding() {
        let net = ToyUNet::<f32>::new(small_config()).unwrap();
        let back: ToyUNet<f32> = net.cast::<f64>().cast();
        assert_eq!(back.params(), net.params());
        let e = timestep_embedding(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }
}
