use super::{Scalar, Tensor};

/// A contiguous slice of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRange {
    pub start: usize,
    pub len: usize,
}

impl ParamRange {
    #[inline]
    pub fn of<'a, S>(&self, p: &'a [S]) -> &'a [S] {
        &p[self.start..self.start + self.len]
    }

    #[inline]
    pub fn of_mut<'a, S>(&self, p: &'a mut [S]) -> &'a mut [S] {
        &mut p[self.start..self.start + self.len]
    }
}

/// Hands out consecutive parameter ranges.
#[derive(Debug, Default)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, len: usize) -> ParamRange {
        let r = ParamRange {
            start: self.len,
            len,
        };
        self.len += len;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// 2-D convolution with stride 1 and "same" zero padding; kernel size 1 or 3.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: ParamRange,
    pub bias: Option<ParamRange>,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let weight = layout.alloc(cout * cin * k * k);
        let bias = bias.then(|| layout.alloc(cout));
        Self {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    #[inline]
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.patch()
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.hw();
        let mut y = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let w = self.weight.of(params);
        let mut col = Vec::new();
        for i in 0..x.n {
            let input = x.item(i);
            let b_mat: &[S] = if self.k == 1 {
                input
            } else {
                im2col3(input, self.cin, x.h, x.w, &mut col);
                &col
            };
            let out = y.item_mut(i);
            if let Some(b) = self.bias {
                let b = b.of(params);
                for (co, row) in out.chunks_exact_mut(hw).enumerate() {
                    row.fill(b[co]);
                }
            }
            let beta = if self.bias.is_some() { S::one() } else { S::zero() };
            S::gemm(
                self.cout,
                self.patch(),
                hw,
                S::one(),
                w,
                self.patch() as isize,
                1,
                b_mat,
                hw as isize,
                1,
                beta,
                out,
                hw as isize,
                1,
            );
        }
        y
    }

    /// Returns `dx` when `need_dx`; accumulates weight/bias gradients into
    /// `grads` when given.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        x: &Tensor<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut [S]>,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let hw = x.hw();
        let patch = self.patch();
        let w = self.weight.of(params);
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, self.cin, x.h, x.w));
        let mut col = Vec::new();
        let mut dcol = vec![S::zero(); if self.k == 1 { 0 } else { patch * hw }];
        for i in 0..x.n {
            let g = dy.item(i);
            if let Some(grads) = grads.as_deref_mut() {
                let b_mat: &[S] = if self.k == 1 {
                    x.item(i)
                } else {
                    im2col3(x.item(i), self.cin, x.h, x.w, &mut col);
                    &col
                };
                // dW[cout, patch] += dy[cout, hw] · colᵀ[hw, patch]
                S::gemm(
                    self.cout,
                    hw,
                    patch,
                    S::one(),
                    g,
                    hw as isize,
                    1,
                    b_mat,
                    1,
                    hw as isize,
                    S::one(),
                    self.weight.of_mut(grads),
                    patch as isize,
                    1,
                );
                if let Some(b) = self.bias {
                    let db = b.of_mut(grads);
                    for (co, row) in g.chunks_exact(hw).enumerate() {
                        db[co] = row.iter().fold(db[co], |acc, &v| acc + v);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcol[patch, hw] = Wᵀ[patch, cout] · dy[cout, hw]
                if self.k == 1 {
                    S::gemm(
                        patch,
                        self.cout,
                        hw,
                        S::one(),
                        w,
                        1,
                        patch as isize,
                        g,
                        hw as isize,
                        1,
                        S::zero(),
                        dx.item_mut(i),
                        hw as isize,
                        1,
                    );
                } else {
                    S::gemm(
                        patch,
                        self.cout,
                        hw,
                        S::one(),
                        w,
                        1,
                        patch as isize,
                        g,
                        hw as isize,
                        1,
                        S::zero(),
                        &mut dcol,
                        hw as isize,
                        1,
                    );
                    col2im3(&dcol, self.cin, x.h, x.w, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

/// Unfolds 3x3 zero-padded neighborhoods: `col[(ci·9 + ky·3 + kx), y·w + x]`.
pub fn im2col3<S: Scalar>(x: &[S], cin: usize, h: usize, w: usize, col: &mut Vec<S>) {
    let hw = h * w;
    col.clear();
    col.resize(cin * 9 * hw, S::zero());
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = match kx {
                    0 => (1, w),
                    1 => (0, w),
                    _ => (0, w - 1),
                };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let shift = kx as isize - 1;
                    for xx in x0..x1 {
                        dst[xx] = src[(xx as isize + shift) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates `col` back into `dx` (overwrites).
pub fn col2im3<S: Scalar>(col: &[S], cin: usize, h: usize, w: usize, dx: &mut [S]) {
    let hw = h * w;
    dx.fill(S::zero());
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = match kx {
                    0 => (1, w),
                    1 => (0, w),
                    _ => (0, w - 1),
                };
                let shift = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    for xx in x0..x1 {
                        let t = (xx as isize + shift) as usize;
                        dst[t] = dst[t] + src[xx];
                    }
                }
            }
        }
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: ParamRange,
    pub beta: ParamRange,
}

/// Normalized activations and inverse standard deviations for backward.
#[derive(Clone, Debug)]
pub struct GroupNormCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, c: usize, max_groups: usize) -> Self {
        let mut groups = max_groups.min(c).max(1);
        while c % groups != 0 {
            groups -= 1;
        }
        Self {
            c,
            groups,
            gamma: layout.alloc(c),
            beta: layout.alloc(c),
        }
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &Tensor<S>) -> (Tensor<S>, GroupNormCache<S>) {
        assert_eq!(x.c, self.c, "group norm channels");
        let hw = x.hw();
        let cg = self.c / self.groups;
        let m = cg * hw;
        let inv_m = S::from_usize(m).unwrap().recip();
        let eps = S::from_f64_lossy(GROUP_NORM_EPS);
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        for i in 0..x.n {
            let base = i * x.item_len();
            for g in 0..self.groups {
                let off = base + g * m;
                let seg = &x.data[off..off + m];
                let mean = seg.iter().fold(S::zero(), |a, &v| a + v) * inv_m;
                let var = seg
                    .iter()
                    .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                    * inv_m;
                let is = (var + eps).sqrt().recip();
                inv_std.push(is);
                for (k, &v) in seg.iter().enumerate() {
                    let ch = g * cg + k / hw;
                    let xh = (v - mean) * is;
                    xhat[off + k] = xh;
                    y.data[off + k] = xh * gamma[ch] + beta[ch];
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        cache: &GroupNormCache<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut [S]>,
    ) -> Tensor<S> {
        let hw = dy.hw();
        let cg = self.c / self.groups;
        let m = cg * hw;
        let mf = S::from_usize(m).unwrap();
        let gamma = self.gamma.of(params);
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        let mut dxhat = vec![S::zero(); m];
        for i in 0..dy.n {
            let base = i * dy.item_len();
            for g in 0..self.groups {
                let off = base + g * m;
                let is = cache.inv_std[i * self.groups + g];
                let xh = &cache.xhat[off..off + m];
                let d = &dy.data[off..off + m];
                let mut sum_d = S::zero();
                let mut sum_dx = S::zero();
                for k in 0..m {
                    let ch = g * cg + k / hw;
                    let v = d[k] * gamma[ch];
                    dxhat[k] = v;
                    sum_d = sum_d + v;
                    sum_dx = sum_dx + v * xh[k];
                }
                let scale = is / mf;
                for k in 0..m {
                    dx.data[off + k] = scale * (mf * dxhat[k] - sum_d - xh[k] * sum_dx);
                }
                if let Some(grads) = grads.as_deref_mut() {
                    for cl in 0..cg {
                        let ch = g * cg + cl;
                        let (mut dg, mut db) = (S::zero(), S::zero());
                        for k in cl * hw..(cl + 1) * hw {
                            dg = dg + d[k] * xh[k];
                            db = db + d[k];
                        }
                        let gr = self.gamma.of_mut(grads);
                        gr[ch] = gr[ch] + dg;
                        let br = self.beta.of_mut(grads);
                        br[ch] = br[ch] + db;
                    }
                }
            }
        }
        dx
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    (S::one() + (-v).exp()).recip()
}

/// `x·σ(x)`
pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor {
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
        ..*x
    }
}

pub fn silu_slice<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward_slice<S: Scalar>(x: &[S], dy: &[S]) -> Vec<S> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (S::one() + v * (S::one() - s))
        })
        .collect()
}

pub fn silu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    Tensor {
        data: silu_backward_slice(&x.data, &dy.data),
        ..*x
    }
}

/// Dense layer on row vectors: `y = W·x + b`, `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            weight: layout.alloc(out * inp),
            bias: layout.alloc(out),
        }
    }

    /// `x` holds `n` rows of length `inp`.
    pub fn forward<S: Scalar>(&self, params: &[S], x: &[S], n: usize) -> Vec<S> {
        let mut y = Vec::with_capacity(n * self.out);
        for _ in 0..n {
            y.extend_from_slice(self.bias.of(params));
        }
        S::gemm(
            n,
            self.inp,
            self.out,
            S::one(),
            x,
            self.inp as isize,
            1,
            self.weight.of(params),
            1,
            self.inp as isize,
            S::one(),
            &mut y,
            self.out as isize,
            1,
        );
        y
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        x: &[S],
        dy: &[S],
        n: usize,
        grads: Option<&mut [S]>,
    ) -> Vec<S> {
        if let Some(grads) = grads {
            // dW[out, in] += dyᵀ[out, n] · x[n, in]
            S::gemm(
                self.out,
                n,
                self.inp,
                S::one(),
                dy,
                1,
                self.out as isize,
                x,
                self.inp as isize,
                1,
                S::one(),
                self.weight.of_mut(grads),
                self.inp as isize,
                1,
            );
            let db = self.bias.of_mut(grads);
            for row in dy.chunks_exact(self.out) {
                for (b, &d) in db.iter_mut().zip(row) {
                    *b = *b + d;
                }
            }
        }
        let mut dx = vec![S::zero(); n * self.inp];
        S::gemm(
            n,
            self.out,
            self.inp,
            S::one(),
            dy,
            self.out as isize,
            1,
            self.weight.of(params),
            self.inp as isize,
            1,
            S::zero(),
            &mut dx,
            self.inp as isize,
            1,
        );
        dx
    }
}

/// 2x2 average pooling.
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    let q = S::from_f64_lossy(0.25);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut y.data[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..h2 {
            for xx in 0..w2 {
                let a = src[2 * yy * x.w + 2 * xx];
                let b = src[2 * yy * x.w + 2 * xx + 1];
                let c = src[(2 * yy + 1) * x.w + 2 * xx];
                let d = src[(2 * yy + 1) * x.w + 2 * xx + 1];
                dst[yy * w2 + xx] = (a + b + c + d) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let q = S::from_f64_lossy(0.25);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * dy.w + xx / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut y.data[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h2, w2);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                let t = (yy / 2) * w2 + xx / 2;
                dst[t] = dst[t] + src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Concatenates along channels, item by item.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shapes");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<S: Scalar>(d: &Tensor<S>, ca: usize) -> (Tensor<S>, Tensor<S>) {
    let cb = d.c - ca;
    let hw = d.hw();
    let mut a = Vec::with_capacity(d.n * ca * hw);
    let mut b = Vec::with_capacity(d.n * cb * hw);
    for i in 0..d.n {
        let item = d.item(i);
        a.extend_from_slice(&item[..ca * hw]);
        b.extend_from_slice(&item[ca * hw..]);
    }
    (
        Tensor::from_vec(d.n, ca, d.h, d.w, a),
        Tensor::from_vec(d.n, cb, d.h, d.w, b),
    )
}

/// Adds a per-item, per-channel bias `e[n, c]`.
pub fn add_channel_bias<S: Scalar>(x: &mut Tensor<S>, e: &[S]) {
    let hw = x.hw();
    for i in 0..x.n {
        for ch in 0..x.c {
            let b = e[i * x.c + ch];
            let off = (i * x.c + ch) * hw;
            for v in &mut x.data[off..off + hw] {
                *v = *v + b;
            }
        }
    }
}

/// Adjoint of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad<S: Scalar>(dy: &Tensor<S>) -> Vec<S> {
    let hw = dy.hw();
    let mut out = Vec::with_capacity(dy.n * dy.c);
    for p in 0..dy.n * dy.c {
        out.push(
            dy.data[p * hw..(p + 1) * hw]
                .iter()
                .fold(S::zero(), |a, &v| a + v),
        );
    }
    out
}
