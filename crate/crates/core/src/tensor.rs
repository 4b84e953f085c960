//! Dense row-major `f64` arrays and the few kernels the network needs.
//!
//! Every kernel with learnable inputs has an explicit backward counterpart.
//! There is no autodiff graph: callers keep whatever the backward pass needs
//! (see [`ConvCache`] and [`BnCache`]).

use crate::error::{Error, Result};

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be >= 1, got {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector must be non-empty")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape("axpy", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![rank],
            });
        }
        Ok(())
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `out += m · x` for a rank-2 `m`. Slices must already have matching lengths.
pub fn matvec_acc(m: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = m.shape[1];
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), m.shape[0]);
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += mᵀ · y` for a rank-2 `m`.
pub fn matvec_t_acc(m: &Tensor, y: &[f64], out: &mut [f64]) {
    let cols = m.shape[1];
    debug_assert_eq!(y.len(), m.shape[0]);
    debug_assert_eq!(out.len(), cols);
    for (yv, row) in y.iter().zip(m.data.chunks_exact(cols)) {
        if *yv == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += yv * a;
        }
    }
}

/// `g += u · vᵀ` for a rank-2 `g` of shape `[u.len(), v.len()]`.
pub fn outer_acc(g: &mut Tensor, u: &[f64], v: &[f64]) {
    let cols = g.shape[1];
    debug_assert_eq!(u.len(), g.shape[0]);
    debug_assert_eq!(v.len(), cols);
    for (uv, row) in u.iter().zip(g.data.chunks_exact_mut(cols)) {
        if *uv == 0.0 {
            continue;
        }
        for (o, b) in row.iter_mut().zip(v) {
            *o += uv * b;
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Passes `upstream` where `x > 0`. The subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.expect_same_shape("relu_backward", upstream)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(xv, g)| if *xv > 0.0 { *g } else { 0.0 })
            .collect(),
    })
}

/// What [`conv2d_backward`] needs from the forward call.
#[derive(Clone, Debug)]
pub struct ConvCache {
    pub input: Tensor,
    pub kernels: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

fn check_conv_shapes(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    input.expect_rank("conv2d input", 3)?;
    kernels.expect_rank("conv2d kernels", 4)?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc_in, kh, kw) = (kernels.shape[0], kernels.shape[1], kernels.shape[2], kernels.shape[3]);
    if kh != kw {
        return Err(Error::Shape {
            op: "conv2d kernel (square)",
            left: kernels.shape.clone(),
            right: vec![kh, kh],
        });
    }
    if kh % 2 == 0 {
        return Err(Error::EvenKernel(kh));
    }
    if kc_in != c_in {
        return Err(Error::Shape {
            op: "conv2d",
            left: input.shape.clone(),
            right: kernels.shape.clone(),
        });
    }
    if bias.shape != [c_out] {
        return Err(Error::Shape {
            op: "conv2d bias",
            left: kernels.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    Ok((c_in, c_out, h, w, kh))
}

/// Stride-1 cross-correlation with zero "same" padding of `(k - 1) / 2`.
///
/// `input` is `[c_in, H, W]`, `kernels` is `[c_out, c_in, k, k]`, `bias` is
/// `[c_out]`; the result is `[c_out, H, W]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, c_out, h, w, k) = check_conv_shapes(input, kernels, bias)?;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias.data[co]);
        for ci in 0..c_in {
            let src = &input.data[ci * h * w..(ci + 1) * h * w];
            let ker = &kernels.data[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let kv = ker[ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * w..(y + 1) * w];
                        let srow = &src[sy * w..(sy + 1) * w];
                        for x in x0..x1 {
                            orow[x] += kv * srow[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

pub fn conv2d_backward(cache: &ConvCache, upstream: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_parts(&cache.input, &cache.kernels, upstream)
}

/// [`conv2d_backward`] without packaging the forward operands into a cache.
pub fn conv2d_backward_parts(input: &Tensor, kernels: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let c_out = kernels.shape.first().copied().unwrap_or(0);
    let bias_probe = Tensor::zeros(&[c_out.max(1)]);
    let (c_in, c_out, h, w, k) = check_conv_shapes(input, kernels, &bias_probe)?;
    if upstream.shape != [c_out, h, w] {
        return Err(Error::Shape {
            op: "conv2d_backward",
            left: vec![c_out, h, w],
            right: upstream.shape.clone(),
        });
    }
    let pad = (k / 2) as isize;
    let mut gin = vec![0.0; c_in * h * w];
    let mut gker = vec![0.0; kernels.len()];
    let mut gbias = vec![0.0; c_out];
    for (co, gb) in gbias.iter_mut().enumerate() {
        let up = &upstream.data[co * h * w..(co + 1) * h * w];
        *gb = up.iter().sum();
        for ci in 0..c_in {
            let src = &input.data[ci * h * w..(ci + 1) * h * w];
            let gsrc = &mut gin[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * c_in + ci) * k * k;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let kv = kernels.data[kbase + ky * k + kx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            let g = up[y * w + x];
                            acc += g * src[sy * w + sx];
                            gsrc[sy * w + sx] += g * kv;
                        }
                    }
                    gker[kbase + ky * k + kx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(&input.shape, gin)?,
        kernels: Tensor::new(&kernels.shape, gker)?,
        bias: Tensor::new(&[c_out], gbias)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    populated: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            populated: false,
        }
    }

    pub fn from_parts(mean: Vec<f64>, var: Vec<f64>, populated: bool) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape {
                op: "running stats",
                left: vec![mean.len()],
                right: vec![var.len()],
            });
        }
        Ok(Self { mean, var, populated })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// The first update copies the batch statistics; later ones blend with
    /// [`BN_MOMENTUM`].
    pub fn update(&mut self, batch: &BatchStats) {
        if !self.populated {
            self.mean.clone_from(&batch.mean);
            self.var.clone_from(&batch.var);
            self.populated = true;
            return;
        }
        for c in 0..self.mean.len() {
            self.mean[c] = BN_MOMENTUM * self.mean[c] + (1.0 - BN_MOMENTUM) * batch.mean[c];
            self.var[c] = BN_MOMENTUM * self.var[c] + (1.0 - BN_MOMENTUM) * batch.var[c];
        }
    }
}

/// Per-channel batch mean and (biased) variance over `count` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Statistics of the union of several batches.
    pub fn pool<'a>(parts: impl IntoIterator<Item = &'a BatchStats>) -> Option<BatchStats> {
        let mut total = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for p in parts {
            if sum.is_empty() {
                sum = vec![0.0; p.mean.len()];
                sum_sq = vec![0.0; p.mean.len()];
            }
            let n = p.count as f64;
            for c in 0..p.mean.len() {
                sum[c] += n * p.mean[c];
                sum_sq[c] += n * (p.var[c] + p.mean[c] * p.mean[c]);
            }
            total += p.count;
        }
        if total == 0 {
            return None;
        }
        let n = total as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0))
            .collect();
        Some(BatchStats {
            mean,
            var,
            count: total,
        })
    }
}

/// What [`batchnorm_backward`] needs from the forward call.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub scale: Vec<f64>,
    pub mode: Mode,
    /// Present in train mode.
    pub batch: Option<BatchStats>,
}

fn check_bn_shapes(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank("batchnorm input", 4)?;
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if scale.shape != [c] || shift.shape != [c] {
        return Err(Error::Shape {
            op: "batchnorm scale/shift",
            left: x.shape.clone(),
            right: scale.shape.clone(),
        });
    }
    Ok((b, c, h * w))
}

/// Normalizes `[B, c, H, W]` per channel without touching any running
/// statistics. Train mode uses the batch statistics (reported in the cache);
/// eval mode uses `running`.
pub fn batchnorm_normalize(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: Mode,
    running: &RunningStats,
) -> Result<(Tensor, BnCache)> {
    let (b, c, hw) = check_bn_shapes(x, scale, shift)?;
    let (mean, var, batch) = match mode {
        Mode::Train => {
            let m = (b * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    s += x.data[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut v = 0.0;
                for n in 0..b {
                    v += x.data[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                        .iter()
                        .map(|t| (t - mean[ch]) * (t - mean[ch]))
                        .sum::<f64>();
                }
                var[ch] = v / m;
            }
            let batch = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count: b * hw,
            };
            (mean, var, Some(batch))
        }
        Mode::Eval => {
            if !running.is_populated() {
                return Err(Error::UninitializedRunningStats);
            }
            if running.channels() != c {
                return Err(Error::Shape {
                    op: "batchnorm running stats",
                    left: x.shape.clone(),
                    right: vec![running.channels()],
                });
            }
            (running.mean.clone(), running.var.clone(), None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                out[i] = scale.data[ch] * xh + shift.data[ch];
            }
        }
    }
    let cache = BnCache {
        x_hat: Tensor::new(&x.shape, x_hat)?,
        inv_std,
        scale: scale.data.clone(),
        mode,
        batch,
    };
    Ok((Tensor::new(&x.shape, out)?, cache))
}

/// Batch normalization over `[B, c, H, W]` with per-channel statistics over
/// `(B, H, W)`. Train mode folds the batch statistics into `running`.
pub fn batchnorm_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<(Tensor, BnCache)> {
    let (out, cache) = batchnorm_normalize(x, scale, shift, mode, running)?;
    if let Some(batch) = &cache.batch {
        running.update(batch);
    }
    Ok((out, cache))
}

/// Returns `(grad_x, grad_scale, grad_shift)`. Train mode differentiates
/// through the batch statistics.
pub fn batchnorm_backward(cache: &BnCache, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    cache.x_hat.expect_same_shape("batchnorm_backward", upstream)?;
    let shape = cache.x_hat.shape.clone();
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (b * hw) as f64;
    let mut gx = vec![0.0; upstream.len()];
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    let xh = &cache.x_hat.data;
    let up = &upstream.data;
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..b {
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                sum_g += up[i];
                sum_gx += up[i] * xh[i];
            }
        }
        gshift[ch] = sum_g;
        gscale[ch] = sum_gx;
        let k = cache.scale[ch] * cache.inv_std[ch];
        for n in 0..b {
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                gx[i] = match cache.mode {
                    Mode::Train => k * (up[i] - sum_g / m - xh[i] * sum_gx / m),
                    Mode::Eval => k * up[i],
                };
            }
        }
    }
    Ok((
        Tensor::new(&shape, gx)?,
        Tensor::new(&[c], gscale)?,
        Tensor::new(&[c], gshift)?,
    ))
}

/// Row-wise softmax of `[n, C]` logits with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank("softmax_rows", 2)?;
    let cols = logits.shape[1];
    let mut out = logits.data.clone();
    for row in out.chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(&logits.shape, out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
