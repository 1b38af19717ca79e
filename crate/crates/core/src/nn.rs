//! Differentiable 3D network building blocks: convolution, instance
//! normalization, PReLU, dense layers, and residual-block composition.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{record, Scalar, Tensor};

pub use crate::tensor::sigmoid;

/// Learnable state of one 3D convolution.
///
/// `weight` is `[out_ch, in_ch, k, k, k]`, `bias` is `[out_ch]`; stride and
/// padding are per spatial axis in `(depth, height, width)` order.
pub struct Conv3dParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Learnable affine of instance normalization; `gamma`/`beta` are `[ch]`.
pub struct InstanceNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: f64,
}

/// Per-channel learnable negative-region slopes. A slope tensor created with
/// `requires_grad = false` acts as a fixed leaky rectifier and is not
/// reported as a parameter.
pub struct PReluParams<T: Scalar> {
    pub slope: Tensor<T>,
}

/// Collects named parameter tensors of a layer or network. Only tensors
/// with `requires_grad` participate (fixed buffers are skipped).
pub trait ParamCollect<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);
}

fn push_param<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    name: String,
    t: &'a Tensor<T>,
) {
    if t.needs_grad() {
        out.push((name, t));
    }
}

fn push_param_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    name: String,
    t: &'a mut Tensor<T>,
) {
    if t.needs_grad() {
        out.push((name, t));
    }
}

impl<T: Scalar> ParamCollect<T> for Conv3dParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        push_param(out, format!("{prefix}.weight"), &self.weight);
        push_param(out, format!("{prefix}.bias"), &self.bias);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        push_param_mut(out, format!("{prefix}.weight"), &mut self.weight);
        push_param_mut(out, format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> ParamCollect<T> for InstanceNormParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        push_param(out, format!("{prefix}.gamma"), &self.gamma);
        push_param(out, format!("{prefix}.beta"), &self.beta);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        push_param_mut(out, format!("{prefix}.gamma"), &mut self.gamma);
        push_param_mut(out, format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<T: Scalar> ParamCollect<T> for PReluParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        push_param(out, format!("{prefix}.slope"), &self.slope);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        push_param_mut(out, format!("{prefix}.slope"), &mut self.slope);
    }
}

/// Uniform init in +-sqrt(6 / fan_in). Values are drawn in f64 so f32 and
/// f64 instantiations of the same seed see the same underlying numbers.
pub fn init_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_float(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new_leaf(shape, data, true)
}

impl<T: Scalar> Conv3dParams<T> {
    /// Fresh convolution with cubic kernel `k`, uniform weight init and zero
    /// bias.
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let fan_in = in_ch * k * k * k;
        Conv3dParams {
            weight: init_uniform(rng, vec![out_ch, in_ch, k, k, k], fan_in),
            bias: Tensor::new_leaf(vec![out_ch], vec![T::zero(); out_ch], true),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl<T: Scalar> InstanceNormParams<T> {
    pub fn new(ch: usize) -> Self {
        InstanceNormParams {
            gamma: Tensor::new_leaf(vec![ch], vec![T::one(); ch], true),
            beta: Tensor::new_leaf(vec![ch], vec![T::zero(); ch], true),
            epsilon: 1e-5,
        }
    }
}

impl<T: Scalar> PReluParams<T> {
    /// Learnable slope, initialized to 0.25 per channel.
    pub fn new(ch: usize) -> Self {
        PReluParams {
            slope: Tensor::new_leaf(vec![ch], vec![T::from_float(0.25); ch], true),
        }
    }

    /// Fixed (non-learnable) slope; excluded from parameter accounting.
    pub fn fixed(ch: usize, slope: f64) -> Self {
        PReluParams {
            slope: Tensor::new_leaf(vec![ch], vec![T::from_float(slope); ch], false),
        }
    }
}

fn conv_out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "conv3d: kernel {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Zero-pads the spatial axes of `[b, ch, d, h, w]` data.
fn pad3d<T: Scalar>(
    x: &[T],
    b: usize,
    ch: usize,
    (d, h, w): (usize, usize, usize),
    [pd, ph, pw]: [usize; 3],
) -> Vec<T> {
    let (dp, hp, wp) = (d + 2 * pd, h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); b * ch * dp * hp * wp];
    for bc in 0..b * ch {
        let src = &x[bc * d * h * w..];
        let dst = &mut out[bc * dp * hp * wp..(bc + 1) * dp * hp * wp];
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * w;
                let t = ((z + pd) * hp + (y + ph)) * wp + pw;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

/// Geometry of one convolution call, shared by forward and backward.
#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    in_dims: (usize, usize, usize),
    out_dims: (usize, usize, usize),
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeom {
    fn padded_dims(&self) -> (usize, usize, usize) {
        let (d, h, w) = self.in_dims;
        let [pd, ph, pw] = self.padding;
        (d + 2 * pd, h + 2 * ph, w + 2 * pw)
    }

    fn out_voxels(&self) -> usize {
        let (od, oh, ow) = self.out_dims;
        od * oh * ow
    }

    fn taps(&self) -> usize {
        self.in_ch * self.k * self.k * self.k
    }
}

/// Gathers the receptive field of every output voxel of one batch item into
/// `rows` (`[out_voxels, in_ch * k^3]`, matching the weight layout), so the
/// convolution becomes rows of dot products.
fn im2row<T: Scalar>(xp: &[T], geom: &ConvGeom, rows: &mut [T]) {
    let k = geom.k;
    let (od, oh, ow) = geom.out_dims;
    let (_, hp, wp) = geom.padded_dims();
    let [sd, sh, sw] = geom.stride;
    let taps = geom.taps();
    let plane = hp * wp;
    let chan = geom.padded_dims().0 * plane;
    let mut n = 0usize;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let row = &mut rows[n * taps..(n + 1) * taps];
                let (z0, y0, x0) = (z * sd, y * sh, x * sw);
                let mut t = 0usize;
                for i in 0..geom.in_ch {
                    let base = i * chan;
                    for kz in 0..k {
                        for ky in 0..k {
                            let src = base + (z0 + kz) * plane + (y0 + ky) * wp + x0;
                            row[t..t + k].copy_from_slice(&xp[src..src + k]);
                            t += k;
                        }
                    }
                }
                n += 1;
            }
        }
    }
}

/// Scatter-adds gathered-row gradients back onto the padded input gradient
/// of one batch item (the inverse of [`im2row`], accumulating overlaps).
fn row2im<T: Scalar>(drows: &[T], geom: &ConvGeom, dxp: &mut [T]) {
    let k = geom.k;
    let (od, oh, ow) = geom.out_dims;
    let (_, hp, wp) = geom.padded_dims();
    let [sd, sh, sw] = geom.stride;
    let taps = geom.taps();
    let plane = hp * wp;
    let chan = geom.padded_dims().0 * plane;
    let mut n = 0usize;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let row = &drows[n * taps..(n + 1) * taps];
                let (z0, y0, x0) = (z * sd, y * sh, x * sw);
                let mut t = 0usize;
                for i in 0..geom.in_ch {
                    let base = i * chan;
                    for kz in 0..k {
                        for ky in 0..k {
                            let dst = base + (z0 + kz) * plane + (y0 + ky) * wp + x0;
                            for (d, r) in dxp[dst..dst + k].iter_mut().zip(&row[t..t + k]) {
                                *d = *d + *r;
                            }
                            t += k;
                        }
                    }
                }
                n += 1;
            }
        }
    }
}

/// Dot product over eight independent accumulator lanes. The explicit
/// reassociation fixes the summation order (bitwise reproducible) while
/// letting the compiler vectorize the inner loop.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len();
    let chunks = n / LANES;
    let mut acc = [T::zero(); LANES];
    for c in 0..chunks {
        let av = &a[c * LANES..(c + 1) * LANES];
        let bv = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + av[l] * bv[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..n {
        tail = tail + a[i] * b[i];
    }
    let mut total = tail;
    for lane in acc {
        total = total + lane;
    }
    total
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}

/// 3D cross-correlation with per-axis stride and zero padding.
///
/// `x` is `[b, in_ch, D, H, W]`; output is `[b, out_ch, D', H', W']` with
/// `ext' = (ext + 2 pad - k) / stride + 1`.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::shape(format!(
            "conv3d expects [b, ch, d, h, w] input, got {xs:?}"
        )));
    }
    let (b, in_ch, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    if in_ch != p.in_channels() {
        return Err(Error::shape(format!(
            "conv3d: input has {in_ch} channels, weight expects {}",
            p.in_channels()
        )));
    }
    let k = p.kernel();
    let [sd, sh, sw] = p.stride;
    let [pd, ph, pw] = p.padding;
    let geom = ConvGeom {
        b,
        in_ch,
        out_ch: p.out_channels(),
        k,
        in_dims: (d, h, w),
        out_dims: (
            conv_out_extent(d, k, pd, sd)?,
            conv_out_extent(h, k, ph, sh)?,
            conv_out_extent(w, k, pw, sw)?,
        ),
        stride: p.stride,
        padding: p.padding,
    };

    let padded_storage;
    let xp: &[T] = if p.padding == [0, 0, 0] {
        x.data()
    } else {
        padded_storage = pad3d(x.data(), b, in_ch, (d, h, w), p.padding);
        &padded_storage
    };

    let weight = p.weight.data();
    let bias = p.bias.data();
    let n = geom.out_voxels();
    let taps = geom.taps();
    let m = geom.out_ch;
    let pad_len = in_ch * geom.padded_dims().0 * geom.padded_dims().1 * geom.padded_dims().2;

    let mut out = vec![T::zero(); b * m * n];
    out.par_chunks_mut(m * n)
        .enumerate()
        .for_each(|(bi, chunk)| {
            let mut rows = vec![T::zero(); n * taps];
            im2row(&xp[bi * pad_len..(bi + 1) * pad_len], &geom, &mut rows);
            for o in 0..m {
                let w_row = &weight[o * taps..(o + 1) * taps];
                let out_row = &mut chunk[o * n..(o + 1) * n];
                for (slot, row) in out_row.iter_mut().zip(rows.chunks_exact(taps)) {
                    *slot = bias[o] + dot(w_row, row);
                }
            }
        });

    let needs = (x.needs_grad(), p.weight.needs_grad(), p.bias.needs_grad());
    let (xc, wc) = (x.clone(), p.weight.clone());
    let (od, oh, ow) = geom.out_dims;

    Ok(record(
        "conv3d",
        &[x, &p.weight, &p.bias],
        vec![b, m, od, oh, ow],
        out,
        move |g| conv3d_backward(g, &xc, &wc, &geom, needs),
    ))
}

fn conv3d_backward<T: Scalar>(
    g: &[T],
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeom,
    (x_needs, w_needs, b_needs): (bool, bool, bool),
) -> Vec<Option<Vec<T>>> {
    let (b, in_ch, m) = (geom.b, geom.in_ch, geom.out_ch);
    let n = geom.out_voxels();
    let taps = geom.taps();
    let (d, h, w) = geom.in_dims;
    let (dp, hp, wp) = geom.padded_dims();
    let pad_len = in_ch * dp * hp * wp;
    let wdata = weight.data();

    let dbias = b_needs.then(|| {
        let mut db = vec![T::zero(); m];
        for bi in 0..b {
            for (o, slot) in db.iter_mut().enumerate() {
                let go = &g[(bi * m + o) * n..][..n];
                *slot = *slot + go.iter().copied().sum();
            }
        }
        db
    });

    let dweight = if w_needs {
        let padded_storage;
        let xp: &[T] = if geom.padding == [0, 0, 0] {
            x.data()
        } else {
            padded_storage = pad3d(x.data(), b, in_ch, (d, h, w), geom.padding);
            &padded_storage
        };
        let mut dw = vec![T::zero(); m * taps];
        // batch items stay in a fixed order so accumulation is deterministic
        let mut rows = vec![T::zero(); n * taps];
        for bi in 0..b {
            im2row(&xp[bi * pad_len..(bi + 1) * pad_len], geom, &mut rows);
            dw.par_chunks_mut(taps).enumerate().for_each(|(o, dw_row)| {
                let go = &g[(bi * m + o) * n..][..n];
                for (gv, row) in go.iter().zip(rows.chunks_exact(taps)) {
                    if *gv != T::zero() {
                        axpy(*gv, row, dw_row);
                    }
                }
            });
        }
        Some(dw)
    } else {
        None
    };

    let dx = if x_needs {
        let mut dxp = vec![T::zero(); b * pad_len];
        dxp.par_chunks_mut(pad_len).enumerate().for_each(|(bi, dchunk)| {
            let mut drows = vec![T::zero(); n * taps];
            for o in 0..m {
                let go = &g[(bi * m + o) * n..][..n];
                let w_row = &wdata[o * taps..(o + 1) * taps];
                for (gv, drow) in go.iter().zip(drows.chunks_exact_mut(taps)) {
                    if *gv != T::zero() {
                        axpy(*gv, w_row, drow);
                    }
                }
            }
            row2im(&drows, geom, dchunk);
        });
        // crop padding
        let [pd, ph, pw] = geom.padding;
        let mut dx = vec![T::zero(); b * in_ch * d * h * w];
        for bc in 0..b * in_ch {
            let src = &dxp[bc * dp * hp * wp..];
            let dst = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
            for z in 0..d {
                for y in 0..h {
                    let s = ((z + pd) * hp + (y + ph)) * wp + pw;
                    let t = (z * h + y) * w;
                    dst[t..t + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    vec![dx, dweight, dbias]
}

/// Per sample-channel standardization over the spatial voxels (population
/// variance) followed by the learnable affine.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, p: &InstanceNormParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::shape(format!(
            "instance_norm expects [b, ch, d, h, w] input, got {xs:?}"
        )));
    }
    let (b, ch) = (xs[0], xs[1]);
    let spatial: usize = xs[2] * xs[3] * xs[4];
    if spatial < 2 {
        return Err(Error::numeric(format!(
            "instance_norm: spatial size {spatial} gives degenerate statistics"
        )));
    }
    if p.gamma.len() != ch || p.beta.len() != ch {
        return Err(Error::shape(format!(
            "instance_norm: {ch} channels vs gamma/beta of {}/{}",
            p.gamma.len(),
            p.beta.len()
        )));
    }

    let inv_n = T::from_float(1.0 / spatial as f64);
    let eps = T::from_float(p.epsilon);
    let gamma = p.gamma.data();
    let beta = p.beta.data();

    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); b * ch];
    for bc in 0..b * ch {
        let c = bc % ch;
        let src = &x.data()[bc * spatial..(bc + 1) * spatial];
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src
            .iter()
            .map(|v| (*v - mean) * (*v - mean))
            .sum::<T>()
            * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[bc] = inv;
        let xh = &mut xhat[bc * spatial..(bc + 1) * spatial];
        let dst = &mut out[bc * spatial..(bc + 1) * spatial];
        for ((xh, dst), v) in xh.iter_mut().zip(dst.iter_mut()).zip(src) {
            let n = (*v - mean) * inv;
            *xh = n;
            *dst = gamma[c] * n + beta[c];
        }
    }

    let gam = p.gamma.clone();
    Ok(record(
        "instance_norm",
        &[x, &p.gamma, &p.beta],
        xs.to_vec(),
        out,
        move |g| {
            let gamma = gam.data();
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            let mut dx = vec![T::zero(); g.len()];
            for bc in 0..b * ch {
                let c = bc % ch;
                let go = &g[bc * spatial..(bc + 1) * spatial];
                let xh = &xhat[bc * spatial..(bc + 1) * spatial];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for (gv, xv) in go.iter().zip(xh) {
                    sum_g = sum_g + *gv;
                    sum_gx = sum_gx + *gv * *xv;
                }
                dbeta[c] = dbeta[c] + sum_g;
                dgamma[c] = dgamma[c] + sum_gx;
                let mean_g = sum_g * inv_n;
                let mean_gx = sum_gx * inv_n;
                let coef = gamma[c] * inv_std[bc];
                let slot = &mut dx[bc * spatial..(bc + 1) * spatial];
                for ((s, gv), xv) in slot.iter_mut().zip(go).zip(xh) {
                    *s = coef * (*gv - mean_g - *xv * mean_gx);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    ))
}

/// `y = x` for `x >= 0`, `y = slope[ch] * x` otherwise. The channel axis is
/// axis 1 for rank >= 2 tensors; rank-0/1 tensors use a single shared slope.
pub fn prelu<T: Scalar>(x: &Tensor<T>, p: &PReluParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (ch, inner) = if xs.len() >= 2 {
        (xs[1], xs[2..].iter().product::<usize>())
    } else {
        (1, 1)
    };
    if p.slope.len() != ch {
        return Err(Error::shape(format!(
            "prelu: {ch} channels vs slope of {}",
            p.slope.len()
        )));
    }
    let slope = p.slope.data();
    let channel_of = move |idx: usize| (idx / inner) % ch;
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if *v >= T::zero() {
                *v
            } else {
                slope[channel_of(i)] * *v
            }
        })
        .collect();

    let (xc, sc) = (x.clone(), p.slope.clone());
    Ok(record("prelu", &[x, &p.slope], xs.to_vec(), out, move |g| {
        let slope = sc.data();
        let mut dx = vec![T::zero(); g.len()];
        let mut dslope = vec![T::zero(); slope.len()];
        for (i, (gv, xv)) in g.iter().zip(xc.data()).enumerate() {
            if *xv >= T::zero() {
                dx[i] = *gv;
            } else {
                let c = channel_of(i);
                dx[i] = slope[c] * *gv;
                dslope[c] = dslope[c] + *gv * *xv;
            }
        }
        vec![Some(dx), Some(dslope)]
    }))
}

/// Fully connected layer: `y = x W^T + bias` with `x [b, in]`,
/// `weight [out, in]`, `bias [out]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.len() != ws[0] {
        return Err(Error::shape(format!(
            "dense: x {xs:?} vs weight {ws:?} vs bias {:?}",
            bias.shape()
        )));
    }
    let (b, n_in, n_out) = (xs[0], xs[1], ws[0]);
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); b * n_out];
    for bi in 0..b {
        let xrow = &x.data()[bi * n_in..(bi + 1) * n_in];
        let orow = &mut out[bi * n_out..(bi + 1) * n_out];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wrow = &wd[o * n_in..(o + 1) * n_in];
            let mut acc = bd[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc = acc + *xv * *wv;
            }
            *slot = acc;
        }
    }

    let x_needs = x.needs_grad();
    let w_needs = weight.needs_grad();
    let b_needs = bias.needs_grad();
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(record(
        "dense",
        &[x, weight, bias],
        vec![b, n_out],
        out,
        move |g| {
            let wd = wc.data();
            let xd = xc.data();
            let dx = x_needs.then(|| {
                let mut dx = vec![T::zero(); b * n_in];
                for bi in 0..b {
                    let grow = &g[bi * n_out..(bi + 1) * n_out];
                    let drow = &mut dx[bi * n_in..(bi + 1) * n_in];
                    for (o, gv) in grow.iter().enumerate() {
                        let wrow = &wd[o * n_in..(o + 1) * n_in];
                        for (dv, wv) in drow.iter_mut().zip(wrow) {
                            *dv = *dv + *gv * *wv;
                        }
                    }
                }
                dx
            });
            let dw = w_needs.then(|| {
                let mut dw = vec![T::zero(); n_out * n_in];
                for bi in 0..b {
                    let grow = &g[bi * n_out..(bi + 1) * n_out];
                    let xrow = &xd[bi * n_in..(bi + 1) * n_in];
                    for (o, gv) in grow.iter().enumerate() {
                        let wrow = &mut dw[o * n_in..(o + 1) * n_in];
                        for (dv, xv) in wrow.iter_mut().zip(xrow) {
                            *dv = *dv + *gv * *xv;
                        }
                    }
                }
                dw
            });
            let db = b_needs.then(|| {
                let mut db = vec![T::zero(); n_out];
                for bi in 0..b {
                    let grow = &g[bi * n_out..(bi + 1) * n_out];
                    for (dv, gv) in db.iter_mut().zip(grow) {
                        *dv = *dv + *gv;
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    ))
}

/// Dense layer parameters; `weight [out, in]`, `bias [out]`.
pub struct DenseLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Self {
        DenseLayer {
            weight: init_uniform(rng, vec![n_out, n_in], n_in),
            bias: Tensor::new_leaf(vec![n_out], vec![T::zero(); n_out], true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, &self.weight, &self.bias)
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Scalar> ParamCollect<T> for DenseLayer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        push_param(out, format!("{prefix}.weight"), &self.weight);
        push_param(out, format!("{prefix}.bias"), &self.bias);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        push_param_mut(out, format!("{prefix}.weight"), &mut self.weight);
        push_param_mut(out, format!("{prefix}.bias"), &mut self.bias);
    }
}

/// conv3d -> instance_norm -> prelu, the unit the residual blocks stack.
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv3dParams<T>,
    pub norm: InstanceNormParams<T>,
    pub act: PReluParams<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv3dParams::new(rng, in_ch, out_ch, 3, [stride; 3], [1; 3]),
            norm: InstanceNormParams::new(out_ch),
            act: PReluParams::new(out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        prelu(&instance_norm(&conv3d(x, &self.conv)?, &self.norm)?, &self.act)
    }
}

impl<T: Scalar> ParamCollect<T> for ConvBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
        self.act.collect(&format!("{prefix}.act"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.conv.collect_mut(&format!("{prefix}.conv"), out);
        self.norm.collect_mut(&format!("{prefix}.norm"), out);
        self.act.collect_mut(&format!("{prefix}.act"), out);
    }
}

/// Three conv-blocks on the main path plus a 1x1x1 projection on the skip
/// path; any downsampling stride is applied by the first conv-block and by
/// the projection so both paths stay shape-compatible.
pub struct ResidualBlock<T: Scalar> {
    pub blocks: Vec<ConvBlock<T>>,
    pub skip: Conv3dParams<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let blocks = vec![
            ConvBlock::new(rng, in_ch, out_ch, stride),
            ConvBlock::new(rng, out_ch, out_ch, 1),
            ConvBlock::new(rng, out_ch, out_ch, 1),
        ];
        let skip = Conv3dParams::new(rng, in_ch, out_ch, 1, [stride; 3], [0; 3]);
        ResidualBlock { blocks, skip }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut main = self.blocks[0].forward(x)?;
        for block in &self.blocks[1..] {
            main = block.forward(&main)?;
        }
        let skip = conv3d(x, &self.skip)?;
        if main.shape() != skip.shape() {
            return Err(Error::config(format!(
                "residual block: main path {:?} vs skip path {:?}",
                main.shape(),
                skip.shape()
            )));
        }
        crate::tensor::add(&main, &skip)
    }
}

impl<T: Scalar> ParamCollect<T> for ResidualBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{i}"), out);
        }
        self.skip.collect(&format!("{prefix}.skip"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.block{i}"), out);
        }
        self.skip.collect_mut(&format!("{prefix}.skip"), out);
    }
}
