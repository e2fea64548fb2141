//! Explicit forward/backward pairs for every layer type the network uses.
//!
//! There is no computation graph: each forward returns whatever cache its
//! backward needs, and every operation is a pure function of its inputs.
//! Spatial ops accept rank-3 (`H x W x C`) or rank-4 (`N x H x W x C`)
//! tensors; batch normalization works on rank 4 only since it needs batch
//! statistics.
//!
//! Summation order inside `conv2d_forward` is fixed to kernel-row, kernel-col,
//! input-channel so results are bit-identical to a naive nested-loop
//! evaluation of the same formula.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients of one layer: input gradient plus one named tensor per
/// learnable parameter.
pub struct LayerGrads<T: Scalar> {
    pub d_input: Tensor<T>,
    pub d_params: BTreeMap<String, Tensor<T>>,
}

/// Leading dims (batch treated as 1 for rank 3) and spatial/channel extents.
fn spatial_dims(t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match t.dims() {
        [h, w, c] => Ok((1, *h, *w, *c)),
        [n, h, w, c] => Ok((*n, *h, *w, *c)),
        d => Err(Error::shape(format!("expected rank 3 or 4 tensor, got dims {d:?}"))),
    }
}

fn with_batch(rank: usize, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if rank == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

fn conv_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if span < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded extent {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(Error::shape(format!(
            "non-integer output extent: ({input} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn check_conv_weights<T: Scalar>(weights: &Tensor<T>, bias: &Tensor<T>, cin: usize) -> Result<(usize, usize)> {
    let [kh, kw, wcin, cout] = match weights.dims() {
        [a, b, c, d] => [*a, *b, *c, *d],
        d => return Err(Error::shape(format!("weights must be rank 4, got {d:?}"))),
    };
    if kh != kw {
        return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "weight input channels {wcin} do not match input channels {cin}"
        )));
    }
    if bias.dims() != [cout] {
        return Err(Error::shape(format!(
            "bias dims {:?} do not match output channels {cout}",
            bias.dims()
        )));
    }
    Ok((kh, cout))
}

/// Register-blocked accumulation of one input row into one output row:
/// `out_row[o] += sum_ci in_row[ci] * w_block[ci * cout + o]`, with `ci`
/// ascending per output so the summation order matches a naive nested loop.
#[inline]
fn accumulate_row<T: Scalar>(out_row: &mut [T], in_row: &[T], w_block: &[T], cout: usize) {
    const OB: usize = 32;
    let mut ob = 0;
    while ob + OB <= cout {
        let mut acc = [T::zero(); OB];
        acc.copy_from_slice(&out_row[ob..ob + OB]);
        for (ci, &x) in in_row.iter().enumerate() {
            let w_row = &w_block[ci * cout + ob..][..OB];
            for j in 0..OB {
                acc[j] = acc[j] + x * w_row[j];
            }
        }
        out_row[ob..ob + OB].copy_from_slice(&acc);
        ob += OB;
    }
    if ob < cout {
        for (ci, &x) in in_row.iter().enumerate() {
            let w_row = &w_block[ci * cout..][..cout];
            for (a, &wv) in out_row[ob..].iter_mut().zip(&w_row[ob..]) {
                *a = *a + x * wv;
            }
        }
    }
}

/// Same as [`accumulate_row`] for two output pixels sharing one weight
/// stream; each pixel's own summation order is unchanged.
#[inline]
fn accumulate_row_pair<T: Scalar>(
    out0: &mut [T],
    out1: &mut [T],
    in0: &[T],
    in1: &[T],
    w_block: &[T],
    cout: usize,
) {
    const OB: usize = 32;
    let mut ob = 0;
    while ob + OB <= cout {
        let mut acc0 = [T::zero(); OB];
        let mut acc1 = [T::zero(); OB];
        acc0.copy_from_slice(&out0[ob..ob + OB]);
        acc1.copy_from_slice(&out1[ob..ob + OB]);
        for (ci, (&x0, &x1)) in in0.iter().zip(in1).enumerate() {
            let w_row = &w_block[ci * cout + ob..][..OB];
            for j in 0..OB {
                acc0[j] = acc0[j] + x0 * w_row[j];
                acc1[j] = acc1[j] + x1 * w_row[j];
            }
        }
        out0[ob..ob + OB].copy_from_slice(&acc0);
        out1[ob..ob + OB].copy_from_slice(&acc1);
        ob += OB;
    }
    if ob < cout {
        for (ci, (&x0, &x1)) in in0.iter().zip(in1).enumerate() {
            let w_row = &w_block[ci * cout..][..cout];
            for ((a0, a1), &wv) in out0[ob..]
                .iter_mut()
                .zip(out1[ob..].iter_mut())
                .zip(&w_row[ob..])
            {
                *a0 = *a0 + x0 * wv;
                *a1 = *a1 + x1 * wv;
            }
        }
    }
}

/// 2-D convolution with zero-padded borders.
///
/// `output[h, w, o] = bias[o] + sum over the k x k x Cin window of
/// input * weights`, with `H' = (H + 2*padding - k)/stride + 1`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let (n, h, w, cin) = spatial_dims(input)?;
    let (k, cout) = check_conv_weights(weights, bias, cin)?;
    let oh = conv_extent(h, k, stride, padding)?;
    let ow = conv_extent(w, k, stride, padding)?;

    let mut out = Tensor::zeros(&with_batch(input.rank(), n, oh, ow, cout));
    let wdata = weights.data();
    let bdata = bias.data();
    let in_plane = h * w * cin;
    let out_plane = oh * ow * cout;

    // widest span of output columns whose full k-window is in bounds;
    // pairs of those share one weight stream
    let pair_lo = padding.div_ceil(stride);
    let pair_hi = if w + padding >= k {
        ((w + padding - k) / stride + 1).min(ow)
    } else {
        0
    };

    for s in 0..n {
        let in_s = &input.data()[s * in_plane..(s + 1) * in_plane];
        let out_s = &mut out.data_mut()[s * out_plane..(s + 1) * out_plane];
        for ho in 0..oh {
            let mut wo = 0;
            while wo < ow {
                if wo >= pair_lo && wo + 2 <= pair_hi {
                    let (left, right) = out_s[(ho * ow + wo) * cout..].split_at_mut(cout);
                    let out0 = &mut left[..cout];
                    let out1 = &mut right[..cout];
                    out0.copy_from_slice(bdata);
                    out1.copy_from_slice(bdata);
                    for dh in 0..k {
                        let hi = (ho * stride + dh) as isize - padding as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for dw in 0..k {
                            let wi = wo * stride + dw - padding;
                            let base = (hi as usize * w + wi) * cin;
                            let in0 = &in_s[base..base + cin];
                            let in1 = &in_s[base + stride * cin..base + stride * cin + cin];
                            let w_block = &wdata[(dh * k + dw) * cin * cout..][..cin * cout];
                            accumulate_row_pair(out0, out1, in0, in1, w_block, cout);
                        }
                    }
                    wo += 2;
                } else {
                    let out_row = &mut out_s[(ho * ow + wo) * cout..][..cout];
                    out_row.copy_from_slice(bdata);
                    for dh in 0..k {
                        let hi = (ho * stride + dh) as isize - padding as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for dw in 0..k {
                            let wi = (wo * stride + dw) as isize - padding as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            let in_row = &in_s[(hi as usize * w + wi as usize) * cin..][..cin];
                            let w_block = &wdata[(dh * k + dw) * cin * cout..][..cin * cout];
                            accumulate_row(out_row, in_row, w_block, cout);
                        }
                    }
                    wo += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Output positions whose input read `ho*stride + off - padding` stays in
/// bounds; the range is contiguous. Returns `(lo, hi)` with `hi` exclusive.
fn valid_out_range(
    in_extent: usize,
    off: usize,
    stride: usize,
    padding: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = if off >= padding {
        0
    } else {
        (padding - off).div_ceil(stride)
    };
    let bound = in_extent + padding;
    if bound <= off {
        return (0, 0);
    }
    let hi = ((bound - off - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

/// Analytic gradients of [`conv2d_forward`] w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<LayerGrads<T>> {
    let (n, h, w, cin) = spatial_dims(input)?;
    let [k, _, _, cout] = match weights.dims() {
        [a, b, c, d] if a == b && *c == cin => [*a, *b, *c, *d],
        d => {
            return Err(Error::shape(format!(
                "weights dims {d:?} inconsistent with input channels {cin}"
            )))
        }
    };
    let oh = conv_extent(h, k, stride, padding)?;
    let ow = conv_extent(w, k, stride, padding)?;
    let expect = with_batch(d_output.rank(), n, oh, ow, cout);
    if d_output.dims() != expect.as_slice() || d_output.rank() != input.rank() {
        return Err(Error::shape(format!(
            "d_output dims {:?} do not match forward output dims {expect:?}",
            d_output.dims()
        )));
    }

    let mut d_input = Tensor::zeros(input.dims());
    let mut d_weights = Tensor::zeros(weights.dims());
    let mut d_bias = Tensor::zeros(&[cout]);

    // weights transposed to [dh, dw, o, ci] so the input-gradient inner loop
    // runs over a contiguous ci row
    let mut wt = vec![T::zero(); k * k * cout * cin];
    for blk in 0..k * k {
        let src = &weights.data()[blk * cin * cout..][..cin * cout];
        let dst = &mut wt[blk * cin * cout..][..cin * cout];
        for ci in 0..cin {
            for o in 0..cout {
                dst[o * cin + ci] = src[ci * cout + o];
            }
        }
    }

    let in_plane = h * w * cin;
    let out_plane = oh * ow * cout;
    for s in 0..n {
        let in_s = &input.data()[s * in_plane..(s + 1) * in_plane];
        let dout_s = &d_output.data()[s * out_plane..(s + 1) * out_plane];

        for g_row in dout_s.chunks_exact(cout) {
            for (b, &g) in d_bias.data_mut().iter_mut().zip(g_row) {
                *b = *b + g;
            }
        }

        // weight gradient: register tiles of 4 input channels x 16 outputs
        // accumulated over all valid output pixels
        const CB: usize = 4;
        const OB: usize = 16;
        for dh in 0..k {
            let (ho_lo, ho_hi) = valid_out_range(h, dh, stride, padding, oh);
            for dw in 0..k {
                let (wo_lo, wo_hi) = valid_out_range(w, dw, stride, padding, ow);
                if ho_lo >= ho_hi || wo_lo >= wo_hi {
                    continue;
                }
                let dw_block =
                    &mut d_weights.data_mut()[(dh * k + dw) * cin * cout..][..cin * cout];
                let mut cb = 0;
                while cb + CB <= cin {
                    let mut ob = 0;
                    while ob + OB <= cout {
                        let mut acc = [[T::zero(); OB]; CB];
                        for ho in ho_lo..ho_hi {
                            let hi = ho * stride + dh - padding;
                            for wo in wo_lo..wo_hi {
                                let wi = wo * stride + dw - padding;
                                let x = &in_s[(hi * w + wi) * cin + cb..][..CB];
                                let g = &dout_s[(ho * ow + wo) * cout + ob..][..OB];
                                for a in 0..CB {
                                    for j in 0..OB {
                                        acc[a][j] = acc[a][j] + x[a] * g[j];
                                    }
                                }
                            }
                        }
                        for (a, acc_row) in acc.iter().enumerate() {
                            let dst = &mut dw_block[(cb + a) * cout + ob..][..OB];
                            for (d, &v) in dst.iter_mut().zip(acc_row) {
                                *d = *d + v;
                            }
                        }
                        ob += OB;
                    }
                    if ob < cout {
                        for ho in ho_lo..ho_hi {
                            let hi = ho * stride + dh - padding;
                            for wo in wo_lo..wo_hi {
                                let wi = wo * stride + dw - padding;
                                let x = &in_s[(hi * w + wi) * cin + cb..][..CB];
                                let g = &dout_s[(ho * ow + wo) * cout..][..cout];
                                for (a, &xv) in x.iter().enumerate() {
                                    let dst = &mut dw_block[(cb + a) * cout..][..cout];
                                    for o in ob..cout {
                                        dst[o] = dst[o] + xv * g[o];
                                    }
                                }
                            }
                        }
                    }
                    cb += CB;
                }
                if cb < cin {
                    // leftover input channels, register-tiled over outputs
                    for ci in cb..cin {
                        let mut ob = 0;
                        while ob < cout {
                            let width = OB.min(cout - ob);
                            let mut acc = [T::zero(); OB];
                            for ho in ho_lo..ho_hi {
                                let hi = ho * stride + dh - padding;
                                for wo in wo_lo..wo_hi {
                                    let wi = wo * stride + dw - padding;
                                    let x = in_s[(hi * w + wi) * cin + ci];
                                    let g = &dout_s[(ho * ow + wo) * cout + ob..][..width];
                                    for j in 0..width {
                                        acc[j] = acc[j] + x * g[j];
                                    }
                                }
                            }
                            let dst = &mut dw_block[ci * cout + ob..][..width];
                            for (d, &v) in dst.iter_mut().zip(&acc[..width]) {
                                *d = *d + v;
                            }
                            ob += width;
                        }
                    }
                }
            }
        }

        // input gradient: tap-outer so each transposed weight block stays
        // cache-resident across the pixel sweep; 32-channel register blocks
        const IB: usize = 32;
        for dh in 0..k {
            let (ho_lo, ho_hi) = valid_out_range(h, dh, stride, padding, oh);
            for dw in 0..k {
                let (wo_lo, wo_hi) = valid_out_range(w, dw, stride, padding, ow);
                if ho_lo >= ho_hi || wo_lo >= wo_hi {
                    continue;
                }
                let wt_block = &wt[(dh * k + dw) * cin * cout..][..cin * cout];
                for ho in ho_lo..ho_hi {
                    let hi = ho * stride + dh - padding;
                    for wo in wo_lo..wo_hi {
                        let wi = wo * stride + dw - padding;
                        let g_row = &dout_s[(ho * ow + wo) * cout..][..cout];
                        let in_off = (hi * w + wi) * cin;
                        let din_row = &mut d_input.data_mut()[s * in_plane + in_off..][..cin];
                        let mut cb = 0;
                        while cb + IB <= cin {
                            let mut acc = [T::zero(); IB];
                            for (o, &g) in g_row.iter().enumerate() {
                                let wt_row = &wt_block[o * cin + cb..][..IB];
                                for j in 0..IB {
                                    acc[j] = acc[j] + g * wt_row[j];
                                }
                            }
                            let dst = &mut din_row[cb..cb + IB];
                            for (d, &v) in dst.iter_mut().zip(&acc) {
                                *d = *d + v;
                            }
                            cb += IB;
                        }
                        if cb < cin {
                            let rem = cin - cb;
                            let mut acc = [T::zero(); IB];
                            for (o, &g) in g_row.iter().enumerate() {
                                let wt_row = &wt_block[o * cin + cb..][..rem];
                                for j in 0..rem {
                                    acc[j] = acc[j] + g * wt_row[j];
                                }
                            }
                            for (d, &v) in din_row[cb..].iter_mut().zip(&acc[..rem]) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut d_params = BTreeMap::new();
    d_params.insert("weight".to_string(), d_weights);
    d_params.insert("bias".to_string(), d_bias);
    Ok(LayerGrads { d_input, d_params })
}

/// Per-channel running mean/variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Cache of a train-mode batch-norm forward, consumed by the backward pass.
pub struct BnCache<T: Scalar> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Tensor<T>,
    train: bool,
}

/// Batch normalization over the channel axis of an `N x H x W x C` tensor.
///
/// Train mode normalizes with biased batch moments and updates the running
/// stats by `new = (1 - momentum) * old + momentum * batch`; eval mode uses
/// the running stats unchanged.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    mode: Mode,
    momentum: T,
    epsilon: T,
) -> Result<(Tensor<T>, RunningStats<T>, BnCache<T>)> {
    let [n, h, w, c] = match input.dims() {
        [n, h, w, c] => [*n, *h, *w, *c],
        d => return Err(Error::shape(format!("batchnorm expects rank 4, got {d:?}"))),
    };
    if gamma.dims() != [c] || beta.dims() != [c] || running.mean.dims() != [c] || running.var.dims() != [c] {
        return Err(Error::shape("gamma/beta/running stats must be length-C vectors"));
    }
    if epsilon <= T::zero() {
        return Err(Error::domain("batchnorm epsilon must be > 0"));
    }
    let m = n * h * w;
    let (mean, var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::shape(format!(
                    "train-mode batchnorm needs N*H*W >= 2, got {m}"
                )));
            }
            let mut sums = vec![0.0f64; c];
            for row in input.data().chunks_exact(c) {
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            let mean: Vec<T> = sums.iter().map(|s| T::from_f64(s / m as f64)).collect();
            let mut sq = vec![0.0f64; c];
            for row in input.data().chunks_exact(c) {
                for ((s, &v), &mu) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - mu.as_f64();
                    *s += d * d;
                }
            }
            let var: Vec<T> = sq.iter().map(|s| T::from_f64(s / m as f64)).collect();
            (mean, var)
        }
        Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.dims());
    let mut out = Tensor::zeros(input.dims());
    {
        let gd = gamma.data();
        let bd = beta.data();
        for ((in_row, norm_row), out_row) in input
            .data()
            .chunks_exact(c)
            .zip(normalized.data_mut().chunks_exact_mut(c))
            .zip(out.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let xh = (in_row[ch] - mean[ch]) * inv_std[ch];
                norm_row[ch] = xh;
                out_row[ch] = gd[ch] * xh + bd[ch];
            }
        }
    }

    let updated = match mode {
        Mode::Train => {
            let one_minus = T::one() - momentum;
            let new_mean: Vec<T> = running
                .mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| one_minus * r + momentum * b)
                .collect();
            let new_var: Vec<T> = running
                .var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| one_minus * r + momentum * b)
                .collect();
            RunningStats {
                mean: Tensor::from_vec(&[c], new_mean)?,
                var: Tensor::from_vec(&[c], new_var)?,
            }
        }
        Mode::Eval => running.clone(),
    };

    let cache = BnCache {
        normalized,
        inv_std,
        gamma: gamma.clone(),
        train: mode == Mode::Train,
    };
    Ok((out, updated, cache))
}

/// Analytic gradients of the train-mode batch-norm forward.
pub fn batchnorm_backward<T: Scalar>(cache: &BnCache<T>, d_output: &Tensor<T>) -> Result<LayerGrads<T>> {
    if !cache.train {
        return Err(Error::shape("batchnorm backward requires a train-mode cache"));
    }
    if d_output.dims() != cache.normalized.dims() {
        return Err(Error::shape(format!(
            "d_output dims {:?} do not match cached dims {:?}",
            d_output.dims(),
            cache.normalized.dims()
        )));
    }
    let c = *d_output.dims().last().unwrap();
    let m = d_output.len() / c;
    let mf = T::from_f64(m as f64);

    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xh = vec![0.0f64; c];
    for (dy_row, xh_row) in d_output
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            sum_dy[ch] += dy_row[ch].as_f64();
            sum_dy_xh[ch] += dy_row[ch].as_f64() * xh_row[ch].as_f64();
        }
    }
    let s1: Vec<T> = sum_dy.iter().map(|&v| T::from_f64(v)).collect();
    let s2: Vec<T> = sum_dy_xh.iter().map(|&v| T::from_f64(v)).collect();

    let mut d_input = Tensor::zeros(d_output.dims());
    {
        let scale: Vec<T> = cache
            .gamma
            .data()
            .iter()
            .zip(&cache.inv_std)
            .map(|(&g, &i)| g * i)
            .collect();
        let s1m: Vec<T> = s1.iter().map(|&v| v / mf).collect();
        let s2m: Vec<T> = s2.iter().map(|&v| v / mf).collect();
        for ((dy_row, xh_row), din_row) in d_output
            .data()
            .chunks_exact(c)
            .zip(cache.normalized.data().chunks_exact(c))
            .zip(d_input.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                din_row[ch] = scale[ch] * (dy_row[ch] - s1m[ch] - xh_row[ch] * s2m[ch]);
            }
        }
    }

    let mut d_params = BTreeMap::new();
    d_params.insert("gamma".to_string(), Tensor::from_vec(&[c], s2)?);
    d_params.insert("beta".to_string(), Tensor::from_vec(&[c], s1)?);
    Ok(LayerGrads { d_input, d_params })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, d_output: &Tensor<T>) -> Result<Tensor<T>> {
    if input.dims() != d_output.dims() {
        return Err(Error::shape(format!(
            "relu backward dims mismatch: {:?} vs {:?}",
            input.dims(),
            d_output.dims()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(d_output.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims(), data)
}

/// Argmax positions of a max-pool forward (flat indices into the input data).
pub struct PoolCache {
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    argmax: Vec<usize>,
}

/// Non-overlapping max pooling; ties resolve to the first index in row-major
/// window scan order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    if stride != k {
        return Err(Error::shape(format!(
            "max pooling requires stride == k, got k={k} stride={stride}"
        )));
    }
    let (n, h, w, c) = spatial_dims(input)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "pool kernel {k} must divide spatial extents {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&with_batch(input.rank(), n, oh, ow, c));
    let mut argmax = vec![0usize; out.len()];
    let in_plane = h * w * c;
    let data = input.data();
    let outd = out.data_mut();
    let mut oi = 0;
    for s in 0..n {
        for ho in 0..oh {
            for wo in 0..ow {
                for ch in 0..c {
                    let mut best_idx = s * in_plane + (ho * k * w + wo * k) * c + ch;
                    let mut best = data[best_idx];
                    for dh in 0..k {
                        for dw in 0..k {
                            let idx = s * in_plane + ((ho * k + dh) * w + (wo * k + dw)) * c + ch;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    outd[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    let out_dims = out.dims().to_vec();
    Ok((
        out,
        PoolCache {
            in_dims: input.dims().to_vec(),
            out_dims,
            argmax,
        },
    ))
}

/// Routes each gradient entry to its argmax position; zeros elsewhere.
pub fn maxpool_backward<T: Scalar>(cache: &PoolCache, d_output: &Tensor<T>) -> Result<Tensor<T>> {
    if d_output.dims() != cache.out_dims.as_slice() {
        return Err(Error::shape(format!(
            "d_output dims {:?} do not match pool output dims {:?}",
            d_output.dims(),
            cache.out_dims
        )));
    }
    let mut d_input = Tensor::zeros(&cache.in_dims);
    let din = d_input.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(d_output.data()) {
        din[idx] += g;
    }
    Ok(d_input)
}

/// Non-overlapping average pooling (window mean, stride = k).
pub fn avgpool_forward<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = spatial_dims(input)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "pool kernel {k} must divide spatial extents {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut out = Tensor::zeros(&with_batch(input.rank(), n, oh, ow, c));
    let in_plane = h * w * c;
    let data = input.data();
    let outd = out.data_mut();
    let mut oi = 0;
    for s in 0..n {
        for ho in 0..oh {
            for wo in 0..ow {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for dh in 0..k {
                        for dw in 0..k {
                            acc += data[s * in_plane + ((ho * k + dh) * w + (wo * k + dw)) * c + ch];
                        }
                    }
                    outd[oi] = acc * inv;
                    oi += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Spreads each gradient entry uniformly (divided by k^2) over its window.
pub fn avgpool_backward<T: Scalar>(d_output: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, oh, ow, c) = spatial_dims(d_output)?;
    if k == 0 {
        return Err(Error::shape("pool kernel must be >= 1"));
    }
    let (h, w) = (oh * k, ow * k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut d_input = Tensor::zeros(&with_batch(d_output.rank(), n, h, w, c));
    let in_plane = h * w * c;
    let out_plane = oh * ow * c;
    let din = d_input.data_mut();
    for s in 0..n {
        for ho in 0..oh {
            for wo in 0..ow {
                for ch in 0..c {
                    let g = d_output.data()[s * out_plane + (ho * ow + wo) * c + ch] * inv;
                    for dh in 0..k {
                        for dw in 0..k {
                            din[s * in_plane + ((ho * k + dh) * w + (wo * k + dw)) * c + ch] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(d_input)
}

/// Transposed convolution with kernel size equal to stride: each input pixel
/// scatters its channel vector times the kernel into a disjoint k x k output
/// block, so the output extent is exactly `h * stride`.
pub fn deconv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, h, w, cin) = spatial_dims(input)?;
    let (k, cout) = check_conv_weights(weights, bias, cin)?;
    if k != stride {
        return Err(Error::shape(format!(
            "transposed conv requires kernel == stride, got k={k} stride={stride}"
        )));
    }
    let (oh, ow) = (h * k, w * k);
    let mut out = Tensor::zeros(&with_batch(input.rank(), n, oh, ow, cout));
    let in_plane = h * w * cin;
    let out_plane = oh * ow * cout;
    let wdata = weights.data();
    for s in 0..n {
        let in_s = &input.data()[s * in_plane..(s + 1) * in_plane];
        let out_s = &mut out.data_mut()[s * out_plane..(s + 1) * out_plane];
        for hi in 0..h {
            for wi in 0..w {
                let in_row = &in_s[(hi * w + wi) * cin..][..cin];
                for di in 0..k {
                    for dj in 0..k {
                        let out_row =
                            &mut out_s[((hi * k + di) * ow + (wi * k + dj)) * cout..][..cout];
                        out_row.copy_from_slice(bias.data());
                        let w_block = &wdata[(di * k + dj) * cin * cout..][..cin * cout];
                        accumulate_row(out_row, in_row, w_block, cout);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Analytic gradients of [`deconv2d_forward`].
pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_output: &Tensor<T>,
    stride: usize,
) -> Result<LayerGrads<T>> {
    let (n, h, w, cin) = spatial_dims(input)?;
    let [k, _, _, cout] = match weights.dims() {
        [a, b, c, d] if a == b && *c == cin => [*a, *b, *c, *d],
        d => {
            return Err(Error::shape(format!(
                "weights dims {d:?} inconsistent with input channels {cin}"
            )))
        }
    };
    if k != stride {
        return Err(Error::shape("transposed conv requires kernel == stride"));
    }
    let (oh, ow) = (h * k, w * k);
    let expect = with_batch(input.rank(), n, oh, ow, cout);
    if d_output.dims() != expect.as_slice() {
        return Err(Error::shape(format!(
            "d_output dims {:?} do not match forward output dims {expect:?}",
            d_output.dims()
        )));
    }

    let mut d_input = Tensor::zeros(input.dims());
    let mut d_weights = Tensor::zeros(weights.dims());
    let mut d_bias = vec![T::zero(); cout];
    let in_plane = h * w * cin;
    let out_plane = oh * ow * cout;
    for s in 0..n {
        let in_s = &input.data()[s * in_plane..(s + 1) * in_plane];
        let dout_s = &d_output.data()[s * out_plane..(s + 1) * out_plane];
        for hi in 0..h {
            for wi in 0..w {
                let in_row = &in_s[(hi * w + wi) * cin..][..cin];
                let din_row = &mut d_input.data_mut()[s * in_plane + (hi * w + wi) * cin..][..cin];
                for di in 0..k {
                    for dj in 0..k {
                        let g_row = &dout_s[((hi * k + di) * ow + (wi * k + dj)) * cout..][..cout];
                        for (b, &g) in d_bias.iter_mut().zip(g_row) {
                            *b = *b + g;
                        }
                        let w_block = &weights.data()[(di * k + dj) * cin * cout..][..cin * cout];
                        let dw_block =
                            &mut d_weights.data_mut()[(di * k + dj) * cin * cout..][..cin * cout];
                        for (ci, (&x, d)) in in_row.iter().zip(din_row.iter_mut()).enumerate() {
                            let w_row = &w_block[ci * cout..][..cout];
                            let dw_row = &mut dw_block[ci * cout..][..cout];
                            let mut acc = T::zero();
                            for ((dw_v, &wv), &g) in
                                dw_row.iter_mut().zip(w_row).zip(g_row)
                            {
                                *dw_v = *dw_v + x * g;
                                acc = acc + g * wv;
                            }
                            *d = *d + acc;
                        }
                    }
                }
            }
        }
    }

    let mut d_params = BTreeMap::new();
    d_params.insert("weight".to_string(), d_weights);
    d_params.insert("bias".to_string(), Tensor::from_vec(&[cout], d_bias)?);
    Ok(LayerGrads { d_input, d_params })
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::shape("concat of zero tensors"));
    }
    let rank = inputs[0].rank();
    let lead = &inputs[0].dims()[..rank - 1];
    let mut c_total = 0;
    for t in inputs {
        if t.rank() != rank || &t.dims()[..rank - 1] != lead {
            return Err(Error::shape(format!(
                "concat spatial dims mismatch: {:?} vs {:?}",
                t.dims(),
                inputs[0].dims()
            )));
        }
        c_total += *t.dims().last().unwrap();
    }
    let mut dims = lead.to_vec();
    dims.push(c_total);
    let positions: usize = lead.iter().product();
    let mut data = Vec::with_capacity(positions * c_total);
    for p in 0..positions {
        for t in inputs {
            let c = *t.dims().last().unwrap();
            data.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_vec(&dims, data)
}

/// Inverse of [`concat_channels`]: slices the channel axis back into pieces
/// of the given sizes (used to split the gradient on backward).
pub fn split_channels<T: Scalar>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let rank = input.rank();
    let c_total = *input.dims().last().unwrap();
    if sizes.iter().sum::<usize>() != c_total {
        return Err(Error::shape(format!(
            "split sizes {sizes:?} do not sum to channel count {c_total}"
        )));
    }
    let lead = &input.dims()[..rank - 1];
    let positions: usize = lead.iter().product();
    let mut outs: Vec<Tensor<T>> = sizes
        .iter()
        .map(|&c| {
            let mut dims = lead.to_vec();
            dims.push(c);
            Tensor::zeros(&dims)
        })
        .collect();
    for p in 0..positions {
        let row = &input.data()[p * c_total..(p + 1) * c_total];
        let mut off = 0;
        for (t, &c) in outs.iter_mut().zip(sizes) {
            t.data_mut()[p * c..(p + 1) * c].copy_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    Ok(outs)
}

/// Two-way softmax over the last axis, evaluated with max-shifted exponents.
pub fn softmax2<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if *logits.dims().last().unwrap() != 2 {
        return Err(Error::shape(format!(
            "softmax2 expects 2 channels, got dims {:?}",
            logits.dims()
        )));
    }
    let mut out = Tensor::zeros(logits.dims());
    for (o, l) in out
        .data_mut()
        .chunks_exact_mut(2)
        .zip(logits.data().chunks_exact(2))
    {
        let m = if l[0] > l[1] { l[0] } else { l[1] };
        let e0 = (l[0] - m).exp();
        let e1 = (l[1] - m).exp();
        let z = e0 + e1;
        o[0] = e0 / z;
        o[1] = e1 / z;
    }
    Ok(out)
}

/// Mean per-pixel softmax cross-entropy over two classes.
///
/// `labels` must hold only 0 or 1 and have the logits' dims minus the channel
/// axis. Returns the scalar loss and `d_logits = (softmax - onehot) / P`
/// where `P` is the number of pixels.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if *logits.dims().last().unwrap() != 2 {
        return Err(Error::shape(format!(
            "softmax_xent expects 2 logit channels, got dims {:?}",
            logits.dims()
        )));
    }
    if labels.dims() != &logits.dims()[..logits.rank() - 1] {
        return Err(Error::shape(format!(
            "label dims {:?} do not match logit dims {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let pixels = labels.len();
    let inv_p = T::one() / T::from_f64(pixels as f64);
    let mut d_logits = Tensor::zeros(logits.dims());
    let mut loss_acc = 0.0f64;
    for (i, (l, d)) in logits
        .data()
        .chunks_exact(2)
        .zip(d_logits.data_mut().chunks_exact_mut(2))
        .enumerate()
    {
        let lab = labels.data()[i];
        let label = if lab == T::zero() {
            0
        } else if lab == T::one() {
            1
        } else {
            return Err(Error::domain(format!(
                "label {lab} at pixel {i} is outside {{0, 1}}"
            )));
        };
        let m = if l[0] > l[1] { l[0] } else { l[1] };
        let e0 = (l[0] - m).exp();
        let e1 = (l[1] - m).exp();
        let z = e0 + e1;
        let p0 = e0 / z;
        let p1 = e1 / z;
        // -log p_label with the shift folded in
        let log_p = l[label] - m - z.ln();
        loss_acc -= log_p.as_f64();
        d[0] = (p0 - if label == 0 { T::one() } else { T::zero() }) * inv_p;
        d[1] = (p1 - if label == 1 { T::one() } else { T::zero() }) * inv_p;
    }
    let loss = T::from_f64(loss_acc / pixels as f64);
    Ok((loss, d_logits))
}
