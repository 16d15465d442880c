//! Raw forward/backward kernels over flat f64 buffers.
//!
//! Every kernel here is a plain function of values; the tape in
//! [`crate::tape`] is responsible for wiring them into a graph.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Standard cross-correlation: x[N,Ci,H,W] * w[Co,Ci,k,k] + b[Co].
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, ci, h, wid) = x.dims4()?;
    let (co, wci, kh, kw) = w.dims4()?;
    if wci != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {ci} channels but kernel expects {wci}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArg(format!("conv2d: kernel must be square and odd, got {kh}x{kw}")));
    }
    if b.shape() != [co] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: bias shape {:?} does not match {co} output channels",
            b.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d: stride must be positive".into()));
    }
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(wid, kw, stride, pad);
    let mut out = vec![0.0; n * co * oh * ow];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    if stride == 1 {
        // row-span formulation: the innermost loop walks contiguous memory
        for ni in 0..n {
            for coi in 0..co {
                let obase = (ni * co + coi) * oh * ow;
                out[obase..obase + oh * ow].fill(bd[coi]);
                for cii in 0..ci {
                    let xbase = (ni * ci + cii) * h * wid;
                    let wbase = (coi * ci + cii) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let lo = pad.saturating_sub(kx);
                            let hi = (wid + pad - kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let orow = obase + oy * ow;
                                let xstart = xbase + (iy - pad) * wid + (lo + kx) - pad;
                                let xs = &xd[xstart..xstart + (hi - lo)];
                                for (o, &xv) in out[orow + lo..orow + hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        return Tensor::new(vec![n, co, oh, ow], out);
    }
    for ni in 0..n {
        for coi in 0..co {
            let bias = bd[coi];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for cii in 0..ci {
                        let xbase = ((ni * ci + cii) * h) * wid;
                        let wbase = ((coi * ci + cii) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                acc += xd[xbase + iy as usize * wid + ix as usize]
                                    * wd[wbase + ky * kw + kx];
                            }
                        }
                    }
                    out[((ni * co + coi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

/// Gradients of conv2d w.r.t. input, weight, bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, ci, h, wid) = x.dims4()?;
    let (co, _, kh, kw) = w.dims4()?;
    let (_, _, oh, ow) = gout.dims4()?;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; co];
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    if stride == 1 {
        for ni in 0..n {
            for coi in 0..co {
                let obase = (ni * co + coi) * oh * ow;
                gb[coi] += gd[obase..obase + oh * ow].iter().sum::<f64>();
                for cii in 0..ci {
                    let xbase = (ni * ci + cii) * h * wid;
                    let wbase = (coi * ci + cii) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wi = wbase + ky * kw + kx;
                            let wv = wd[wi];
                            let lo = pad.saturating_sub(kx);
                            let hi = (wid + pad - kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let orow = obase + oy * ow;
                                let xstart = xbase + (iy - pad) * wid + (lo + kx) - pad;
                                let span = hi - lo;
                                let gs = &gd[orow + lo..orow + hi];
                                let xs = &xd[xstart..xstart + span];
                                let gxs = &mut gx[xstart..xstart + span];
                                for i in 0..span {
                                    let g = gs[i];
                                    gxs[i] += g * wv;
                                    acc += g * xs[i];
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
        return Ok((
            Tensor::new(x.shape().to_vec(), gx)?,
            Tensor::new(w.shape().to_vec(), gw)?,
            Tensor::new(vec![co], gb)?,
        ));
    }
    for ni in 0..n {
        for coi in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[((ni * co + coi) * oh + oy) * ow + ox];
                    gb[coi] += g;
                    for cii in 0..ci {
                        let xbase = ((ni * ci + cii) * h) * wid;
                        let wbase = ((coi * ci + cii) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * wid + ix as usize;
                                let wi = wbase + ky * kw + kx;
                                gx[xi] += g * wd[wi];
                                gw[wi] += g * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![co], gb)?,
    ))
}

/// Depthwise convolution, stride 1, shape preserving: x[N,C,H,W] * w[C,1,k,k].
pub fn dwconv2d_forward(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, wid) = x.dims4()?;
    let (wc, one, kh, kw) = w.dims4()?;
    if wc != c || one != 1 {
        return Err(Error::ShapeMismatch(format!(
            "dwconv2d: kernel shape {:?} does not match {c} input channels",
            w.shape()
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArg(format!("dwconv2d: kernel must be square and odd, got {kh}x{kw}")));
    }
    if pad != (kh - 1) / 2 {
        return Err(Error::InvalidArg(format!(
            "dwconv2d: pad {pad} does not preserve shape for kernel {kh}"
        )));
    }
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    let wd = w.data();
    for ni in 0..n {
        for ch in 0..c {
            let xbase = ((ni * c + ch) * h) * wid;
            let wbase = ch * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let lo = pad.saturating_sub(kx);
                    let hi = (wid + pad - kx).min(wid);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let orow = xbase + oy * wid;
                        let xstart = xbase + (iy - pad) * wid + (lo + kx) - pad;
                        let xs = &xd[xstart..xstart + (hi - lo)];
                        for (o, &xv) in out[orow + lo..orow + hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn dwconv2d_backward(x: &Tensor, w: &Tensor, pad: usize, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, wid) = x.dims4()?;
    let (_, _, kh, kw) = w.dims4()?;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    for ni in 0..n {
        for ch in 0..c {
            let xbase = ((ni * c + ch) * h) * wid;
            let wbase = ch * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wi = wbase + ky * kw + kx;
                    let wv = wd[wi];
                    let lo = pad.saturating_sub(kx);
                    let hi = (wid + pad - kx).min(wid);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let orow = xbase + oy * wid;
                        let xstart = xbase + (iy - pad) * wid + (lo + kx) - pad;
                        let span = hi - lo;
                        let gs = &gd[orow + lo..orow + hi];
                        let xs = &xd[xstart..xstart + span];
                        let gxs = &mut gx[xstart..xstart + span];
                        for i in 0..span {
                            let g = gs[i];
                            gxs[i] += g * wv;
                            acc += g * xs[i];
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
    ))
}

/// Batched matmul: a[B,M,K] @ b[B,K,N] -> [B,M,N].
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = a.dims3()?;
    let (bb, kb, n) = b.dims3()?;
    if ba != bb || k != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {:?} @ {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; ba * m * n];
    let ad = a.data();
    let bd = b.data();
    for bi in 0..ba {
        let abase = bi * m * k;
        let bbase = bi * k * n;
        let obase = bi * m * n;
        for i in 0..m {
            for p in 0..k {
                let av = ad[abase + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = bbase + p * n;
                let orow = obase + i * n;
                for j in 0..n {
                    out[orow + j] += av * bd[brow + j];
                }
            }
        }
    }
    Tensor::new(vec![ba, m, n], out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (bsz, m, k) = a.dims3()?;
    let (_, _, n) = b.dims3()?;
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let ad = a.data();
    let bd = b.data();
    let gd = gout.data();
    for bi in 0..bsz {
        let abase = bi * m * k;
        let bbase = bi * k * n;
        let obase = bi * m * n;
        // ga = g @ b^T
        for i in 0..m {
            for j in 0..n {
                let g = gd[obase + i * n + j];
                if g == 0.0 {
                    continue;
                }
                for p in 0..k {
                    ga[abase + i * k + p] += g * bd[bbase + p * n + j];
                }
            }
        }
        // gb = a^T @ g
        for p in 0..k {
            for i in 0..m {
                let av = ad[abase + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let grow = obase + i * n;
                let brow = bbase + p * n;
                for j in 0..n {
                    gb[brow + j] += av * gd[grow + j];
                }
            }
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

/// Transpose the last two axes of a 3-d tensor.
pub fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    let (b, m, n) = a.dims3()?;
    let ad = a.data();
    let mut out = vec![0.0; a.numel()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[bi * m * n + j * m + i] = ad[bi * m * n + i * n + j];
            }
        }
    }
    Tensor::new(vec![b, n, m], out)
}

/// Softmax over the last dimension; rows sum to one.
pub fn softmax_lastdim_forward(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let last = *shape.last().ok_or_else(|| Error::InvalidArg("softmax over empty shape".into()))?;
    if last == 0 {
        return Err(Error::InvalidArg("softmax over empty dimension".into()));
    }
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(last) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(shape, out)
}

/// Backward of softmax given its own output y: gx = y * (g - sum(g*y)).
pub fn softmax_lastdim_backward(y: &Tensor, gout: &Tensor) -> Result<Tensor> {
    let last = *y.shape().last().unwrap();
    let yd = y.data();
    let gd = gout.data();
    let mut gx = vec![0.0; y.numel()];
    for (r, chunk) in gx.chunks_mut(last).enumerate() {
        let base = r * last;
        let dot: f64 = (0..last).map(|j| gd[base + j] * yd[base + j]).sum();
        for j in 0..last {
            chunk[j] = yd[base + j] * (gd[base + j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// 2x2 stride-2 max pooling; returns output and flat argmax indices into the input.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArg(format!("maxpool2: odd spatial extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for ni in 0..n {
        for ch in 0..c {
            let ibase = ((ni * c + ch) * h) * w;
            let obase = ((ni * c + ch) * oh) * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ibase + (oy * 2 + dy) * w + ox * 2 + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                bi = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = bi;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Average pool by an integer factor (both axes).
pub fn avgpool_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArg(format!(
            "avgpool: factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ch in 0..c {
            let ibase = ((ni * c + ch) * h) * w;
            let obase = ((ni * c + ch) * oh) * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += xd[ibase + (oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[obase + oy * ow + ox] = acc * norm;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool_backward(in_shape: &[usize], factor: usize, gout: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = gout.dims4()?;
    let (h, w) = (oh * factor, ow * factor);
    let norm = 1.0 / (factor * factor) as f64;
    let gd = gout.data();
    let mut gx = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for ch in 0..c {
            let ibase = ((ni * c + ch) * h) * w;
            let obase = ((ni * c + ch) * oh) * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[obase + oy * ow + ox] * norm;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            gx[ibase + (oy * factor + dy) * w + ox * factor + dx] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::InvalidArg("upsample: zero factor".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ch in 0..c {
            let ibase = ((ni * c + ch) * h) * w;
            let obase = ((ni * c + ch) * oh) * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    out[obase + oy * ow + ox] = xd[ibase + (oy / factor) * w + ox / factor];
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward(in_shape: &[usize], factor: usize, gout: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = gout.dims4()?;
    let (h, w) = (oh / factor, ow / factor);
    let gd = gout.data();
    let mut gx = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for ch in 0..c {
            let ibase = ((ni * c + ch) * h) * w;
            let obase = ((ni * c + ch) * oh) * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    gx[ibase + (oy / factor) * w + ox / factor] += gd[obase + oy * ow + ox];
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// [N,C,H,W] -> [N, H*W, C] token layout.
pub fn nchw_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(ni * hw + p) * c + ch] = xd[(ni * c + ch) * hw + p];
            }
        }
    }
    Tensor::new(vec![n, hw, c], out)
}

/// [N, H*W, C] -> [N,C,H,W].
pub fn tokens_to_nchw(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, hw, c) = x.dims3()?;
    if hw != h * w {
        return Err(Error::ShapeMismatch(format!(
            "tokens_to_nchw: {hw} tokens vs {h}x{w} grid"
        )));
    }
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(ni * c + ch) * hw + p] = xd[(ni * hw + p) * c + ch];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_scalar_affine() {
        // 1x1 input, 1x1 kernel w=[[2]], b=[1], x=[[3]] -> [[7]]
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn dwconv2d_k1_identity() {
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = dwconv2d_forward(&x, &w, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dwconv2d_single_channel_matches_conv2d() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| (v as f64).sin()).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| (v as f64) * 0.1 - 0.4).collect()).unwrap();
        let b = Tensor::zeros(&[1]);
        let dw = dwconv2d_forward(&x, &w, 1).unwrap();
        let full = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        for (a, b) in dw.data().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let y = softmax_lastdim_forward(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn token_roundtrip() {
        let x = Tensor::new(vec![2, 3, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let t = nchw_to_tokens(&x).unwrap();
        let back = tokens_to_nchw(&t, 2, 2).unwrap();
        assert_eq!(back, x);
    }
}
