//! Forward and backward kernels for the tape ops. Convolutions go through
//! im2col plus a matrix product; everything else is direct loops.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Real, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Spatial padding rule for convolutions. Reflect mirrors without repeating
/// the edge sample, zero pads with zeros.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Reflect,
    Zero,
}

/// c[m,n] (+)= a[m,k] * b[k,n]; beta 0 overwrites, 1 accumulates.
fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F], beta: F) {
    let av = ArrayView2::from_shape((m, k), a).expect("a dims");
    let bv = ArrayView2::from_shape((k, n), b).expect("b dims");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("c dims");
    general_mat_mul(F::ONE, &av, &bv, beta, &mut cv);
}

/// c[m,n] (+)= a[m,k] * b[n,k]^T
fn mm_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F], beta: F) {
    let av = ArrayView2::from_shape((m, k), a).expect("a dims");
    let bv = ArrayView2::from_shape((n, k), b).expect("b dims");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("c dims");
    general_mat_mul(F::ONE, &av, &bv.t(), beta, &mut cv);
}

/// c[m,n] (+)= a[k,m]^T * b[k,n]
fn mm_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F], beta: F) {
    let av = ArrayView2::from_shape((k, m), a).expect("a dims");
    let bv = ArrayView2::from_shape((k, n), b).expect("b dims");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("c dims");
    general_mat_mul(F::ONE, &av.t(), &bv, beta, &mut cv);
}

/// Mirror an out-of-range index into [0, n) without repeating the edge.
fn reflect_idx(i: isize, n: usize) -> usize {
    // A size-1 axis has nothing to mirror; every padded position reads the
    // single element (the 2n-2 bounce would oscillate forever).
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn conv_out_dim(input: usize, kernel: usize, pad: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Pad one [C,H,W] sample into [C, H+2p, W+2p].
fn pad_sample<F: Real>(
    src: &[F],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mode: PadMode,
    dst: &mut [F],
) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * ph * pw..(ch + 1) * ph * pw];
        for y in 0..ph {
            let sy = y as isize - p as isize;
            for x in 0..pw {
                let sx = x as isize - p as isize;
                let v = match mode {
                    PadMode::Zero => {
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            F::ZERO
                        } else {
                            s[sy as usize * w + sx as usize]
                        }
                    }
                    PadMode::Reflect => s[reflect_idx(sy, h) * w + reflect_idx(sx, w)],
                };
                d[y * pw + x] = v;
            }
        }
    }
}

/// Fold gradients of a padded sample back onto the unpadded sample
/// (accumulating into mirrored source cells for reflect padding).
fn unpad_sample_grad<F: Real>(
    gpad: &[F],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mode: PadMode,
    dst: &mut [F],
) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    for ch in 0..c {
        let g = &gpad[ch * ph * pw..(ch + 1) * ph * pw];
        let d = &mut dst[ch * h * w..(ch + 1) * h * w];
        for y in 0..ph {
            let sy = y as isize - p as isize;
            for x in 0..pw {
                let sx = x as isize - p as isize;
                match mode {
                    PadMode::Zero => {
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            d[sy as usize * w + sx as usize] += g[y * pw + x];
                        }
                    }
                    PadMode::Reflect => {
                        d[reflect_idx(sy, h) * w + reflect_idx(sx, w)] += g[y * pw + x];
                    }
                }
            }
        }
    }
}

/// cols is [cin*k*k, oh*ow] for one padded sample.
fn im2col<F: Real>(
    padded: &[F],
    cin: usize,
    ph: usize,
    pw: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [F],
) {
    let mut row = 0;
    for c in 0..cin {
        let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
        for ky in 0..k {
            for kx in 0..k {
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    let base = iy * pw + kx;
                    for ox in 0..ow {
                        out_row[oy * ow + ox] = plane[base + ox * stride];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Transpose of im2col: scatter-add column gradients back onto the padded sample.
fn col2im<F: Real>(
    cols: &[F],
    cin: usize,
    ph: usize,
    pw: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    padded: &mut [F],
) {
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut padded[c * ph * pw..(c + 1) * ph * pw];
        for ky in 0..k {
            for kx in 0..k {
                let in_row = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    let base = iy * pw + kx;
                    for ox in 0..ow {
                        plane[base + ox * stride] += in_row[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: PadMode,
) -> Result<Tensor<F>> {
    let (n, cin, h, w) = input.dims4()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != cin {
        return Err(Error::shape(
            "conv2d weight",
            format!("[cout, {cin}, k, k]"),
            format!("{ws:?}"),
        ));
    }
    let (cout, k) = (ws[0], ws[2]);
    if ws[3] != k || k % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel must be square and odd, got {ws:?}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("conv2d input", "spatial >= 1", format!("{h}x{w}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d bias", format!("[{cout}]"), format!("{:?}", b.shape())));
        }
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let oh = conv_out_dim(h, k, p, stride);
    let ow = conv_out_dim(w, k, p, stride);
    let krows = cin * k * k;

    let mut out = vec![F::ZERO; n * cout * oh * ow];
    let mut padded = vec![F::ZERO; cin * ph * pw];
    let mut cols = vec![F::ZERO; krows * oh * ow];
    for s in 0..n {
        let src = &input.data()[s * cin * h * w..(s + 1) * cin * h * w];
        pad_sample(src, cin, h, w, p, pad, &mut padded);
        im2col(&padded, cin, ph, pw, k, stride, oh, ow, &mut cols);
        let dst = &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
        mm(weight.data(), &cols, cout, krows, oh * ow, dst, F::ZERO);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b.data()[co];
                for v in &mut dst[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<F: Real>(
    go: &[F],
    input: &Tensor<F>,
    weight: &Tensor<F>,
    stride: usize,
    pad: PadMode,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let (n, cin, h, w) = input.dims4().expect("checked in forward");
    let ws = weight.shape();
    let (cout, k) = (ws[0], ws[2]);
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let oh = conv_out_dim(h, k, p, stride);
    let ow = conv_out_dim(w, k, p, stride);
    let krows = cin * k * k;

    let mut dinput = need_input.then(|| vec![F::ZERO; input.numel()]);
    let mut dweight = need_weight.then(|| vec![F::ZERO; weight.numel()]);
    let mut dbias = need_bias.then(|| vec![F::ZERO; cout]);

    let mut padded = vec![F::ZERO; cin * ph * pw];
    let mut cols = vec![F::ZERO; krows * oh * ow];
    let mut dcols = vec![F::ZERO; krows * oh * ow];
    let mut dpadded = vec![F::ZERO; cin * ph * pw];
    for s in 0..n {
        let g = &go[s * cout * oh * ow..(s + 1) * cout * oh * ow];
        if need_weight {
            let src = &input.data()[s * cin * h * w..(s + 1) * cin * h * w];
            pad_sample(src, cin, h, w, p, pad, &mut padded);
            im2col(&padded, cin, ph, pw, k, stride, oh, ow, &mut cols);
            // dW[cout, krows] += g[cout, ohw] * cols[krows, ohw]^T
            mm_nt(g, &cols, cout, oh * ow, krows, dweight.as_mut().unwrap(), F::ONE);
        }
        if need_bias {
            let db = dbias.as_mut().unwrap();
            for co in 0..cout {
                let mut acc = F::ZERO;
                for &v in &g[co * oh * ow..(co + 1) * oh * ow] {
                    acc += v;
                }
                db[co] += acc;
            }
        }
        if need_input {
            // dcols[krows, ohw] = W[cout, krows]^T * g[cout, ohw]
            mm_tn(weight.data(), g, krows, cout, oh * ow, &mut dcols, F::ZERO);
            dpadded.iter_mut().for_each(|v| *v = F::ZERO);
            col2im(&dcols, cin, ph, pw, k, stride, oh, ow, &mut dpadded);
            let di = &mut dinput.as_mut().unwrap()[s * cin * h * w..(s + 1) * cin * h * w];
            unpad_sample_grad(&dpadded, cin, h, w, p, pad, di);
        }
    }
    (dinput, dweight, dbias)
}

pub(crate) fn group_norm_forward<F: Real>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: F,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let (n, c, h, w) = input.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {groups} groups must divide {c} channels"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm affine",
            format!("[{c}]"),
            format!("{:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let cg = c / groups;
    let m = cg * h * w;
    let mf = F::from_usize(m);
    let mut out = vec![F::ZERO; input.numel()];
    let mut xhat = vec![F::ZERO; input.numel()];
    let mut invstd = vec![F::ZERO; n * groups];
    let x = input.data();
    for s in 0..n {
        for g in 0..groups {
            let c0 = g * cg;
            let mut mean = F::ZERO;
            for ch in c0..c0 + cg {
                let base = idx4(c, h, w, s, ch, 0, 0);
                for v in &x[base..base + h * w] {
                    mean += *v;
                }
            }
            mean = mean / mf;
            let mut var = F::ZERO;
            for ch in c0..c0 + cg {
                let base = idx4(c, h, w, s, ch, 0, 0);
                for v in &x[base..base + h * w] {
                    let d = *v - mean;
                    var += d * d;
                }
            }
            var = var / mf;
            let is = F::ONE / (var + eps).sqrt();
            invstd[s * groups + g] = is;
            for ch in c0..c0 + cg {
                let base = idx4(c, h, w, s, ch, 0, 0);
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for i in base..base + h * w {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = ga * xh + be;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, h, w], out)?, xhat, invstd))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<F: Real>(
    go: &[F],
    input_shape: &[usize],
    gamma: &Tensor<F>,
    xhat: &[F],
    invstd: &[F],
    groups: usize,
    need_input: bool,
    need_gamma: bool,
    need_beta: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let cg = c / groups;
    let m = cg * h * w;
    let mf = F::from_usize(m);
    let mut dinput = need_input.then(|| vec![F::ZERO; go.len()]);
    let mut dgamma = need_gamma.then(|| vec![F::ZERO; c]);
    let mut dbeta = need_beta.then(|| vec![F::ZERO; c]);

    if need_gamma || need_beta {
        for s in 0..n {
            for ch in 0..c {
                let base = idx4(c, h, w, s, ch, 0, 0);
                let mut dg = F::ZERO;
                let mut db = F::ZERO;
                for i in base..base + h * w {
                    dg += go[i] * xhat[i];
                    db += go[i];
                }
                if let Some(d) = dgamma.as_mut() {
                    d[ch] += dg;
                }
                if let Some(d) = dbeta.as_mut() {
                    d[ch] += db;
                }
            }
        }
    }
    if need_input {
        let di = dinput.as_mut().unwrap();
        for s in 0..n {
            for g in 0..groups {
                let c0 = g * cg;
                let is = invstd[s * groups + g];
                // dxhat = go * gamma; dx = invstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut sum_dxh = F::ZERO;
                let mut sum_dxh_xh = F::ZERO;
                for ch in c0..c0 + cg {
                    let ga = gamma.data()[ch];
                    let base = idx4(c, h, w, s, ch, 0, 0);
                    for i in base..base + h * w {
                        let dxh = go[i] * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i];
                    }
                }
                let mean_dxh = sum_dxh / mf;
                let mean_dxh_xh = sum_dxh_xh / mf;
                for ch in c0..c0 + cg {
                    let ga = gamma.data()[ch];
                    let base = idx4(c, h, w, s, ch, 0, 0);
                    for i in base..base + h * w {
                        let dxh = go[i] * ga;
                        di[i] = is * (dxh - mean_dxh - xhat[i] * mean_dxh_xh);
                    }
                }
            }
        }
    }
    (dinput, dgamma, dbeta)
}

pub(crate) fn nearest_up_forward<F: Real>(input: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    if factor == 0 {
        return Err(Error::Config("nearest_upsample factor must be >= 1".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![F::ZERO; n * c * oh * ow];
    let x = input.data();
    for s in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let sy = y / factor;
                let src = idx4(c, h, w, s, ch, sy, 0);
                let dst = idx4(c, oh, ow, s, ch, y, 0);
                for xo in 0..ow {
                    out[dst + xo] = x[src + xo / factor];
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn nearest_up_backward<F: Real>(go: &[F], input_shape: &[usize], factor: usize) -> Vec<F> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut di = vec![F::ZERO; n * c * h * w];
    for s in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let src = idx4(c, oh, ow, s, ch, y, 0);
                let dst = idx4(c, h, w, s, ch, y / factor, 0);
                for xo in 0..ow {
                    di[dst + xo / factor] += go[src + xo];
                }
            }
        }
    }
    di
}

pub(crate) fn linear_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let ishape = input.shape();
    if ishape.len() != 2 {
        return Err(Error::shape("linear input", "[n, in]", format!("{ishape:?}")));
    }
    let (n, fin) = (ishape[0], ishape[1]);
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != fin {
        return Err(Error::shape("linear weight", format!("[out, {fin}]"), format!("{ws:?}")));
    }
    let fout = ws[0];
    let mut out = vec![F::ZERO; n * fout];
    mm_nt(input.data(), weight.data(), n, fin, fout, &mut out, F::ZERO);
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(Error::shape("linear bias", format!("[{fout}]"), format!("{:?}", b.shape())));
        }
        for r in 0..n {
            for (o, bv) in b.data().iter().enumerate() {
                out[r * fout + o] += *bv;
            }
        }
    }
    Tensor::new(vec![n, fout], out)
}

pub(crate) fn linear_backward<F: Real>(
    go: &[F],
    input: &Tensor<F>,
    weight: &Tensor<F>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let mut dinput = None;
    let mut dweight = None;
    let mut dbias = None;
    if need_input {
        // di[n, fin] = go[n, fout] * W[fout, fin]
        let mut di = vec![F::ZERO; n * fin];
        mm(go, weight.data(), n, fout, fin, &mut di, F::ZERO);
        dinput = Some(di);
    }
    if need_weight {
        // dW[fout, fin] = go[n, fout]^T * x[n, fin]
        let mut dw = vec![F::ZERO; fout * fin];
        mm_tn(go, input.data(), fout, n, fin, &mut dw, F::ZERO);
        dweight = Some(dw);
    }
    if need_bias {
        let mut db = vec![F::ZERO; fout];
        for r in 0..n {
            for o in 0..fout {
                db[o] += go[r * fout + o];
            }
        }
        dbias = Some(db);
    }
    (dinput, dweight, dbias)
}

pub(crate) fn gram_forward<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let norm = F::ONE / F::from_usize(hw);
    let mut out = vec![F::ZERO; n * c * c];
    for s in 0..n {
        let f = &input.data()[s * c * hw..(s + 1) * c * hw];
        let g = &mut out[s * c * c..(s + 1) * c * c];
        mm_nt(f, f, c, hw, c, g, F::ZERO);
        for v in g.iter_mut() {
            *v *= norm;
        }
    }
    Tensor::new(vec![n, c, c], out)
}

pub(crate) fn gram_backward<F: Real>(go: &[F], input: &Tensor<F>) -> Vec<F> {
    let (n, c, h, w) = input.dims4().expect("checked in forward");
    let hw = h * w;
    let norm = F::ONE / F::from_usize(hw);
    let mut di = vec![F::ZERO; input.numel()];
    let mut gsym = vec![F::ZERO; c * c];
    for s in 0..n {
        let g = &go[s * c * c..(s + 1) * c * c];
        for i in 0..c {
            for j in 0..c {
                gsym[i * c + j] = (g[i * c + j] + g[j * c + i]) * norm;
            }
        }
        let f = &input.data()[s * c * hw..(s + 1) * c * hw];
        let d = &mut di[s * c * hw..(s + 1) * c * hw];
        // dF = (G + G^T)/hw * F
        mm(&gsym, f, c, c, hw, d, F::ZERO);
    }
    di
}

pub(crate) fn gather_nchw_forward<F: Real>(
    table: &Tensor<F>,
    indices: &[usize],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<F> {
    let mut out = vec![F::ZERO; n * c * h * w];
    let t = table.data();
    for (p, &k) in indices.iter().enumerate() {
        let (s, rem) = (p / (h * w), p % (h * w));
        let (y, x) = (rem / w, rem % w);
        let row = &t[k * c..(k + 1) * c];
        for (ch, &v) in row.iter().enumerate() {
            out[idx4(c, h, w, s, ch, y, x)] = v;
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("sized above")
}

pub(crate) fn gather_nchw_backward<F: Real>(
    go: &[F],
    indices: &[usize],
    k: usize,
    c: usize,
    n: usize,
    h: usize,
    w: usize,
) -> Vec<F> {
    let _ = n;
    let mut dt = vec![F::ZERO; k * c];
    for (p, &ki) in indices.iter().enumerate() {
        let (s, rem) = (p / (h * w), p % (h * w));
        let (y, x) = (rem / w, rem % w);
        for ch in 0..c {
            dt[ki * c + ch] += go[idx4(c, h, w, s, ch, y, x)];
        }
    }
    dt
}

pub(crate) fn spectral_norm_forward<F: Real>(
    weight: &Tensor<F>,
    u: &[F],
    v: &[F],
) -> Result<(Tensor<F>, F)> {
    let shape = weight.shape();
    if shape.is_empty() {
        return Err(Error::shape("spectral_norm", "rank >= 2", "rank 0"));
    }
    let rows = shape[0];
    let cols = weight.numel() / rows;
    if u.len() != rows || v.len() != cols {
        return Err(Error::shape(
            "spectral_norm vectors",
            format!("u[{rows}], v[{cols}]"),
            format!("u[{}], v[{}]", u.len(), v.len()),
        ));
    }
    // sigma = u^T W v
    let wd = weight.data();
    let mut sigma = F::ZERO;
    for r in 0..rows {
        let mut acc = F::ZERO;
        for cc in 0..cols {
            acc += wd[r * cols + cc] * v[cc];
        }
        sigma += u[r] * acc;
    }
    let tiny = F::from_f64(1e-12);
    let s = if sigma.abs() < tiny { tiny } else { sigma };
    let out = Tensor::new(shape.to_vec(), wd.iter().map(|&x| x / s).collect())?;
    Ok((out, s))
}

pub(crate) fn spectral_norm_backward<F: Real>(
    go: &[F],
    normalized: &[F],
    u: &[F],
    v: &[F],
    sigma: F,
) -> Vec<F> {
    // W_bar = W / sigma, sigma = u^T W v with u, v constant:
    // dW = go/sigma - (sum go .* W_bar)/sigma * u v^T
    let rows = u.len();
    let cols = v.len();
    let mut dot = F::ZERO;
    for (g, wb) in go.iter().zip(normalized) {
        dot += *g * *wb;
    }
    let scale = dot / sigma;
    let mut dw = vec![F::ZERO; rows * cols];
    for r in 0..rows {
        for cc in 0..cols {
            dw[r * cols + cc] = go[r * cols + cc] / sigma - scale * u[r] * v[cc];
        }
    }
    dw
}

/// One power-iteration refinement of (u, v) for the flattened weight view.
/// Returns the sigma estimate after the update.
pub fn power_iterate<F: Real>(weight: &Tensor<F>, u: &mut [F], v: &mut [F]) -> F {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    let wd = weight.data();
    // v = normalize(W^T u)
    for cc in 0..cols {
        let mut acc = F::ZERO;
        for r in 0..rows {
            acc += wd[r * cols + cc] * u[r];
        }
        v[cc] = acc;
    }
    normalize(v);
    // u = normalize(W v)
    for (r, ur) in u.iter_mut().enumerate() {
        let mut acc = F::ZERO;
        for cc in 0..cols {
            acc += wd[r * cols + cc] * v[cc];
        }
        *ur = acc;
    }
    normalize(u);
    // sigma = u^T W v
    let mut sigma = F::ZERO;
    for r in 0..rows {
        let mut acc = F::ZERO;
        for cc in 0..cols {
            acc += wd[r * cols + cc] * v[cc];
        }
        sigma += u[r] * acc;
    }
    sigma
}

fn normalize<F: Real>(x: &mut [F]) {
    let mut n = F::ZERO;
    for v in x.iter() {
        n += *v * *v;
    }
    let n = n.sqrt().maxv(F::from_f64(1e-12));
    for v in x.iter_mut() {
        *v = *v / n;
    }
}
