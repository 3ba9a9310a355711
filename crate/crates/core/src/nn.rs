//! Minimal f32 tensor kernels shared by the segmentation network and the
//! residual backbone.
//!
//! Activations are stored channel-major as `(C, N)` where `N = B * H * W`
//! (batch, then rows, then columns). Convolutions lower to GEMM via im2col,
//! processed in column chunks to bound scratch memory.

use rand::Rng;

/// Upper bound on the im2col scratch buffer, in f32 elements.
const MAX_COLS: usize = 1 << 23;

/// `C[m x n] = alpha * A[m x k] * B[k x n] + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the strided views; matrixmultiply itself does not check.
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize + 1
    };
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa), "sgemm: A too short");
        assert!(b.len() >= span(k, n, rsb, csb), "sgemm: B too short");
    }
    assert!(c.len() >= span(m, n, rsc, csc), "sgemm: C too short");
    // SAFETY: every strided access stays within the slices per the asserts above,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Spatial geometry of a convolution over a batch of equally sized planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Calls `f(b, oy, ox0, j0, len)` for each run of output columns `n0..n1`
/// that lies within one output row; `j0` is the offset relative to `n0`.
fn for_each_row_run(g: &ConvGeom, n0: usize, n1: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut n = n0;
    while n < n1 {
        let b = n / (oh * ow);
        let r = n % (oh * ow);
        let (oy, ox0) = (r / ow, r % ow);
        let len = (ow - ox0).min(n1 - n);
        f(b, oy, ox0, n - n0, len);
        n += len;
    }
}

/// Valid output-column range `[lo, hi)` within `ox0..ox0+len` for kernel offset `kx`.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize, ox0: usize, len: usize) -> (usize, usize) {
    // ix = ox*stride + kx - pad must lie in [0, in_w)
    let lo_num = g.pad as isize - kx as isize;
    let lo = if lo_num <= 0 { 0 } else { (lo_num as usize).div_ceil(g.stride) };
    let hi_num = g.in_w as isize + g.pad as isize - kx as isize;
    let hi = if hi_num <= 0 { 0 } else { (hi_num as usize).div_ceil(g.stride) };
    (lo.clamp(ox0, ox0 + len), hi.clamp(ox0, ox0 + len))
}

/// Fills `cols` (`cin*k*k` rows by `n1 - n0` columns) for output columns `n0..n1`.
fn im2col(input: &[f32], cin: usize, g: &ConvGeom, n0: usize, n1: usize, cols: &mut [f32]) {
    let width = n1 - n0;
    let in_plane = g.in_h * g.in_w;
    let n_in = g.in_len();
    let kk = g.kernel * g.kernel;
    for c in 0..cin {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = c * kk + ky * g.kernel + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for_each_row_run(g, n0, n1, |b, oy, ox0, j0, len| {
                    let seg = &mut dst[j0..j0 + len];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        seg.fill(0.0);
                        return;
                    }
                    let (lo, hi) = valid_cols(g, kx, ox0, len);
                    seg[..lo - ox0].fill(0.0);
                    seg[hi.max(lo) - ox0..].fill(0.0);
                    if hi <= lo {
                        return;
                    }
                    let base = c * n_in + b * in_plane + iy as usize * g.in_w;
                    let ix0 = lo * g.stride + kx - g.pad;
                    let out = &mut seg[lo - ox0..hi - ox0];
                    if g.stride == 1 {
                        out.copy_from_slice(&input[base + ix0..base + ix0 + out.len()]);
                    } else {
                        for (t, o) in out.iter_mut().enumerate() {
                            *o = input[base + ix0 + t * g.stride];
                        }
                    }
                });
            }
        }
    }
}

/// Scatter-adds `cols` back into the input gradient (inverse of [`im2col`]).
fn col2im_add(cols: &[f32], cin: usize, g: &ConvGeom, n0: usize, n1: usize, dinput: &mut [f32]) {
    let width = n1 - n0;
    let in_plane = g.in_h * g.in_w;
    let n_in = g.in_len();
    let kk = g.kernel * g.kernel;
    for c in 0..cin {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = c * kk + ky * g.kernel + kx;
                let src = &cols[row * width..(row + 1) * width];
                for_each_row_run(g, n0, n1, |b, oy, ox0, j0, len| {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        return;
                    }
                    let (lo, hi) = valid_cols(g, kx, ox0, len);
                    if hi <= lo {
                        return;
                    }
                    let base = c * n_in + b * in_plane + iy as usize * g.in_w;
                    let ix0 = lo * g.stride + kx - g.pad;
                    let seg = &src[j0 + lo - ox0..j0 + hi - ox0];
                    for (t, &v) in seg.iter().enumerate() {
                        dinput[base + ix0 + t * g.stride] += v;
                    }
                });
            }
        }
    }
}

fn chunk_width(k: usize, n: usize) -> usize {
    (MAX_COLS / k.max(1)).clamp(1, n.max(1))
}

/// Convolution forward pass (no bias). `weight` is `cout x (cin*k*k)`.
pub fn conv_forward(input: &[f32], weight: &[f32], cin: usize, cout: usize, g: &ConvGeom) -> Vec<f32> {
    let n_out = g.out_len();
    let k = cin * g.kernel * g.kernel;
    debug_assert_eq!(input.len(), cin * g.in_len());
    debug_assert_eq!(weight.len(), cout * k);
    let mut out = vec![0.0f32; cout * n_out];
    if g.is_pointwise() {
        sgemm(cout, k, n_out, 1.0, weight, k as isize, 1, input, n_out as isize, 1, 0.0, &mut out, n_out as isize, 1);
        return out;
    }
    let chunk = chunk_width(k, n_out);
    let mut cols = vec![0.0f32; k * chunk];
    let mut n0 = 0;
    while n0 < n_out {
        let n1 = (n0 + chunk).min(n_out);
        let width = n1 - n0;
        im2col(input, cin, g, n0, n1, &mut cols[..k * width]);
        sgemm(
            cout,
            k,
            width,
            1.0,
            weight,
            k as isize,
            1,
            &cols[..k * width],
            width as isize,
            1,
            0.0,
            &mut out[n0..],
            n_out as isize,
            1,
        );
        n0 = n1;
    }
    out
}

/// Convolution backward pass. Accumulates into `dweight` and, when requested,
/// returns the gradient with respect to the input.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    cin: usize,
    cout: usize,
    g: &ConvGeom,
    dweight: &mut [f32],
    need_dinput: bool,
) -> Option<Vec<f32>> {
    let n_out = g.out_len();
    let k = cin * g.kernel * g.kernel;
    let mut dinput = need_dinput.then(|| vec![0.0f32; cin * g.in_len()]);
    if g.is_pointwise() {
        // dW += dOut * X^T
        sgemm(cout, n_out, k, 1.0, dout, n_out as isize, 1, input, 1, n_out as isize, 1.0, dweight, k as isize, 1);
        if let Some(dx) = dinput.as_mut() {
            // dX = W^T * dOut
            sgemm(k, cout, n_out, 1.0, weight, 1, k as isize, dout, n_out as isize, 1, 0.0, dx, n_out as isize, 1);
        }
        return dinput;
    }
    let chunk = chunk_width(k, n_out);
    let mut cols = vec![0.0f32; k * chunk];
    let mut n0 = 0;
    while n0 < n_out {
        let n1 = (n0 + chunk).min(n_out);
        let width = n1 - n0;
        im2col(input, cin, g, n0, n1, &mut cols[..k * width]);
        sgemm(
            cout,
            width,
            k,
            1.0,
            &dout[n0..],
            n_out as isize,
            1,
            &cols[..k * width],
            1,
            width as isize,
            1.0,
            dweight,
            k as isize,
            1,
        );
        if let Some(dx) = dinput.as_mut() {
            sgemm(
                k,
                cout,
                width,
                1.0,
                weight,
                1,
                k as isize,
                &dout[n0..],
                n_out as isize,
                1,
                0.0,
                &mut cols[..k * width],
                width as isize,
                1,
            );
            col2im_add(&cols[..k * width], cin, g, n0, n1, dx);
        }
        n0 = n1;
    }
    dinput
}

/// Per-channel standardization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Vec<f32>,
    /// `1/sigma` per channel, or `None` where the variance guard left the channel centered only.
    pub inv_std: Vec<Option<f32>>,
}

/// Standardizes each channel of a `(C, N)` tensor to zero mean and unit variance.
///
/// `eps` is added to the variance; channels whose variance falls below `guard`
/// are only centered.
pub fn normalize_channels(x: &[f32], channels: usize, eps: f64, guard: f64) -> NormCache {
    let n = x.len() / channels;
    let mut normalized = vec![0.0f32; x.len()];
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let row = &x[c * n..(c + 1) * n];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let out = &mut normalized[c * n..(c + 1) * n];
        if var < guard {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v as f64 - mean) as f32;
            }
            inv_std.push(None);
        } else {
            let s = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v as f64 - mean) * s) as f32;
            }
            inv_std.push(Some(s as f32));
        }
    }
    NormCache {
        normalized,
        inv_std,
    }
}

/// Gradient of [`normalize_channels`] (batch statistics, no affine parameters).
pub fn normalize_channels_backward(cache: &NormCache, dy: &[f32]) -> Vec<f32> {
    let channels = cache.inv_std.len();
    let n = dy.len() / channels;
    let mut dx = vec![0.0f32; dy.len()];
    for c in 0..channels {
        let g = &dy[c * n..(c + 1) * n];
        let xh = &cache.normalized[c * n..(c + 1) * n];
        let mean_g = g.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let out = &mut dx[c * n..(c + 1) * n];
        match cache.inv_std[c] {
            None => {
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o = (gv as f64 - mean_g) as f32;
                }
            }
            Some(s) => {
                let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / n as f64;
                for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                    *o = (s as f64 * (gv as f64 - mean_g - xv as f64 * mean_gx)) as f32;
                }
            }
        }
    }
    dx
}

/// Max pooling over a `(C, B*H*W)` tensor; padding never wins the max.
pub fn max_pool(input: &[f32], channels: usize, g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![f32::NEG_INFINITY; channels * g.out_len()];
    for c in 0..channels {
        for b in 0..g.batch {
            let src = &input[c * g.in_len() + b * in_plane..][..in_plane];
            let dst = &mut out[c * g.out_len() + b * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                m = m.max(src[iy as usize * g.in_w + ix as usize]);
                            }
                        }
                    }
                    dst[oy * ow + ox] = m;
                }
            }
        }
    }
    out
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct (loop) convolution oracle.
    fn conv_naive(input: &[f32], weight: &[f32], cin: usize, cout: usize, g: &ConvGeom) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0f32; cout * g.out_len()];
        for co in 0..cout {
            for b in 0..g.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let v = input[ci * g.in_len() + b * g.in_h * g.in_w + iy as usize * g.in_w + ix as usize];
                                    let wv = weight[co * cin * g.kernel * g.kernel + ci * g.kernel * g.kernel + ky * g.kernel + kx];
                                    acc += v as f64 * wv as f64;
                                }
                            }
                        }
                        out[co * g.out_len() + b * oh * ow + oy * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_for_various_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (1, 1, 0), (1, 2, 0), (3, 2, 1), (7, 2, 3)] {
            let g = ConvGeom { batch: 2, in_h: 9, in_w: 7, kernel: k, stride: s, pad: p };
            let (cin, cout) = (3, 4);
            let x = random(&mut rng, cin * g.in_len());
            let w = random(&mut rng, cout * cin * k * k);
            let fast = conv_forward(&x, &w, cin, cout, &g);
            let slow = conv_naive(&x, &w, cin, cout, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 1, 1), (1, 1, 0), (3, 2, 1)] {
            let g = ConvGeom { batch: 1, in_h: 5, in_w: 6, kernel: k, stride: s, pad: p };
            let (cin, cout) = (2, 3);
            let x = random(&mut rng, cin * g.in_len());
            let w = random(&mut rng, cout * cin * k * k);
            let probe = random(&mut rng, cout * g.out_len());
            // scalar objective: <probe, conv(x, w)>
            let objective = |x: &[f32], w: &[f32]| -> f64 {
                conv_naive(x, w, cin, cout, &g).iter().zip(&probe).map(|(a, b)| *a as f64 * *b as f64).sum()
            };
            let mut dw = vec![0.0f32; w.len()];
            let dx = conv_backward(&x, &w, &probe, cin, cout, &g, &mut dw, true).unwrap();
            let h = 1e-2f32;
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h as f64);
                assert!((fd - dw[i] as f64).abs() < 1e-3, "dw[{i}] {fd} vs {}", dw[i]);
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h as f64);
                assert!((fd - dx[i] as f64).abs() < 1e-3, "dx[{i}] {fd} vs {}", dx[i]);
            }
        }
    }

    #[test]
    fn normalization_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, n) = (3, 11);
        let mut x = random(&mut rng, c * n);
        // third channel constant: exercises the variance guard
        for v in &mut x[2 * n..] {
            *v = 0.25;
        }
        let probe = random(&mut rng, c * n);
        let objective = |x: &[f32]| -> f64 {
            normalize_channels(x, c, 0.0, 1e-12)
                .normalized
                .iter()
                .zip(&probe)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        let cache = normalize_channels(&x, c, 0.0, 1e-12);
        assert!(cache.inv_std[2].is_none());
        let dx = normalize_channels_backward(&cache, &probe);
        let h = 1e-3f32;
        for i in 0..2 * n {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 2e-3, "dx[{i}] {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn normalized_channels_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..4 * 50).map(|i| rng.random_range(-3.0..3.0) * (i / 50 + 1) as f32).collect();
        let cache = normalize_channels(&x, 4, 0.0, 1e-12);
        for c in 0..4 {
            let row = &cache.normalized[c * 50..(c + 1) * 50];
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / 50.0;
            let v = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-5);
        }
    }
}
