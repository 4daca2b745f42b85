//! Raw numeric kernels on row-major slices.
//!
//! These are the forward and vector-Jacobian routines behind the tape ops.
//! Shape validation happens in the callers; everything here assumes
//! consistent extents.

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
pub fn matmul_a_bt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
pub fn matmul_at_b_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}

/// Neumaier-compensated sum; the result is within one rounding of the exact
/// sum for any ordering of magnitudes.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Geometry of a 2-D convolution over `[B, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Length of one unrolled input patch (`C/groups * k * k`).
    fn patch_len(&self) -> usize {
        self.in_ch / self.groups * self.kernel * self.kernel
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Range of output positions along one axis whose tap `kk` lands inside
    /// the input of extent `len`.
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // largest o with o*s + off <= len - 1
        let hi_num = len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Unrolled input patches of batch item `b` for a dense (`groups == 1`)
/// convolution: `[out_h*out_w, C*k*k]`, zero where a tap falls in padding.
fn im2col(x: &[f64], b: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let kl = g.patch_len();
    let mut col = vec![0.0; oh * ow * kl];
    let x_b = &x[b * g.in_ch * g.in_h * g.in_w..(b + 1) * g.in_ch * g.in_h * g.in_w];
    for oy in 0..oh {
        for ox in 0..ow {
            let patch = &mut col[(oy * ow + ox) * kl..(oy * ow + ox + 1) * kl];
            for c in 0..g.in_ch {
                for ky in 0..k {
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&iy| iy < g.in_h) else {
                        continue;
                    };
                    let row = &x_b[(c * g.in_h + iy) * g.in_w..(c * g.in_h + iy + 1) * g.in_w];
                    for kx in 0..k {
                        if let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad).filter(|&ix| ix < g.in_w) {
                            patch[(c * k + ky) * k + kx] = row[ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients into `gx`.
fn col2im(gcol: &[f64], gx: &mut [f64], b: usize, g: &ConvGeom) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let kl = g.patch_len();
    let gx_b = &mut gx[b * g.in_ch * g.in_h * g.in_w..(b + 1) * g.in_ch * g.in_h * g.in_w];
    for oy in 0..oh {
        for ox in 0..ow {
            let patch = &gcol[(oy * ow + ox) * kl..(oy * ow + ox + 1) * kl];
            for c in 0..g.in_ch {
                for ky in 0..k {
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&iy| iy < g.in_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        if let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad).filter(|&ix| ix < g.in_w) {
                            gx_b[(c * g.in_h + iy) * g.in_w + ix] += patch[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Cross-correlation (no kernel flip). `w` is `[O, C/groups, k, k]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    let k = g.kernel;
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    if g.groups == 1 {
        let (kl, p) = (g.patch_len(), oh * ow);
        for b in 0..g.batch {
            let col = im2col(x, b, g);
            let o_b = &mut out[b * g.out_ch * p..(b + 1) * g.out_ch * p];
            for (o, plane) in o_b.chunks_mut(p).enumerate() {
                let w_o = &w[o * kl..(o + 1) * kl];
                let b_o = bias.map_or(0.0, |bias| bias[o]);
                for (v, patch) in plane.iter_mut().zip(col.chunks(kl)) {
                    *v = b_o + dot(w_o, patch);
                }
            }
        }
        return out;
    }
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let grp = o / cout_g;
            let out_plane = &mut out[(b * g.out_ch + o) * oh * ow..(b * g.out_ch + o + 1) * oh * ow];
            if let Some(bias) = bias {
                out_plane.fill(bias[o]);
            }
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let x_plane = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, oh);
                    for kx in 0..k {
                        let wv = w[((o * cin_g + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let x_row = &x_plane[iy * g.in_w..(iy + 1) * g.in_w];
                            let o_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (ov, &xv) in o_row[ox0..ox1].iter_mut().zip(&x_row[ix0..]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    o_row[ox] += wv * x_row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] given upstream `gout`. Returns
/// `(grad_x, grad_w, grad_bias)`; `grad_x` only when `need_x`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    let k = g.kernel;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_ch];
    if g.groups == 1 {
        let (kl, p) = (g.patch_len(), oh * ow);
        for b in 0..g.batch {
            let col = im2col(x, b, g);
            let g_b = &gout[b * g.out_ch * p..(b + 1) * g.out_ch * p];
            let mut gcol = vec![0.0; col.len()];
            for (o, g_plane) in g_b.chunks(p).enumerate() {
                gb[o] += g_plane.iter().sum::<f64>();
                let w_o = &w[o * kl..(o + 1) * kl];
                let gw_o = &mut gw[o * kl..(o + 1) * kl];
                for ((&gv, patch), gpatch) in g_plane.iter().zip(col.chunks(kl)).zip(gcol.chunks_mut(kl)) {
                    if gv == 0.0 {
                        continue;
                    }
                    axpy(gv, patch, gw_o);
                    if need_x {
                        axpy(gv, w_o, gpatch);
                    }
                }
            }
            if need_x {
                col2im(&gcol, &mut gx, b, g);
            }
        }
        return (need_x.then_some(gx), gw, gb);
    }
    let plane = g.in_h * g.in_w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let grp = o / cout_g;
            let g_plane = &gout[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            gb[o] += g_plane.iter().sum::<f64>();
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let base = (b * g.in_ch + c) * plane;
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, oh);
                    for kx in 0..k {
                        let widx = ((o * cin_g + ci) * k + ky) * k + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let row_off = base + iy * g.in_w;
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let n = ox1 - ox0;
                                let x_row = &x[row_off + ix0..row_off + ix0 + n];
                                let gx_row = &mut gx[row_off + ix0..row_off + ix0 + n];
                                for ((gxv, &xv), &gv) in gx_row.iter_mut().zip(x_row).zip(&g_row[ox0..ox1]) {
                                    acc += gv * xv;
                                    *gxv += wv * gv;
                                }
                            } else {
                                #[allow(clippy::needless_range_loop)]
                                for ox in ox0..ox1 {
                                    let ix = row_off + ox * g.stride + kx - g.pad;
                                    let gv = g_row[ox];
                                    acc += gv * x[ix];
                                    gx[ix] += wv * gv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (need_x.then_some(gx), gw, gb)
}

/// `[start, end)` of adaptive-pooling window `i` when splitting `len` into
/// `bins` cells: `floor(i*len/bins) .. ceil((i+1)*len/bins)`.
pub fn adaptive_window(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

/// Adaptive average pooling of `planes` independent `h x w` planes.
pub fn adaptive_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * bins * bins];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for i in 0..bins {
            let (y0, y1) = adaptive_window(i, h, bins);
            for j in 0..bins {
                let (x0, x1) = adaptive_window(j, w, bins);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += xp[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[(p * bins + i) * bins + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_pool_backward(g: &[f64], planes: usize, h: usize, w: usize, bins: usize) -> Vec<f64> {
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..bins {
            let (y0, y1) = adaptive_window(i, h, bins);
            for j in 0..bins {
                let (x0, x1) = adaptive_window(j, w, bins);
                let share = g[(p * bins + i) * bins + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut gp[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    gx
}

/// Interpolation taps for one axis under the half-pixel (align-corners =
/// false) convention: `(lower index, upper index, weight of upper)`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn bilinear_forward(x: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * xp[y0 * w + x0] + fx * xp[y0 * w + x1];
                let bot = (1.0 - fx) * xp[y1 * w + x0] + fx * xp[y1 * w + x1];
                op[i * ow + j] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub fn bilinear_backward(g: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return g.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gp[i * ow + j];
                gxp[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                gxp[y0 * w + x1] += (1.0 - fy) * fx * gv;
                gxp[y1 * w + x0] += fy * (1.0 - fx) * gv;
                gxp[y1 * w + x1] += fy * fx * gv;
            }
        }
    }
    gx
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for a in 0..len {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                denom += e;
            }
            for a in 0..len {
                out[at(a)] /= denom;
            }
        }
    }
    out
}

/// `dx = y * (g - sum(g * y))` along the softmax axis.
pub fn softmax_backward(y: &[f64], g: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
            for a in 0..len {
                gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
            }
        }
    }
    gx
}

/// Per-row normalisation statistics for layer norm over rows of width `c`.
/// Returns `(normalised, inverse std per row)`.
pub fn layer_norm_stats(x: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for (o, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (xhat, rstd)
}

pub const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Logistic function, evaluated on the side that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_windows_cover_extent() {
        for len in 1..12 {
            for bins in 1..=len {
                assert_eq!(adaptive_window(0, len, bins).0, 0);
                assert_eq!(adaptive_window(bins - 1, len, bins).1, len);
                for i in 0..bins {
                    let (a, b) = adaptive_window(i, len, bins);
                    assert!(a < b);
                }
            }
        }
    }

    #[test]
    fn bilinear_taps_identity_when_same_size() {
        for (i, &(lo, hi, f)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert_eq!(f, 0.0);
            assert!(hi >= lo);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(sigmoid(-700.0).is_finite());
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn conv_valid_range_handles_padding_and_stride() {
        let g = ConvGeom {
            batch: 1,
            in_ch: 1,
            out_ch: 1,
            in_h: 8,
            in_w: 8,
            kernel: 7,
            stride: 4,
            pad: 3,
            groups: 1,
        };
        assert_eq!(g.out_h(), 2);
        // tap 0 reads iy = 4*o - 3, valid only for o = 1
        assert_eq!(g.valid_range(0, 8, 2), (1, 2));
        // tap 3 reads iy = 4*o, valid for both outputs
        assert_eq!(g.valid_range(3, 8, 2), (0, 2));
    }
}
