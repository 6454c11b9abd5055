//! Forward and backward numeric kernels on raw slices.
//!
//! Graph ops and the plain-tensor helpers in `selfval` both call into these,
//! so the forward math lives in one place.

/// Spread below which a vector is treated as constant by [`rescale`].
pub const RESCALE_EPS: f64 = 1e-12;
/// Norm below which a row counts as zero in [`cosine_rows`].
pub const COSINE_EPS: f64 = 1e-12;

/// Splits `shape` around `axis` into (outer, n, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the first minimum.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(x[at(k)]);
            }
            let mut z = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_axis(x, &[x.len()], 0)
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_axis_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
            for k in 0..n {
                gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    gx
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Cosine similarity of every row of `rows` (`a x c`) with `v` (`c`).
/// Rows or `v` with norm below [`COSINE_EPS`] give 0.
pub fn cosine_rows(rows: &[f64], v: &[f64]) -> Vec<f64> {
    let c = v.len();
    let vn = norm(v);
    rows.chunks_exact(c)
        .map(|r| {
            let rn = norm(r);
            if rn < COSINE_EPS || vn < COSINE_EPS {
                0.0
            } else {
                (dot(r, v) / (rn * vn)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// Returns (grad wrt rows, grad wrt v).
pub fn cosine_rows_backward(rows: &[f64], v: &[f64], out: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = v.len();
    let vn = norm(v);
    let mut gr = vec![0.0; rows.len()];
    let mut gv = vec![0.0; c];
    for (i, r) in rows.chunks_exact(c).enumerate() {
        let rn = norm(r);
        if rn < COSINE_EPS || vn < COSINE_EPS || g[i] == 0.0 {
            continue;
        }
        let cos = out[i];
        let inv = 1.0 / (rn * vn);
        for k in 0..c {
            gr[i * c + k] += g[i] * (v[k] * inv - cos * r[k] / (rn * rn));
            gv[k] += g[i] * (r[k] * inv - cos * v[k] / (vn * vn));
        }
    }
    (gr, gv)
}

/// Affine map of `v` onto `[-1, 1]`; a constant vector maps to zeros.
pub fn rescale(v: &[f64]) -> Vec<f64> {
    let hi = v[argmax(v)];
    let lo = v[argmin(v)];
    if hi - lo < RESCALE_EPS {
        return vec![0.0; v.len()];
    }
    let span = hi - lo;
    // exact at both ends: (hi - lo) / span == 1
    v.iter().map(|&x| 2.0 * ((x - lo) / span) - 1.0).collect()
}

pub fn rescale_backward(v: &[f64], y: &[f64], g: &[f64]) -> Vec<f64> {
    let imax = argmax(v);
    let imin = argmin(v);
    let (hi, lo) = (v[imax], v[imin]);
    let mut gx = vec![0.0; v.len()];
    if hi - lo < RESCALE_EPS {
        return gx;
    }
    let half = (hi - lo) / 2.0;
    let mut g_hi = 0.0;
    let mut g_lo = 0.0;
    for i in 0..v.len() {
        gx[i] = g[i] / half;
        g_hi -= g[i] * (1.0 + y[i]);
        g_lo -= g[i] * (1.0 - y[i]);
    }
    gx[imax] += g_hi / (2.0 * half);
    gx[imin] += g_lo / (2.0 * half);
    gx
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `[m,k] x [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(row, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

/// Geometry of a 3-D convolution over a channels-last `[T, H, W, Ci]` volume
/// with weights `[kt, kh, kw, Ci, Co]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let span = self.input[d] + 2 * self.pad[d];
            if span < self.kernel[d] || self.stride[d] == 0 {
                return None;
            }
            out[d] = (span - self.kernel[d]) / self.stride[d] + 1;
        }
        Some(out)
    }

    /// Calls `f(out_index, in_index, weight_index)` for every valid tap,
    /// where indices point at channel 0 of the respective pixel / tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ot, oh, ow] = self.output().expect("validated geometry");
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        for t in 0..ot {
            for y in 0..oh {
                for x in 0..ow {
                    let out_idx = ((t * oh + y) * ow + x) * self.cout;
                    for dt in 0..kt {
                        let Some(st) = (t * self.stride[0] + dt).checked_sub(self.pad[0]) else {
                            continue;
                        };
                        if st >= it {
                            continue;
                        }
                        for dy in 0..kh {
                            let Some(sy) = (y * self.stride[1] + dy).checked_sub(self.pad[1]) else {
                                continue;
                            };
                            if sy >= ih {
                                continue;
                            }
                            for dx in 0..kw {
                                let Some(sx) = (x * self.stride[2] + dx).checked_sub(self.pad[2]) else {
                                    continue;
                                };
                                if sx >= iw {
                                    continue;
                                }
                                let in_idx = ((st * ih + sy) * iw + sx) * self.cin;
                                let w_idx = ((dt * kh + dy) * kw + dx) * self.cin * self.cout;
                                f(out_idx, in_idx, w_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d(x: &[f64], w: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let [ot, oh, ow] = geom.output().expect("validated geometry");
    let (ci, co) = (geom.cin, geom.cout);
    let mut out = vec![0.0; ot * oh * ow * co];
    geom.for_each_tap(|o, i, wi| {
        let dst = &mut out[o..o + co];
        for c in 0..ci {
            let v = x[i + c];
            if v != 0.0 {
                axpy(dst, v, &w[wi + c * co..wi + (c + 1) * co]);
            }
        }
    });
    out
}

/// Returns (grad wrt input if requested, grad wrt weights if requested).
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    geom: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ci, co) = (geom.cin, geom.cout);
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    geom.for_each_tap(|o, i, wi| {
        let go = &g[o..o + co];
        if let Some(gw) = gw.as_mut() {
            for c in 0..ci {
                let v = x[i + c];
                if v != 0.0 {
                    axpy(&mut gw[wi + c * co..wi + (c + 1) * co], v, go);
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            for c in 0..ci {
                gx[i + c] += dot(&w[wi + c * co..wi + (c + 1) * co], go);
            }
        }
    });
    (gx, gw)
}

/// Non-overlapping `k x k` average pooling over `[B, H, W, C]`.
pub fn avg_pool(x: &[f64], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; b * oh * ow * c];
    let scale = 1.0 / (k * k) as f64;
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((n * h + y) * w + xx) * c;
                let dst = ((n * oh + y / k) * ow + xx / k) * c;
                axpy(&mut out[dst..dst + c], scale, &x[src..src + c]);
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &[f64], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let mut gx = vec![0.0; b * h * w * c];
    let scale = 1.0 / (k * k) as f64;
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((n * h + y) * w + xx) * c;
                let src = ((n * oh + y / k) * ow + xx / k) * c;
                axpy(&mut gx[dst..dst + c], scale, &g[src..src + c]);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax(&[0.0, 0.0, 0.0]);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale(&[0.0, 1.0, 2.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(rescale(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(rescale(&[2.0, 4.0, 6.0]), rescale(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn cosine_hand_values() {
        let c = cosine_rows(&[4.0, 3.0], &[3.0, 4.0]);
        assert!((c[0] - 0.96).abs() < 1e-15);
        assert_eq!(cosine_rows(&[0.0, 0.0], &[1.0, 0.0]), vec![0.0]);
    }

    #[test]
    fn conv_output_extent() {
        let g = ConvGeom {
            input: [1, 2, 2],
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            pad: [0, 1, 1],
            cin: 1,
            cout: 1,
        };
        assert_eq!(g.output(), Some([1, 1, 1]));
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeom {
            input: [1, 3, 3],
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
            cin: 1,
            cout: 1,
        };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(conv3d(&x, &[1.0], &g), x);
    }
}
