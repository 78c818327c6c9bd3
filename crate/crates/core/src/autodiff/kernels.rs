//! Forward and adjoint kernels over raw row-major slices.
//!
//! The graph layer calls the same forward kernel whether or not it records
//! the op, so values never depend on what is being trained.

/// Row/column strides of a matrix operand as seen by the product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows × cols` storage read as is.
    pub fn normal(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    /// Row-major `rows × cols` storage read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols as isize }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe matrices fully inside the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in yr.iter_mut() {
            *o /= total;
        }
    }
    y
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// Which GELU formula a node uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn gelu(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

pub(crate) fn gelu_grad(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
    }
}

/// Reorders axes: output axis `j` is input axis `axes[j]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (j, &a) in axes.iter().enumerate() {
        inv[a] = j;
    }
    inv
}

/// Depthwise 2×2 stride-2 transposed convolution over `[planes, c, h, w]`.
pub(crate) fn upsample2x(
    x: &[f64],
    planes: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * c * oh * ow];
    for p in 0..planes {
        for ch in 0..c {
            let k = &kernel[ch * 4..ch * 4 + 4];
            let src = &x[(p * c + ch) * h * w..][..h * w];
            let dst = &mut out[(p * c + ch) * oh * ow..][..oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let base = 2 * y * ow + 2 * xx;
                    dst[base] = v * k[0];
                    dst[base + 1] = v * k[1];
                    dst[base + ow] = v * k[2];
                    dst[base + ow + 1] = v * k[3];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernel)`.
pub(crate) fn upsample2x_backward(
    dy: &[f64],
    x: &[f64],
    planes: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for p in 0..planes {
        for ch in 0..c {
            let k = &kernel[ch * 4..ch * 4 + 4];
            let src = &x[(p * c + ch) * h * w..][..h * w];
            let g = &dy[(p * c + ch) * oh * ow..][..oh * ow];
            let dxs = &mut dx[(p * c + ch) * h * w..][..h * w];
            let dkc = &mut dk[ch * 4..ch * 4 + 4];
            for y in 0..h {
                for xx in 0..w {
                    let base = 2 * y * ow + 2 * xx;
                    let gs = [g[base], g[base + 1], g[base + ow], g[base + ow + 1]];
                    let v = src[y * w + xx];
                    let mut acc = 0.0;
                    for q in 0..4 {
                        acc += gs[q] * k[q];
                        dkc[q] += gs[q] * v;
                    }
                    dxs[y * w + xx] = acc;
                }
            }
        }
    }
    (dx, dk)
}

/// 2×2 mean pooling over the trailing two axes of `[planes, h, w]`.
pub(crate) fn avgpool2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let b = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avgpool2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[y * ow + xx];
                let b = 2 * y * w + 2 * xx;
                dst[b] = v;
                dst[b + 1] = v;
                dst[b + w] = v;
                dst[b + w + 1] = v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_swaps_matrix_axes() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (out, shape) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let axes = [2, 0, 1];
        let (p, shape) = permute(&data, &[2, 3, 4], &axes);
        let (back, back_shape) = permute(&p, &shape, &inverse_axes(&axes));
        assert_eq!(back_shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn gemm_transposed_operand() {
        // a stored 2×3, used as its 3×2 transpose
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; 6];
        gemm(3, 2, 2, &a, Layout::transposed(3), &b, Layout::normal(2), 0.0, &mut c);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gelu_variants_agree_roughly() {
        for x in [-3.0, -1.0, 0.0, 0.5, 2.0] {
            let a = gelu(x, GeluKind::Tanh);
            let b = gelu(x, GeluKind::Erf);
            assert!((a - b).abs() < 1e-3, "{x}: {a} vs {b}");
        }
    }
}
