//! Raw loops behind the heavier graph ops: same-padded 2-D convolution, dense
//! layers and small dense linear algebra.

/// Geometry of a batched same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Valid output range along one axis for kernel offset `d`.
    fn span(len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds one `[c_in, H, W]` plane stack into `[c_in * kh * kw, H * W]`
/// columns with zero padding.
fn im2col(x: &[f32], d: ConvDims, cols: &mut [f32]) {
    let plane = d.plane();
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    cols.fill(0.0);
    for ci in 0..d.c_in {
        let x_plane = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..d.kh {
            let dy = ky as isize - ph;
            let (y_lo, y_hi) = ConvDims::span(d.height, dy);
            for kx in 0..d.kw {
                let dx = kx as isize - pw;
                let (x_lo, x_hi) = ConvDims::span(d.width, dx);
                if x_lo >= x_hi {
                    continue;
                }
                let row = ((ci * d.kh + ky) * d.kw + kx) * plane;
                let src_lo = (x_lo as isize + dx) as usize;
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + dy) as usize;
                    let dst = &mut cols[row + oy * d.width + x_lo..row + oy * d.width + x_hi];
                    dst.copy_from_slice(&x_plane[iy * d.width + src_lo..iy * d.width + src_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adds the columns back onto a `[c_in, H, W]` gradient.
fn col2im(cols: &[f32], d: ConvDims, gx: &mut [f32]) {
    let plane = d.plane();
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for ci in 0..d.c_in {
        let gx_plane = &mut gx[ci * plane..(ci + 1) * plane];
        for ky in 0..d.kh {
            let dy = ky as isize - ph;
            let (y_lo, y_hi) = ConvDims::span(d.height, dy);
            for kx in 0..d.kw {
                let dx = kx as isize - pw;
                let (x_lo, x_hi) = ConvDims::span(d.width, dx);
                if x_lo >= x_hi {
                    continue;
                }
                let row = ((ci * d.kh + ky) * d.kw + kx) * plane;
                let src_lo = (x_lo as isize + dx) as usize;
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + dy) as usize;
                    let src = &cols[row + oy * d.width + x_lo..row + oy * d.width + x_hi];
                    let dst = &mut gx_plane[iy * d.width + src_lo..iy * d.width + src_lo + (x_hi - x_lo)];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// `c[m, n] = alpha * a[m, k] b[k, n] + beta * c[m, n]` with explicit
/// row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_s: (usize, usize), b: &[f32], b_s: (usize, usize), beta: f32, c: &mut [f32], c_row: usize) {
    // SAFETY: every caller passes slices covering the strided extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_s.0 as isize,
            a_s.1 as isize,
            b.as_ptr(),
            b_s.0 as isize,
            b_s.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, d: ConvDims) -> Vec<f32> {
    let plane = d.plane();
    let k = d.c_in * d.kh * d.kw;
    let mut out = vec![0.0f32; d.batch * d.c_out * plane];
    let mut cols = vec![0.0f32; k * plane];
    for n in 0..d.batch {
        im2col(&x[n * d.c_in * plane..(n + 1) * d.c_in * plane], d, &mut cols);
        let o = &mut out[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        if let Some(b) = b {
            for (co, row) in o.chunks_mut(plane).enumerate() {
                row.fill(b[co]);
            }
        }
        gemm(d.c_out, k, plane, w, (k, 1), &cols, (plane, 1), 1.0, o, plane);
    }
    out
}

/// Returns (grad_x, grad_w, grad_b) for upstream gradient `g`.
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    d: ConvDims,
    need_x: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let plane = d.plane();
    let k = d.c_in * d.kh * d.kw;
    let mut gx = need_x.then(|| vec![0.0f32; x.len()]);
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; d.c_out];
    let mut cols = vec![0.0f32; k * plane];
    let mut gcols = vec![0.0f32; k * plane];
    for n in 0..d.batch {
        let g_n = &g[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        for (co, row) in g_n.chunks(plane).enumerate() {
            gb[co] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        im2col(&x[n * d.c_in * plane..(n + 1) * d.c_in * plane], d, &mut cols);
        gemm(d.c_out, plane, k, g_n, (plane, 1), &cols, (1, plane), 1.0, &mut gw, k);
        if let Some(gx) = gx.as_mut() {
            gemm(k, d.c_out, plane, w, (1, k), g_n, (plane, 1), 0.0, &mut gcols, plane);
            col2im(&gcols, d, &mut gx[n * d.c_in * plane..(n + 1) * d.c_in * plane]);
        }
    }
    (gx, gw, gb)
}

/// `y[r, i] = sum_j w[i, j] x[r, j] + b[i]` for `rows` input rows.
pub(crate) fn dense_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, rows: usize, n: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * m];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        for i in 0..m {
            let wr = &w[i * n..(i + 1) * n];
            let dot: f32 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            out[r * m + i] = dot + b.map_or(0.0, |b| b[i]);
        }
    }
    out
}

pub(crate) fn dense_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    rows: usize,
    n: usize,
    m: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; rows * n];
    let mut gw = vec![0.0f32; m * n];
    let mut gb = vec![0.0f32; m];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        for i in 0..m {
            let gv = g[r * m + i];
            gb[i] += gv;
            let wr = &w[i * n..(i + 1) * n];
            let gxr = &mut gx[r * n..(r + 1) * n];
            for j in 0..n {
                gxr[j] += wr[j] * gv;
            }
            let gwr = &mut gw[i * n..(i + 1) * n];
            for j in 0..n {
                gwr[j] += gv * xr[j];
            }
        }
    }
    (gx, gw, gb)
}

/// LU decomposition with partial pivoting, in place. Returns the permutation
/// sign, or `None` for an exactly singular matrix.
fn lu_decompose(a: &mut [f64], n: usize, perm: &mut [usize]) -> Option<f64> {
    let mut sign = 1.0;
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for k in 0..n {
        let (mut piv, mut best) = (k, a[k * n + k].abs());
        for r in k + 1..n {
            if a[r * n + k].abs() > best {
                best = a[r * n + k].abs();
                piv = r;
            }
        }
        if best == 0.0 {
            return None;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            perm.swap(k, piv);
            sign = -sign;
        }
        for r in k + 1..n {
            let f = a[r * n + k] / a[k * n + k];
            a[r * n + k] = f;
            for c in k + 1..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    Some(sign)
}

/// Determinant of a row-major `n x n` matrix.
pub fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut perm = vec![0; n];
    match lu_decompose(&mut a, n, &mut perm) {
        Some(sign) => sign * (0..n).map(|i| a[i * n + i]).product::<f64>(),
        None => 0.0,
    }
}

/// Inverse of a row-major `n x n` matrix, `None` when singular.
pub fn inverse(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let mut perm = vec![0; n];
    lu_decompose(&mut a, n, &mut perm)?;
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        // Solve A x = e_col using the permuted LU factors.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if perm[i] == col { 1.0 } else { 0.0 };
            for j in 0..i {
                s -= a[i * n + j] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= a[i * n + j] * y[j];
            }
            y[i] = s / a[i * n + i];
        }
        for i in 0..n {
            inv[i * n + col] = y[i];
        }
    }
    Some(inv)
}
