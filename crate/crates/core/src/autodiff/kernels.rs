//! Forward kernels and their adjoints for the structural ops. Everything here
//! works on raw NHWC slices; the tape wires them together.

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[H, W, Cin]` into `[Ho·Wo, kh·kw·Cin]` patches.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = &mut dx[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` for row-major operands, where `ta`/`tb`
/// select the transposed view.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Two-tap interpolation weights for a half-pixel ×2 bilinear upsample of a
/// length-`n` axis, clamped at the borders.
pub(crate) fn upsample_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                [(i.saturating_sub(1), 0.25), (i, 0.75)]
            } else {
                [(i, 0.75), ((i + 1).min(n - 1), 0.25)]
            }
        })
        .collect()
}

pub(crate) fn upsample2(x: &[f64], [n, h, w, c]: [usize; 4], out: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    out.fill(0.0);
    for b in 0..n {
        let xin = &x[b * h * w * c..][..h * w * c];
        let xo = &mut out[b * ho * wo * c..][..ho * wo * c];
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let dst = &mut xo[(oy * wo + ox) * c..][..c];
                for &(iy, wy) in tyy {
                    for &(ix, wx) in txx {
                        let wgt = wy * wx;
                        let src = &xin[(iy * w + ix) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`upsample2`]; `dims` are the input (low-resolution) dims.
pub(crate) fn upsample2_adjoint(dy: &[f64], [n, h, w, c]: [usize; 4], dx: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for b in 0..n {
        let gi = &mut dx[b * h * w * c..][..h * w * c];
        let go = &dy[b * ho * wo * c..][..ho * wo * c];
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let src = &go[(oy * wo + ox) * c..][..c];
                for &(iy, wy) in tyy {
                    for &(ix, wx) in txx {
                        let wgt = wy * wx;
                        let dst = &mut gi[(iy * w + ix) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 mean pooling; `dims` are the input dims.
pub(crate) fn downsample2(x: &[f64], [n, h, w, c]: [usize; 4], out: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    out.fill(0.0);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut out[((b * ho + oy) * wo + ox) * c..][..c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = &x[((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
    }
}

pub(crate) fn downsample2_adjoint(dy: &[f64], [n, h, w, c]: [usize; 4], dx: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = &dy[((b * ho + oy) * wo + ox) * c..][..c];
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = &mut dx[((b * h + 2 * oy + ddy) * w + 2 * ox + ddx) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
    }
}

/// Forward difference along rows (`axis = 1`) or columns (`axis = 2`) with a
/// zero difference on the last row/column.
pub(crate) fn forward_diff(x: &[f64], [n, h, w, c]: [usize; 4], axis: usize, out: &mut [f64]) {
    let step = if axis == 1 { w * c } else { c };
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                let last = if axis == 1 { r + 1 == h } else { col + 1 == w };
                let base = ((b * h + r) * w + col) * c;
                for ch in 0..c {
                    let i = base + ch;
                    out[i] = if last { 0.0 } else { x[i + step] - x[i] };
                }
            }
        }
    }
}

pub(crate) fn forward_diff_adjoint(dy: &[f64], [n, h, w, c]: [usize; 4], axis: usize, dx: &mut [f64]) {
    let step = if axis == 1 { w * c } else { c };
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                let last = if axis == 1 { r + 1 == h } else { col + 1 == w };
                if last {
                    continue;
                }
                let base = ((b * h + r) * w + col) * c;
                for ch in 0..c {
                    let i = base + ch;
                    dx[i + step] += dy[i];
                    dx[i] -= dy[i];
                }
            }
        }
    }
}
