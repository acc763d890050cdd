//! Dense numeric kernels behind the tape ops.
//!
//! All reductions run in a fixed sequential order, so results are
//! bit-reproducible for a given input.

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically `m×k`
/// and `b` logically `k×n`. `ta`/`tb` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above guarantees every index reached through
    // these strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over an NCHW batch with an OIHW kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `c×h×w` image into a `(c·kh·kw) × (oh·ow)` column matrix.
pub(crate) fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c {
        let src = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c {
        let dst = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. Returns the output and the saved column matrices.
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let img = g.c * g.h * g.w;
    let mut cols = vec![0.0; g.n * patch * plane];
    let mut out = vec![0.0; g.n * g.o * plane];
    for b in 0..g.n {
        let col = &mut cols[b * patch * plane..(b + 1) * patch * plane];
        im2col(g, &input[b * img..(b + 1) * img], col);
        gemm(
            g.o,
            patch,
            plane,
            kernel,
            false,
            col,
            false,
            &mut out[b * g.o * plane..(b + 1) * g.o * plane],
            false,
        );
    }
    (out, cols)
}

/// Accumulates kernel and/or input gradients of a convolution.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    kernel: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    grad_kernel: Option<&mut [f64]>,
    grad_input: Option<&mut [f64]>,
) {
    let patch = g.patch();
    let plane = g.out_plane();
    let img = g.c * g.h * g.w;
    if let Some(gk) = grad_kernel {
        for b in 0..g.n {
            gemm(
                g.o,
                plane,
                patch,
                &grad_out[b * g.o * plane..(b + 1) * g.o * plane],
                false,
                &cols[b * patch * plane..(b + 1) * patch * plane],
                true,
                gk,
                true,
            );
        }
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![0.0; patch * plane];
        for b in 0..g.n {
            gemm(
                patch,
                g.o,
                plane,
                kernel,
                true,
                &grad_out[b * g.o * plane..(b + 1) * g.o * plane],
                false,
                &mut dcols,
                false,
            );
            col2im_add(g, &dcols, &mut gi[b * img..(b + 1) * img]);
        }
    }
}
