//! Numeric kernels shared by the graph ops: a GEMM front end over
//! `matrixmultiply` and the im2col/col2im pair used by convolution.

/// Row-major matrix view, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Extents of the stored (untransposed) matrix.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out = a · b` (or `out += a · b` when `accumulate`), `out` row-major.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k, rsa, csa) = a.logical();
    let (kb, n, rsb, csb) = b.logical();
    assert_eq!(k, kb, "gemm inner extents");
    assert_eq!(out.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: extents and strides describe slices whose lengths were
    // checked above, and `out` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C, H, W]` sample into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let ol = g.out_len();
    let (h, w, p, s) = (g.height as isize, g.width as isize, g.padding as isize, g.stride);
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let y = (oy * s + i) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * s + j) as isize - p;
                        *v = if x < 0 || x >= w { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], input_grad: &mut [f64]) {
    let ol = g.out_len();
    let (h, w, p, s) = (g.height as isize, g.width as isize, g.padding as isize, g.stride);
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let y = (oy * s + i) as isize - p;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * s + j) as isize - p;
                        if x >= 0 && x < w {
                            plane[y as usize * g.width + x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
