use ndarray::{Array2, Array4, ArrayView4};

/// Shape bookkeeping for a square-kernel 2D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn columns(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds input patches into a `[C*K*K, B*Ho*Wo]` matrix.
pub(crate) fn im2col(input: ArrayView4<f64>, g: &ConvGeometry) -> Array2<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.columns();
    let mut cols = Array2::<f64>::zeros((g.patch_len(), ncols));
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let out_row = &mut dst[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let base = (b * g.in_channels + c) * plane;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = base + iy as usize * g.in_w;
                        let dst_off = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                out_row[dst_off + ox] = src[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &Array2<f64>, g: &ConvGeometry) -> Array4<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.columns();
    let mut out = Array4::<f64>::zeros((g.batch, g.in_channels, g.in_h, g.in_w));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let col_row = &src[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let base = (b * g.in_channels + c) * plane;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = base + iy as usize * g.in_w;
                        let src_off = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[dst_row + ix as usize] += col_row[src_off + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn output_size_arithmetic() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 3,
            in_h: 160,
            in_w: 160,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (80, 80));
    }

    // <col2im(y), x> == <y, im2col(x)> for arbitrary x, y.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            in_h: 5,
            in_w: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Array::from_shape_fn((2, 2, 5, 4), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 - 5.0
        });
        let cols = im2col(x.view(), &g);
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let lhs: f64 = (&col2im(&y, &g) * &x).sum();
        let rhs: f64 = (&y * &cols).sum();
        assert_eq!(lhs, rhs);
    }
}
