//! Raw kernels behind the tape ops. Layout is NCHW throughout; convolutions
//! are valid (no padding) with stride 1.

use super::gemm::{gemm, MatRef};
use super::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.out_ch * self.out_pixels()
    }
}

/// Unfolds one image into a `patch x out_pixels` matrix.
fn im2col<T: Element>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let src = &plane[(oy + ki) * g.width + kj..(oy + ki) * g.width + kj + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into the image.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ki) * g.width + kj..(oy + ki) * g.width + kj + ow];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d = *d + s;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut cols = vec![T::zero(); g.patch() * g.out_pixels()];
    let w = MatRef::row_major(weight, g.out_ch, g.patch());
    for n in 0..g.batch {
        im2col(
            g,
            &input[n * g.in_image()..(n + 1) * g.in_image()],
            &mut cols,
        );
        gemm(
            w,
            MatRef::row_major(&cols, g.patch(), g.out_pixels()),
            T::zero(),
            &mut out[n * g.out_image()..(n + 1) * g.out_image()],
        );
    }
    out
}

/// Gradients of a convolution. Either output may be skipped.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * g.in_image()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); g.out_ch * g.patch()]);
    let mut cols = vec![T::zero(); g.patch() * g.out_pixels()];
    let w = MatRef::row_major(weight, g.out_ch, g.patch());
    for n in 0..g.batch {
        let dout = MatRef::row_major(
            &grad_out[n * g.out_image()..(n + 1) * g.out_image()],
            g.out_ch,
            g.out_pixels(),
        );
        if let Some(dw) = d_weight.as_mut() {
            im2col(
                g,
                &input[n * g.in_image()..(n + 1) * g.in_image()],
                &mut cols,
            );
            gemm(
                dout,
                MatRef::row_major(&cols, g.patch(), g.out_pixels()).t(),
                T::one(),
                dw,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(w.t(), dout, T::zero(), &mut cols);
            col2im(g, &cols, &mut dx[n * g.in_image()..(n + 1) * g.in_image()]);
        }
    }
    (d_input, d_weight)
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat input index of the first row-major maximum.
pub(crate) fn maxpool2_forward<T: Element>(shape: &[usize], input: &[T]) -> (Vec<T>, Vec<u32>) {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    acc += x
                                        [((n * g.in_ch + c) * g.height + y + i) * g.width + xx + j]
                                        * w[((o * g.in_ch + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 3,
            height: 5,
            width: 4,
            out_ch: 2,
            kh: 3,
            kw: 2,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4)
            .map(|i| ((i * 7) % 11) as f64 - 5.0)
            .collect();
        let w: Vec<f64> = (0..2 * 3 * 3 * 2)
            .map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.5)
            .collect();
        assert_eq!(conv2d_forward(&g, &x, &w), naive_conv(&g, &x, &w));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            height: 4,
            width: 5,
            out_ch: 1,
            kh: 2,
            kw: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.patch() * g.out_pixels())
            .map(|i| (i as f64).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let (v, idx) = maxpool2_forward(&[1, 1, 2, 2], &[1.0f32, 2.0, 3.0, 4.0]);
        assert_eq!(v, vec![4.0]);
        assert_eq!(idx, vec![3]);
        let (_, idx) = maxpool2_forward(&[1, 1, 2, 2], &[5.0f32, 5.0, 5.0, 5.0]);
        assert_eq!(idx, vec![0]);
        // odd sizes drop the trailing row/column
        let (v, _) = maxpool2_forward(
            &[1, 1, 3, 3],
            &[0.0f32, 1.0, 9.0, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0],
        );
        assert_eq!(v, vec![3.0]);
    }
}
