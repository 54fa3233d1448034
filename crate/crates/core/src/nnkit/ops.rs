//! Convolution lowering helpers. Images are channel-major flat slices.

use ndarray::Array2;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Output positions `lo..hi` whose source for kernel offset `k` lies in
    /// `0..extent`.
    fn valid(&self, k: usize, extent: usize, outs: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let reach = extent + self.padding;
        let hi = if reach > k {
            ((reach - k - 1) / self.stride + 1).min(outs)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Lowers `x` (`channels x height x width`) into a
/// `(channels * k * k) x (out_h * out_w)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let mut cols = Array2::zeros((g.rows(), oh * ow));
    let out = cols.as_slice_mut().unwrap();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..k {
            let (y0, y1) = g.valid(ki, g.height, oh);
            for kj in 0..k {
                let (x0, x1) = g.valid(kj, g.width, ow);
                let row = (c * k + ki) * k + kj;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oy in y0..y1 {
                    let base = c * plane + (oy * g.stride + ki - g.padding) * g.width;
                    let line = &mut dst[oy * ow + x0..oy * ow + x1];
                    let first = base + x0 * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line.copy_from_slice(&x[first..first + line.len()]);
                    } else {
                        for (j, v) in line.iter_mut().enumerate() {
                            *v = x[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back onto an image.
pub(crate) fn col2im(cols: &Array2<f64>, g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let src = cols.as_standard_layout();
    let src = src.as_slice().unwrap();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..k {
            let (y0, y1) = g.valid(ki, g.height, oh);
            for kj in 0..k {
                let (x0, x1) = g.valid(kj, g.width, ow);
                let row = (c * k + ki) * k + kj;
                let lines = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in y0..y1 {
                    let base = c * plane + (oy * g.stride + ki - g.padding) * g.width;
                    let line = &lines[oy * ow + x0..oy * ow + x1];
                    let first = base + x0 * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        for (d, v) in out[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            out[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pool. Returns pooled values and the flat input index
/// of each winner (first maximum on ties).
pub(crate) fn max_pool(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    size: usize,
) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (height / size, width / size);
    let mut vals = Vec::with_capacity(channels * oh * ow);
    let mut idx = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0usize;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = c * height * width + (oy * size + dy) * width + ox * size + dx;
                        if x[i] > best {
                            best = x[i];
                            at = i;
                        }
                    }
                }
                vals.push(best);
                idx.push(at as u32);
            }
        }
    }
    (vals, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = Array2::from_shape_fn((g.rows(), g.cols()), |(i, j)| ((i * 7 + j) as f64).cos());
        let lhs: f64 = (&im2col(&x, &g) * &y).sum();
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
        let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
        Array2::from_shape_fn((g.rows(), oh * ow), |(r, o)| {
            let (c, ki, kj) = (r / (k * k), (r / k) % k, r % k);
            let y = ((o / ow) * g.stride + ki) as isize - g.padding as isize;
            let xx = ((o % ow) * g.stride + kj) as isize - g.padding as isize;
            if y < 0 || xx < 0 || y >= g.height as isize || xx >= g.width as isize {
                0.0
            } else {
                x[c * g.height * g.width + y as usize * g.width + xx as usize]
            }
        })
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (kernel, stride, padding) in [(3, 1, 0), (3, 1, 1), (4, 2, 1), (3, 2, 0), (2, 3, 2), (5, 1, 2)] {
            let g = ConvGeom {
                channels: 2,
                height: 7,
                width: 6,
                kernel,
                stride,
                padding,
            };
            let x: Vec<f64> = (0..84).map(|i| i as f64 + 1.0).collect();
            assert_eq!(im2col(&x, &g), naive_im2col(&x, &g), "{g:?}");
        }
    }

    #[test]
    fn pool_picks_block_maxima() {
        let x = [1.0, 2.0, 5.0, 0.0, 3.0, 4.0, 1.0, 1.0, 9.0, 0.0, 0.0, 0.0];
        let (v, i) = max_pool(&x, 1, 3, 4, 2);
        assert_eq!(v, vec![4.0, 5.0]);
        assert_eq!(i, vec![5, 2]);
    }
}
