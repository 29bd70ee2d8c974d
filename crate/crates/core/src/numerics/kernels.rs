//! Inner loops shared by the differentiable ops. All reductions run in a
//! fixed order so results are bit-reproducible.

use crate::scalar::Scalar;

/// `y += a * x`
#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

/// Dot product with eight interleaved partial sums.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.hout * self.wout
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // ox*stride + kx - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit <= kx {
            0
        } else {
            ((limit - kx - 1) / self.stride + 1).min(self.wout)
        };
        (lo, hi.max(lo))
    }

    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        if iy < self.pad || iy - self.pad >= self.h {
            None
        } else {
            Some(iy - self.pad)
        }
    }

    /// Unfolds one image (`cin*h*w`) into `patch x out_pixels` columns.
    pub fn im2col<S: Scalar>(&self, img: &[S], cols: &mut [S]) {
        let np = self.out_pixels();
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.hout {
                        let out = &mut dst[oy * self.wout..(oy + 1) * self.wout];
                        match self.src_row(oy, ky) {
                            None => out.fill(S::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                out[..lo].fill(S::zero());
                                out[hi..].fill(S::zero());
                                if self.stride == 1 {
                                    let start = lo + kx - self.pad;
                                    out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                } else {
                                    for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                                        *o = src[ox * self.stride + kx - self.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters columns back into `img` (accumulating).
    pub fn col2im<S: Scalar>(&self, cols: &[S], img: &mut [S]) {
        let np = self.out_pixels();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.hout {
                        if let Some(iy) = self.src_row(oy, ky) {
                            let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                            let g = &src[oy * self.wout..(oy + 1) * self.wout];
                            for ox in lo..hi {
                                let ix = ox * self.stride + kx - self.pad;
                                dst[ix] = dst[ix] + g[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source indices and weights for half-pixel bilinear resampling of one axis.
pub fn bilinear_table(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}
