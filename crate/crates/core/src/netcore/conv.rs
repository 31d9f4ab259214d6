//! 3x3 convolution (padding 1) via im2col and GEMM.

/// Row-major `C = alpha * op(A) * op(B) + beta * C` for dense slices.
/// `a_t` / `b_t` select the transposed view of a row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe
    // in-bounds row-major layouts of those slices.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub const K: usize = 3;
    pub const PAD: usize = 1;

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * Self::PAD - Self::K) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * Self::PAD - Self::K) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * Self::K * Self::K
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch_len()
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * p];
        for ic in 0..self.in_c {
            let plane = &x[ic * self.in_h * self.in_w..(ic + 1) * self.in_h * self.in_w];
            for ky in 0..Self::K {
                for kx in 0..Self::K {
                    let row = (ic * Self::K + ky) * Self::K + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - Self::PAD as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - Self::PAD as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        for ic in 0..self.in_c {
            let plane = &mut dx[ic * self.in_h * self.in_w..(ic + 1) * self.in_h * self.in_w];
            for ky in 0..Self::K {
                for kx in 0..Self::K {
                    let row = (ic * Self::K + ky) * Self::K + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - Self::PAD as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - Self::PAD as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                plane[iy as usize * self.in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns `(cols, out)` with `out = W * cols + b`, shape `out_c x P`.
    pub fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cols = self.im2col(x);
        let p = self.out_h() * self.out_w();
        let mut out = vec![0.0; self.out_c * p];
        for (oc, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(bias[oc]);
        }
        gemm(self.out_c, self.patch_len(), p, weight, false, &cols, false, 1.0, &mut out);
        (cols, out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        cols: &[f64],
        weight: &[f64],
        d_out: &[f64],
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let p = self.out_h() * self.out_w();
        gemm(self.out_c, p, self.patch_len(), d_out, false, cols, true, 1.0, d_weight);
        for (oc, row) in d_out.chunks_exact(p).enumerate() {
            d_bias[oc] += row.iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        let mut d_cols = vec![0.0; self.patch_len() * p];
        gemm(self.patch_len(), self.out_c, p, weight, true, d_out, false, 0.0, &mut d_cols);
        let mut dx = vec![0.0; self.in_c * self.in_h * self.in_w];
        self.col2im_add(&d_cols, &mut dx);
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_direct(s: &ConvShape, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut out = vec![0.0; s.out_c * oh * ow];
        for oc in 0..s.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..s.in_c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s.stride + ky) as isize - 1;
                                let ix = (ox * s.stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.in_h && (ix as usize) < s.in_w {
                                    acc += w[((oc * s.in_c + ic) * 3 + ky) * 3 + kx]
                                        * x[(ic * s.in_h + iy as usize) * s.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| ((((i as u64 + 1) * 2654435761) ^ seed) % 1000) as f64 / 500.0 - 1.0).collect()
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        for (h, w, stride) in [(7, 5, 2), (6, 6, 1), (1, 1, 2)] {
            let s = ConvShape { in_c: 2, out_c: 3, in_h: h, in_w: w, stride };
            let x = pseudo(2 * h * w, 1);
            let wt = pseudo(s.weight_len(), 2);
            let b = pseudo(3, 3);
            let (_, out) = s.forward(&x, &wt, &b);
            let direct = conv_direct(&s, &x, &wt, &b);
            for (a, d) in out.iter().zip(&direct) {
                assert!((a - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_is_adjoint() {
        // <dy, conv(x)> - bias term = <conv^T(dy), x>
        let s = ConvShape { in_c: 3, out_c: 4, in_h: 6, in_w: 5, stride: 2 };
        let x = pseudo(3 * 30, 5);
        let wt = pseudo(s.weight_len(), 6);
        let zero_b = vec![0.0; 4];
        let (cols, out) = s.forward(&x, &wt, &zero_b);
        let dy = pseudo(out.len(), 7);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 4];
        let dx = s.backward(&cols, &wt, &dy, &mut dw, &mut db, true).unwrap();
        let lhs: f64 = dy.iter().zip(&out).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}
