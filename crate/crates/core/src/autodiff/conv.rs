//! Convolution kernels (im2col + GEMM for 2-D, direct loops for depthwise 1-D).

use super::linalg::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    /// Output extent along one spatial axis, `None` when it would be empty.
    pub fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &Conv2dGeom, img: &[f64], col: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.ow + oj] =
                            if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                                img[(c * g.h + ii as usize) * g.w + jj as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Conv2dGeom, col: &[f64], img: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            img[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (p, kk) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut out = vec![0.0; g.n * out_sz];
    let mut col = vec![0.0; kk * p];
    for n in 0..g.n {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut col);
        let y = &mut out[n * out_sz..(n + 1) * out_sz];
        if let Some(b) = b {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        gemm(g.c_out, kk, p, w, false, &col, false, y, 1.0);
    }
    out
}

/// Returns gradients for (input, weight, bias).
pub(crate) fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (p, kk) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut dw = vec![0.0; g.c_out * kk];
    let mut db = vec![0.0; g.c_out];
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_sz]);
    let mut col = vec![0.0; kk * p];
    let mut dcol = vec![0.0; kk * p];
    for n in 0..g.n {
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        for (o, row) in dyn_.chunks(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut col);
        gemm(g.c_out, p, kk, dyn_, false, &col, true, &mut dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, g.c_out, p, w, true, dyn_, false, &mut dcol, 0.0);
            col2im(g, &dcol, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}

/// Same-length depthwise temporal convolution of a `T×d` sequence with a
/// `d×k` kernel (odd `k`, symmetric zero padding).
pub(crate) fn dwconv1d_forward(x: &[f64], t_len: usize, d: usize, w: &[f64], k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        for j in 0..k {
            let src = t as isize + j as isize - pad;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let xs = &x[src as usize * d..(src as usize + 1) * d];
            let ys = &mut y[t * d..(t + 1) * d];
            for c in 0..d {
                ys[c] += w[c * k + j] * xs[c];
            }
        }
    }
    y
}

pub(crate) fn dwconv1d_backward(
    x: &[f64],
    t_len: usize,
    d: usize,
    w: &[f64],
    k: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for t in 0..t_len {
        for j in 0..k {
            let src = t as isize + j as isize - pad;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let s = src as usize;
            for c in 0..d {
                let g = dy[t * d + c];
                dx[s * d + c] += w[c * k + j] * g;
                dw[c * k + j] += x[s * d + c] * g;
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn conv_oracle(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        let mut acc = b[o];
                        for c in 0..g.c_in {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                    if ii < 0 || jj < 0 || ii as usize >= g.h || jj as usize >= g.w {
                                        continue;
                                    }
                                    acc += w[((o * g.c_in + c) * g.kh + ki) * g.kw + kj]
                                        * x[((n * g.c_in + c) * g.h + ii as usize) * g.w + jj as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + o) * g.oh + oi) * g.ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn geom(n: usize, c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Conv2dGeom {
        Conv2dGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh: k,
            kw: k,
            stride,
            pad,
            oh: Conv2dGeom::out_len(h, k, stride, pad).unwrap(),
            ow: Conv2dGeom::out_len(w, k, stride, pad).unwrap(),
        }
    }

    #[test]
    fn im2col_conv_matches_nested_loops() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = geom(2, 3, 5, 6, 4, 3, stride, pad);
            let x: Vec<f64> = (0..g.n * g.c_in * g.h * g.w).map(|i| (i as f64 * 0.7).sin()).collect();
            let w: Vec<f64> = (0..g.c_out * g.c_in * 9).map(|i| (i as f64 * 0.3).cos()).collect();
            let b: Vec<f64> = (0..g.c_out).map(|i| i as f64 * 0.1).collect();
            let got = conv2d_forward(&g, &x, &w, Some(&b));
            let want = conv_oracle(&g, &x, &w, &b);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(Conv2dGeom::out_len(32, 3, 2, 1), Some(16));
        assert_eq!(Conv2dGeom::out_len(8, 7, 1, 3), Some(8));
        assert_eq!(Conv2dGeom::out_len(2, 5, 1, 0), None);
    }

    #[test]
    fn dwconv_sliding_window() {
        // [1,2,3] with kernel [1,1,1] and zero padding -> [3,6,5]
        let y = dwconv1d_forward(&[1.0, 2.0, 3.0], 3, 1, &[1.0, 1.0, 1.0], 3);
        assert_eq!(y, vec![3.0, 6.0, 5.0]);
    }
}
