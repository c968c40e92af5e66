//! Stateless kernels: convolution, pooling, linear maps and their backward passes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Square-kernel 2-D convolution without bias (always followed by a norm layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.ho * self.wo
    }
}

impl<T: Real> Conv2d<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        if x.rank() != 4 || x.dim(1) != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects [N, {}, H, W], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (h, w, k) = (x.dim(2), x.dim(3), self.kernel());
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::Shape(format!("{h}x{w} input too small for {k}x{k} kernel")));
        }
        Ok(ConvGeom {
            n: x.dim(0),
            cin: x.dim(1),
            h,
            w,
            cout: self.out_channels(),
            k,
            stride: self.stride,
            pad: self.pad,
            ho: (h + 2 * self.pad - k) / self.stride + 1,
            wo: (w + 2 * self.pad - k) / self.stride + 1,
        })
    }

    /// Column matrix `[cin*k*k, n*ho*wo]`.
    fn im2col(g: &ConvGeom, x: &[T]) -> Vec<T> {
        let cols_n = g.n * g.plane();
        let mut cols = vec![T::zero(); g.rows() * cols_n];
        for c in 0..g.cin {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..g.n {
                        let src = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let base = n * g.plane() + oy * g.wo;
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && (ix as usize) < g.w {
                                    dst[base + ox] = src[iy as usize * g.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(g: &ConvGeom, cols: &[T]) -> Vec<T> {
        let cols_n = g.n * g.plane();
        let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
        for c in 0..g.cin {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..g.n {
                        let dst_off = (n * g.cin + c) * g.h * g.w;
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let base = n * g.plane() + oy * g.wo;
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && (ix as usize) < g.w {
                                    x[dst_off + iy as usize * g.w + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let cols = Self::im2col(&g, x.data());
        let np = g.n * g.plane();
        // [cout, n*plane], then scattered to NCHW.
        let mut out_cm = vec![T::zero(); g.cout * np];
        T::gemm(
            g.cout,
            g.rows(),
            np,
            T::one(),
            self.weight.data(),
            g.rows() as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut out_cm,
            np as isize,
            1,
        );
        let p = g.plane();
        let mut out = vec![T::zero(); g.n * g.cout * p];
        for co in 0..g.cout {
            for n in 0..g.n {
                out[(n * g.cout + co) * p..(n * g.cout + co + 1) * p]
                    .copy_from_slice(&out_cm[co * np + n * p..co * np + (n + 1) * p]);
            }
        }
        Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)
    }

    /// Returns `(d input, d weight)`; the weight gradient is skipped unless requested.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, want_weight: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let g = self.geom(x)?;
        let p = g.plane();
        let np = g.n * p;
        if dy.shape() != [g.n, g.cout, g.ho, g.wo] {
            return Err(Error::Shape(format!("conv backward: dy {:?}", dy.shape())));
        }
        let mut dy_cm = vec![T::zero(); g.cout * np];
        let dys = dy.data();
        for co in 0..g.cout {
            for n in 0..g.n {
                dy_cm[co * np + n * p..co * np + (n + 1) * p]
                    .copy_from_slice(&dys[(n * g.cout + co) * p..(n * g.cout + co + 1) * p]);
            }
        }
        let dw = if want_weight {
            let cols = Self::im2col(&g, x.data());
            let mut dw = vec![T::zero(); g.cout * g.rows()];
            // dW = dY_cm [cout, np] * cols^T [np, rows]
            T::gemm(
                g.cout,
                np,
                g.rows(),
                T::one(),
                &dy_cm,
                np as isize,
                1,
                &cols,
                1,
                np as isize,
                T::zero(),
                &mut dw,
                g.rows() as isize,
                1,
            );
            Some(Tensor::from_vec(self.weight.shape(), dw)?)
        } else {
            None
        };
        // dcols = W^T [rows, cout] * dY_cm [cout, np]
        let mut dcols = vec![T::zero(); g.rows() * np];
        T::gemm(
            g.rows(),
            g.cout,
            np,
            T::one(),
            self.weight.data(),
            1,
            g.rows() as isize,
            &dy_cm,
            np as isize,
            1,
            T::zero(),
            &mut dcols,
            np as isize,
            1,
        );
        let dx = Self::col2im(&g, &dcols);
        Ok((Tensor::from_vec(x.shape(), dx)?, dw))
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("relu shapes agree")
}

/// 2x2 max pooling with stride 2. Returns output and argmax offsets into the input.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("maxpool expects NCHW, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Shape(format!("maxpool on {h}x{w} plane")));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[k] > xs[best] {
                        best = k;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward<T: Real>(input_shape: &[usize], arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&k, &g) in arg.iter().zip(dy.data()) {
        d[k] += g;
    }
    dx
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("global pool expects NCHW, got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let p = x.dim(2) * x.dim(3);
    let inv = T::c(1.0 / p as f64);
    let data = x
        .data()
        .chunks(p)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let p = input_shape[2] * input_shape[3];
    let inv = T::c(1.0 / p as f64);
    let mut dx = Vec::with_capacity(dy.len() * p);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, p));
    }
    Tensor::from_vec(input_shape, dx).expect("pool shapes agree")
}

/// Fully connected classifier head `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    /// `x` is `[n, in]` (row slice view of a larger batch is fine).
    pub fn forward_rows(&self, x: &[T], n: usize, out: &mut [T]) {
        let (o, i) = (self.out_features(), self.in_features());
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(&self.bias);
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            x,
            i as isize,
            1,
            self.weight.data(),
            1,
            i as isize,
            T::one(),
            out,
            o as isize,
            1,
        );
    }

    /// Accumulates weight/bias gradients and writes the input gradient rows.
    pub fn backward_rows(&self, x: &[T], dy: &[T], n: usize, dx: &mut [T], grad: Option<(&mut [T], &mut [T])>) {
        let (o, i) = (self.out_features(), self.in_features());
        // dx = dy [n, o] * W [o, i]
        T::gemm(
            n,
            o,
            i,
            T::one(),
            dy,
            o as isize,
            1,
            self.weight.data(),
            i as isize,
            1,
            T::zero(),
            dx,
            i as isize,
            1,
        );
        if let Some((dw, db)) = grad {
            // dW += dy^T [o, n] * x [n, i]
            T::gemm(
                o,
                n,
                i,
                T::one(),
                dy,
                1,
                o as isize,
                x,
                i as isize,
                1,
                T::one(),
                dw,
                i as isize,
                1,
            );
            for r in 0..n {
                for (b, &g) in db.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                    *b += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
            let x = Tensor::from_fn(&[2, 3, 5, 6], |i| ((i * 37 % 11) as f64) * 0.1 - 0.4);
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64) * 0.2 - 0.5);
            let conv = Conv2d {
                weight: w.clone(),
                stride,
                pad,
            };
            let got = conv.forward(&x).unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, conv^T(dy)> and = <w, dW>.
        let x = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 29 % 17) as f64) * 0.05 - 0.3);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 11 % 5) as f64) * 0.3 - 0.6);
        let conv = Conv2d {
            weight: w.clone(),
            stride: 2,
            pad: 1,
        };
        let y = conv.forward(&x).unwrap();
        let dy = Tensor::from_fn(y.shape(), |i| ((i * 7 % 13) as f64) * 0.1 - 0.6);
        let (dx, dw) = conv.backward(&x, &dy, true).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1f64, 0.7, -0.2, 0.3]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[0.7]);
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 1, 1], 2.0));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_forward_backward() {
        let lin = Linear {
            weight: Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.5, -0.5],
        };
        let x = [1.0, 1.0, 2.0];
        let mut y = [0.0; 2];
        lin.forward_rows(&x, 1, &mut y);
        assert_eq!(y, [9.5, 0.5]);
        let mut dx = [0.0; 3];
        let mut dw = [0.0; 6];
        let mut db = [0.0; 2];
        lin.backward_rows(&x, &[1.0, 2.0], 1, &mut dx, Some((&mut dw, &mut db)));
        assert_eq!(dx, [-1.0, 2.0, 5.0]);
        assert_eq!(dw, [1.0, 1.0, 2.0, 2.0, 2.0, 4.0]);
        assert_eq!(db, [1.0, 2.0]);
    }
}
