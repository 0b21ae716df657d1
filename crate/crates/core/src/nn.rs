//! Dense NCHW tensors and the handful of layer kernels the networks use,
//! each with an explicit backward pass.

use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![S::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "Tensor4::from_vec length");
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[S] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [S] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn silu_vec<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dx = dy * silu'(pre)` in place on `dy`.
pub fn silu_backward<S: Scalar>(pre: &[S], dy: &mut [S]) {
    for (d, &p) in dy.iter_mut().zip(pre) {
        *d *= silu_grad(p);
    }
}

/// Unfolds one `c x h x w` sample for a 3x3 same-padded convolution into a
/// `(c*9) x (h*w)` matrix.
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, col: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut col[row + y * w..row + (y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize { S::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, dx: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[ci * hw + sy as usize * w + sx as usize] += col[row + y * w + xx];
                    }
                }
            }
        }
    }
}

/// 3x3 stride-1 zero-padded convolution. `weight` is `cout x cin x 3 x 3`.
pub fn conv3x3<S: Scalar>(x: &Tensor4<S>, weight: &[S], bias: &[S], cout: usize) -> Tensor4<S> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let k = cin * 9;
    debug_assert_eq!(weight.len(), cout * k);
    let mut y = Tensor4::zeros(x.n, cout, h, w);
    let mut col = vec![S::zero(); k * hw];
    for i in 0..x.n {
        im2col(x.sample(i), cin, h, w, &mut col);
        let out = y.sample_mut(i);
        for (co, b) in bias.iter().enumerate() {
            out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        S::gemm(cout, k, hw, S::one(), weight, k as isize, 1, &col, hw as isize, 1, S::one(), out, hw as isize, 1);
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient when asked.
pub fn conv3x3_backward<S: Scalar>(
    x: &Tensor4<S>,
    weight: &[S],
    dy: &Tensor4<S>,
    dweight: &mut [S],
    dbias: &mut [S],
    need_dx: bool,
) -> Option<Tensor4<S>> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = dy.c;
    let hw = h * w;
    let k = cin * 9;
    let mut col = vec![S::zero(); k * hw];
    let mut dcol = vec![S::zero(); if need_dx { k * hw } else { 0 }];
    let mut dx = need_dx.then(|| Tensor4::zeros(x.n, cin, h, w));
    for i in 0..x.n {
        im2col(x.sample(i), cin, h, w, &mut col);
        let g = dy.sample(i);
        for co in 0..cout {
            dbias[co] += g[co * hw..(co + 1) * hw].iter().copied().sum::<S>();
        }
        // dW += dy * col^T
        S::gemm(cout, hw, k, S::one(), g, hw as isize, 1, &col, 1, hw as isize, S::one(), dweight, k as isize, 1);
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dy
            S::gemm(k, cout, hw, S::one(), weight, 1, k as isize, g, hw as isize, 1, S::zero(), &mut dcol, hw as isize, 1);
            col2im(&dcol, cin, h, w, dx.sample_mut(i));
        }
    }
    dx
}

/// `y = x W^T + b` with `x: n x inp`, `W: out x inp`.
pub fn dense<S: Scalar>(x: &[S], n: usize, inp: usize, weight: &[S], bias: &[S], out: usize) -> Vec<S> {
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    S::gemm(n, inp, out, S::one(), x, inp as isize, 1, weight, 1, inp as isize, S::one(), &mut y, out as isize, 1);
    y
}

/// Accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<S: Scalar>(
    x: &[S],
    n: usize,
    inp: usize,
    weight: &[S],
    dy: &[S],
    out: usize,
    dweight: &mut [S],
    dbias: &mut [S],
) -> Vec<S> {
    for row in dy.chunks_exact(out) {
        for (db, &g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
    // dW (out x inp) += dy^T (out x n) * x (n x inp)
    S::gemm(out, n, inp, S::one(), dy, 1, out as isize, x, inp as isize, 1, S::one(), dweight, inp as isize, 1);
    let mut dx = vec![S::zero(); n * inp];
    S::gemm(n, out, inp, S::one(), dy, out as isize, 1, weight, inp as isize, 1, S::zero(), &mut dx, inp as isize, 1);
    dx
}

pub fn avg_pool2<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "avg_pool2 needs even spatial size");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor4::zeros(x.n, x.c, h2, w2);
    let q = lit::<S>(0.25);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut y.data[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..h2 {
            for xx in 0..w2 {
                let a = src[2 * yy * x.w + 2 * xx];
                let b = src[2 * yy * x.w + 2 * xx + 1];
                let c = src[(2 * yy + 1) * x.w + 2 * xx];
                let d = src[(2 * yy + 1) * x.w + 2 * xx + 1];
                dst[yy * w2 + xx] = (a + b + c + d) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(dy: &Tensor4<S>) -> Tensor4<S> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    let q = lit::<S>(0.25);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * dy.w + xx / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor4::zeros(x.n, x.c, h, w);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut y.data[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(dy: &Tensor4<S>) -> Tensor4<S> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h2, w2);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w2 + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Tensor4<S> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape");
    let mut y = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = y.sample_mut(i);
        let la = a.sample_len();
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..].copy_from_slice(b.sample(i));
    }
    y
}

pub fn split_channels<S: Scalar>(x: &Tensor4<S>, ca: usize) -> (Tensor4<S>, Tensor4<S>) {
    let cb = x.c - ca;
    let mut a = Tensor4::zeros(x.n, ca, x.h, x.w);
    let mut b = Tensor4::zeros(x.n, cb, x.h, x.w);
    let la = ca * x.plane();
    for i in 0..x.n {
        let src = x.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

/// Adds a per-(sample, channel) bias `e: n x c` over every pixel.
pub fn add_channel_bias<S: Scalar>(x: &mut Tensor4<S>, e: &[S]) {
    let hw = x.plane();
    for (p, &b) in e.iter().enumerate() {
        x.data[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v += b);
    }
}

/// Gradient of [`add_channel_bias`] with respect to `e`.
pub fn channel_sums<S: Scalar>(dy: &Tensor4<S>) -> Vec<S> {
    let hw = dy.plane();
    dy.data.chunks_exact(hw).map(|c| c.iter().copied().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_t(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor4::from_vec(n, c, h, w, r.normal_vec(n * c * h * w))
    }

    fn naive_conv(x: &Tensor4<f64>, wt: &[f64], b: &[f64], cout: usize) -> Tensor4<f64> {
        let mut y = Tensor4::zeros(x.n, cout, x.h, x.w);
        for n in 0..x.n {
            for co in 0..cout {
                for yy in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut s = b[co];
                        for ci in 0..x.c {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if sy >= 0 && sx >= 0 && sy < x.h as isize && sx < x.w as isize {
                                        s += wt[((co * x.c + ci) * 3 + ky as usize) * 3 + kx as usize]
                                            * x.data[((n * x.c + ci) * x.h + sy as usize) * x.w + sx as usize];
                                    }
                                }
                            }
                        }
                        y.data[((n * cout + co) * x.h + yy as usize) * x.w + xx as usize] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = rand_t(2, 3, 5, 4, 1);
        let mut r = SplitMix64::new(2);
        let wt: Vec<f64> = r.normal_vec(4 * 3 * 9);
        let b: Vec<f64> = r.normal_vec(4);
        let fast = conv3x3(&x, &wt, &b, 4);
        let slow = naive_conv(&x, &wt, &b, 4);
        for (a, e) in fast.data.iter().zip(&slow.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> linear in x and W: check against finite differences of a scalar loss
        let x = rand_t(1, 2, 4, 4, 3);
        let mut r = SplitMix64::new(4);
        let wt: Vec<f64> = r.normal_vec(3 * 2 * 9);
        let b: Vec<f64> = r.normal_vec(3);
        let dy = rand_t(1, 3, 4, 4, 5);
        let loss = |x: &Tensor4<f64>, wt: &[f64]| -> f64 {
            conv3x3(x, wt, &b, 3).data.iter().zip(&dy.data).map(|(a, g)| a * g).sum()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 3];
        let dx = conv3x3_backward(&x, &wt, &dy, &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in [0, 7, 20, 31] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        for i in [0, 11, 53] {
            let mut wp = wt.clone();
            wp[i] += h;
            let mut wm = wt.clone();
            wm[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        let db_expect: f64 = dy.data[..16].iter().sum();
        assert!((db[0] - db_expect).abs() < 1e-12);
    }

    #[test]
    fn dense_backward_matches_definition() {
        let mut r = SplitMix64::new(9);
        let x: Vec<f64> = r.normal_vec(2 * 3);
        let wt: Vec<f64> = r.normal_vec(4 * 3);
        let b: Vec<f64> = r.normal_vec(4);
        let y = dense(&x, 2, 3, &wt, &b, 4);
        assert!((y[5] - (b[1] + (0..3).map(|j| wt[3 + j] * x[3 + j]).sum::<f64>())).abs() < 1e-12);
        let dy: Vec<f64> = r.normal_vec(8);
        let mut dw = vec![0.0; 12];
        let mut db = vec![0.0; 4];
        let dx = dense_backward(&x, 2, 3, &wt, &dy, 4, &mut dw, &mut db);
        assert!((dw[4] - (dy[1] * x[1] + dy[5] * x[4])).abs() < 1e-12);
        assert!((dx[2] - (0..4).map(|o| dy[o] * wt[o * 3 + 2]).sum::<f64>()).abs() < 1e-12);
        assert!((db[3] - (dy[3] + dy[7])).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_backward_are_adjoints() {
        let x = rand_t(1, 2, 4, 4, 6);
        let g = rand_t(1, 2, 2, 2, 7);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_backward(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let u = rand_t(1, 2, 4, 4, 8);
        let lhs: f64 = upsample2(&g).data.iter().zip(&u.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&u).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_matches_central_difference() {
        for &x in &[-4.0f64, -0.3, 0.0, 0.7, 5.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
