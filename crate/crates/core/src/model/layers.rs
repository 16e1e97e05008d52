//! Convolution, pooling, and resampling primitives with explicit backward
//! passes. Tensors are `(H, W, C)`; convolutions are stride 1 with zero
//! padding, implemented as im2col plus a matrix product.

use crate::Scalar;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// k x k convolution (k is 1 or 3). Weights are `(k*k*cin, cout)` so the
/// forward pass is `im2col(x) . weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl<F: Scalar> Conv<F> {
    /// He-initialized weights, biases zero. Draws happen in f64.
    pub fn new_he(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (k * k * cin) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array2::from_shape_fn((k * k * cin, cout), |_| F::of(normal.sample(rng)));
        Conv {
            weight,
            bias: Array1::zeros(cout),
            cin,
            cout,
            k,
        }
    }

    pub fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (h, w, cin) = x.dim();
        assert_eq!(cin, self.cin, "input channels do not match the layer");
        if self.k == 1 {
            return x
                .to_shape((h * w, cin))
                .expect("contiguous reshape")
                .to_owned();
        }
        let mut cols = Array2::<F>::zeros((h * w, 9 * cin));
        for y in 0..h {
            for x_ in 0..w {
                let row = y * w + x_;
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = x_ as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (dy * 3 + dx) * cin;
                        for c in 0..cin {
                            cols[[row, base + c]] = x[[sy as usize, sx as usize, c]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, h: usize, w: usize) -> Array3<F> {
        if self.k == 1 {
            return dcols
                .to_shape((h, w, self.cin))
                .expect("contiguous reshape")
                .to_owned();
        }
        let mut dx = Array3::<F>::zeros((h, w, self.cin));
        for y in 0..h {
            for x_ in 0..w {
                let row = y * w + x_;
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx_ in 0..3usize {
                        let sx = x_ as isize + dx_ as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (dy * 3 + dx_) * self.cin;
                        for c in 0..self.cin {
                            dx[[sy as usize, sx as usize, c]] =
                                dx[[sy as usize, sx as usize, c]] + dcols[[row, base + c]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (y, _) = self.forward_with_cols(x);
        y
    }

    /// Forward pass that also returns the im2col matrix for reuse in the
    /// backward pass.
    pub fn forward_with_cols(&self, x: &Array3<F>) -> (Array3<F>, Array2<F>) {
        let (h, w, _) = x.dim();
        let cols = self.im2col(x);
        let mut yf = cols.dot(&self.weight);
        yf += &self.bias;
        let y = yf
            .into_shape_with_order((h, w, self.cout))
            .expect("shape agrees");
        (y, cols)
    }

    /// Gradients w.r.t. weight, bias, and input, given the stored im2col
    /// matrix of the forward pass.
    pub fn backward(&self, cols: &Array2<F>, dy: &Array3<F>) -> (Array2<F>, Array1<F>, Array3<F>) {
        let (h, w, cout) = dy.dim();
        assert_eq!(cout, self.cout);
        let dyf = dy.to_shape((h * w, cout)).expect("contiguous reshape");
        let dw = cols.t().dot(&dyf);
        let db = dyf.sum_axis(Axis(0));
        let dcols = dyf.dot(&self.weight.t());
        let dx = self.col2im(&dcols, h, w);
        (dw, db, dx)
    }
}

/// 2x2 max pooling; dims must be even. Returns the pooled tensor and the
/// winning position (0..4) per output cell for the backward scatter.
pub fn maxpool2<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Array3<u8>) {
    let (h, w, c) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims");
    let mut y = Array3::<F>::zeros((h / 2, w / 2, c));
    let mut arg = Array3::<u8>::zeros((h / 2, w / 2, c));
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            for ch in 0..c {
                let mut best = x[[2 * oy, 2 * ox, ch]];
                let mut best_i = 0u8;
                for (i, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[[2 * oy + dy, 2 * ox + dx, ch]];
                    if v > best {
                        best = v;
                        best_i = i as u8 + 1;
                    }
                }
                y[[oy, ox, ch]] = best;
                arg[[oy, ox, ch]] = best_i;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<F: Scalar>(dy: &Array3<F>, arg: &Array3<u8>) -> Array3<F> {
    let (h2, w2, c) = dy.dim();
    let mut dx = Array3::<F>::zeros((h2 * 2, w2 * 2, c));
    for oy in 0..h2 {
        for ox in 0..w2 {
            for ch in 0..c {
                let (dy_, dx_) = match arg[[oy, ox, ch]] {
                    0 => (0, 0),
                    1 => (0, 1),
                    2 => (1, 0),
                    _ => (1, 1),
                };
                dx[[2 * oy + dy_, 2 * ox + dx_, ch]] = dy[[oy, ox, ch]];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((h * 2, w * 2, c), |(y, x_, ch)| x[[y / 2, x_ / 2, ch]])
}

pub fn upsample2_backward<F: Scalar>(dy: &Array3<F>) -> Array3<F> {
    let (h2, w2, c) = dy.dim();
    let mut dx = Array3::<F>::zeros((h2 / 2, w2 / 2, c));
    for y in 0..h2 {
        for x_ in 0..w2 {
            for ch in 0..c {
                dx[[y / 2, x_ / 2, ch]] = dx[[y / 2, x_ / 2, ch]] + dy[[y, x_, ch]];
            }
        }
    }
    dx
}

pub fn relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Backward through relu given the forward *output*.
pub fn relu_backward<F: Scalar>(dy: &Array3<F>, y: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn concat_channels<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    ndarray::concatenate(Axis(2), &[a.view(), b.view()]).expect("matching dims")
}

/// Zero-pads height and width up to multiples of `m` (bottom/right).
pub fn pad_to_multiple<F: Scalar>(x: &Array3<F>, m: usize) -> Array3<F> {
    let (h, w, c) = x.dim();
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return x.clone();
    }
    let mut out = Array3::<F>::zeros((hp, wp, c));
    out.slice_mut(s![..h, ..w, ..]).assign(x);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct sliding-window convolution, the oracle for the im2col path.
    fn conv_naive(x: &Array3<f64>, conv: &Conv<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let k = conv.k as isize;
        let mut y = Array3::<f64>::zeros((h, w, conv.cout));
        for oy in 0..h as isize {
            for ox in 0..w as isize {
                for co in 0..conv.cout {
                    let mut acc = conv.bias[co];
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = oy + dy - k / 2;
                            let sx = ox + dx - k / 2;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let wi = ((dy * k + dx) as usize) * cin + ci;
                                acc += x[[sy as usize, sx as usize, ci]] * conv.weight[[wi, co]];
                            }
                        }
                    }
                    y[[oy as usize, ox as usize, co]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = substream(42, &[900]);
        for &(k, h, w, cin, cout) in &[
            (3, 5, 7, 2, 3),
            (3, 4, 4, 1, 2),
            (1, 6, 3, 4, 5),
            (3, 8, 8, 3, 4),
        ] {
            let mut conv = Conv::<f64>::new_he(cin, cout, k, &mut rng);
            for b in conv.bias.iter_mut() {
                *b = rng.random::<f64>() - 0.5;
            }
            let x = random_tensor(&mut rng, h, w, cin);
            let got = conv.forward(&x);
            let want = conv_naive(&x, &conv);
            for (g, w_) in got.iter().zip(want.iter()) {
                assert!((g - w_).abs() < 1e-12, "conv mismatch: {g} vs {w_}");
            }
        }
    }

    /// Adjoint identity <A x, y> == <x, A^T y> verifies a backward pass
    /// against its forward without duplicating the implementation.
    #[test]
    fn conv_backward_is_the_adjoint_and_grads_match_fd() {
        let mut rng = substream(43, &[901]);
        let conv = Conv::<f64>::new_he(2, 3, 3, &mut rng);
        let x = random_tensor(&mut rng, 5, 4, 2);
        let dy = random_tensor(&mut rng, 5, 4, 3);
        let (y, cols) = conv.forward_with_cols(&x);
        let (dw, db, dx) = conv.backward(&cols, &dy);

        // Adjoint identity (bias contributes <b 1, dy> on both sides, so
        // compare the linear part).
        let mut y_lin = y.clone();
        for mut row in y_lin.rows_mut() {
            row -= &conv.bias;
        }
        let lhs: f64 = y_lin.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint broke: {lhs} vs {rhs}");

        // FD check on a few weight entries for the scalar loss sum(y * dy).
        let mut conv2 = conv.clone();
        let h = 1e-6;
        for &(i, j) in &[(0, 0), (5, 1), (17, 2), (9, 0)] {
            let orig = conv2.weight[[i, j]];
            conv2.weight[[i, j]] = orig + h;
            let lp: f64 = conv2
                .forward(&x)
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| a * b)
                .sum();
            conv2.weight[[i, j]] = orig - h;
            let lm: f64 = conv2
                .forward(&x)
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| a * b)
                .sum();
            conv2.weight[[i, j]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - dw[[i, j]]).abs() < 1e-6,
                "dw[{i},{j}]: {fd} vs {}",
                dw[[i, j]]
            );
        }
        let fd_db: f64 = dy.slice(s![.., .., 1]).sum();
        assert!((fd_db - db[1]).abs() < 1e-10);
    }

    #[test]
    fn pool_picks_maxima_and_routes_gradients_to_them() {
        let mut rng = substream(44, &[902]);
        let x = random_tensor(&mut rng, 6, 4, 2);
        let (y, arg) = maxpool2(&x);
        for oy in 0..3 {
            for ox in 0..2 {
                for c in 0..2 {
                    let block = x.slice(s![2 * oy..2 * oy + 2, 2 * ox..2 * ox + 2, c]);
                    let m = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y[[oy, ox, c]], m);
                }
            }
        }
        let dy = random_tensor(&mut rng, 3, 2, 2);
        let dx = maxpool2_backward(&dy, &arg);
        // Each 2x2 block carries exactly the one incoming gradient.
        for oy in 0..3 {
            for ox in 0..2 {
                for c in 0..2 {
                    let block = dx.slice(s![2 * oy..2 * oy + 2, 2 * ox..2 * ox + 2, c]);
                    let nz: Vec<f64> = block.iter().copied().filter(|v| *v != 0.0).collect();
                    assert!(nz.len() <= 1);
                    let s: f64 = block.sum();
                    assert_eq!(s, dy[[oy, ox, c]]);
                }
            }
        }
    }

    #[test]
    fn upsample_backward_is_the_adjoint() {
        let mut rng = substream(45, &[903]);
        let x = random_tensor(&mut rng, 3, 5, 2);
        let dy = random_tensor(&mut rng, 6, 10, 2);
        let y = upsample2(&x);
        let dx = upsample2_backward(&dy);
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn padding_preserves_content_and_zero_fills() {
        let mut rng = substream(46, &[904]);
        let x = random_tensor(&mut rng, 5, 6, 2);
        let p = pad_to_multiple(&x, 4);
        assert_eq!(p.dim(), (8, 8, 2));
        assert_eq!(p.slice(s![..5, ..6, ..]), x);
        assert_eq!(p.slice(s![5.., .., ..]).sum(), 0.0);
        let q = pad_to_multiple(&x, 1);
        assert_eq!(q, x);
    }
}
