//! U-shaped convolutional segmentation network with two downsampling levels
//! and skip connections. Small enough to train on a CPU, deep enough that
//! replay strategies separate.

use super::layers::{
    concat_channels, maxpool2, maxpool2_backward, pad_to_multiple, relu, relu_backward, upsample2,
    upsample2_backward, Conv,
};
use super::ClassLayout;
use crate::error::{Error, Result};
use crate::protocol::ClassId;
use crate::rng::{kind, substream};
use crate::Scalar;
use ndarray::{s, Array1, Array2, Array3};

const NUM_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSegNet<F> {
    width: usize,
    layout: ClassLayout,
    // e1, e2, bott, d2, d1, head; canonical parameter order.
    convs: Vec<Conv<F>>,
}

/// Activations recorded by a training forward pass.
pub struct Tape<F> {
    orig: (usize, usize),
    cols: Vec<Array2<F>>,
    a1: Array3<F>,
    a2: Array3<F>,
    b: Array3<F>,
    a3: Array3<F>,
    a4: Array3<F>,
    arg1: Array3<u8>,
    arg2: Array3<u8>,
}

/// Parameter-shaped gradient (or velocity) storage.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub ws: Vec<Array2<F>>,
    pub bs: Vec<Array1<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(net: &ConvSegNet<F>) -> Self {
        Gradients {
            ws: net
                .convs
                .iter()
                .map(|c| Array2::zeros(c.weight.dim()))
                .collect(),
            bs: net
                .convs
                .iter()
                .map(|c| Array1::zeros(c.bias.dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.ws.iter_mut().zip(&other.ws) {
            *a += b;
        }
        for (a, b) in self.bs.iter_mut().zip(&other.bs) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for a in self.ws.iter_mut() {
            a.mapv_inplace(|v| v * factor);
        }
        for a in self.bs.iter_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }
}

impl<F: Scalar> ConvSegNet<F> {
    /// Fresh network; weight draws depend only on `seed`, never on the
    /// replay strategy.
    pub fn new(layout: ClassLayout, width: usize, seed: u64) -> Self {
        assert!(width >= 1, "width must be positive");
        let mut rng = substream(seed, &[kind::MODEL_INIT]);
        let w = width;
        let k = layout.num_channels();
        let convs = vec![
            Conv::new_he(3, w, 3, &mut rng),
            Conv::new_he(w, 2 * w, 3, &mut rng),
            Conv::new_he(2 * w, 2 * w, 3, &mut rng),
            Conv::new_he(4 * w, w, 3, &mut rng),
            Conv::new_he(2 * w, w, 3, &mut rng),
            Conv::new_he(w, k, 1, &mut rng),
        ];
        ConvSegNet {
            width,
            layout,
            convs,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> &ClassLayout {
        &self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_channels()
    }

    /// Scores `(H, W, K)` for an `(H, W, 3)` image.
    pub fn forward(&self, image: &Array3<F>) -> Array3<F> {
        self.forward_train(image).0
    }

    pub fn forward_train(&self, image: &Array3<F>) -> (Array3<F>, Tape<F>) {
        let (h, w, c) = image.dim();
        assert_eq!(c, 3, "expected an RGB image");
        let x = pad_to_multiple(image, 4);
        let (y1, cols1) = self.convs[0].forward_with_cols(&x);
        let a1 = relu(&y1);
        let (p1, arg1) = maxpool2(&a1);
        let (y2, cols2) = self.convs[1].forward_with_cols(&p1);
        let a2 = relu(&y2);
        let (p2, arg2) = maxpool2(&a2);
        let (y3, cols3) = self.convs[2].forward_with_cols(&p2);
        let b = relu(&y3);
        let u2 = upsample2(&b);
        let c2 = concat_channels(&u2, &a2);
        let (y4, cols4) = self.convs[3].forward_with_cols(&c2);
        let a3 = relu(&y4);
        let u1 = upsample2(&a3);
        let c1 = concat_channels(&u1, &a1);
        let (y5, cols5) = self.convs[4].forward_with_cols(&c1);
        let a4 = relu(&y5);
        let (scores_pad, cols6) = self.convs[5].forward_with_cols(&a4);
        let scores = scores_pad.slice(s![..h, ..w, ..]).to_owned();
        let tape = Tape {
            orig: (h, w),
            cols: vec![cols1, cols2, cols3, cols4, cols5, cols6],
            a1,
            a2,
            b,
            a3,
            a4,
            arg1,
            arg2,
        };
        (scores, tape)
    }

    /// Backpropagates a gradient w.r.t. the (cropped) scores.
    pub fn backward(&self, tape: &Tape<F>, dscores: &Array3<F>) -> Gradients<F> {
        let (h, w) = tape.orig;
        assert_eq!(dscores.dim().0, h);
        assert_eq!(dscores.dim().1, w);
        let (hp, wp, _) = tape.a1.dim();
        // Crop adjoint: zero-pad the gradient back to padded dims.
        let mut ds = Array3::<F>::zeros((hp, wp, dscores.dim().2));
        ds.slice_mut(s![..h, ..w, ..]).assign(dscores);

        let mut grads = Gradients::zeros_like(self);
        let (dw6, db6, da4) = self.convs[5].backward(&tape.cols[5], &ds);
        let dd1 = relu_backward(&da4, &tape.a4);
        let (dw5, db5, dc1) = self.convs[4].backward(&tape.cols[4], &dd1);
        let wch = self.width;
        let du1 = dc1.slice(s![.., .., ..wch]).to_owned();
        let da1_skip = dc1.slice(s![.., .., wch..]).to_owned();
        let da3 = upsample2_backward(&du1);
        let dd2 = relu_backward(&da3, &tape.a3);
        let (dw4, db4, dc2) = self.convs[3].backward(&tape.cols[3], &dd2);
        let du2 = dc2.slice(s![.., .., ..2 * wch]).to_owned();
        let da2_skip = dc2.slice(s![.., .., 2 * wch..]).to_owned();
        let db_up = upsample2_backward(&du2);
        let dbott = relu_backward(&db_up, &tape.b);
        let (dw3, db3, dp2) = self.convs[2].backward(&tape.cols[2], &dbott);
        let mut da2 = maxpool2_backward(&dp2, &tape.arg2);
        da2 += &da2_skip;
        let de2 = relu_backward(&da2, &tape.a2);
        let (dw2, db2, dp1) = self.convs[1].backward(&tape.cols[1], &de2);
        let mut da1 = maxpool2_backward(&dp1, &tape.arg1);
        da1 += &da1_skip;
        let de1 = relu_backward(&da1, &tape.a1);
        let (dw1, db1, _dx) = self.convs[0].backward(&tape.cols[0], &de1);

        grads.ws = vec![dw1, dw2, dw3, dw4, dw5, dw6];
        grads.bs = vec![db1, db2, db3, db4, db5, db6];
        grads
    }

    /// SGD with momentum: `v = m v + g`, `p -= lr v`.
    pub fn sgd_step(
        &mut self,
        velocity: &mut Gradients<F>,
        grads: &Gradients<F>,
        lr: F,
        momentum: F,
    ) {
        for i in 0..NUM_LAYERS {
            ndarray::Zip::from(&mut velocity.ws[i])
                .and(&grads.ws[i])
                .for_each(|v, &g| *v = momentum * *v + g);
            ndarray::Zip::from(&mut self.convs[i].weight)
                .and(&velocity.ws[i])
                .for_each(|p, &v| *p = *p - lr * v);
            ndarray::Zip::from(&mut velocity.bs[i])
                .and(&grads.bs[i])
                .for_each(|v, &g| *v = momentum * *v + g);
            ndarray::Zip::from(&mut self.convs[i].bias)
                .and(&velocity.bs[i])
                .for_each(|p, &v| *p = *p - lr * v);
        }
    }

    /// Appends zero-initialized score channels for classes introduced by a
    /// new step. Existing channels are untouched bit for bit.
    pub fn extend_head(&mut self, new_classes: &[ClassId]) -> Result<()> {
        if new_classes.is_empty() {
            return Err(Error::Config("extend_head needs at least one class".into()));
        }
        self.layout.extend(new_classes)?;
        let head = &mut self.convs[NUM_LAYERS - 1];
        let (rows, old_k) = head.weight.dim();
        let new_k = old_k + new_classes.len();
        let mut weight = Array2::<F>::zeros((rows, new_k));
        weight.slice_mut(s![.., ..old_k]).assign(&head.weight);
        let mut bias = Array1::<F>::zeros(new_k);
        bias.slice_mut(s![..old_k]).assign(&head.bias);
        head.weight = weight;
        head.bias = bias;
        head.cout = new_k;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }

    /// Flattens all parameters in canonical order (per layer: weights
    /// row-major, then bias).
    pub fn get_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for conv in &self.convs {
            out.extend(conv.weight.iter().copied());
            out.extend(conv.bias.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, params: &[F]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut it = params.iter().copied();
        for conv in &mut self.convs {
            for w in conv.weight.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in conv.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
    }
}
