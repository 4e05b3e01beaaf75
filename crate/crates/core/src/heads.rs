//! Image-aware, class-specific output heads.
//!
//! Each class owns a [`HypernetMlp`] that maps the concatenation of the global
//! image feature and the class embedding to a flat parameter vector. The
//! vector is sliced by a [`HeadLayout`] into the kernels and biases of three
//! convolutions (`C_d -> 8 -> 8 -> 1`) applied to the decoder features,
//! followed by a sigmoid.

use serde::{Deserialize, Serialize};

use crate::backbone::fill_uniform;
use crate::error::{Error, Result};
use crate::nn::{conv2d_backward, conv2d_forward, silu_backward, silu_forward, ConvGeom, ConvTape};
use crate::rng::SplitMix64;
use crate::tensor::{cast_slice, gemm, sigmoid, silu, silu_grad, Grid, Scalar};

/// Output channels of the three head convolutions.
pub const HEAD_WIDTHS: [usize; 3] = [8, 8, 1];

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default hypernetwork hidden width.
pub const HYPERNET_HIDDEN: usize = 128;

/// Scale applied to the hypernetwork output layer at init so heads start near `sigmoid(0)`.
pub const HYPERNET_OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

/// How a flat head parameter vector is partitioned into convolution layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub in_channels: usize,
    pub kernel: usize,
    pub widths: [usize; 3],
    pub layers: Vec<LayerSlice>,
    pub total: usize,
}

pub fn head_param_layout(in_channels: usize, kernel: usize) -> Result<HeadLayout> {
    if in_channels == 0 {
        return Err(Error::Config("head input channels must be at least 1".into()));
    }
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("head kernel size {kernel} must be odd")));
    }
    let mut layers = Vec::with_capacity(3);
    let mut offset = 0;
    let mut c_in = in_channels;
    for &w in &HEAD_WIDTHS {
        let weight_len = w * c_in * kernel * kernel;
        layers.push(LayerSlice {
            weight_offset: offset,
            weight_len,
            bias_offset: offset + weight_len,
            bias_len: w,
        });
        offset += weight_len + w;
        c_in = w;
    }
    Ok(HeadLayout {
        in_channels,
        kernel,
        widths: HEAD_WIDTHS,
        layers,
        total: offset,
    })
}

impl HeadLayout {
    pub fn geoms(&self) -> [ConvGeom; 3] {
        let [w1, w2, w3] = self.widths;
        [
            ConvGeom::same(self.in_channels, w1, self.kernel, 1),
            ConvGeom::same(w1, w2, self.kernel, 1),
            ConvGeom::same(w2, w3, self.kernel, 1),
        ]
    }

    /// Offsets of every weight and bias block, in order.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight_offset, l.bias_offset])
            .collect()
    }
}

/// Generated head parameters, `theta_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T>(pub Vec<T>);

/// Per-class hypernetwork: `theta = W2 silu(W1 [f, omega] + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypernetMlp<T> {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// Intermediate values of one hypernet evaluation.
#[derive(Debug, Clone)]
pub struct HypernetTrace<T> {
    input: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> HypernetMlp<T> {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: vec![T::zero(); hidden * in_dim],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); out_dim * hidden],
            b2: vec![T::zero(); out_dim],
        }
    }

    /// Fan-in uniform init with the output layer shrunk by [`HYPERNET_OUTPUT_INIT_SCALE`].
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut m = Self::zeros(in_dim, hidden, out_dim);
        let mut rng = SplitMix64::new(seed);
        fill_uniform(&mut m.w1, (6.0 / in_dim as f64).sqrt(), &mut rng);
        fill_uniform(
            &mut m.w2,
            HYPERNET_OUTPUT_INIT_SCALE * (6.0 / hidden as f64).sqrt(),
            &mut rng,
        );
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.hidden, self.out_dim)
    }

    pub fn cast<U: Scalar>(&self) -> HypernetMlp<U> {
        HypernetMlp {
            in_dim: self.in_dim,
            hidden: self.hidden,
            out_dim: self.out_dim,
            w1: cast_slice(&self.w1),
            b1: cast_slice(&self.b1),
            w2: cast_slice(&self.w2),
            b2: cast_slice(&self.b2),
        }
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub const TENSOR_NAMES: [&'static str; 4] = ["w1", "b1", "w2", "b2"];

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Evaluates the MLP on `[f, omega]`.
    pub fn forward(&self, f: &[T], omega: &[T]) -> Result<(HeadParams<T>, HypernetTrace<T>)> {
        if f.len() + omega.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "hypernet expects input of length {}, got {} + {}",
                self.in_dim,
                f.len(),
                omega.len()
            )));
        }
        let input: Vec<T> = f.iter().chain(omega).copied().collect();
        let mut hidden_pre = self.b1.clone();
        gemm(self.hidden, self.in_dim, 1, &self.w1, false, &input, false, T::one(), &mut hidden_pre);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| silu(v)).collect();
        let mut theta = self.b2.clone();
        gemm(self.out_dim, self.hidden, 1, &self.w2, false, &hidden, false, T::one(), &mut theta);
        Ok((
            HeadParams(theta),
            HypernetTrace {
                input,
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Accumulates weight gradients and returns the gradient w.r.t. the input `[f, omega]`.
    pub fn backward(&self, trace: &HypernetTrace<T>, dtheta: &[T], grads: &mut HypernetMlp<T>) -> Vec<T> {
        for (g, &d) in grads.b2.iter_mut().zip(dtheta) {
            *g = *g + d;
        }
        // dW2 += dtheta * hidden^T (outer product)
        gemm(self.out_dim, 1, self.hidden, dtheta, false, &trace.hidden, false, T::one(), &mut grads.w2);
        let mut dhidden = vec![T::zero(); self.hidden];
        gemm(self.hidden, self.out_dim, 1, &self.w2, true, dtheta, false, T::zero(), &mut dhidden);
        let dpre: Vec<T> = dhidden
            .iter()
            .zip(&trace.hidden_pre)
            .map(|(&d, &p)| d * silu_grad(p))
            .collect();
        for (g, &d) in grads.b1.iter_mut().zip(&dpre) {
            *g = *g + d;
        }
        gemm(self.hidden, 1, self.in_dim, &dpre, false, &trace.input, false, T::one(), &mut grads.w1);
        let mut dinput = vec![T::zero(); self.in_dim];
        gemm(self.in_dim, self.hidden, 1, &self.w1, true, &dpre, false, T::zero(), &mut dinput);
        dinput
    }
}

/// `theta_k = MLP_k([f, omega_k])`.
pub fn generate_head_params<T: Scalar>(
    f: &[T],
    omega: &[T],
    mlp: &HypernetMlp<T>,
) -> Result<HeadParams<T>> {
    mlp.forward(f, omega).map(|(theta, _)| theta)
}

/// Recorded head evaluation for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    tapes: Vec<ConvTape<T>>,
    pres: Vec<Grid<T>>,
    pub logits: Grid<T>,
    pub probs: Vec<T>,
}

fn check_head<T: Scalar>(dec: &Grid<T>, theta: &HeadParams<T>, layout: &HeadLayout) -> Result<()> {
    if theta.0.len() != layout.total {
        return Err(Error::Shape(format!(
            "head parameters have length {}, layout needs {}",
            theta.0.len(),
            layout.total
        )));
    }
    if dec.channels != layout.in_channels {
        return Err(Error::Shape(format!(
            "head expects {} decoder channels, got {}",
            layout.in_channels, dec.channels
        )));
    }
    Ok(())
}

/// Runs the three generated convolutions and the sigmoid, keeping a trace.
pub fn apply_head_traced<T: Scalar>(
    dec: &Grid<T>,
    theta: &HeadParams<T>,
    layout: &HeadLayout,
) -> Result<HeadTrace<T>> {
    check_head(dec, theta, layout)?;
    let geoms = layout.geoms();
    let mut tapes = Vec::with_capacity(3);
    let mut pres = Vec::with_capacity(2);
    let mut h = dec.clone();
    let mut logits = None;
    for (i, (slice, geom)) in layout.layers.iter().zip(&geoms).enumerate() {
        let w = &theta.0[slice.weight_offset..slice.weight_offset + slice.weight_len];
        let b = &theta.0[slice.bias_offset..slice.bias_offset + slice.bias_len];
        let (pre, tape) = conv2d_forward(&h, w, b, geom)?;
        tapes.push(tape);
        if i < 2 {
            h = silu_forward(&pre);
            pres.push(pre);
        } else {
            logits = Some(pre);
        }
    }
    let logits = logits.expect("three head layers");
    let probs = logits.data.iter().map(|&z| sigmoid(z)).collect();
    Ok(HeadTrace {
        tapes,
        pres,
        logits,
        probs,
    })
}

/// Per-pixel foreground probability `sigmoid(Conv(dec; theta))`.
pub fn apply_head<T: Scalar>(dec: &Grid<T>, theta: &HeadParams<T>, layout: &HeadLayout) -> Result<Vec<T>> {
    apply_head_traced(dec, theta, layout).map(|t| t.probs)
}

/// Backpropagates a logit gradient through the head.
///
/// Returns `(dtheta, ddec)`.
pub fn apply_head_backward<T: Scalar>(
    trace: &HeadTrace<T>,
    dlogits: &Grid<T>,
    theta: &HeadParams<T>,
    layout: &HeadLayout,
) -> (Vec<T>, Grid<T>) {
    let mut dtheta = vec![T::zero(); layout.total];
    let mut d = dlogits.clone();
    for i in (0..3).rev() {
        let slice = layout.layers[i];
        if i < 2 {
            d = silu_backward(&trace.pres[i], &d);
        }
        let w = &theta.0[slice.weight_offset..slice.weight_offset + slice.weight_len];
        let (dw_and_rest, db_region) = dtheta.split_at_mut(slice.bias_offset);
        let dw = &mut dw_and_rest[slice.weight_offset..];
        let db = &mut db_region[..slice.bias_len];
        d = conv2d_backward(&trace.tapes[i], &d, w, dw, db, true).expect("input grad requested");
    }
    (dtheta, d)
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::from_f64(PROB_CLAMP);
    p.max(eps).min(T::one() - eps)
}

/// Mean binary cross-entropy over pixels. Targets may be soft (in `[0, 1]`).
pub fn bce_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let sum: T = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(sum / T::from_f64(pred.len() as f64))
}

/// Gradient of [`bce_loss`] w.r.t. the logits behind `probs`: `(p - y) / N`.
pub fn bce_grad_logits<T: Scalar>(probs: &[T], target: &[T]) -> Vec<T> {
    let n = T::from_f64(probs.len() as f64);
    probs.iter().zip(target).map(|(&p, &y)| (p - y) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn random_vec(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-scale, scale)).collect()
    }

    #[test]
    fn layout_counts() {
        assert_eq!(head_param_layout(16, 1).unwrap().total, 217);
        assert_eq!(head_param_layout(1, 1).unwrap().total, 97);
        let l = head_param_layout(16, 3).unwrap();
        assert_eq!(l.total, 9 * (16 * 8 + 8 * 8 + 8) + 8 + 8 + 1);
        assert!(matches!(head_param_layout(16, 2), Err(Error::Config(_))));
        assert!(head_param_layout(0, 1).is_err());
    }

    #[test]
    fn layout_offsets_partition_the_vector() {
        for &(c, k) in &[(16usize, 1usize), (1, 1), (5, 3)] {
            let l = head_param_layout(c, k).unwrap();
            let offs = l.offsets();
            assert!(offs.windows(2).all(|w| w[0] < w[1]));
            let last = l.layers.last().unwrap();
            assert_eq!(last.bias_offset + last.bias_len, l.total);
            assert_eq!(offs[0], 0);
        }
    }

    #[test]
    fn zero_hypernet_gives_zero_theta() {
        let mlp = HypernetMlp::<f64>::zeros(6, 4, 97);
        let theta = generate_head_params(&[1.0, 2.0, 3.0, 4.0], &[0.5, -0.5], &mlp).unwrap();
        assert!(theta.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hypernet_dimension_mismatch() {
        let mlp = HypernetMlp::<f64>::zeros(6, 4, 97);
        assert!(matches!(
            generate_head_params(&[1.0; 4], &[0.0; 3], &mlp),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn theta_depends_on_the_image_feature() {
        let mlp = HypernetMlp::<f64>::init(8 + 4, 16, 97, 3);
        let mut rng = SplitMix64::new(10);
        let omega = random_vec(&mut rng, 4, 1.0);
        let a = generate_head_params(&random_vec(&mut rng, 8, 1.0), &omega, &mlp).unwrap();
        let b = generate_head_params(&random_vec(&mut rng, 8, 1.0), &omega, &mlp).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn one_hot_conditioning_shapes() {
        let layout = head_param_layout(16, 1).unwrap();
        let mlp = HypernetMlp::<f32>::init(64 + 4, HYPERNET_HIDDEN, layout.total, 1);
        let omega = crate::embeddings::one_hot_embedding(2, 4).unwrap();
        let theta = generate_head_params(&[0.1f32; 64], &cast_slice::<f64, f32>(&omega), &mlp).unwrap();
        assert_eq!(theta.0.len(), 217);
    }

    #[test]
    fn zero_theta_gives_half() {
        let layout = head_param_layout(3, 1).unwrap();
        let dec = Grid::from_vec(3, 2, 2, (0..12).map(|i| i as f64).collect()).unwrap();
        let p = apply_head(&dec, &HeadParams(vec![0.0; layout.total]), &layout).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_logit_from_last_bias() {
        let layout = head_param_layout(3, 3).unwrap();
        let mut rng = SplitMix64::new(1);
        let mut theta = random_vec(&mut rng, layout.total, 1.0);
        let last = layout.layers[2];
        theta[last.weight_offset..last.weight_offset + last.weight_len].fill(0.0);
        theta[last.bias_offset] = 1.3;
        let dec = Grid::from_vec(3, 4, 4, random_vec(&mut rng, 48, 2.0)).unwrap();
        let p = apply_head(&dec, &HeadParams(theta), &layout).unwrap();
        let expect = sigmoid(1.3f64);
        assert!(p.iter().all(|&v| v == expect));
    }

    #[test]
    fn pointwise_head_matches_per_pixel_mlp_oracle() {
        let layout = head_param_layout(2, 1).unwrap();
        let mut rng = SplitMix64::new(77);
        let theta = random_vec(&mut rng, layout.total, 1.0);
        let dec = Grid::from_vec(2, 2, 2, random_vec(&mut rng, 8, 1.0)).unwrap();
        let p = apply_head(&dec, &HeadParams(theta.clone()), &layout).unwrap();

        // Oracle: each pixel's channel vector through three dense layers.
        let dense = |x: &[f64], w: &[f64], b: &[f64], n_out: usize| -> Vec<f64> {
            (0..n_out)
                .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
                .collect()
        };
        let act = |v: Vec<f64>| v.into_iter().map(|z| z / (1.0 + (-z).exp())).collect::<Vec<_>>();
        for px in 0..4 {
            let x = [dec.data[px], dec.data[4 + px]];
            let (w1, b1) = (&theta[0..16], &theta[16..24]);
            let (w2, b2) = (&theta[24..88], &theta[88..96]);
            let (w3, b3) = (&theta[96..104], &theta[104..105]);
            let h1 = act(dense(&x, w1, b1, 8));
            let h2 = act(dense(&h1, w2, b2, 8));
            let z = dense(&h2, w3, b3, 1)[0];
            let oracle = 1.0 / (1.0 + (-z).exp());
            assert!((p[px] - oracle).abs() < 1e-6, "pixel {px}: {} vs {oracle}", p[px]);
        }
    }

    #[test]
    fn head_output_strictly_inside_unit_interval_after_clamp() {
        let layout = head_param_layout(1, 1).unwrap();
        let mut theta = vec![0.0; layout.total];
        theta[layout.layers[2].bias_offset] = 80.0;
        let dec = Grid::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let p = apply_head(&dec, &HeadParams(theta), &layout).unwrap();
        for v in p {
            let c = clamp_prob(v);
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn bce_hand_values() {
        let l = bce_loss(&[0.5f64; 4], &[1.0; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = bce_loss(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!(perfect <= 1.7e-6);
        let l = bce_loss(&[0.9f64, 0.2], &[1.0, 0.0]).unwrap();
        let hand = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((l - hand).abs() < 1e-12);
        assert!((l - 0.1643).abs() < 1e-4);
        assert!(bce_loss(&[0.5f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        let layout = head_param_layout(3, 3).unwrap();
        let mut rng = SplitMix64::new(5);
        let theta0 = random_vec(&mut rng, layout.total, 0.5);
        let dec0 = random_vec(&mut rng, 3 * 4 * 5, 1.0);
        let target: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let n_theta = layout.total;
        let op = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let theta = HeadParams(x[..n_theta].to_vec());
            let dec = Grid::from_vec(3, 4, 5, x[n_theta..].to_vec())?;
            let tr = apply_head_traced(&dec, &theta, &layout)?;
            let loss = bce_loss(&tr.probs, &target)?;
            let dl = Grid::from_vec(1, 4, 5, bce_grad_logits(&tr.probs, &target))?;
            let (dtheta, ddec) = apply_head_backward(&tr, &dl, &theta, &layout);
            Ok((loss, [dtheta, ddec.data].concat()))
        };
        let x = [theta0, dec0].concat();
        let report = grad_check(op, &x, 1e-5, 0).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn hypernet_gradients_pass_finite_differences() {
        let mut rng = SplitMix64::new(8);
        let mlp = HypernetMlp::<f64>::init(5, 6, 7, 2);
        let n_params = mlp.param_count();
        let upstream = random_vec(&mut rng, 7, 1.0);
        let omega = random_vec(&mut rng, 2, 1.0);
        let f0 = random_vec(&mut rng, 3, 1.0);
        let op = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut m = mlp.zeros_like();
            let mut off = 0;
            for t in m.tensors_mut() {
                let n = t.len();
                t.copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let f = &x[off..];
            let (theta, trace) = m.forward(f, &omega)?;
            let value: f64 = theta.0.iter().zip(&upstream).map(|(a, b)| a * b).sum();
            let mut g = m.zeros_like();
            let dinput = m.backward(&trace, &upstream, &mut g);
            let mut grad: Vec<f64> = g.tensors().into_iter().flatten().copied().collect();
            grad.extend_from_slice(&dinput[..3]);
            Ok((value, grad))
        };
        let mut x: Vec<f64> = mlp.tensors().into_iter().flatten().copied().collect();
        // Enlarge the output layer so the check is not dominated by tiny values.
        for v in &mut x[6 * 5 + 6..6 * 5 + 6 + 7 * 6] {
            *v *= 100.0;
        }
        assert_eq!(x.len(), n_params);
        x.extend_from_slice(&f0);
        let report = grad_check(op, &x, 1e-5, 0).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
