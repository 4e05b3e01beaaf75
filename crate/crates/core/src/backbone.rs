//! Micro encoder-decoder backbone.
//!
//! Encoder: a stack of same-padded 3x3 convolutions with SiLU, each with its
//! own stride. Decoder: nearest 2x upsampling followed by a 3x3 convolution
//! and SiLU per level. The reference configuration maps a `1x64x64` volume to
//! a `64x16x16` encoder map and a `16x64x64` decoder map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_forward, gap, silu_backward, silu_forward, upsample2,
    upsample2_backward, ConvGeom, ConvTape,
};
use crate::rng::SplitMix64;
use crate::tensor::{cast_slice, Grid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLevel {
    pub channels: usize,
    pub stride: usize,
}

/// Dimension table of the backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneDims {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub encoder: Vec<EncoderLevel>,
    /// Output channels of each upsampling level.
    pub decoder: Vec<usize>,
}

impl BackboneDims {
    /// The reference network for `height x width` single-channel inputs.
    pub fn reference(height: usize, width: usize) -> Self {
        Self {
            in_channels: 1,
            height,
            width,
            kernel: 3,
            encoder: vec![
                EncoderLevel { channels: 16, stride: 1 },
                EncoderLevel { channels: 32, stride: 2 },
                EncoderLevel { channels: 64, stride: 2 },
            ],
            decoder: vec![32, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Config("backbone needs at least one encoder level".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("backbone kernel {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.encoder.iter().any(|l| l.channels == 0 || l.stride == 0)
        {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        let down: usize = self.encoder.iter().map(|l| l.stride).product();
        if self.height % down != 0 || self.width % down != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by total stride {down}",
                self.height, self.width
            )));
        }
        if !self.decoder.is_empty() && 1usize << self.decoder.len() != down {
            return Err(Error::Config(format!(
                "{} upsampling levels cannot undo total stride {down}",
                self.decoder.len()
            )));
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> usize {
        self.encoder.last().map(|l| l.channels).unwrap_or(self.in_channels)
    }

    /// Channels of the feature map the heads consume.
    pub fn decoder_channels(&self) -> usize {
        self.decoder.last().copied().unwrap_or_else(|| self.encoder_channels())
    }

    pub fn encoder_geoms(&self) -> Vec<ConvGeom> {
        let mut c_in = self.in_channels;
        self.encoder
            .iter()
            .map(|l| {
                let g = ConvGeom::same(c_in, l.channels, self.kernel, l.stride);
                c_in = l.channels;
                g
            })
            .collect()
    }

    pub fn decoder_geoms(&self) -> Vec<ConvGeom> {
        let mut c_in = self.encoder_channels();
        self.decoder
            .iter()
            .map(|&c| {
                let g = ConvGeom::same(c_in, c, self.kernel, 1);
                c_in = c;
                g
            })
            .collect()
    }

    /// Spatial size of every level's output, encoder first.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        let mut dims = Vec::new();
        for g in self.encoder_geoms() {
            (h, w) = g.out_dims(h, w);
            dims.push((h, w));
        }
        for _ in &self.decoder {
            h *= 2;
            w *= 2;
            dims.push((h, w));
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub geom: ConvGeom,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(geom: ConvGeom) -> Self {
        Self {
            geom,
            weight: vec![T::zero(); geom.weight_len()],
            bias: vec![T::zero(); geom.c_out],
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(geom: ConvGeom, rng: &mut SplitMix64) -> Self {
        let mut p = Self::zeros(geom);
        fill_uniform(&mut p.weight, (6.0 / geom.patch_len() as f64).sqrt(), rng);
        p
    }

    fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            geom: self.geom,
            weight: cast_slice(&self.weight),
            bias: cast_slice(&self.bias),
        }
    }
}

pub(crate) fn fill_uniform<T: Scalar>(buf: &mut [T], bound: f64, rng: &mut SplitMix64) {
    for v in buf {
        *v = T::from_f64(rng.uniform(-bound, bound));
    }
}

/// Encoder and decoder convolution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub dims: BackboneDims,
    pub encoder: Vec<ConvParams<T>>,
    pub decoder: Vec<ConvParams<T>>,
}

/// Activations recorded by a forward pass, consumed by [`BackboneParams::backward`].
#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    layers: Vec<LayerTrace<T>>,
    n_encoder: usize,
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    tape: ConvTape<T>,
    pre: Grid<T>,
    out: Grid<T>,
}

impl<T> BackboneTrace<T> {
    /// Final encoder feature map, `E(X)`.
    pub fn encoded(&self) -> &Grid<T> {
        &self.layers[self.n_encoder - 1].out
    }

    /// Decoder output consumed by the heads, `D(E(X))`.
    pub fn decoded(&self) -> &Grid<T> {
        &self.layers.last().expect("backbone has layers").out
    }

    /// Every level's activation, encoder levels first.
    pub fn levels(&self) -> Vec<&Grid<T>> {
        self.layers.iter().map(|l| &l.out).collect()
    }

    pub fn n_levels(&self) -> usize {
        self.layers.len()
    }
}

impl<T: Scalar> BackboneParams<T> {
    pub fn zeros(dims: BackboneDims) -> Self {
        let encoder = dims.encoder_geoms().into_iter().map(ConvParams::zeros).collect();
        let decoder = dims.decoder_geoms().into_iter().map(ConvParams::zeros).collect();
        Self {
            dims,
            encoder,
            decoder,
        }
    }

    pub fn init(dims: BackboneDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let root = SplitMix64::new(seed);
        let geoms: Vec<_> = dims
            .encoder_geoms()
            .into_iter()
            .chain(dims.decoder_geoms())
            .collect();
        let mut layers: Vec<ConvParams<T>> = geoms
            .into_iter()
            .enumerate()
            .map(|(i, g)| ConvParams::init(g, &mut root.fork(i as u64)))
            .collect();
        let decoder = layers.split_off(dims.encoder.len());
        Ok(Self {
            dims,
            encoder: layers,
            decoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims.clone())
    }

    pub fn cast<U: Scalar>(&self) -> BackboneParams<U> {
        BackboneParams {
            dims: self.dims.clone(),
            encoder: self.encoder.iter().map(ConvParams::cast).collect(),
            decoder: self.decoder.iter().map(ConvParams::cast).collect(),
        }
    }

    /// Parameter buffers in declared order: per layer, weight then bias.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}.weight"));
            names.push(format!("encoder.{i}.bias"));
        }
        for i in 0..self.decoder.len() {
            names.push(format!("decoder.{i}.weight"));
            names.push(format!("decoder.{i}.bias"));
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Grid<T>) -> Result<()> {
        let d = &self.dims;
        if x.shape() != (d.in_channels, d.height, d.width) {
            return Err(Error::Shape(format!(
                "backbone configured for {}x{}x{}, got {}x{}x{}",
                d.in_channels, d.height, d.width, x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Encoder feature map `E(X)`.
    pub fn encode(&self, x: &Grid<T>) -> Result<Grid<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.encoder {
            let (pre, _) = conv2d_forward(&h, &layer.weight, &layer.bias, &layer.geom)?;
            h = silu_forward(&pre);
        }
        Ok(h)
    }

    /// Decoder feature map `D(enc)`.
    pub fn decode(&self, enc: &Grid<T>) -> Result<Grid<T>> {
        let (c, h, w) = enc.shape();
        let expect_hw = *self.dims.level_dims().get(self.encoder.len() - 1).expect("encoder");
        if c != self.dims.encoder_channels() || (h, w) != expect_hw {
            return Err(Error::Shape(format!(
                "decoder expects {}x{}x{}, got {c}x{h}x{w}",
                self.dims.encoder_channels(),
                expect_hw.0,
                expect_hw.1
            )));
        }
        let mut h = enc.clone();
        for layer in &self.decoder {
            let up = upsample2(&h);
            let (pre, _) = conv2d_forward(&up, &layer.weight, &layer.bias, &layer.geom)?;
            h = silu_forward(&pre);
        }
        Ok(h)
    }

    /// Full forward pass that keeps what the backward pass needs.
    pub fn forward(&self, x: &Grid<T>) -> Result<BackboneTrace<T>> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.encoder.len() + self.decoder.len());
        let mut h = x.clone();
        for layer in &self.encoder {
            let (pre, tape) = conv2d_forward(&h, &layer.weight, &layer.bias, &layer.geom)?;
            let out = silu_forward(&pre);
            h = out.clone();
            layers.push(LayerTrace { tape, pre, out });
        }
        for layer in &self.decoder {
            let up = upsample2(&h);
            let (pre, tape) = conv2d_forward(&up, &layer.weight, &layer.bias, &layer.geom)?;
            let out = silu_forward(&pre);
            h = out.clone();
            layers.push(LayerTrace { tape, pre, out });
        }
        Ok(BackboneTrace {
            layers,
            n_encoder: self.encoder.len(),
        })
    }

    /// Global feature `f = GAP(E(X))`.
    pub fn global_feature(trace: &BackboneTrace<T>) -> Vec<T> {
        gap(trace.encoded())
    }

    /// Backpropagates gradients injected at any level's activation.
    ///
    /// `level_grads[i]` is the loss gradient w.r.t. level `i`'s output (encoder
    /// levels first, as in [`BackboneTrace::levels`]). Parameter gradients are
    /// accumulated into `grads`; the input gradient is returned on request.
    pub fn backward(
        &self,
        trace: &BackboneTrace<T>,
        mut level_grads: Vec<Option<Grid<T>>>,
        grads: &mut BackboneParams<T>,
        need_input_grad: bool,
    ) -> Option<Grid<T>> {
        let n_enc = self.encoder.len();
        let n = trace.layers.len();
        assert_eq!(level_grads.len(), n, "one gradient slot per level");
        let mut carry: Option<Grid<T>> = None;
        for i in (0..n).rev() {
            let lt = &trace.layers[i];
            let dout = match (carry.take(), level_grads[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => Grid::zeros(lt.out.channels, lt.out.height, lt.out.width),
            };
            let dpre = silu_backward(&lt.pre, &dout);
            let (params, g) = if i < n_enc {
                (&self.encoder[i], &mut grads.encoder[i])
            } else {
                (&self.decoder[i - n_enc], &mut grads.decoder[i - n_enc])
            };
            let want_input = i > 0 || need_input_grad;
            let din = conv2d_backward(
                &lt.tape,
                &dpre,
                &params.weight,
                &mut g.weight,
                &mut g.bias,
                want_input,
            );
            carry = match din {
                Some(d) if i >= n_enc => Some(upsample2_backward(&d)),
                other => other,
            };
        }
        carry
    }
}
