//! Layer primitives with hand-written reverse-mode passes.
//!
//! Convolutions lower to a single GEMM per call through an im2col buffer.
//! Weights are stored `(c_out, c_in, k, k)` row-major, which is exactly the
//! `c_out x (c_in * k * k)` left operand of that GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, silu, silu_grad, Grid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Same-padded convolution (`pad = kernel / 2`).
    pub fn same(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    pub fn out_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &Grid<T>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_dims(x.height, x.width);
    let n = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * n];
    let k = g.kernel;
    for ci in 0..g.c_in {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < x.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, height: usize, width: usize) -> Grid<T> {
    let (oh, ow) = g.out_dims(height, width);
    let n = oh * ow;
    let mut dx = Grid::zeros(g.c_in, height, width);
    let k = g.kernel;
    for ci in 0..g.c_in {
        let plane = &mut dx.data[ci * height * width..(ci + 1) * height * width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Saved activations needed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvTape<T> {
    geom: ConvGeom,
    in_height: usize,
    in_width: usize,
    /// im2col buffer, or the raw input for pointwise convolutions.
    cols: Vec<T>,
}

pub fn conv2d_forward<T: Scalar>(
    x: &Grid<T>,
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Result<(Grid<T>, ConvTape<T>)> {
    if x.channels != g.c_in {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            g.c_in, x.channels
        )));
    }
    if weight.len() != g.weight_len() || bias.len() != g.c_out {
        return Err(Error::Shape(format!(
            "conv parameters have {} weights / {} biases, geometry needs {} / {}",
            weight.len(),
            bias.len(),
            g.weight_len(),
            g.c_out
        )));
    }
    if x.height + 2 * g.pad < g.kernel || x.width + 2 * g.pad < g.kernel {
        return Err(Error::Shape(format!(
            "input {}x{} smaller than kernel {}",
            x.height, x.width, g.kernel
        )));
    }
    let (oh, ow) = g.out_dims(x.height, x.width);
    let n = oh * ow;
    let cols = if g.is_pointwise() {
        x.data.clone()
    } else {
        im2col(x, g)
    };
    let mut out = Grid::zeros(g.c_out, oh, ow);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(*b);
    }
    gemm(
        g.c_out,
        g.patch_len(),
        n,
        weight,
        false,
        &cols,
        false,
        T::one(),
        &mut out.data,
    );
    let tape = ConvTape {
        geom: *g,
        in_height: x.height,
        in_width: x.width,
        cols,
    };
    Ok((out, tape))
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    tape: &ConvTape<T>,
    dout: &Grid<T>,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Grid<T>> {
    let g = &tape.geom;
    let n = dout.plane_len();
    debug_assert_eq!(dout.channels, g.c_out);
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = *db + dout.channel(co).iter().copied().sum::<T>();
    }
    // dW += dOut * cols^T
    gemm(
        g.c_out,
        n,
        g.patch_len(),
        &dout.data,
        false,
        &tape.cols,
        true,
        T::one(),
        dweight,
    );
    if !need_input_grad {
        return None;
    }
    // dcols = W^T * dOut
    let mut dcols = vec![T::zero(); g.patch_len() * n];
    gemm(
        g.patch_len(),
        g.c_out,
        n,
        weight,
        true,
        &dout.data,
        false,
        T::zero(),
        &mut dcols,
    );
    if g.is_pointwise() {
        Some(Grid {
            channels: g.c_in,
            height: tape.in_height,
            width: tape.in_width,
            data: dcols,
        })
    } else {
        Some(col2im(&dcols, g, tape.in_height, tape.in_width))
    }
}

pub fn silu_forward<T: Scalar>(pre: &Grid<T>) -> Grid<T> {
    Grid {
        data: pre.data.iter().map(|&v| silu(v)).collect(),
        ..*pre
    }
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward<T: Scalar>(pre: &Grid<T>, dout: &Grid<T>) -> Grid<T> {
    Grid {
        data: pre
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&p, &d)| d * silu_grad(p))
            .collect(),
        ..*pre
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    let (h, w) = (x.height, x.width);
    let mut out = Grid::zeros(x.channels, 2 * h, 2 * w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &Grid<T>) -> Grid<T> {
    let (h, w) = (dout.height / 2, dout.width / 2);
    let mut dx = Grid::zeros(dout.channels, h, w);
    for c in 0..dout.channels {
        let src = dout.channel(c);
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let i = (y / 2) * w + xx / 2;
                dst[i] = dst[i] + src[y * 2 * w + xx];
            }
        }
    }
    dx
}

/// Global average pooling: one mean per channel.
pub fn gap<T: Scalar>(x: &Grid<T>) -> Vec<T> {
    let n = T::from_f64(x.plane_len() as f64);
    (0..x.channels)
        .map(|c| x.channel(c).iter().copied().sum::<T>() / n)
        .collect()
}

pub fn gap_backward<T: Scalar>(dout: &[T], channels: usize, height: usize, width: usize) -> Grid<T> {
    let n = height * width;
    let scale = T::one() / T::from_f64(n as f64);
    let mut g = Grid::zeros(channels, height, width);
    for (c, &d) in dout.iter().enumerate().take(channels) {
        g.data[c * n..(c + 1) * n].fill(d * scale);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_grid(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> Grid<f64> {
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn gap_hand_value() {
        let g = Grid::from_vec(1, 2, 2, vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(gap(&g), vec![4.0]);
    }

    #[test]
    fn gap_of_constant_channel() {
        let g = Grid::from_vec(2, 3, 3, [vec![0.25f64; 9], vec![-2.0; 9]].concat()).unwrap();
        assert_eq!(gap(&g), vec![0.25, -2.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = SplitMix64::new(3);
        let x = random_grid(&mut rng, 2, 3, 4);
        let y = random_grid(&mut rng, 2, 6, 8);
        let lhs: f64 = upsample2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = SplitMix64::new(11);
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            let g = ConvGeom::same(2, 3, k, s);
            let x = random_grid(&mut rng, 2, 6, 6);
            let cols = im2col(&x, &g);
            let y: Vec<f64> = (0..cols.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let back = col2im(&y, &g, 6, 6);
            let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "k={k} s={s}");
        }
    }

    #[test]
    fn strided_output_dims() {
        let g = ConvGeom::same(1, 1, 3, 2);
        assert_eq!(g.out_dims(64, 64), (32, 32));
        assert_eq!(g.out_dims(8, 8), (4, 4));
        assert_eq!(ConvGeom::same(1, 1, 3, 1).out_dims(7, 5), (7, 5));
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let g = ConvGeom::same(2, 1, 3, 1);
        let x = Grid::<f32>::zeros(1, 4, 4);
        let err = conv2d_forward(&x, &vec![0.0; g.weight_len()], &[0.0], &g).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
