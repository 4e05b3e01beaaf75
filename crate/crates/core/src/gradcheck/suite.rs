//! Finite-difference checks for every differentiable operation, at double
//! precision, as one callable suite.

use crate::backbone::{BackboneDims, BackboneParams, EncoderLevel};
use crate::distill::{ilt_loss, lwf_loss, plop_loss};
use crate::embeddings::{ClassDescriptor, ClassRegistry, EmbeddingSource};
use crate::error::Result;
use crate::heads::{apply_head_backward, apply_head_traced, bce_grad_logits, bce_loss, head_param_layout, HeadParams, HypernetMlp};
use crate::model::{ModelSpec, SegModel};
use crate::nn::{conv2d_backward, conv2d_forward, gap, gap_backward, silu_backward, silu_forward, upsample2, upsample2_backward, ConvGeom};
use crate::rng::SplitMix64;
use crate::tensor::Grid;
use crate::ClassId;

use super::{grad_check, grad_check_limited, GradCheckReport};

const EPS: f64 = 1e-5;

/// Entries perturbed for the composed model (a random subsample).
pub const COMPOSED_ENTRIES: usize = 1500;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random_vec(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_case(geom: ConvGeom, h: usize, w: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let nx = geom.c_in * h * w;
    let nw = geom.weight_len();
    let (oh, ow) = geom.out_dims(h, w);
    let u = random_vec(&mut rng, geom.c_out * oh * ow, 1.0);
    let op = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let x = Grid::from_vec(geom.c_in, h, w, p[..nx].to_vec())?;
        let weight = &p[nx..nx + nw];
        let bias = &p[nx + nw..];
        let (out, tape) = conv2d_forward(&x, weight, bias, &geom)?;
        let dout = Grid::from_vec(out.channels, out.height, out.width, u.clone())?;
        let mut dw = vec![0.0; nw];
        let mut db = vec![0.0; geom.c_out];
        let dx = conv2d_backward(&tape, &dout, weight, &mut dw, &mut db, true).expect("input gradient requested");
        Ok((dot(&out.data, &u), [dx.data, dw, db].concat()))
    };
    let x = random_vec(&mut rng, nx + nw + geom.c_out, 1.0);
    grad_check(op, &x, EPS, seed)
}

fn grid_case(
    shape: (usize, usize, usize),
    out_len: usize,
    seed: u64,
    f: impl Fn(&Grid<f64>, &[f64]) -> (Vec<f64>, Vec<f64>),
) -> Result<GradCheckReport> {
    let (c, h, w) = shape;
    let mut rng = SplitMix64::new(seed);
    let u = random_vec(&mut rng, out_len, 1.0);
    let op = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let x = Grid::from_vec(c, h, w, p.to_vec())?;
        let (out, grad) = f(&x, &u);
        Ok((dot(&out, &u), grad))
    };
    grad_check(op, &random_vec(&mut rng, c * h * w, 2.0), EPS, seed)
}

fn tiny_dims() -> BackboneDims {
    BackboneDims {
        in_channels: 1,
        height: 8,
        width: 8,
        kernel: 3,
        encoder: vec![
            EncoderLevel { channels: 3, stride: 1 },
            EncoderLevel { channels: 4, stride: 2 },
        ],
        decoder: vec![2],
    }
}

fn backbone_case(seed: u64) -> Result<GradCheckReport> {
    let params = BackboneParams::<f64>::init(tiny_dims(), seed)?;
    let mut rng = SplitMix64::new(seed ^ 0x55);
    let x = Grid::from_vec(1, 8, 8, random_vec(&mut rng, 64, 1.0))?;
    let trace = params.forward(&x)?;
    let us: Vec<Vec<f64>> = trace.levels().iter().map(|l| random_vec(&mut rng, l.data.len(), 1.0)).collect();
    let n_params = params.param_count();
    let op = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = params.zeros_like();
        let mut off = 0;
        for t in m.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        let x = Grid::from_vec(1, 8, 8, p[n_params..].to_vec())?;
        let tr = m.forward(&x)?;
        let value: f64 = tr.levels().iter().zip(&us).map(|(l, u)| dot(&l.data, u)).sum();
        let level_grads = tr
            .levels()
            .iter()
            .zip(&us)
            .map(|(l, u)| Grid::from_vec(l.channels, l.height, l.width, u.clone()).map(Some))
            .collect::<Result<Vec<_>>>()?;
        let mut g = m.zeros_like();
        let dx = m.backward(&tr, level_grads, &mut g, true).expect("input gradient requested");
        let mut grad: Vec<f64> = g.tensors().into_iter().flatten().copied().collect();
        grad.extend(dx.data);
        Ok((value, grad))
    };
    let mut p: Vec<f64> = params.tensors().into_iter().flatten().copied().collect();
    p.extend_from_slice(&x.data);
    grad_check(op, &p, EPS, seed)
}

fn hypernet_case(seed: u64) -> Result<GradCheckReport> {
    let (in_f, in_w, hidden, out) = (3, 2, 6, 7);
    let mlp = HypernetMlp::<f64>::init(in_f + in_w, hidden, out, seed);
    let mut rng = SplitMix64::new(seed);
    let upstream = random_vec(&mut rng, out, 1.0);
    let n_params = mlp.param_count();
    let op = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = mlp.zeros_like();
        let mut off = 0;
        for t in m.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        let (f, omega) = p[n_params..].split_at(in_f);
        let (theta, trace) = m.forward(f, omega)?;
        let mut g = m.zeros_like();
        let dinput = m.backward(&trace, &upstream, &mut g);
        let mut grad: Vec<f64> = g.tensors().into_iter().flatten().copied().collect();
        grad.extend_from_slice(&dinput);
        Ok((dot(&theta.0, &upstream), grad))
    };
    let mut p: Vec<f64> = mlp.tensors().into_iter().flatten().copied().collect();
    // The output layer is initialized tiny; enlarge it so values clear the comparison floor.
    let w2 = hidden * (in_f + in_w) + hidden;
    for v in &mut p[w2..w2 + out * hidden] {
        *v *= 100.0;
    }
    p.extend(random_vec(&mut rng, in_f + in_w, 1.0));
    grad_check(op, &p, EPS, seed)
}

fn head_case(seed: u64) -> Result<GradCheckReport> {
    let layout = head_param_layout(3, 3)?;
    let mut rng = SplitMix64::new(seed);
    let n_theta = layout.total;
    let target: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let op = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let theta = HeadParams(p[..n_theta].to_vec());
        let dec = Grid::from_vec(3, 4, 5, p[n_theta..].to_vec())?;
        let tr = apply_head_traced(&dec, &theta, &layout)?;
        let loss = bce_loss(&tr.probs, &target)?;
        let dl = Grid::from_vec(1, 4, 5, bce_grad_logits(&tr.probs, &target))?;
        let (dtheta, ddec) = apply_head_backward(&tr, &dl, &theta, &layout);
        Ok((loss, [dtheta, ddec.data].concat()))
    };
    let p = [random_vec(&mut rng, n_theta, 0.5), random_vec(&mut rng, 60, 1.0)].concat();
    grad_check(op, &p, EPS, seed)
}

fn composed_case(seed: u64) -> Result<GradCheckReport> {
    let source = EmbeddingSource::Hash { dim: 4, seed };
    let spec = ModelSpec {
        dims: tiny_dims(),
        head_kernel: 1,
        hidden: 6,
    };
    let mut model = SegModel::<f64>::new(spec, ClassRegistry::new(4, "hash"), seed)?;
    model.extend(
        (0..2u16)
            .map(|i| ClassDescriptor::new(ClassId(i), &format!("organ {i}"), 1, &source))
            .collect::<Result<Vec<_>>>()?,
    )?;
    for h in &mut model.hypernets {
        h.w2.iter_mut().for_each(|w| *w *= 100.0);
    }
    let mut rng = SplitMix64::new(seed);
    let x = Grid::from_vec(1, 8, 8, random_vec(&mut rng, 64, 1.0))?;
    let ys: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..64).map(|_| (rng.next_f64() < 0.4) as u8 as f64).collect())
        .collect();
    let op = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        m.set_flat_params(p)?;
        let trace = m.forward_traced(&x, &[0, 1])?;
        let mut loss = 0.0;
        let mut dl = Vec::new();
        for (h, y) in trace.heads.iter().zip(&ys) {
            loss += bce_loss(&h.head.probs, y)?;
            dl.push(Some(bce_grad_logits(&h.head.probs, y)));
        }
        let mut g = m.zero_grads();
        m.backward(&trace, &dl, Vec::new(), &mut g)?;
        Ok((loss, g.flatten()))
    };
    grad_check_limited(op, &model.flat_params(), EPS, seed, COMPOSED_ENTRIES)
}

/// Runs every check and returns one report per operation.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: Result<GradCheckReport>| -> Result<()> {
        out.push(SuiteEntry { name, report: report? });
        Ok(())
    };
    push("conv2d 3x3 stride 1", conv_case(ConvGeom::same(2, 3, 3, 1), 5, 4, seed))?;
    push("conv2d 3x3 stride 2", conv_case(ConvGeom::same(2, 3, 3, 2), 6, 5, seed + 1))?;
    push("conv2d 1x1", conv_case(ConvGeom::same(3, 2, 1, 1), 4, 4, seed + 2))?;
    push(
        "silu",
        grid_case((2, 3, 3), 18, seed + 3, |x, u| {
            let du = Grid::from_vec(2, 3, 3, u.to_vec()).expect("shape");
            (silu_forward(x).data, silu_backward(x, &du).data)
        }),
    )?;
    push(
        "upsample2",
        grid_case((2, 2, 3), 2 * 4 * 6, seed + 4, |x, u| {
            let du = Grid::from_vec(2, 4, 6, u.to_vec()).expect("shape");
            (upsample2(x).data, upsample2_backward(&du).data)
        }),
    )?;
    push(
        "global average pool",
        grid_case((3, 2, 4), 3, seed + 5, |x, u| (gap(x), gap_backward(u, 3, 2, 4).data)),
    )?;
    push("backbone", backbone_case(seed + 6))?;
    push("hypernet mlp", hypernet_case(seed + 7))?;
    push("dynamic head + bce", head_case(seed + 8))?;
    let mut rng = SplitMix64::new(seed + 9);
    let teacher = random_vec(&mut rng, 12, 2.0);
    push(
        "prediction distillation",
        grad_check(|s: &[f64]| lwf_loss(s, &teacher, 2.0), &random_vec(&mut rng, 12, 2.0), EPS, seed),
    )?;
    let t_grid = Grid::from_vec(2, 3, 3, random_vec(&mut rng, 18, 1.0))?;
    push(
        "feature distillation",
        grad_check(
            |s: &[f64]| {
                let g = Grid::from_vec(2, 3, 3, s.to_vec())?;
                let (l, d) = ilt_loss(&g, &t_grid)?;
                Ok((l, d.data))
            },
            &random_vec(&mut rng, 18, 1.0),
            EPS,
            seed,
        ),
    )?;
    let t_levels = [
        Grid::from_vec(2, 4, 4, random_vec(&mut rng, 32, 1.0))?,
        Grid::from_vec(3, 4, 4, random_vec(&mut rng, 48, 1.0))?,
    ];
    push(
        "pooled-feature distillation",
        grad_check(
            |s: &[f64]| {
                let a = Grid::from_vec(2, 4, 4, s[..32].to_vec())?;
                let b = Grid::from_vec(3, 4, 4, s[32..].to_vec())?;
                let (l, g) = plop_loss(&[&a, &b], &[&t_levels[0], &t_levels[1]], &[1, 2, 4])?;
                Ok((l, g.into_iter().flat_map(|g| g.data).collect()))
            },
            &random_vec(&mut rng, 80, 1.0),
            EPS,
            seed,
        ),
    )?;
    push("composed model", composed_case(seed + 10))?;
    Ok(out)
}
