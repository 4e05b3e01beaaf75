//! Distillation losses used by the baseline methods.
//!
//! Each loss compares a student quantity against the same quantity from a
//! frozen copy of the previous-stage model and returns the value together
//! with its gradient w.r.t. the student quantity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::PROB_CLAMP;
use crate::tensor::{sigmoid, Grid, Scalar};

/// Loss weights and shapes for the distillation baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lwf_weight: f64,
    pub temperature: f64,
    pub ilt_weight: f64,
    /// Pooled-feature loss weight; `None` means `0.01 x` the number of pyramid levels.
    pub plop_weight: Option<f64>,
    pub plop_scales: Vec<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lwf_weight: 1.0,
            temperature: 2.0,
            ilt_weight: 1.0,
            plop_weight: None,
            plop_scales: vec![1, 2, 4],
        }
    }
}

impl DistillConfig {
    pub fn plop_weight_for(&self, levels: usize) -> f64 {
        self.plop_weight.unwrap_or(0.01 * levels as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        let weights = [Some(self.lwf_weight), Some(self.ilt_weight), self.plop_weight];
        if weights.iter().flatten().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("distillation weights must be finite and >= 0".into()));
        }
        if self.plop_scales.is_empty() || self.plop_scales.contains(&0) {
            return Err(Error::Config("pooled-feature scales must be nonempty and >= 1".into()));
        }
        Ok(())
    }
}

fn clamp<T: Scalar>(p: T) -> T {
    let eps = T::from_f64(PROB_CLAMP);
    p.max(eps).min(T::one() - eps)
}

/// Prediction distillation on per-class sigmoid outputs.
///
/// With `q = sigmoid(z_t / T)` and `p = sigmoid(z_s / T)` the loss is the mean
/// binary cross-entropy `-[q ln p + (1 - q) ln(1 - p)]`; the returned gradient
/// is w.r.t. the student logits `z_s`.
pub fn lwf_loss<T: Scalar>(student_logits: &[T], teacher_logits: &[T], temperature: f64) -> Result<(T, Vec<T>)> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::Shape(format!(
            "student has {} logits, teacher {}",
            student_logits.len(),
            teacher_logits.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let n = student_logits.len();
    if n == 0 {
        return Ok((T::zero(), Vec::new()));
    }
    let t = T::from_f64(temperature);
    let nf = T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n);
    for (&zs, &zt) in student_logits.iter().zip(teacher_logits) {
        let q = sigmoid(zt / t);
        let p = sigmoid(zs / t);
        let pc = clamp(p);
        loss = loss - (q * pc.ln() + (T::one() - q) * (T::one() - pc).ln());
        grad.push((p - q) / (t * nf));
    }
    Ok((loss / nf, grad))
}

/// Inverse sigmoid, used to feed probability-valued examples to [`lwf_loss`].
pub fn logit<T: Scalar>(p: T) -> T {
    let p = clamp(p);
    (p / (T::one() - p)).ln()
}

/// Feature distillation: mean squared difference of decoder features.
pub fn ilt_loss<T: Scalar>(student: &Grid<T>, teacher: &Grid<T>) -> Result<(T, Grid<T>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student features {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let n = T::from_f64(student.data.len().max(1) as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grad = Grid::zeros(student.channels, student.height, student.width);
    for ((g, &s), &t) in grad.data.iter_mut().zip(&student.data).zip(&teacher.data) {
        let d = s - t;
        loss = loss + d * d;
        *g = two * d / n;
    }
    Ok((loss / n, grad))
}

/// Region boundaries splitting `len` into `parts` near-equal pieces.
fn bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * len / parts, (i + 1) * len / parts)).collect()
}

/// One pooled marginal entry: a mean of squared activations over a set of pixels.
struct Pool {
    channel: usize,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl Pool {
    fn count(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

fn pools(x: &Grid<impl Scalar>, scale: usize) -> Result<Vec<Pool>> {
    if scale == 0 || scale > x.height || scale > x.width {
        return Err(Error::Shape(format!(
            "scale {scale} does not fit a {}x{} feature map",
            x.height, x.width
        )));
    }
    let mut out = Vec::new();
    for c in 0..x.channels {
        for &(r0, r1) in &bounds(x.height, scale) {
            for &(c0, c1) in &bounds(x.width, scale) {
                // Width-pooled: one entry per row of the region.
                for r in r0..r1 {
                    out.push(Pool { channel: c, rows: (r, r + 1), cols: (c0, c1) });
                }
                // Height-pooled: one entry per column of the region.
                for col in c0..c1 {
                    out.push(Pool { channel: c, rows: (r0, r1), cols: (col, col + 1) });
                }
            }
        }
    }
    Ok(out)
}

fn pool_mean<T: Scalar>(x: &Grid<T>, p: &Pool) -> T {
    let plane = x.channel(p.channel);
    let mut s = T::zero();
    for r in p.rows.0..p.rows.1 {
        for v in &plane[r * x.width + p.cols.0..r * x.width + p.cols.1] {
            s = s + *v * *v;
        }
    }
    s / T::from_f64(p.count() as f64)
}

/// Width- and height-pooled means of squared activations over an
/// `scale x scale` grid of regions, per channel.
pub fn pooled_marginals<T: Scalar>(x: &Grid<T>, scale: usize) -> Result<Vec<T>> {
    Ok(pools(x, scale)?.iter().map(|p| pool_mean(x, p)).collect())
}

/// Multi-scale pooled-feature distillation over a feature pyramid.
///
/// For every level and scale, the mean squared difference between student and
/// teacher marginals; the result is averaged over levels and scales. Returns
/// the gradient w.r.t. each student level.
pub fn plop_loss<T: Scalar>(
    student: &[&Grid<T>],
    teacher: &[&Grid<T>],
    scales: &[usize],
) -> Result<(T, Vec<Grid<T>>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "student pyramid has {} levels, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    if scales.is_empty() || student.is_empty() {
        return Err(Error::Config("pooled-feature loss needs at least one level and scale".into()));
    }
    let terms = T::from_f64((student.len() * scales.len()) as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("pyramid level {:?} vs {:?}", s.shape(), t.shape())));
        }
        let mut g = Grid::zeros(s.channels, s.height, s.width);
        for &scale in scales {
            let ps = pools(s, scale)?;
            let m = T::from_f64(ps.len() as f64);
            for p in &ps {
                let d = pool_mean(s, p) - pool_mean(t, p);
                loss = loss + d * d / (m * terms);
                // d/dx of (d^2 / (m * terms)) with pool_mean = sum x^2 / count.
                let coef = two * d / (m * terms) * two / T::from_f64(p.count() as f64);
                let base = p.channel * s.height * s.width;
                for r in p.rows.0..p.rows.1 {
                    for col in p.cols.0..p.cols.1 {
                        let i = base + r * s.width + col;
                        g.data[i] = g.data[i] + coef * s.data[i];
                    }
                }
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::SplitMix64;

    fn grid(c: usize, h: usize, w: usize, seed: u64) -> Grid<f64> {
        let mut rng = SplitMix64::new(seed);
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn lwf_hand_example() {
        let zt: [f64; 2] = [logit(0.8), logit(0.3)];
        let zs = [logit(0.6), logit(0.4)];
        let (l, _) = lwf_loss(&zs, &zt, 1.0).unwrap();
        assert!((l - 0.6121919007930318).abs() < 1e-9, "{l}");
    }

    #[test]
    fn lwf_matched_has_zero_gradient_and_minimal_loss() {
        let z = [0.3, -1.2, 2.0];
        let (l, g) = lwf_loss(&z, &z, 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let (l2, _) = lwf_loss(&[0.5, -1.2, 2.0], &z, 1.0).unwrap();
        assert!(l2 > l);
        // A saturated teacher reduces to cross-entropy against ones.
        let (l, _) = lwf_loss(&[0.0, 0.0], &[60.0, 60.0], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn lwf_gradient_checks() {
        let zt = [0.4, -0.7, 1.1, 0.0];
        for t in [1.0, 2.0] {
            let op = |z: &[f64]| lwf_loss(z, &zt, t);
            assert!(grad_check(op, &[0.1, 0.3, -0.5, 2.0], 1e-5, 0).unwrap().max_rel_error < 1e-6);
        }
    }

    #[test]
    fn ilt_values() {
        let a = grid(2, 2, 2, 1);
        assert_eq!(ilt_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.5);
        assert!((ilt_loss(&b, &a).unwrap().0 - 0.25).abs() < 1e-12);
        let s = Grid::from_vec(2, 2, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 3.0]).unwrap();
        let t = Grid::from_vec(2, 2, 2, vec![0.0, 1.0, 1.5, 0.25, 0.25, -0.5, 1.0, 2.0]).unwrap();
        assert_eq!(ilt_loss(&s, &t).unwrap().0, 1.4375);
        assert!(ilt_loss(&s, &grid(1, 2, 2, 0)).is_err());
    }

    #[test]
    fn ilt_gradient_checks() {
        let t = grid(2, 3, 3, 4);
        let op = |x: &[f64]| {
            let s = Grid::from_vec(2, 3, 3, x.to_vec())?;
            ilt_loss(&s, &t).map(|(l, g)| (l, g.data))
        };
        assert!(grad_check(op, &grid(2, 3, 3, 5).data, 1e-5, 0).unwrap().max_rel_error < 1e-6);
    }

    #[test]
    fn plop_hand_example() {
        let s = Grid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t: Grid<f64> = Grid::zeros(1, 2, 2);
        // Squares [[1,4],[9,16]]: row means [2.5, 12.5], column means [5, 10].
        assert_eq!(pooled_marginals(&s, 1).unwrap(), vec![2.5, 12.5, 5.0, 10.0]);
        let (l, _) = plop_loss(&[&s], &[&t], &[1]).unwrap();
        assert!((l - (6.25 + 156.25 + 25.0 + 100.0) / 4.0).abs() < 1e-12);
        assert_eq!(plop_loss(&[&s], &[&s], &[1, 2]).unwrap().0, 0.0);
    }

    #[test]
    fn permuting_pooled_axis_keeps_marginal() {
        let s = grid(1, 4, 4, 9);
        let mut permuted = s.clone();
        // Reverse every row: the width-pooled (per-row) marginal is unchanged.
        for r in 0..4 {
            permuted.data[r * 4..r * 4 + 4].reverse();
        }
        let a = pooled_marginals(&s, 1).unwrap();
        let b = pooled_marginals(&permuted, 1).unwrap();
        // Equal up to summation order.
        assert!(a[..4].iter().zip(&b[..4]).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(a[4..].iter().zip(&b[4..]).any(|(x, y)| (x - y).abs() > 1e-6));
        let t = [&s];
        let (l, _) = plop_loss(&[&permuted], &t, &[1]).unwrap();
        let (l_rows_only, _) = plop_loss(&[&s], &t, &[1]).unwrap();
        assert!(l > 0.0 && l_rows_only == 0.0);
    }

    #[test]
    fn plop_gradient_checks() {
        let t1 = grid(2, 4, 4, 1);
        let t2 = grid(1, 2, 2, 2);
        let op = |x: &[f64]| {
            let s1 = Grid::from_vec(2, 4, 4, x[..32].to_vec())?;
            let s2 = Grid::from_vec(1, 2, 2, x[32..].to_vec())?;
            let (l, g) = plop_loss(&[&s1, &s2], &[&t1, &t2], &[1, 2])?;
            Ok((l, g.into_iter().flat_map(|g| g.data).collect()))
        };
        let x: Vec<f64> = grid(2, 4, 4, 3).data.into_iter().chain(grid(1, 2, 2, 4).data).collect();
        assert!(grad_check(op, &x, 1e-5, 0).unwrap().max_rel_error < 1e-6);
        assert!(plop_loss(&[&t1], &[&t1], &[8]).is_err());
    }
}
