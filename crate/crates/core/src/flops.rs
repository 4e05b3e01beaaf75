//! Analytic floating-point cost accounting and growth curves across continual steps.
//!
//! Counts are integers in FLOPs (or multiply-accumulates when
//! `flops_per_mac == 1`), so growth arithmetic on the published constants is exact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadLayout;
use crate::model::SegModel;
use crate::tensor::{count_macs, Grid, Scalar};

pub const GIGA: u64 = 1_000_000_000;

/// Classes introduced at each step of the published three-step trajectory.
pub const PAPER_HEADS_PER_STEP: [usize; 3] = [7, 3, 4];

/// Cost of a dense convolution: `spatial_elements * c_in * c_out * kernel_volume * flops_per_mac`.
pub fn conv_flops(spatial_elements: u64, c_in: u64, c_out: u64, kernel_volume: u64, flops_per_mac: u64) -> u64 {
    spatial_elements * c_in * c_out * kernel_volume * flops_per_mac
}

/// Sum of the three head convolutions at `spatial_elements` output positions.
/// `spatial_rank` is 2 for images and 3 for volumes (kernel volume `k^rank`).
pub fn head_flops(layout: &HeadLayout, spatial_elements: u64, spatial_rank: u32, flops_per_mac: u64) -> u64 {
    let kv = (layout.kernel as u64).pow(spatial_rank);
    layout
        .geoms()
        .iter()
        .map(|g| conv_flops(spatial_elements, g.c_in as u64, g.c_out as u64, kv, flops_per_mac))
        .sum()
}

/// One evaluation of a hypernetwork with the given layer widths.
pub fn hypernet_flops(in_dim: u64, hidden: u64, out_dim: u64, flops_per_mac: u64) -> u64 {
    (in_dim * hidden + hidden * out_dim) * flops_per_mac
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub component: String,
    pub flops: u64,
    pub params: u64,
    /// FLOPs added per continual step by this component.
    pub growth_per_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Shared backbone plus one lightweight head per class.
    Ours,
    /// A new decoder for every step.
    DecoderPerStep,
    /// Distillation: a frozen teacher's forward pass doubles the backbone cost.
    DistillDouble,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ours, Strategy::DecoderPerStep, Strategy::DistillDouble];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Ours => "ours",
            Strategy::DecoderPerStep => "decoder-per-step",
            Strategy::DistillDouble => "distill-double",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// Per-component costs feeding [`growth_model`], all in FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthConstants {
    /// Full model with its first-step heads.
    pub base_ours: u64,
    /// Backbone with a single decoder.
    pub base_decoder: u64,
    /// One additional decoder.
    pub decoder: u64,
    /// One class head including its hypernetwork.
    pub per_head: u64,
    /// Backbone forward pass (what a teacher adds).
    pub backbone: u64,
}

impl GrowthConstants {
    /// The published 3D figures: 661.6 / 659.4 / 466.08 / 0.12 GFLOPs.
    pub fn paper() -> Self {
        Self {
            base_ours: 661_600_000_000,
            base_decoder: 659_400_000_000,
            decoder: 466_080_000_000,
            per_head: 120_000_000,
            backbone: 659_400_000_000,
        }
    }

    /// Constants measured on a model by [`audit_reference_net`].
    pub fn from_audit(audit: &Audit, heads_at_first_step: u64) -> Self {
        let backbone = audit.backbone_flops();
        Self {
            base_ours: backbone + heads_at_first_step * audit.per_class_flops(),
            base_decoder: backbone,
            decoder: audit.decoder_flops(),
            per_head: audit.per_class_flops(),
            backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthCurve {
    pub strategy: Strategy,
    /// Cumulative FLOPs after each step (index 0 is step 1).
    pub flops: Vec<u64>,
}

/// FLOPs at every step `t = 1..=n_steps`.
///
/// `heads_per_step[t-1]` is the number of classes introduced at step `t`.
pub fn growth_model(
    strategy: Strategy,
    n_steps: usize,
    heads_per_step: &[usize],
    c: &GrowthConstants,
) -> Result<GrowthCurve> {
    if n_steps == 0 {
        return Err(Error::Config("growth model needs at least one step".into()));
    }
    if heads_per_step.len() < n_steps {
        return Err(Error::Config(format!(
            "{} head counts for {n_steps} steps",
            heads_per_step.len()
        )));
    }
    let mut flops = Vec::with_capacity(n_steps);
    let mut new_heads = 0u64;
    for t in 1..=n_steps {
        if t >= 2 {
            new_heads += heads_per_step[t - 1] as u64;
        }
        let v = match strategy {
            Strategy::Ours => c.base_ours + new_heads * c.per_head,
            Strategy::DecoderPerStep => c.base_decoder + (t as u64 - 1) * c.decoder,
            Strategy::DistillDouble => {
                let teacher = if t >= 2 { c.backbone } else { 0 };
                c.base_ours + new_heads * c.per_head + teacher
            }
        };
        flops.push(v);
    }
    Ok(GrowthCurve { strategy, flops })
}

/// Analytic and instrumented costs of a model's forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub flops_per_mac: u64,
    pub entries: Vec<CostEntry>,
    pub n_classes: usize,
    /// Analytic MACs of a forward pass over every class.
    pub analytic_macs: u64,
    /// MACs counted while actually running that forward pass.
    pub instrumented_macs: u64,
}

impl Audit {
    fn sum(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.component.starts_with(prefix))
            .map(|e| e.flops)
            .sum()
    }

    pub fn backbone_flops(&self) -> u64 {
        self.sum("encoder.") + self.sum("decoder.")
    }

    pub fn decoder_flops(&self) -> u64 {
        self.sum("decoder.")
    }

    pub fn per_class_flops(&self) -> u64 {
        self.sum("hypernet") + self.sum("head")
    }

    pub fn total_flops(&self) -> u64 {
        self.backbone_flops() + self.n_classes as u64 * self.per_class_flops()
    }

    pub fn matches(&self) -> bool {
        self.analytic_macs == self.instrumented_macs
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,flops,params,growth_per_step\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.component, e.flops, e.params, e.growth_per_step));
        }
        out
    }
}

/// Itemizes the model's cost analytically and checks it against an
/// instrumented forward pass over every registered class.
pub fn audit_reference_net<T: Scalar>(model: &SegModel<T>, flops_per_mac: u64) -> Result<Audit> {
    if !(flops_per_mac == 1 || flops_per_mac == 2) {
        return Err(Error::Config(format!("flops_per_mac must be 1 or 2, got {flops_per_mac}")));
    }
    let dims = &model.spec.dims;
    let levels = dims.level_dims();
    let geoms: Vec<_> = dims.encoder_geoms().into_iter().chain(dims.decoder_geoms()).collect();
    let n_enc = dims.encoder.len();
    let mut entries = Vec::new();
    let mut analytic_macs = 0u64;
    for (i, (g, &(h, w))) in geoms.iter().zip(&levels).enumerate() {
        let macs = conv_flops((h * w) as u64, g.c_in as u64, g.c_out as u64, (g.kernel * g.kernel) as u64, 1);
        analytic_macs += macs;
        let component = if i < n_enc {
            format!("encoder.{i}")
        } else {
            format!("decoder.{}", i - n_enc)
        };
        entries.push(CostEntry {
            component,
            flops: macs * flops_per_mac,
            params: (g.weight_len() + g.c_out) as u64,
            growth_per_step: 0,
        });
    }
    let in_dim = model.hypernet_input_dim() as u64;
    let hyper_macs = hypernet_flops(in_dim, model.spec.hidden as u64, model.layout.total as u64, 1);
    let pixels = (dims.height * dims.width) as u64;
    let head_macs = head_flops(&model.layout, pixels, 2, 1);
    let hyper_params = in_dim * model.spec.hidden as u64 + model.spec.hidden as u64
        + model.spec.hidden as u64 * model.layout.total as u64
        + model.layout.total as u64;
    entries.push(CostEntry {
        component: "hypernet (per class)".into(),
        flops: hyper_macs * flops_per_mac,
        params: hyper_params,
        growth_per_step: hyper_macs * flops_per_mac,
    });
    entries.push(CostEntry {
        component: "head (per class)".into(),
        flops: head_macs * flops_per_mac,
        params: 0,
        growth_per_step: head_macs * flops_per_mac,
    });
    let n = model.registry.len();
    analytic_macs += n as u64 * (hyper_macs + head_macs);

    let x: Grid<T> = Grid::zeros(dims.in_channels, dims.height, dims.width);
    let indices: Vec<usize> = (0..n).collect();
    let (out, instrumented_macs) = count_macs(|| model.probabilities(&x, &indices));
    out?;
    Ok(Audit {
        flops_per_mac,
        entries,
        n_classes: n,
        analytic_macs,
        instrumented_macs,
    })
}

/// Formats FLOPs as GFLOPs with enough digits to be exact for the published constants.
pub fn gflops(flops: u64) -> String {
    let whole = flops / GIGA;
    let frac = flops % GIGA;
    if frac == 0 {
        return format!("{whole}");
    }
    let s = format!("{whole}.{frac:09}");
    s.trim_end_matches('0').to_string()
}
