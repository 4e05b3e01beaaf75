//! Dice evaluation and table/CSV/SVG reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::continual::{predict, PredictMode};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::phantom::Sample;
use crate::plan::StagePlan;
use crate::ClassId;

/// Sorensen-Dice overlap `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Arithmetic mean of the group's per-class scores.
pub fn group_mean(per_class: &BTreeMap<ClassId, f64>, group: &[ClassId]) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::Config("group has no classes".into()));
    }
    let mut sum = 0.0;
    for id in group {
        sum += per_class.get(id).ok_or(Error::UnknownClass(*id))?;
    }
    Ok(sum / group.len() as f64)
}

/// Per-class Dice averaged over samples, for every class the model knows.
pub fn evaluate_model(
    model: &SegModel<f32>,
    eval_set: &[Sample],
    mode: PredictMode,
    threshold: f32,
) -> Result<BTreeMap<ClassId, f64>> {
    let ids = model.class_ids();
    let mut sums: BTreeMap<ClassId, f64> = ids.iter().map(|&id| (id, 0.0)).collect();
    for s in eval_set {
        for id in &ids {
            if !s.mask.planes.contains_key(id) {
                return Err(Error::Consistency(format!(
                    "evaluation sample has no ground truth for registered class {id}"
                )));
            }
        }
        let pred = predict(model, &s.volume, mode, threshold)?.to_mask(&ids);
        for id in &ids {
            *sums.get_mut(id).expect("initialized") += dice(&pred.planes[id], &s.mask.planes[id])?;
        }
    }
    let n = eval_set.len().max(1) as f64;
    Ok(sums.into_iter().map(|(id, s)| (id, s / n)).collect())
}

/// Label of group-mean rows in the `class` column.
pub const MEAN_LABEL: &str = "mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub method: String,
    pub step: usize,
    pub group: String,
    /// Class name, or [`MEAN_LABEL`] for a group mean.
    pub class: String,
    pub dsc: f64,
}

/// Dice scores per (method, step, group, class) plus group means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiceReport {
    pub rows: Vec<DiceRow>,
}

impl DiceReport {
    /// Adds one evaluation after `step`: a row per class in `C_step` and a
    /// mean row per group introduced up to `step`.
    pub fn add_step(
        &mut self,
        method: &str,
        step: usize,
        plan: &StagePlan,
        per_class: &BTreeMap<ClassId, f64>,
        class_name: impl Fn(ClassId) -> String,
    ) -> Result<()> {
        if step == 0 || step > plan.len() {
            return Err(Error::Config(format!("plan has no step {step}")));
        }
        for spec in &plan.stages[..step] {
            for &id in &spec.new_classes {
                let dsc = *per_class.get(&id).ok_or(Error::UnknownClass(id))?;
                self.rows.push(DiceRow {
                    method: method.to_string(),
                    step,
                    group: spec.group.clone(),
                    class: class_name(id),
                    dsc,
                });
            }
        }
        for spec in &plan.stages[..step] {
            self.rows.push(DiceRow {
                method: method.to_string(),
                step,
                group: spec.group.clone(),
                class: MEAN_LABEL.to_string(),
                dsc: group_mean(per_class, &spec.new_classes)?,
            });
        }
        Ok(())
    }

    pub fn group_mean_at(&self, method: &str, group: &str, step: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.group == group && r.step == step && r.class == MEAN_LABEL)
            .map(|r| r.dsc)
    }

    /// Change of a group's mean between the step it was learned and a later step.
    pub fn forgetting(&self, method: &str, group: &str, learned: usize, later: usize) -> Option<f64> {
        Some(self.group_mean_at(method, group, later)? - self.group_mean_at(method, group, learned)?)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Groups first seen at each step, in order of appearance.
    fn groups_by_step(&self) -> BTreeMap<usize, Vec<String>> {
        let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.class == MEAN_LABEL) {
            let groups = out.entry(r.step).or_default();
            if !groups.contains(&r.group) {
                groups.push(r.group.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("rows serialize");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<DiceRow>, _>>()
            .map_err(|e| Error::format("report csv", e.to_string()))?;
        Ok(Self { rows })
    }

    /// Text table with one column per (step, group) mean and one row per method.
    pub fn render_table(&self) -> String {
        let steps = self.groups_by_step();
        let mut columns: Vec<(usize, String)> = Vec::new();
        for (&step, groups) in &steps {
            for g in groups {
                columns.push((step, g.clone()));
            }
        }
        let name_w = self.methods().iter().map(String::len).max().unwrap_or(6).max(6);
        let col_w = columns.iter().map(|(_, g)| g.len()).max().unwrap_or(5).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:name_w$}", "method");
        for (&step, groups) in &steps {
            let span = groups.len() * (col_w + 3) - 3;
            let _ = write!(out, " | {:^span$}", format!("Step {step}"));
        }
        out.push('\n');
        let _ = write!(out, "{:name_w$}", "");
        for (_, g) in &columns {
            let _ = write!(out, " | {g:>col_w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(name_w + columns.len() * (col_w + 3)));
        out.push('\n');
        for m in self.methods() {
            let _ = write!(out, "{m:name_w$}");
            for (step, g) in &columns {
                match self.group_mean_at(&m, g, *step) {
                    Some(v) => {
                        let _ = write!(out, " | {v:>col_w$.3}");
                    }
                    None => {
                        let _ = write!(out, " | {:>col_w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// SVG line chart of group mean versus step, one polyline per (method, group).
    pub fn render_svg(&self) -> String {
        let curves = self.curves();
        let max_step = self.rows.iter().map(|r| r.step).max().unwrap_or(1).max(2);
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let x = |s: usize| pad + (s - 1) as f64 / (max_step - 1) as f64 * (w - 2.0 * pad);
        let y = |d: f64| h - pad - d * (h - 2.0 * pad);
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            out,
            r##"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="#000"/>"##,
            h - pad,
            w - pad,
            h - pad
        );
        let _ = writeln!(out, r##"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="#000"/>"##, h - pad);
        for s in 1..=max_step {
            let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">Step {s}</text>"#, x(s) - 12.0, h - pad + 14.0);
        }
        for (i, c) in curves.iter().enumerate() {
            let points: Vec<String> = c.points.iter().map(|&(s, d)| format!("{:.2},{:.2}", x(s), y(d))).collect();
            let values: Vec<String> = c.points.iter().map(|(s, d)| format!("{s}:{d}")).collect();
            let _ = writeln!(
                out,
                r#"<polyline data-method="{}" data-group="{}" data-values="{}" points="{}" fill="none" stroke="{}"/>"#,
                c.method,
                c.group,
                values.join(";"),
                points.join(" "),
                palette[i % palette.len()]
            );
        }
        out.push_str("</svg>\n");
        out
    }

    /// Group-mean curves in order of first appearance.
    pub fn curves(&self) -> Vec<Curve> {
        let mut out: Vec<Curve> = Vec::new();
        for r in self.rows.iter().filter(|r| r.class == MEAN_LABEL) {
            match out.iter_mut().find(|c| c.method == r.method && c.group == r.group) {
                Some(c) => c.points.push((r.step, r.dsc)),
                None => out.push(Curve {
                    method: r.method.clone(),
                    group: r.group.clone(),
                    points: vec![(r.step, r.dsc)],
                }),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub method: String,
    pub group: String,
    pub points: Vec<(usize, f64)>,
}

/// Reads the curves back from an SVG written by [`DiceReport::render_svg`].
pub fn parse_svg_curves(svg: &str) -> Result<Vec<Curve>> {
    if !svg.trim_start().starts_with("<svg") || !svg.trim_end().ends_with("</svg>") {
        return Err(Error::format("svg", "not an svg document"));
    }
    let re = Regex::new(r#"<polyline data-method="([^"]*)" data-group="([^"]*)" data-values="([^"]*)""#)
        .expect("valid regex");
    let mut out = Vec::new();
    for cap in re.captures_iter(svg) {
        let mut points = Vec::new();
        for pair in cap[3].split(';').filter(|p| !p.is_empty()) {
            let (s, d) = pair
                .split_once(':')
                .ok_or_else(|| Error::format("svg data-values", format!("bad pair '{pair}'")))?;
            let s = s.parse().map_err(|_| Error::format("svg data-values", format!("bad step '{s}'")))?;
            let d = d.parse().map_err(|_| Error::format("svg data-values", format!("bad value '{d}'")))?;
            points.push((s, d));
        }
        out.push(Curve {
            method: cap[1].to_string(),
            group: cap[2].to_string(),
            points,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Table,
    Plot,
}

/// Writes the requested formats as `<stem>.csv`, `<stem>.txt` and `<stem>.svg` in `dir`.
pub fn emit_report(report: &DiceReport, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let (ext, body) = match f {
            ReportFormat::Csv => ("csv", report.to_csv()),
            ReportFormat::Table => ("txt", report.render_table()),
            ReportFormat::Plot => ("svg", report.render_svg()),
        };
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
