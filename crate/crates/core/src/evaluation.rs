//! Overlap and folding metrics, timed pair evaluation and summary tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_algebra::{njd_percent, warp_labels, DisplacementField};
use crate::network::{register, NetworkParams, RegistrationResult};
use crate::volumes::{LabelMap, Volume};

/// Mean Dice over the non-zero labels present in either map. A label found
/// in only one map scores 0. Two background-only maps score 1.
pub fn dsc(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(&a.shape(), &b.shape()));
    }
    let labels: BTreeSet<u32> = a.labels().into_iter().chain(b.labels()).collect();
    if labels.is_empty() {
        return Ok(1.0);
    }
    let index: std::collections::HashMap<u32, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut size_a = vec![0usize; labels.len()];
    let mut size_b = vec![0usize; labels.len()];
    let mut both = vec![0usize; labels.len()];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x != 0 {
            size_a[index[&x]] += 1;
        }
        if y != 0 {
            size_b[index[&y]] += 1;
        }
        if x != 0 && x == y {
            both[index[&x]] += 1;
        }
    }
    let total: f64 = (0..labels.len())
        .map(|i| 2.0 * both[i] as f64 / (size_a[i] + size_b[i]) as f64)
        .sum();
    Ok(total / labels.len() as f64)
}

/// Voxelwise `|warped − fixed|`.
pub fn difference_map(warped: &Volume, fixed: &Volume) -> Result<Volume> {
    if warped.shape() != fixed.shape() {
        return Err(Error::shape(&fixed.shape(), &warped.shape()));
    }
    let data = warped.data().iter().zip(fixed.data()).map(|(a, b)| (a - b).abs()).collect();
    Volume::new(fixed.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub dsc_before: f64,
    pub dsc_after: f64,
    pub njd_percent: f64,
    /// Median wall-clock seconds of the forward pass.
    pub runtime_seconds: f64,
}

/// A labelled image pair.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub id: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub labels_fixed: LabelMap,
    pub labels_moving: LabelMap,
}

/// Which predicted field to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FieldChoice {
    /// `φ_L`, the full coarse-to-fine result.
    #[default]
    Final,
    /// `φ_{L_a}`, the affine stages alone.
    Affine,
}

impl RegistrationResult {
    /// The requested field; `Affine` falls back to an error when the model
    /// has no affine stages.
    pub fn field(&self, choice: FieldChoice) -> Result<&DisplacementField> {
        match choice {
            FieldChoice::Final => Ok(&self.final_field),
            FieldChoice::Affine => self
                .affine_field
                .as_ref()
                .ok_or_else(|| Error::Config("model has no affine stages".into())),
        }
    }
}

/// Label-based metrics for a field that maps fixed-grid points into the
/// moving image.
pub fn score_field(pair: &LabeledPair, field: &DisplacementField) -> Result<(f64, f64, f64)> {
    let before = dsc(&pair.labels_fixed, &pair.labels_moving)?;
    let warped = warp_labels(&pair.labels_moving, field)?;
    let after = dsc(&pair.labels_fixed, &warped)?;
    Ok((before, after, njd_percent(field)))
}

/// Register with `repeats` timed forward passes and score the last one.
pub fn evaluate_pair_timed(
    params: &NetworkParams,
    pair: &LabeledPair,
    choice: FieldChoice,
    repeats: usize,
) -> Result<(EvalRecord, RegistrationResult)> {
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut result = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = register(params, &pair.fixed, &pair.moving)?;
        times.push(t.elapsed().as_secs_f64());
        result = Some(r);
    }
    let result = result.unwrap();
    times.sort_by(f64::total_cmp);
    let (dsc_before, dsc_after, njd) = score_field(pair, result.field(choice)?)?;
    let record = EvalRecord {
        pair_id: pair.id.clone(),
        dsc_before,
        dsc_after,
        njd_percent: njd,
        runtime_seconds: times[times.len() / 2],
    };
    Ok((record, result))
}

/// Timed evaluation with the median of three forward passes.
pub fn evaluate_pair(params: &NetworkParams, pair: &LabeledPair, choice: FieldChoice) -> Result<(EvalRecord, RegistrationResult)> {
    evaluate_pair_timed(params, pair, choice, 3)
}

pub const CSV_HEADER: &str = "pair_id,dsc_before,dsc_after,njd_percent,runtime_s";

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.pair_id, r.dsc_before, r.dsc_after, r.njd_percent, r.runtime_seconds
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub group: String,
    pub pairs: usize,
    pub dsc_before: f64,
    pub dsc_after: f64,
    pub njd_percent: f64,
    pub runtime_seconds: f64,
    pub best_dsc: bool,
    pub best_njd: bool,
    pub best_runtime: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Per-group means, in first-seen group order. The best mean DSC after
/// registration, lowest NJD and lowest runtime are flagged.
pub fn report(records: &[(String, EvalRecord)]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Empty);
    }
    let mut order: Vec<String> = Vec::new();
    for (g, _) in records {
        if !order.contains(g) {
            order.push(g.clone());
        }
    }
    let mut rows: Vec<ReportRow> = order
        .into_iter()
        .map(|group| {
            let members: Vec<&EvalRecord> = records.iter().filter(|(g, _)| *g == group).map(|(_, r)| r).collect();
            let n = members.len() as f64;
            let mean = |f: fn(&EvalRecord) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            ReportRow {
                group,
                pairs: members.len(),
                dsc_before: mean(|r| r.dsc_before),
                dsc_after: mean(|r| r.dsc_after),
                njd_percent: mean(|r| r.njd_percent),
                runtime_seconds: mean(|r| r.runtime_seconds),
                best_dsc: false,
                best_njd: false,
                best_runtime: false,
            }
        })
        .collect();
    let best_dsc = rows.iter().map(|r| r.dsc_after).fold(f64::NEG_INFINITY, f64::max);
    let best_njd = rows.iter().map(|r| r.njd_percent).fold(f64::INFINITY, f64::min);
    let best_rt = rows.iter().map(|r| r.runtime_seconds).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.best_dsc = r.dsc_after == best_dsc;
        r.best_njd = r.njd_percent == best_njd;
        r.best_runtime = r.runtime_seconds == best_rt;
    }
    Ok(Report { rows })
}

fn flag(v: String, best: bool) -> String {
    if best {
        format!("{v}*")
    } else {
        v
    }
}

impl Report {
    /// Aligned plain-text table; `*` marks the best value of a column.
    pub fn to_text(&self) -> String {
        let header = ["group", "pairs", "DSC before", "DSC after", "NJD (%)", "runtime (s)"].map(String::from);
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.group.clone(),
                    r.pairs.to_string(),
                    format!("{:.4}", r.dsc_before),
                    flag(format!("{:.4}", r.dsc_after), r.best_dsc),
                    flag(format!("{:.4}", r.njd_percent), r.best_njd),
                    flag(format!("{:.3}", r.runtime_seconds), r.best_runtime),
                ]
            })
            .collect();
        render_table(&header, &body)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,pairs,dsc_before,dsc_after,njd_percent,runtime_s,best_dsc,best_njd,best_runtime\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                r.group, r.pairs, r.dsc_before, r.dsc_after, r.njd_percent, r.runtime_seconds, r.best_dsc, r.best_njd, r.best_runtime
            );
        }
        out
    }
}

/// Left-aligned first column, right-aligned others.
pub fn render_table<const N: usize>(header: &[String; N], rows: &[[String; N]]) -> String {
    let mut widths = header.each_ref().map(|h| h.chars().count());
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String; N]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (N - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
