//! Evaluation report (JSON) and ROC plot (SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gpdssm_core::eval::{auc_metric, bootstrap_ci, bootstrap_paired, confusion_metrics, roc_auc};
use gpdssm_core::exec::Executor;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// 95% percentile bootstrap intervals; `None` when a metric is undefined in
/// every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    pub auc: Option<[f64; 2]>,
    pub accuracy: Option<[f64; 2]>,
    pub sensitivity: Option<[f64; 2]>,
    pub specificity: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub auc: f64,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ci: Intervals,
    pub roc: Vec<[f64; 2]>,
    pub n: usize,
    /// Leave-one-out AUC over the training rows, when computed.
    #[serde(default)]
    pub loocv_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Section {
    Present(ModelReport),
    Absent { status: String, reason: String },
}

impl Section {
    pub fn absent(reason: impl Into<String>) -> Self {
        Section::Absent { status: "absent".into(), reason: reason.into() }
    }

    pub fn report(&self) -> Option<&ModelReport> {
        match self {
            Section::Present(r) => Some(r),
            Section::Absent { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub a: String,
    pub b: String,
    /// AUC(a) − AUC(b) on the full test set.
    pub estimate: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub bootstrap: usize,
    pub models: BTreeMap<String, Section>,
    pub paired_auc_differences: Vec<PairedDifference>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn ci<E, M>(scores: &[f64], labels: &[bool], metric: M, b: usize, seed: u64, exec: &E) -> Option<[f64; 2]>
where
    E: Executor,
    M: Fn(&[f64], &[bool]) -> f64 + Sync + Send,
{
    bootstrap_ci(scores, labels, metric, b, seed, exec).ok().map(|c| [c.lo, c.hi])
}

/// Point metrics, ROC and bootstrap intervals for one score vector.
pub fn model_report<E: Executor>(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    b: usize,
    seed: u64,
    exec: &E,
) -> Result<ModelReport> {
    let roc = roc_auc(scores, labels)?;
    let c = confusion_metrics(scores, labels, threshold);
    let acc = move |s: &[f64], l: &[bool]| confusion_metrics(s, l, threshold).accuracy;
    let sens = move |s: &[f64], l: &[bool]| confusion_metrics(s, l, threshold).sensitivity;
    let spec = move |s: &[f64], l: &[bool]| confusion_metrics(s, l, threshold).specificity;
    Ok(ModelReport {
        auc: roc.auc,
        accuracy: finite(c.accuracy),
        sensitivity: finite(c.sensitivity),
        specificity: finite(c.specificity),
        ci: Intervals {
            auc: ci(scores, labels, auc_metric, b, seed, exec),
            accuracy: ci(scores, labels, acc, b, seed, exec),
            sensitivity: ci(scores, labels, sens, b, seed, exec),
            specificity: ci(scores, labels, spec, b, seed, exec),
        },
        roc: roc.points.iter().map(|&(f, t)| [f, t]).collect(),
        n: scores.len(),
        loocv_auc: None,
    })
}

pub fn paired_difference<E: Executor>(
    a: (&str, &[f64]),
    b: (&str, &[f64]),
    labels: &[bool],
    reps: usize,
    seed: u64,
    exec: &E,
) -> Result<PairedDifference> {
    let d = bootstrap_paired(a.1, b.1, labels, auc_metric, reps, seed, exec)?;
    Ok(PairedDifference {
        a: a.0.to_string(),
        b: b.0.to_string(),
        estimate: auc_metric(a.1, labels) - auc_metric(b.1, labels),
        ci: [d.lo, d.hi],
    })
}

const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// ROC curves of every present model on the unit square.
pub fn roc_svg(report: &EvalReport) -> String {
    let (size, pad) = (400.0, 50.0);
    let span = size - 2.0 * pad;
    let px = |x: f64| pad + x * span;
    let py = |y: f64| size - pad - y * span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {} L{} {} Z" fill="none" stroke="black"/>"#,
        px(0.0), py(0.0), px(1.0), py(0.0), px(1.0), py(1.0), px(0.0), py(1.0)
    );
    let _ = writeln!(
        s,
        r##"<path d="M{} {} L{} {}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0), py(0.0), px(1.0), py(1.0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">false positive rate</text>"#, size / 2.0, size - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">true positive rate</text>"#,
        size / 2.0, size / 2.0
    );
    let present = report.models.iter().filter_map(|(name, sec)| sec.report().map(|r| (name, r)));
    for (i, (name, r)) in present.enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let mut d = String::new();
        for (j, p) in r.roc.iter().enumerate() {
            let _ = write!(d, "{}{:.3} {:.3} ", if j == 0 { 'M' } else { 'L' }, px(p[0]), py(p[1]));
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, d.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{name} (AUC {:.3})</text>"#,
            px(0.55), py(0.05) - 16.0 * (3 - i.min(3)) as f64, r.auc
        );
    }
    s.push_str("</svg>\n");
    s
}
