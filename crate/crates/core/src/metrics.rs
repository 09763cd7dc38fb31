//! Landmark target registration error and tabular reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub id: String,
    pub position: Vec3,
}

/// Ordered landmarks with unique ids; positions in world mm.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &entries {
            if !seen.insert(l.id.as_str()) {
                return Err(Error::DuplicateId(l.id.clone()));
            }
            if l.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("landmark {} is not finite", l.id)));
            }
        }
        Ok(LandmarkSet { entries })
    }

    /// Landmarks numbered "1".."n".
    pub fn from_points(points: &[Vec3]) -> Self {
        let entries = points
            .iter()
            .enumerate()
            .map(|(i, p)| Landmark { id: (i + 1).to_string(), position: *p })
            .collect();
        LandmarkSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.entries.iter()
    }

    pub fn get(&self, id: &str) -> Option<Vec3> {
        self.entries.iter().find(|l| l.id == id).map(|l| l.position)
    }

    /// Applies `f` to every position, keeping ids.
    pub fn map_positions<F: Fn(&Vec3) -> Vec3>(&self, f: F) -> LandmarkSet {
        LandmarkSet {
            entries: self
                .entries
                .iter()
                .map(|l| Landmark { id: l.id.clone(), position: f(&l.position) })
                .collect(),
        }
    }
}

/// Summary statistics of a set of distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (n − 1 divisor); 0 for a single value.
    pub sd: f64,
}

impl TreSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, sd) = mean_sd(values);
        Some(TreSummary {
            count: values.len(),
            mean,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            sd,
        })
    }
}

/// Mean and sample standard deviation; the sd of a single value is 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreReport {
    /// (id, distance mm) in the order of the fixed set.
    pub pairs: Vec<(String, f64)>,
    /// Ids present in only one of the two sets.
    pub unmatched: Vec<String>,
    pub summary: TreSummary,
}

/// Per-id Euclidean distances between two landmark sets.
pub fn tre(fixed: &LandmarkSet, moving: &LandmarkSet) -> Result<TreReport> {
    let lookup: HashMap<&str, &Vec3> = moving.iter().map(|l| (l.id.as_str(), &l.position)).collect();
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for l in fixed.iter() {
        match lookup.get(l.id.as_str()) {
            Some(p) => pairs.push((l.id.clone(), (l.position - *p).norm())),
            None => unmatched.push(l.id.clone()),
        }
    }
    let fixed_ids: HashSet<&str> = fixed.iter().map(|l| l.id.as_str()).collect();
    unmatched.extend(moving.iter().filter(|l| !fixed_ids.contains(l.id.as_str())).map(|l| l.id.clone()));
    let d: Vec<f64> = pairs.iter().map(|(_, d)| *d).collect();
    let summary = TreSummary::from_values(&d).ok_or(Error::NoCommonLandmarks)?;
    Ok(TreReport { pairs, unmatched, summary })
}

/// One row of a before/after table.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub label: String,
    pub landmarks: usize,
    pub before: TreSummary,
    pub after: TreSummary,
}

/// "mean (min - max)" with two decimals.
pub fn format_cell(s: &TreSummary) -> String {
    format!("{:.2} ({:.2} - {:.2})", s.mean, s.min, s.max)
}

const HEADER: [&str; 4] = ["Volume", "Landmarks", "Before registration", "After registration"];
const WIDTHS: [usize; 4] = [8, 11, 24, 24];

fn push_row(out: &mut String, cols: [&str; 4]) {
    let line = format!(
        "{:<w0$}{:<w1$}{:<w2$}{}",
        cols[0],
        cols[1],
        cols[2],
        cols[3],
        w0 = WIDTHS[0],
        w1 = WIDTHS[1],
        w2 = WIDTHS[2]
    );
    out.push_str(line.trim_end());
    out.push('\n');
}

/// Fixed-width before/after table with a trailing `Mean±sd` row computed
/// over the per-case means (landmark column: one decimal, errors: two).
pub fn format_report(cases: &[CaseRow]) -> String {
    let mut out = String::new();
    push_row(&mut out, HEADER);
    for c in cases {
        push_row(&mut out, [&c.label, &c.landmarks.to_string(), &format_cell(&c.before), &format_cell(&c.after)]);
    }
    if !cases.is_empty() {
        let counts: Vec<f64> = cases.iter().map(|c| c.landmarks as f64).collect();
        let before: Vec<f64> = cases.iter().map(|c| c.before.mean).collect();
        let after: Vec<f64> = cases.iter().map(|c| c.after.mean).collect();
        let (cm, cs) = mean_sd(&counts);
        let (bm, bs) = mean_sd(&before);
        let (am, as_) = mean_sd(&after);
        let mut agg = [String::new(), String::new(), String::new()];
        let _ = write!(agg[0], "{cm:.1}±{cs:.1}");
        let _ = write!(agg[1], "{bm:.2}±{bs:.2}");
        let _ = write!(agg[2], "{am:.2}±{as_:.2}");
        push_row(&mut out, ["Mean±sd", &agg[0], &agg[1], &agg[2]]);
    }
    out
}

/// Plain report for a single pair of landmark sets.
pub fn format_tre(report: &TreReport) -> String {
    let mut out = String::from("id,tre_mm\n");
    for (id, d) in &report.pairs {
        let _ = writeln!(out, "{id},{d:.6}");
    }
    let s = &report.summary;
    let _ = writeln!(
        out,
        "# pairs {} mean {:.2} min {:.2} max {:.2} sd {:.2}",
        s.count, s.mean, s.min, s.max, s.sd
    );
    if !report.unmatched.is_empty() {
        let _ = writeln!(out, "# unmatched {}", report.unmatched.join(" "));
    }
    out
}
