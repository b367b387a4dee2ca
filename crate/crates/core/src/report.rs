//! Search reports and the windowed top-k comparison between two logs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchDescription;
use crate::dist::{best_architectures, SearchLog, Strategy};

pub const REPORT_SCHEMA: &str = "nasforge-report";
pub const REPORT_VERSION: u64 = 1;

/// Samples per curve point unless configured otherwise.
pub const DEFAULT_WINDOW: usize = 400;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report: {0}")]
    Format(String),
    #[error("unsupported report version {0}")]
    Version(u64),
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub sample: u64,
    pub reward: f64,
    pub metric: f64,
    pub description: ArchDescription,
}

/// State of a run after `samples` architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples: usize,
    /// Mean reward within the window ending here.
    pub window_mean: f64,
    /// Mean of the top `k` rewards seen so far.
    pub top_k_mean: f64,
    pub best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: u64,
    pub strategy: Strategy,
    pub task: String,
    pub seed: u64,
    pub samples: usize,
    pub dropped: usize,
    pub updates: usize,
    pub k: usize,
    pub window: usize,
    pub best: Vec<BestEntry>,
    pub curve: Vec<CurvePoint>,
    /// Greedy decode of the final controller, when requested.
    pub greedy: Option<ArchDescription>,
}

impl Report {
    pub fn from_log(log: &SearchLog, k: usize, window: usize) -> Result<Report, ReportError> {
        if k == 0 || window == 0 {
            return Err(ReportError::Input("k and window must be at least 1".into()));
        }
        let rewards: Vec<f64> = log.samples().map(|s| s.reward).collect();
        let curve = windows(rewards.len(), window)
            .map(|end| {
                let start = (end - 1) / window * window;
                let win = &rewards[start..end];
                CurvePoint {
                    samples: end,
                    window_mean: win.iter().sum::<f64>() / win.len() as f64,
                    top_k_mean: top_k_mean(&rewards[..end], k),
                    best: rewards[..end].iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        Ok(Report {
            schema: REPORT_SCHEMA.to_string(),
            version: REPORT_VERSION,
            strategy: log.header.strategy,
            task: log.header.task.clone(),
            seed: log.header.seed,
            samples: rewards.len(),
            dropped: log.drops().map(|d| d.samples.len()).sum(),
            updates: log.updates(),
            k,
            window,
            best: best_architectures(log, k)
                .into_iter()
                .map(|s| BestEntry {
                    sample: s.sample,
                    reward: s.reward,
                    metric: s.metric,
                    description: s.description.clone(),
                })
                .collect(),
            curve,
            greedy: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }

    /// Parses a report, rejecting other schemas and versions.
    pub fn from_json(text: &str) -> Result<Report, ReportError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| ReportError::Format(e.to_string()))?;
        if v.get("schema").and_then(|s| s.as_str()) != Some(REPORT_SCHEMA) {
            return Err(ReportError::Format("not a report".into()));
        }
        match v.get("version").and_then(|s| s.as_u64()) {
            Some(REPORT_VERSION) => {}
            Some(other) => return Err(ReportError::Version(other)),
            None => return Err(ReportError::Format("missing version".into())),
        }
        serde_json::from_value(v).map_err(|e| ReportError::Format(e.to_string()))
    }

    /// Reward curve as tab-separated text with a header row.
    pub fn curve_tsv(&self) -> String {
        let mut out = String::from("samples\twindow_mean\ttop_k_mean\tbest\n");
        for p in &self.curve {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", p.samples, p.window_mean, p.top_k_mean, p.best));
        }
        out
    }
}

/// Window end points: every multiple of `window` below `n`, then `n`.
fn windows(n: usize, window: usize) -> impl Iterator<Item = usize> {
    (1..=n.div_ceil(window)).map(move |i| (i * window).min(n))
}

/// Mean of the `k` largest values (all of them if fewer).
pub fn top_k_mean(rewards: &[f64], k: usize) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    let mut v = rewards.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.truncate(k.max(1));
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub samples: usize,
    pub nas: f64,
    pub random: f64,
    pub difference: f64,
}

/// Top-`k` average of each log over its first `w`, `2w`, ... samples, and
/// their difference. The curve covers the shorter log and has
/// `ceil(min / window)` points.
pub fn compare(nas: &SearchLog, random: &SearchLog, k: usize, window: usize) -> Result<Vec<ComparePoint>, ReportError> {
    if k == 0 || window == 0 {
        return Err(ReportError::Input("k and window must be at least 1".into()));
    }
    let a: Vec<f64> = nas.samples().map(|s| s.reward).collect();
    let b: Vec<f64> = random.samples().map(|s| s.reward).collect();
    if a.is_empty() || b.is_empty() {
        return Err(ReportError::Input("both logs need at least one sample".into()));
    }
    let n = a.len().min(b.len());
    Ok(windows(n, window)
        .map(|end| {
            let (x, y) = (top_k_mean(&a[..end], k), top_k_mean(&b[..end], k));
            ComparePoint {
                samples: end,
                nas: x,
                random: y,
                difference: x - y,
            }
        })
        .collect())
}

pub fn compare_tsv(points: &[ComparePoint]) -> String {
    let mut out = String::from("samples\tnas_top_k\trandom_top_k\tdifference\n");
    for p in points {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", p.samples, p.nas, p.random, p.difference));
    }
    out
}
