//! Ranking metrics, bucketed evaluation, ablation sweeps and PCA export.

mod metrics;
mod pca;

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LengthBucket, TaxonomyTable, Vocab};
use crate::error::{Error, Result};
use crate::hypergraph::{batch, EntryKind, PatientHypergraph};
use crate::model::{apply_variant, forward, Mode, ModelParams};
use crate::training::{fit, predict, TrainConfig};

pub use metrics::{auprc, auroc, RankedPredictions};
pub use pca::{pca_project, PcaProjection, PCA_MAX_ITERATIONS, PCA_TOLERANCE};

pub const METRICS_CSV_HEADER: &str = "variant,seed,split,bucket,n,auprc,auroc";
pub const PCA_CSV_HEADER: &str = "node_id,token,taxonomy,type,x,y";
pub const ABLATION_CSV_HEADER: &str = "variant,n_seeds,auprc_mean,auprc_std,auroc_mean,auroc_std";

/// Metrics for one slice of patients. `None` marks a metric that is
/// undefined on the slice (a class is missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub bucket: String,
    pub n: usize,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
}

impl SliceMetrics {
    fn of(bucket: &str, preds: &RankedPredictions) -> Self {
        Self {
            bucket: bucket.to_string(),
            n: preds.len(),
            auprc: auprc(preds).ok(),
            auroc: auroc(preds).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub overall: SliceMetrics,
    /// Short, medium, long.
    pub buckets: Vec<SliceMetrics>,
}

impl MetricReport {
    pub fn auroc(&self) -> f64 {
        self.overall.auroc.expect("overall metrics are defined")
    }

    pub fn auprc(&self) -> f64 {
        self.overall.auprc.expect("overall metrics are defined")
    }

    pub fn slices(&self) -> impl Iterator<Item = &SliceMetrics> {
        std::iter::once(&self.overall).chain(&self.buckets)
    }

    pub fn csv_rows(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        for s in self.slices() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.variant,
                self.seed,
                self.split,
                s.bucket,
                s.n,
                fmt(s.auprc),
                fmt(s.auroc)
            );
        }
        out
    }
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    write_file(path, &out)
}

/// Reads a metrics CSV back into reports (one per variant/seed/split run).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing metrics header".into(),
            })
        }
    }
    let mut out: Vec<MetricReport> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        let parse_err = |m: &str| Error::Parse {
            line: line_no,
            message: m.to_string(),
        };
        if f.len() != 7 {
            return Err(parse_err("expected 7 fields"));
        }
        let metric = |s: &str| -> Result<Option<f64>> {
            if s == "undefined" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err("bad metric"))
            }
        };
        let slice = SliceMetrics {
            bucket: f[3].to_string(),
            n: f[4].parse().map_err(|_| parse_err("bad n"))?,
            auprc: metric(f[5])?,
            auroc: metric(f[6])?,
        };
        let seed: u64 = f[1].parse().map_err(|_| parse_err("bad seed"))?;
        if slice.bucket == "all" {
            out.push(MetricReport {
                variant: f[0].to_string(),
                seed,
                split: f[2].to_string(),
                overall: slice,
                buckets: Vec::new(),
            });
        } else {
            out.last_mut()
                .ok_or_else(|| parse_err("bucket row before its `all` row"))?
                .buckets
                .push(slice);
        }
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Eval-mode predictions for the whole split, sliced by note length.
pub fn evaluate(
    params: &ModelParams,
    graphs: &[PatientHypergraph],
    seed: u64,
    split: &str,
) -> Result<MetricReport> {
    if graphs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let preds = predict(params, graphs, 64)?;
    let overall = SliceMetrics::of("all", &preds);
    if overall.auroc.is_none() || overall.auprc.is_none() {
        return Err(Error::UndefinedMetric(format!(
            "split `{split}` needs both classes"
        )));
    }
    let buckets = LengthBucket::ALL
        .iter()
        .map(|&b| {
            let mut slice = RankedPredictions::default();
            for (i, g) in graphs.iter().enumerate() {
                if LengthBucket::of(g.token_count) == b {
                    slice.patient_ids.push(preds.patient_ids[i].clone());
                    slice.scores.push(preds.scores[i]);
                    slice.labels.push(preds.labels[i]);
                }
            }
            SliceMetrics::of(b.name(), &slice)
        })
        .collect();
    Ok(MetricReport {
        variant: params.variant.name.clone(),
        seed,
        split: split.to_string(),
        overall,
        buckets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub runs: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.variant,
                r.runs.len(),
                r.auprc_mean,
                r.auprc_std,
                r.auroc_mean,
                r.auroc_std
            );
        }
        out
    }
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Fits and evaluates every `(variant, seed)` pair; `progress` is called
/// after each run.
pub fn run_ablations(
    train: &[PatientHypergraph],
    test: &[PatientHypergraph],
    base: &TrainConfig,
    variants: &[String],
    seeds: &[u64],
    mut progress: impl FnMut(&MetricReport),
) -> Result<AblationTable> {
    for v in variants {
        apply_variant(v)?;
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let config = TrainConfig {
                variant: v.clone(),
                seed,
                ..base.clone()
            };
            let fitted = fit(train, &config)?;
            let report = evaluate(&fitted.params, test, seed, "test")?;
            progress(&report);
            runs.push(report);
        }
        let (auprc_mean, auprc_std) =
            mean_std(&runs.iter().map(MetricReport::auprc).collect::<Vec<_>>());
        let (auroc_mean, auroc_std) =
            mean_std(&runs.iter().map(MetricReport::auroc).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: v.clone(),
            auprc_mean,
            auprc_std,
            auroc_mean,
            auroc_std,
            runs,
        });
    }
    Ok(AblationTable { rows })
}

/// One projected word node.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedNode {
    pub node_id: usize,
    pub token: String,
    pub taxonomy: String,
    pub kind: EntryKind,
    pub x: f64,
    pub y: f64,
}

/// Final-stage word-node embeddings of one patient, projected to 2-d.
/// Each node is tagged with the taxonomy of its first note.
pub fn export_pca(
    params: &ModelParams,
    graph: &PatientHypergraph,
    vocab: &Vocab,
    taxonomies: &TaxonomyTable,
    seed: u64,
) -> Result<(PcaProjection, Vec<ProjectedNode>)> {
    let b = batch(&[graph])?;
    let trace = forward(&b, params, Mode::Eval)?;
    let nodes = &trace.final_state().nodes;
    let projection = pca_project(nodes, 2, seed)?;
    let rows = graph
        .node_tokens
        .iter()
        .zip(&graph.node_meta)
        .enumerate()
        .map(|(i, (&tok, meta))| ProjectedNode {
            node_id: i,
            token: vocab.token(tok).unwrap_or("?").to_string(),
            taxonomy: taxonomies
                .name(meta.taxonomy_index as usize)
                .unwrap_or("?")
                .to_string(),
            kind: meta.kind,
            x: projection.coordinates.get(i, 0),
            y: projection.coordinates.get(i, 1),
        })
        .collect();
    Ok((projection, rows))
}

pub fn write_pca_csv(path: &Path, rows: &[ProjectedNode]) -> Result<()> {
    let mut out = format!("{PCA_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.node_id, r.token, r.taxonomy, r.kind as u8, r.x, r.y
        );
    }
    write_file(path, &out)
}
