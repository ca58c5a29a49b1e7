//! Macro-averaged precision/recall/F1 and the K-shot experiment grid.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::data::{sample_episode, Dataset, NONE_LABEL};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::imaginator::ImaginatorConfig;
use crate::inference::{infer, support_pool, VisualMode};
use crate::model::ModelState;
use crate::training::{train_from, TrainConfig};

/// Per-label TP/FP/FN tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionTable {
    pub labels: Vec<String>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Standard multiclass tally. `labels` fixes the row order and must contain
/// every predicted and gold label.
pub fn confusion(preds: &[String], golds: &[String], labels: &[String]) -> Result<ConfusionTable> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "prediction count {} does not match gold count {}",
            preds.len(),
            golds.len()
        )));
    }
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut table = ConfusionTable {
        labels: labels.to_vec(),
        tp: vec![0; labels.len()],
        fp: vec![0; labels.len()],
        fn_: vec![0; labels.len()],
    };
    for (p, g) in preds.iter().zip(golds.iter()) {
        let pi = *index
            .get(p.as_str())
            .ok_or_else(|| Error::Input(format!("unknown predicted label '{p}'")))?;
        let gi = *index
            .get(g.as_str())
            .ok_or_else(|| Error::Input(format!("unknown gold label '{g}'")))?;
        if pi == gi {
            table.tp[pi] += 1;
        } else {
            table.fp[pi] += 1;
            table.fn_[gi] += 1;
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub shots: usize,
    pub mode: String,
    pub seed: u64,
    pub num_queries: usize,
    pub include_none: bool,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Per-class and macro-averaged metrics. The "none" class is excluded from
/// the macro averages unless `include_none` is set; per-class rows always
/// cover every label.
pub fn macro_prf(table: &ConfusionTable, include_none: bool) -> MetricsReport {
    let mut per_class = Vec::with_capacity(table.labels.len());
    for (i, label) in table.labels.iter().enumerate() {
        let (p, r, f1) = prf(table.tp[i], table.fp[i], table.fn_[i]);
        per_class.push(ClassMetrics {
            label: label.clone(),
            precision: p,
            recall: r,
            f1,
            tp: table.tp[i],
            fp: table.fp[i],
            fn_: table.fn_[i],
        });
    }
    let averaged: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|c| include_none || c.label != NONE_LABEL)
        .collect();
    let n = averaged.len().max(1) as f64;
    let macro_precision = averaged.iter().map(|c| c.precision).sum::<f64>() / n;
    let macro_recall = averaged.iter().map(|c| c.recall).sum::<f64>() / n;
    let macro_f1 = averaged.iter().map(|c| c.f1).sum::<f64>() / n;
    let total: usize = table.tp.iter().sum::<usize>() + table.fp.iter().sum::<usize>();
    MetricsReport {
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        shots: 0,
        mode: String::new(),
        seed: 0,
        num_queries: total,
        include_none,
    }
}

/// One cell of the experiment grid; `error` is set when the cell failed and
/// the rest of the grid continued.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub shots: usize,
    pub mode: String,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone)]
pub struct ExperimentConfig {
    pub shots: Vec<usize>,
    pub modes: Vec<VisualMode>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub imaginator: ImaginatorConfig,
    pub resolution: usize,
    pub include_none: bool,
    /// Optional pre-trained state to start each cell from.
    pub init: Option<ModelState>,
}

/// Run the (K, mode, seed) grid: sample an episode, train, classify queries,
/// report metrics. Rows come back ordered (K, mode, seed).
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Vec<CellResult> {
    let mut results = Vec::new();
    for &k in &config.shots {
        for &mode in &config.modes {
            for &seed in &config.seeds {
                let outcome = run_cell(dataset, config, k, mode, seed);
                results.push(match outcome {
                    Ok(report) => CellResult {
                        shots: k,
                        mode: mode.to_string(),
                        seed,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => CellResult {
                        shots: k,
                        mode: mode.to_string(),
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                    },
                });
            }
        }
    }
    results
}

fn run_cell(
    dataset: &Dataset,
    config: &ExperimentConfig,
    k: usize,
    mode: VisualMode,
    seed: u64,
) -> Result<MetricsReport> {
    let n_ways = config.train.n_ways.min(dataset.event_types.len()).max(1);
    let episode = sample_episode(dataset, n_ways, k, seed)?;
    let mut train_cfg = config.train.clone();
    train_cfg.k_shots = k;
    train_cfg.n_ways = n_ways;
    train_cfg.seed = seed;
    let model = match &config.init {
        Some(m) => m.clone(),
        None => crate::training::init_model_for_episode(
            &episode,
            &config.encoder,
            &config.imaginator,
            config.resolution,
            seed,
        )?,
    };
    let (model, _log) = train_from(model, &episode, &train_cfg, &dataset.image_root)?;
    let pool = support_pool(&episode.support, &dataset.image_root, config.resolution)?;
    let labels = episode.labels();
    let mut preds = Vec::with_capacity(episode.queries.len());
    let mut golds = Vec::with_capacity(episode.queries.len());
    for q in &episode.queries {
        let p = infer(q, mode, &model, &pool, &dataset.image_root, seed)?;
        preds.push(p.predicted);
        golds.push(q.label.clone());
    }
    let table = confusion(&preds, &golds, &labels)?;
    let mut report = macro_prf(&table, config.include_none);
    report.shots = k;
    report.mode = mode.to_string();
    report.seed = seed;
    report.num_queries = episode.queries.len();
    Ok(report)
}

/// Results CSV: shots, mode, seed, macro metrics, then per-class P/R/F1
/// triples in label order. Failed cells carry the error message.
pub fn write_results_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let labels: Vec<String> = results
        .iter()
        .find_map(|c| c.report.as_ref())
        .map(|r| r.per_class.iter().map(|c| c.label.clone()).collect())
        .unwrap_or_default();
    let mut header = vec![
        "shots".to_string(),
        "mode".to_string(),
        "seed".to_string(),
        "macro_f1".to_string(),
        "macro_p".to_string(),
        "macro_r".to_string(),
    ];
    for l in &labels {
        header.push(format!("{l}_p"));
        header.push(format!("{l}_r"));
        header.push(format!("{l}_f1"));
    }
    header.push("error".to_string());
    w.write_record(&header)?;
    for cell in results {
        let mut row = vec![cell.shots.to_string(), cell.mode.clone(), cell.seed.to_string()];
        match &cell.report {
            Some(r) => {
                row.push(format!("{:.6}", r.macro_f1));
                row.push(format!("{:.6}", r.macro_precision));
                row.push(format!("{:.6}", r.macro_recall));
                for c in &r.per_class {
                    row.push(format!("{:.6}", c.precision));
                    row.push(format!("{:.6}", c.recall));
                    row.push(format!("{:.6}", c.f1));
                }
                row.push(String::new());
            }
            None => {
                for _ in 0..(3 + 3 * labels.len()) {
                    row.push(String::new());
                }
                row.push(cell.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and (population) standard deviation of macro-F1 across seeds, per
/// (shots, mode).
pub fn aggregate_by_cell(results: &[CellResult]) -> Vec<(usize, String, f64, f64)> {
    let mut groups: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for c in results {
        if let Some(r) = &c.report {
            groups
                .entry((c.shots, c.mode.clone()))
                .or_default()
                .push(r.macro_f1);
        }
    }
    groups
        .into_iter()
        .map(|((shots, mode), vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (shots, mode, mean, var.sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions_are_clean() {
        let labels = strs(&["a", "b", "none"]);
        let golds = strs(&["a", "b", "none", "a"]);
        let table = confusion(&golds, &golds, &labels).unwrap();
        assert!(table.fp.iter().all(|&c| c == 0));
        assert!(table.fn_.iter().all(|&c| c == 0));
        let report = macro_prf(&table, false);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn empty_lists_give_zero_table() {
        let labels = strs(&["a", "b"]);
        let table = confusion(&[], &[], &labels).unwrap();
        assert!(table.tp.iter().all(|&c| c == 0));
    }

    #[test]
    fn length_mismatch_rejected() {
        let labels = strs(&["a"]);
        assert!(confusion(&strs(&["a"]), &[], &labels).is_err());
    }

    #[test]
    fn unknown_label_rejected() {
        let labels = strs(&["a"]);
        assert!(confusion(&strs(&["z"]), &strs(&["a"]), &labels).is_err());
    }

    #[test]
    fn four_item_hand_tally() {
        // preds: a b a b ; golds: a a b b
        let labels = strs(&["a", "b"]);
        let table =
            confusion(&strs(&["a", "b", "a", "b"]), &strs(&["a", "a", "b", "b"]), &labels)
                .unwrap();
        assert_eq!(table.tp, vec![1, 1]);
        assert_eq!(table.fp, vec![1, 1]);
        assert_eq!(table.fn_, vec![1, 1]);
    }

    #[test]
    fn zero_denominator_convention() {
        let table = ConfusionTable {
            labels: strs(&["a", "b"]),
            tp: vec![0, 2],
            fp: vec![0, 0],
            fn_: vec![3, 0],
        };
        let report = macro_prf(&table, true);
        let a = &report.per_class[0];
        assert_eq!((a.precision, a.recall, a.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_computed_macro_example() {
        // (TP, FP, FN) = (3,1,1) and (2,2,0):
        // class 1: P=0.75 R=0.75 F1=0.75; class 2: P=0.5 R=1.0 F1=2/3.
        let table = ConfusionTable {
            labels: strs(&["a", "b"]),
            tp: vec![3, 2],
            fp: vec![1, 2],
            fn_: vec![1, 0],
        };
        let report = macro_prf(&table, true);
        assert!((report.per_class[0].f1 - 0.75).abs() < 1e-12);
        assert!((report.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - (0.75 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((report.macro_f1 - 0.7083).abs() < 1e-4);
    }

    #[test]
    fn include_none_toggles_only_the_average() {
        let table = ConfusionTable {
            labels: strs(&["a", "none"]),
            tp: vec![3, 0],
            fp: vec![1, 2],
            fn_: vec![1, 4],
        };
        let with = macro_prf(&table, true);
        let without = macro_prf(&table, false);
        assert_eq!(with.per_class, without.per_class);
        assert!((without.macro_f1 - with.per_class[0].f1).abs() < 1e-12);
        assert!(with.macro_f1 < without.macro_f1);
    }

    #[test]
    fn metrics_permutation_invariant() {
        let labels = strs(&["a", "b", "none"]);
        let preds = strs(&["a", "b", "none", "a", "b"]);
        let golds = strs(&["a", "a", "none", "b", "b"]);
        let base = macro_prf(&confusion(&preds, &golds, &labels).unwrap(), false);
        let perm = [4, 2, 0, 3, 1];
        let p2: Vec<String> = perm.iter().map(|&i| preds[i].clone()).collect();
        let g2: Vec<String> = perm.iter().map(|&i| golds[i].clone()).collect();
        let shuffled = macro_prf(&confusion(&p2, &g2, &labels).unwrap(), false);
        assert_eq!(base, shuffled);
    }
}
