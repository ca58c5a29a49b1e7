//! Subcommand implementations behind the `vfevent` binary: validate, train,
//! imagine, infer, eval.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset_with_root, load_image, sample_episode, NONE_LABEL};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, write_results_csv, ExperimentConfig};
use crate::inference::{infer_batch, write_predictions, VisualMode};
use crate::seeding;
use crate::training::train;

#[derive(Debug, serde::Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    event_type: String,
    #[serde(default)]
    image: Option<String>,
}

/// Lenient manifest validation: collects every violation instead of failing
/// at the first. Returns the violation list.
pub fn cmd_validate(config: &RunConfig) -> Result<Vec<String>> {
    let manifest = config.require_dataset()?;
    let root = config
        .image_root
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let raw = fs::read_to_string(manifest)?;

    let mut violations = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut any = false;
    let sidecar: Option<HashSet<String>> = {
        let mut p = manifest.as_os_str().to_owned();
        p.push(".labels");
        let p = PathBuf::from(p);
        p.is_file().then(|| {
            fs::read_to_string(&p)
                .map(|s| s.lines().map(|l| l.trim().to_string()).collect())
                .unwrap_or_default()
        })
    };

    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let rec: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                violations.push(format!("line {}: malformed record: {e}", lineno + 1));
                continue;
            }
        };
        if rec.text.trim().is_empty() {
            violations.push(format!("record '{}': empty text", rec.id));
        }
        if !seen.insert(rec.id.clone()) {
            violations.push(format!("record '{}': duplicate id", rec.id));
        }
        if let Some(labels) = &sidecar {
            if rec.event_type != NONE_LABEL && !labels.contains(&rec.event_type) {
                violations.push(format!(
                    "record '{}': label '{}' not in sidecar label list",
                    rec.id, rec.event_type
                ));
            }
        }
        if let Some(img) = &rec.image {
            let path = root.join(img);
            if !path.is_file() {
                violations.push(format!("record '{}': missing image {}", rec.id, img));
            } else if let Err(e) = load_image(&path, config.resolution) {
                violations.push(format!("record '{}': undecodable image {img}: {e}", rec.id));
            }
        }
    }
    if !any {
        violations.push("empty dataset".to_string());
    }

    for v in &violations {
        println!("{v}");
    }
    println!("{} errors", violations.len());
    config.write_provenance(&config.out_dir.join("provenance.json"))?;
    Ok(violations)
}

/// Sample an episode per the config, train, and write the checkpoint, the
/// training-log CSV and the provenance echo to the output directory.
pub fn cmd_train(config: &RunConfig) -> Result<PathBuf> {
    let manifest = config.require_dataset()?;
    let dataset = load_dataset_with_root(manifest, config.image_root.as_deref())?;
    let n_ways = config.train.n_ways.min(dataset.event_types.len()).max(1);
    let episode = sample_episode(&dataset, n_ways, config.train.k_shots, config.seed)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    train_cfg.n_ways = n_ways;

    let (model, log) = train(
        &episode,
        &train_cfg,
        &config.encoder,
        &config.imaginator,
        config.resolution,
        &dataset.image_root,
    )?;

    fs::create_dir_all(&config.out_dir)?;
    let ckpt = config.out_dir.join("checkpoint.vfck");
    checkpoint::save(&model, &ckpt)?;
    log.write_csv(&config.out_dir.join("train_log.csv"))?;
    config.write_provenance(&config.out_dir.join("provenance.json"))?;

    match (log.final_class_loss(), log.final_visual_loss()) {
        (Some(c), Some(v)) => println!("final class_loss {c:.6}, visual_loss {v:.6}"),
        (Some(c), None) => println!("final class_loss {c:.6}"),
        (None, Some(v)) => println!("final visual_loss {v:.6}"),
        (None, None) => println!("no training steps executed"),
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(ckpt)
}

/// Synthesize an image from text with a trained checkpoint and write it as
/// a PNG.
pub fn cmd_imagine(ckpt: &Path, text: &str, seed: u64, out: &Path) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Input("empty text".into()));
    }
    let model = checkpoint::load(ckpt)?;
    let tokens = model.tokenizer.encode(text);
    let image = model.imaginator.synthesize(
        &tokens,
        model.imaginator.sample_steps,
        seeding::derive_seed(seed, "imagine-cli"),
    )?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    crate::data::save_image(&image, out)?;
    println!("{}", out.display());
    Ok(())
}

/// Batch inference over a manifest; writes JSONL predictions.
pub fn cmd_infer(
    ckpt: &Path,
    manifest: &Path,
    image_root: Option<&Path>,
    mode: VisualMode,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let dataset = load_dataset_with_root(manifest, image_root)?;
    let pool = crate::inference::support_pool(
        &dataset.instances,
        &dataset.image_root,
        model.resolution,
    )?;
    let records = infer_batch(
        &dataset.instances,
        mode,
        &model,
        &pool,
        &dataset.image_root,
        seed,
    )?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_predictions(&records, out)?;
    println!("{} predictions written to {}", records.len(), out.display());
    Ok(())
}

/// Run the (K, mode, seed) experiment grid and write results CSV/JSON.
/// Returns true when every cell succeeded.
pub fn cmd_eval(config: &RunConfig, ckpt: Option<&Path>) -> Result<bool> {
    let manifest = config.require_dataset()?;
    let dataset = load_dataset_with_root(manifest, config.image_root.as_deref())?;
    let modes: Vec<VisualMode> = config
        .modes
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_>>()?;
    let init = ckpt.map(checkpoint::load).transpose()?;
    let exp = ExperimentConfig {
        shots: config.shots.clone(),
        modes,
        seeds: config.seeds.clone(),
        train: config.train.clone(),
        encoder: config.encoder.clone(),
        imaginator: config.imaginator.clone(),
        resolution: config.resolution,
        include_none: config.include_none,
        init,
    };
    let results = run_experiment(&dataset, &exp);

    fs::create_dir_all(&config.out_dir)?;
    write_results_csv(&results, &config.out_dir.join("results.csv"))?;
    let json = serde_json::json!({ "config": config, "cells": results });
    fs::write(
        config.out_dir.join("results.json"),
        serde_json::to_string_pretty(&json)
            .map_err(|e| Error::Validation(format!("serializing results: {e}")))?,
    )?;
    config.write_provenance(&config.out_dir.join("provenance.json"))?;

    let mut ok = true;
    for cell in &results {
        match &cell.report {
            Some(r) => println!(
                "shots={} mode={} seed={} macro_f1={:.4} macro_p={:.4} macro_r={:.4}",
                cell.shots, cell.mode, cell.seed, r.macro_f1, r.macro_precision, r.macro_recall
            ),
            None => {
                ok = false;
                println!(
                    "shots={} mode={} seed={} FAILED: {}",
                    cell.shots,
                    cell.mode,
                    cell.seed,
                    cell.error.as_deref().unwrap_or("unknown")
                );
            }
        }
    }
    for (shots, mode, mean, sd) in crate::eval::aggregate_by_cell(&results) {
        println!("summary shots={shots} mode={mode} macro_f1 mean={mean:.4} sd={sd:.4}");
    }
    Ok(ok)
}
