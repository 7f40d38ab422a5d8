use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use trajgen_core::geometry::Trajectory;
use trajgen_core::io::load_trajectory;
use trajgen_core::metrics::{coverage, fid, label_set, tag_f1, ContrastiveHead, FeatureSet, FEATURIZER_ID};
use trajgen_core::model::load_checkpoint;
use trajgen_core::synth::{DatasetManifest, ManifestRecord};
use trajgen_core::Error;

use crate::config::Config;
use crate::data::{emit, trajectory_files};
use crate::{EvaluateArgs, Metric, Shortfall};

#[derive(Debug, Serialize)]
struct Failure {
    metric: &'static str,
    reason: String,
}

/// Record id a generated file belongs to: `<id>.jsonl` or `<id>_<n>.jsonl`.
fn record_for<'a>(stem: &str, by_id: &BTreeMap<&str, &'a ManifestRecord>) -> Option<&'a ManifestRecord> {
    if let Some(r) = by_id.get(stem) {
        return Some(r);
    }
    let (base, n) = stem.rsplit_once('_')?;
    n.chars().all(|c| c.is_ascii_digit()).then(|| by_id.get(base).copied()).flatten()
}

/// Metric failures caused by too few samples are reported, not fatal.
fn split_failure(metric: Metric, e: Error, failures: &mut Vec<Failure>) -> Result<Value> {
    match e {
        Error::TooFewSamples { .. } => {
            failures.push(Failure { metric: metric.name(), reason: e.to_string() });
            Ok(Value::Null)
        }
        other => Err(other).with_context(|| format!("metric {}", metric.name())),
    }
}

pub fn evaluate(cfg: &Config, a: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.real)?;
    let split = a.split.into();
    let real_records: Vec<&ManifestRecord> = manifest.split(split).collect();
    let real: Vec<Trajectory> = real_records.par_iter().map(|r| manifest.load_trajectory(r)).collect::<trajgen_core::Result<_>>()?;

    let files = trajectory_files(&a.gen)?;
    let generated: Vec<Trajectory> = files.par_iter().map(|p| load_trajectory(p)).collect::<trajgen_core::Result<_>>()?;
    let by_id: BTreeMap<&str, &ManifestRecord> = real_records.iter().map(|r| (r.id.as_str(), *r)).collect();
    // (generated index, reference record) for the paired metrics.
    let pairs: Vec<(usize, &ManifestRecord)> = files
        .iter()
        .enumerate()
        .filter_map(|(i, p)| record_for(p.file_stem()?.to_str()?, &by_id).map(|r| (i, r)))
        .collect();

    let mut metrics = a.metrics.clone();
    metrics.sort();
    metrics.dedup();
    if metrics.contains(&Metric::Clip) && (a.clip_head.is_none() || a.checkpoint.is_none()) {
        bail!("metric clip needs --clip-head (from `trajgen clip-train`) and --checkpoint");
    }

    let mut failures = Vec::new();
    let mut results = serde_json::Map::new();
    let features = if metrics.iter().any(|m| matches!(m, Metric::Fid | Metric::Coverage)) {
        Some((FeatureSet::from_trajectories(&real)?, FeatureSet::from_trajectories(&generated)?))
    } else {
        None
    };
    for &m in &metrics {
        let value = match m {
            Metric::F1 => {
                if pairs.is_empty() {
                    failures.push(Failure { metric: "f1", reason: "no generated file is named after a reference record id".into() });
                    Value::Null
                } else {
                    let gen: Vec<Trajectory> = pairs.iter().map(|&(i, _)| generated[i].clone()).collect();
                    let refs: Vec<_> = pairs.iter().map(|(_, r)| label_set(&r.tags)).collect();
                    match tag_f1(&gen, &refs, &cfg.tagging) {
                        Ok(r) => json!({ "precision": r.precision, "recall": r.recall, "f1": r.f1, "pairs": pairs.len() }),
                        Err(e) => split_failure(m, e, &mut failures)?,
                    }
                }
            }
            Metric::Fid => {
                let (r, g) = features.as_ref().expect("computed above");
                match fid(r, g) {
                    Ok(v) => json!(v),
                    Err(e) => split_failure(m, e, &mut failures)?,
                }
            }
            Metric::Coverage => {
                let (r, g) = features.as_ref().expect("computed above");
                match coverage(r, g, a.k) {
                    Ok(v) => json!({ "k": a.k, "value": v }),
                    Err(e) => split_failure(m, e, &mut failures)?,
                }
            }
            Metric::Clip => clip(&a, &generated, &pairs, &mut failures)?,
        };
        results.insert(m.name().into(), value);
    }

    let report = json!({
        "metric_space": FEATURIZER_ID,
        "config_hash": manifest.config_hash,
        "real": { "manifest": a.real.display().to_string(), "split": split, "count": real.len() },
        "generated": { "dir": a.gen.display().to_string(), "count": generated.len(), "paired": pairs.len() },
        "metrics": results,
        "failures": failures,
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(a.out.as_deref(), text.as_bytes())?;
    if !failures.is_empty() {
        let names: Vec<String> = failures.iter().map(|f| format!("{} ({})", f.metric, f.reason)).collect();
        return Err(Shortfall(format!("metric preconditions not met: {}", names.join("; "))).into());
    }
    Ok(())
}

fn clip(a: &EvaluateArgs, generated: &[Trajectory], pairs: &[(usize, &ManifestRecord)], failures: &mut Vec<Failure>) -> Result<Value> {
    let head_path = a.clip_head.as_deref().expect("checked by caller");
    let head: ContrastiveHead = read_head(head_path)?;
    let model = load_checkpoint(a.checkpoint.as_deref().expect("checked by caller"))?.model;
    if pairs.is_empty() {
        failures.push(Failure { metric: "clip", reason: "no generated file is named after a reference record id".into() });
        return Ok(Value::Null);
    }
    let text: Vec<Vec<f64>> = pairs.par_iter().map(|(_, r)| model.text_embedding(&r.caption)).collect();
    let trajs: Vec<Trajectory> = pairs.iter().map(|&(i, _)| generated[i].clone()).collect();
    match head.score(&text, &trajs) {
        Ok(r) => Ok(serde_json::to_value(r)?),
        Err(e) => split_failure(Metric::Clip, e, failures),
    }
}

fn read_head(path: &Path) -> Result<ContrastiveHead> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing contrastive head {}", path.display()))
}
