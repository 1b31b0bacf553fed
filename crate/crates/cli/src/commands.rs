use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vidprism::checkpoint::{write_atomic, Checkpoint};
use vidprism::dbi::GateMatrix;
use vidprism::feature_io::{generate_synthetic, read_vpf, write_vpf_to, Dataset};
use vidprism::model::Model;
use vidprism::rgsta::MergeTrace;
use vidprism::trainer::{self, run_ablation, split_dataset, AblationAxis, AblationTable, ExpertUsage, TrainSinks};
use vidprism::Graph;

use crate::config::{DataSource, RunConfig};
use crate::CliError;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match cfg.source()? {
        DataSource::Synthetic(spec) => Ok(generate_synthetic(&spec)?),
        DataSource::File(path) => {
            read_vpf(&path).map_err(|e| CliError::Usage(format!("cannot load {}: {e}", path.display())))
        }
    }
}

fn csv_bytes(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Usage(e.to_string());
    w.write_record(&header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// `class,expert_0,…,expert_{N−1},cohort`.
pub fn usage_csv(usage: &ExpertUsage) -> Result<Vec<u8>, CliError> {
    let mut header = vec!["class".to_string()];
    header.extend((0..usage.num_experts).map(|e| format!("expert_{e}")));
    header.push("cohort".into());
    let rows = usage
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.class.to_string()];
            row.extend(r.weights.iter().map(|w| w.to_string()));
            row.push(r.cohort.name().into());
            row
        })
        .collect();
    csv_bytes(header, rows)
}

pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let DataSource::Synthetic(spec) = cfg.source()? else {
        return Err(CliError::Usage("gen needs a synthetic spec, not `data`".into()));
    };
    let ds = generate_synthetic(&spec)?;
    let bytes = write_vpf_to(&ds)?;
    let path = out_dir(cfg)?.join("data.vpf");
    write_atomic(&path, &bytes)?;
    println!("wrote {} clips to {}", ds.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    train_seconds: f64,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let (train_set, eval_set) = split_dataset(&ds, cfg.eval_fraction(), cfg.seed())?;
    let mut model = Model::new(cfg.model_config(ds.dim, ds.num_classes))?;
    let tc = cfg.train_config();
    let dir = out_dir(cfg)?;

    let mut log = Vec::new();
    let start = Instant::now();
    let result = {
        let mut sinks = TrainSinks {
            step_log: Some(&mut log),
            checkpoint: Some(dir.join("checkpoint.json")),
        };
        trainer::train(&mut model, &train_set, &eval_set, &tc, &mut sinks)
    };
    let seconds = start.elapsed().as_secs_f64();
    write_atomic(&dir.join("steps.jsonl"), &log)?;
    let report = result?;

    write_atomic(&dir.join("report.json"), &json_bytes(&report)?)?;
    write_atomic(&dir.join("usage.csv"), &usage_csv(&report.usage)?)?;
    write_atomic(
        &dir.join("timing.json"),
        &json_bytes(&Timing { train_seconds: seconds })?,
    )?;
    println!(
        "trained {} epochs: train accuracy {:.4}, eval accuracy {:.4} ({seconds:.1} s)",
        tc.epochs, report.final_train_accuracy, report.final_eval_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct Inspection {
    clip: usize,
    clip_id: String,
    label: usize,
    prediction: usize,
    logits: Vec<f64>,
    readout_weights: Vec<f64>,
    merge_traces: Vec<MergeTrace>,
    gate_matrix: GateMatrix,
}

pub fn inspect(cfg: &RunConfig, checkpoint: &Path, clip: usize) -> Result<(), CliError> {
    let model = Checkpoint::load(checkpoint)
        .and_then(|c| c.restore())
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let ds = load_data(cfg)?;
    let Some(seq) = ds.clips.get(clip) else {
        return Err(CliError::Usage(format!(
            "clip {clip} out of range; dataset has {} clips",
            ds.len()
        )));
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &seq.frames)?;
    let logits = g.value(out.logits).data().to_vec();
    let inspection = Inspection {
        clip,
        clip_id: seq.clip_id.clone(),
        label: seq.label,
        prediction: vidprism::rgsta::argmax(&logits),
        logits,
        readout_weights: g.value(out.weights).data().to_vec(),
        merge_traces: out.traces,
        gate_matrix: out.gates,
    };
    let json = serde_json::to_string_pretty(&inspection).map_err(|e| CliError::Usage(e.to_string()))?;
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{json}");
    Ok(())
}

fn ablation_csv(table: &AblationTable) -> Result<Vec<u8>, CliError> {
    let header = [
        "variant",
        "train_accuracy",
        "eval_accuracy",
        "cls",
        "rank",
        "div",
        "gate",
        "total",
    ]
    .map(String::from)
    .to_vec();
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let l = &r.loss;
            let mut row = vec![r.variant.clone()];
            row.extend(
                [r.train_accuracy, r.eval_accuracy, l.cls, l.rank, l.div, l.gate, l.total].map(|v| v.to_string()),
            );
            row
        })
        .collect();
    csv_bytes(header, rows)
}

pub fn ablate(cfg: &RunConfig, axis: &str) -> Result<(), CliError> {
    let Some(axis) = AblationAxis::parse(axis) else {
        let valid: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
        return Err(CliError::Usage(format!(
            "unknown axis `{axis}`; valid axes: {}",
            valid.join(", ")
        )));
    };
    let ds = load_data(cfg)?;
    let (train_set, eval_set) = split_dataset(&ds, cfg.eval_fraction(), cfg.seed())?;
    let base = cfg.model_config(ds.dim, ds.num_classes);
    let table = run_ablation(axis, &base, &cfg.train_config(), &train_set, &eval_set)?;
    let path = out_dir(cfg)?.join(format!("ablation_{}.csv", axis.name()));
    write_atomic(&path, &ablation_csv(&table)?)?;
    for r in &table.rows {
        println!(
            "{:<14} eval {:.4}  train {:.4}",
            r.variant, r.eval_accuracy, r.train_accuracy
        );
    }
    Ok(())
}
