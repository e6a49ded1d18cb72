//! Command-line entry points for training, evaluation, parameter inspection,
//! attention export, and dataset generation.
//!
//! Exit codes: 0 success, 2 config/load errors, 3 non-finite loss during
//! training, 1 anything else. Failures print one JSON line to stderr.

use clap::{Args, Parser, Subcommand};
use grounder::attention::{reg_attention_map, write_csv, write_pgm};
use grounder::boxes::iou;
use grounder::budget::closed_form_budget;
use grounder::checkpoint;
use grounder::config::{validate_config, ModelConfig};
use grounder::data::{export_dataset, generate_sample, make_split, GenConfig, Sample, Vocab};
use grounder::model::Model;
use grounder::trainer::{param_budget, train, AdamW, TrainError, TrainOptions};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_NONFINITE: u8 = 3;

#[derive(Parser)]
#[command(name = "grounder", about = "Referring-expression grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataSpec {
    /// Number of evaluation samples to generate.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Base seed for the generated dataset.
    #[arg(long, default_value_t = 9)]
    data_seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config overrides as dotted.key=value, applied after the file parse.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long, default_value_t = 2000)]
        train_samples: usize,
        #[arg(long, default_value_t = 500)]
        eval_samples: usize,
        /// Base seed for dataset generation (model seed comes from the config).
        #[arg(long, default_value_t = 9)]
        data_seed: u64,
    },
    /// Evaluate a checkpoint on freshly generated data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataSpec,
        /// Comma-separated IoU thresholds for the precision columns.
        #[arg(long, default_value = "0.5,0.6,0.8")]
        iou: String,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter budget and the enumeration/formula cross-check.
    InspectParams {
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Export the box token's attention over patches as CSV and PGM.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Output path prefix; writes {out}.csv and {out}.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset directory with a manifest and raw images.
    GenData {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 9)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        #[arg(long, default_value_t = 12)]
        max_text_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

struct CmdError {
    code: u8,
    message: String,
}

impl CmdError {
    fn new(code: u8, message: impl Into<String>) -> CmdError {
        CmdError { code, message: message.into() }
    }
}

impl<E: std::error::Error> From<E> for CmdError {
    fn from(e: E) -> CmdError {
        CmdError::new(1, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.message }));
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), CmdError> {
    match cmd {
        Command::Train { config, out, set, train_samples, eval_samples, data_seed } => {
            cmd_train(&config, &out, &set, train_samples, eval_samples, data_seed)
        }
        Command::Eval { checkpoint, data, iou, out } => {
            cmd_eval(&checkpoint, &data, &iou, out.as_deref())
        }
        Command::InspectParams { config, checkpoint, set } => {
            cmd_inspect_params(config.as_deref(), checkpoint.as_deref(), &set)
        }
        Command::ExportAttention { checkpoint, sample_seed, out } => {
            cmd_export_attention(&checkpoint, sample_seed, &out)
        }
        Command::GenData { samples, seed, canvas, max_text_len, out } => {
            cmd_gen_data(samples, seed, canvas, max_text_len, &out)
        }
    }
}

/// Apply a `dotted.key=value` override: the segment after the last dot names
/// the config field, the value parses as JSON (bare words fall back to
/// strings).
fn apply_override(raw: &mut Value, spec: &str) -> Result<(), CmdError> {
    let (key_path, value_str) = spec
        .split_once('=')
        .ok_or_else(|| CmdError::new(EXIT_CONFIG, format!("override {spec:?} is not key=value")))?;
    let key = key_path.rsplit('.').next().unwrap();
    let value: Value = serde_json::from_str(value_str)
        .unwrap_or_else(|_| Value::String(value_str.to_string()));
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| CmdError::new(EXIT_CONFIG, "config root must be an object"))?;
    obj.insert(key.to_string(), value);
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<(ModelConfig, Value), CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::new(EXIT_CONFIG, format!("reading {}: {e}", path.display())))?;
    let mut raw: Value = serde_json::from_str(&text)
        .map_err(|e| CmdError::new(EXIT_CONFIG, format!("parsing {}: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut raw, spec)?;
    }
    let cfg = validate_config(&raw).map_err(|e| CmdError::new(EXIT_CONFIG, e.to_string()))?;
    Ok((cfg.clone(), cfg.to_json()))
}

fn load_checkpoint(path: &Path) -> Result<(Model, AdamW), CmdError> {
    checkpoint::load(path).map_err(|e| CmdError::new(EXIT_CONFIG, e.to_string()))
}

fn gen_config(cfg: &ModelConfig) -> GenConfig {
    GenConfig { canvas_size: cfg.image_size, ..GenConfig::default() }
}

fn cmd_train(
    config: &Path,
    out: &Path,
    overrides: &[String],
    train_samples: usize,
    eval_samples: usize,
    data_seed: u64,
) -> Result<(), CmdError> {
    let (cfg, resolved) = load_config(config, overrides)?;
    std::fs::create_dir_all(out)?;

    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": resolved,
        "overrides": overrides,
        "data": {
            "train_samples": train_samples,
            "eval_samples": eval_samples,
            "seed": data_seed,
            "canvas": cfg.image_size,
        },
        "outputs": {
            "metrics": "metrics.jsonl",
            "last_checkpoint": "last.ckpt",
            "best_checkpoint": "best.ckpt",
        },
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;

    let vocab = Vocab::standard();
    let split = make_split(
        &gen_config(&cfg),
        train_samples,
        eval_samples,
        data_seed,
        &vocab,
        cfg.max_text_len,
    )
    .map_err(|e| CmdError::new(EXIT_CONFIG, e.to_string()))?;

    let mut model = Model::new(cfg.clone(), cfg.seed);
    let mut opt = AdamW::new(&model.store);
    let opts = TrainOptions {
        log_path: Some(out.join("metrics.jsonl")),
        eval_every: 1,
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let outcome = train(&mut model, &mut opt, &split, &opts).map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => CmdError::new(EXIT_NONFINITE, e.to_string()),
        other => CmdError::new(1, other.to_string()),
    })?;
    println!("{}", serde_json::to_string(&outcome.final_eval).unwrap());
    Ok(())
}

fn precision_report(
    model: &Model,
    samples: &[Sample],
    taus: &[f64],
) -> Result<Value, CmdError> {
    let mut ious = Vec::with_capacity(samples.len());
    let mut amb = Vec::new();
    for s in samples {
        let fwd = model.forward(&s.image, &s.word_ids)?;
        let v = iou(&fwd.predicted_box(), &s.gt_box).unwrap_or(0.0);
        ious.push(v);
        if s.ambiguous {
            amb.push(v);
        }
    }
    let table = |vals: &[f64]| -> Value {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let precision: BTreeMap<String, f64> = taus
            .iter()
            .map(|&t| {
                let frac = vals.iter().filter(|&&v| v >= t).count() as f64 / vals.len() as f64;
                (format!("{t}"), frac)
            })
            .collect();
        json!({ "n": vals.len(), "mean_iou": mean, "precision": precision })
    };
    let mut report = table(&ious);
    report["ambiguous"] = if amb.is_empty() { Value::Null } else { table(&amb) };
    Ok(report)
}

fn cmd_eval(
    ckpt: &Path,
    data: &DataSpec,
    iou_list: &str,
    out: Option<&Path>,
) -> Result<(), CmdError> {
    if data.samples == 0 {
        return Err(CmdError::new(EXIT_CONFIG, "eval requires at least one sample"));
    }
    let taus: Vec<f64> = iou_list
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CmdError::new(EXIT_CONFIG, format!("bad --iou list: {e}")))?;
    let (model, _) = load_checkpoint(ckpt)?;
    let vocab = Vocab::standard();
    let base = data.data_seed << 32;
    let samples: Vec<Sample> = (0..data.samples as u64)
        .map(|i| generate_sample(base + i, &gen_config(&model.cfg), &vocab, model.cfg.max_text_len))
        .collect::<Result<_, _>>()
        .map_err(|e| CmdError::new(EXIT_CONFIG, e.to_string()))?;
    let report = precision_report(&model, &samples, &taus)?;
    let text = serde_json::to_string_pretty(&report).unwrap();
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    Ok(())
}

fn cmd_inspect_params(
    config: Option<&Path>,
    ckpt: Option<&Path>,
    overrides: &[String],
) -> Result<(), CmdError> {
    let model = match (config, ckpt) {
        (Some(path), None) => {
            let (cfg, _) = load_config(path, overrides)?;
            Model::new(cfg.clone(), cfg.seed)
        }
        (None, Some(path)) => load_checkpoint(path)?.0,
        _ => return Err(CmdError::new(EXIT_CONFIG, "pass exactly one of --config or --checkpoint")),
    };
    let enumerated = param_budget(&model.store);
    let closed = closed_form_budget(&model.cfg);

    println!("{:<10} {:>12}", "group", "tunable");
    for (group, count) in &enumerated.per_group {
        println!("{group:<10} {count:>12}");
    }
    println!("{:<10} {:>12}", "frozen", enumerated.frozen_count);
    println!("{:<10} {:>12}", "total", enumerated.frozen_count + enumerated.tunable_count);
    println!(
        "tunable fraction: {:.4}% (reference design point: 2.04%)",
        enumerated.tunable_fraction * 100.0
    );
    if enumerated != closed {
        eprintln!(
            "{}",
            json!({
                "error": "enumerated budget disagrees with closed form",
                "enumerated": enumerated,
                "closed_form": closed,
            })
        );
        return Err(CmdError::new(1, "budget cross-check failed"));
    }
    println!("cross-check: enumeration matches closed form");
    Ok(())
}

fn cmd_export_attention(ckpt: &Path, sample_seed: u64, out: &Path) -> Result<(), CmdError> {
    let (model, _) = load_checkpoint(ckpt)?;
    let vocab = Vocab::standard();
    let sample = generate_sample(sample_seed, &gen_config(&model.cfg), &vocab, model.cfg.max_text_len)
        .map_err(|e| CmdError::new(EXIT_CONFIG, e.to_string()))?;
    let fwd = model.forward(&sample.image, &sample.word_ids)?;
    let grid = model.cfg.image_size / model.cfg.patch_size;
    let map = reg_attention_map(&fwd, grid)?;
    write_csv(&out.with_extension("csv"), &map)?;
    write_pgm(&out.with_extension("pgm"), &map)?;
    println!(
        "{}",
        json!({
            "csv": out.with_extension("csv"),
            "pgm": out.with_extension("pgm"),
            "grid": grid,
            "expression": sample.expression.join(" "),
        })
    );
    Ok(())
}

fn cmd_gen_data(
    samples: usize,
    seed: u64,
    canvas: usize,
    max_text_len: usize,
    out: &Path,
) -> Result<(), CmdError> {
    let gen = GenConfig { canvas_size: canvas, ..GenConfig::default() };
    let vocab = Vocab::standard();
    let base = seed << 32;
    let generated: Vec<Sample> = (0..samples as u64)
        .map(|i| generate_sample(base + i, &gen, &vocab, max_text_len))
        .collect::<Result<_, _>>()
        .map_err(|e| CmdError::new(EXIT_CONFIG, e.to_string()))?;
    export_dataset(out, &generated, canvas)?;
    println!("{}", json!({ "out": out, "samples": samples }));
    Ok(())
}
