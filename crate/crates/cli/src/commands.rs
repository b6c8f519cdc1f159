use std::io::Write;
use std::path::Path;

use mgru_core::cells::{CellBnMode, GateBnMode};
use mgru_core::context::LayerContextPlan;
use mgru_core::network::{model_latency_ms, receptive_field, CellKind, LatencyModel, Model};
use mgru_core::training::{
    evaluate, gen_task, gradcheck_sweep, metrics_to_jsonl, trace_gate, trace_to_csv, train, Dataset, EpochMetrics,
    GradCheckOptions, Split, SweepFilter, SweepScope,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Reference context plans A-D for latency reports.
pub const REFERENCE_PLANS: [(&str, &str); 4] = [
    ("A", "{0;1×1} {0;1×3} {0;1×3} {0;1×3}"),
    ("B", "{1×6;1×1} {1×6;1×3} {1×6;1×3} {1×6;2×3}"),
    ("C", "{2×6;1×1} {2×6;1×3} {2×6;1×3} {2×6;2×3}"),
    ("D", "{1×6;1×1} {1×6;1×3} {1×6;1×6} {1×6;2×6}"),
];

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::io("writing output", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

#[derive(Serialize)]
struct Seeds {
    data: u64,
    init: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seeds: Seeds,
    param_count: usize,
    epochs: usize,
    checkpoint: &'a str,
    metrics: &'a str,
    final_metrics: &'a [EpochMetrics],
}

pub fn cmd_train(config_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    let cfg = &loaded.config;
    let data = gen_task(&cfg.task)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let metrics = train(&mut model, &data, &cfg.train)?;
    for pair in metrics.chunks(2) {
        let line: Vec<String> = pair
            .iter()
            .map(|m| format!("{} loss={:.6} acc={:.4}", split_name(m.split), m.loss, m.accuracy))
            .collect();
        emit(out, &format!("epoch {:>3}  {}\n", pair[0].epoch, line.join("  ")))?;
    }

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    model.save(dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(METRICS_FILE), metrics_to_jsonl(&metrics).as_bytes())?;
    let manifest = Manifest {
        config_sha256: hex::encode(Sha256::digest(loaded.text.as_bytes())),
        seeds: Seeds {
            data: cfg.task.seed,
            init: cfg.train.seed,
        },
        param_count: model.param_count(),
        epochs: cfg.train.epochs,
        checkpoint: CHECKPOINT_FILE,
        metrics: METRICS_FILE,
        final_metrics: &metrics[metrics.len().saturating_sub(2)..],
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    emit(out, &format!("wrote {}\n", dir.display()))
}

/// Loads `checkpoint` (or the run's own) and checks it against the task widths.
fn load_model(loaded: &LoadedConfig, checkpoint: Option<&Path>) -> Result<Model, CliError> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| loaded.config.output_dir.join(CHECKPOINT_FILE));
    let model = Model::load(&path)?;
    let (mc, task) = (model.config(), &loaded.config.task);
    if mc.input_dim != task.features || mc.output_dim != task.classes {
        return Err(CliError::Core(mgru_core::Error::Dimension {
            op: "checkpoint",
            expected: format!("input {} / classes {} from the task", task.features, task.classes),
            got: format!("input {} / classes {} in {}", mc.input_dim, mc.output_dim, path.display()),
        }));
    }
    Ok(model)
}

fn eval_split(loaded: &LoadedConfig) -> Result<(Dataset, Dataset), CliError> {
    let data = gen_task(&loaded.config.task)?;
    Ok(data.split(loaded.config.train.eval_fraction))
}

pub fn cmd_eval(config_path: &Path, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    let model = load_model(&loaded, checkpoint)?;
    let (train_set, eval_set) = eval_split(&loaded)?;
    for (split, set) in [(Split::Train, &train_set), (Split::Eval, &eval_set)] {
        let (loss, accuracy) = evaluate(&model, set, loaded.config.train.batch_size)?;
        let line = serde_json::json!({ "split": split, "loss": loss, "accuracy": accuracy });
        emit(out, &format!("{line}\n"))?;
    }
    Ok(())
}

pub fn cmd_latency(plans: &[String], lat: &LatencyModel, out: &mut dyn Write) -> Result<(), CliError> {
    if !(lat.base_latency_ms.is_finite() && lat.base_latency_ms >= 0.0) {
        return Err(mgru_core::Error::InvalidConfig(format!("--base must be >= 0, got {}", lat.base_latency_ms)).into());
    }
    if !(lat.frame_ms.is_finite() && lat.frame_ms > 0.0) {
        return Err(mgru_core::Error::InvalidConfig(format!("--frame must be > 0, got {}", lat.frame_ms)).into());
    }
    let parsed = plans
        .iter()
        .map(|p| LayerContextPlan::parse(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut text = String::new();
    for plan in &parsed {
        text.push_str(&format!("plan [{plan}]\n"));
        for (i, spec) in plan.specs().iter().enumerate() {
            text.push_str(&format!("  layer {:<2} {:<12} future {}\n", i + 2, spec.to_string(), spec.future_reach()));
        }
        let rf = receptive_field(plan);
        text.push_str(&format!("  total future frames {}\n", rf.future_frames));
        text.push_str(&format!("  latency {} ms\n", model_latency_ms(plan, lat)));
    }
    emit(out, &text)
}

pub struct TraceArgs<'a> {
    pub config: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub layer: usize,
    pub batch: usize,
    pub out: Option<&'a Path>,
}

pub fn cmd_trace_gate(args: &TraceArgs<'_>, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = LoadedConfig::load(args.config)?;
    let model = match args.checkpoint {
        Some(p) => load_model(&loaded, Some(p))?,
        None => Model::new(loaded.config.model.clone(), loaded.config.train.seed)?,
    };
    let layers = model.config().layers;
    if args.layer == 0 || args.layer > layers {
        return Err(mgru_core::Error::OutOfRange {
            what: "layer",
            index: args.layer,
            limit: layers,
        }
        .into());
    }
    let (_, eval_set) = eval_split(&loaded)?;
    let take = args.batch.clamp(1, eval_set.len());
    let batch = eval_set.batch(&(0..take).collect::<Vec<_>>())?;
    let csv = trace_to_csv(&trace_gate(&model, &batch.inputs, args.layer)?);
    match args.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
            }
            write_file(path, csv.as_bytes())?;
            emit(out, &format!("wrote {}\n", path.display()))
        }
        None => emit(out, &csv),
    }
}

pub struct GradcheckArgs {
    pub cell: Option<CellKind>,
    pub bn_gate: Option<GateBnMode>,
    pub bn_cell: Option<CellBnMode>,
    pub scope: SweepScope,
    pub corrupt: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let filter = SweepFilter {
        cell: args.cell,
        gate: args.bn_gate,
        cell_bn: args.bn_cell,
        scope: args.scope,
    };
    let opts = GradCheckOptions {
        corrupt_analytic: args.corrupt,
        ..Default::default()
    };
    let reports = gradcheck_sweep(&filter, &opts)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!("{r}\n"));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if let Some(worst) = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)) {
        text.push_str(&format!(
            "worst: {} max_rel_err={:.3e} (tolerance {:.0e}); {} of {} passed\n",
            worst.label,
            worst.max_rel_err,
            opts.tolerance,
            reports.len() - failed,
            reports.len()
        ));
    }
    emit(out, &text)?;
    if failed > 0 {
        return Err(CliError::GradCheckFailed(failed));
    }
    Ok(())
}
