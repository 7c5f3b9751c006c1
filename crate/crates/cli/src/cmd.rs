//! Subcommand implementations. Every command resolves a `RunConfig`
//! (from `--config` or defaults), writes its artifacts under `--out`,
//! and drops a `manifest.json` with the config hash and master seed so
//! the run can be replayed bit-exactly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gscc_core::analysis::{layer_sparsity_report, per_layer_similarity, similarity};
use gscc_core::cma::EsError;
use gscc_core::config::{ConfigError, RunConfig, RunManifest};
use gscc_core::env::EnvError;
use gscc_core::eval::{accuracy, synth_dataset, OracleError};
use gscc_core::gae::load_encoder;
use gscc_core::io;
use gscc_core::net::{apply_mask, build_indexing, flops_ratio, PruningMask};
use gscc_core::ppo::{load_policy, save_policy};
use gscc_core::toynets;
use gscc_core::trainer::{self, to_jsonl, TrainerError};
use serde_json::json;

use crate::Command;

#[derive(Debug)]
pub enum CliError {
    Trainer(TrainerError),
    File { path: PathBuf, source: std::io::Error },
    Json(serde_json::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Trainer(e) => e.fmt(f),
            CliError::File { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Json(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! via_trainer {
    ($($ty:ty),+) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Trainer(TrainerError::from(e))
            }
        }
    )+};
}

via_trainer!(
    TrainerError,
    ConfigError,
    EnvError,
    OracleError,
    gscc_core::analysis::AnalysisError,
    gscc_core::cma::EsError,
    gscc_core::eval::EvalError,
    gscc_core::gae::GaeError,
    gscc_core::io::IoError,
    gscc_core::net::NetError,
    gscc_core::ppo::PpoError
);

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

impl CliError {
    /// 0 success, 2 config error, 3 module error, 4 oracle protocol error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Trainer(t) => trainer_code(t),
            _ => 3,
        }
    }
}

fn trainer_code(t: &TrainerError) -> u8 {
    match t {
        TrainerError::Config(_) => 2,
        TrainerError::Oracle(o) => oracle_code(o),
        TrainerError::Env(EnvError::Oracle(o)) => oracle_code(o),
        TrainerError::Es(EsError::Oracle(_)) => 4,
        _ => 3,
    }
}

fn oracle_code(o: &OracleError) -> u8 {
    // The builtin oracle failing to evaluate is an internal module error,
    // not a protocol violation by an external command.
    match o {
        OracleError::Eval(_) => 3,
        _ => 4,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

/// Prints to stdout, tolerating a closed pipe (`gscc ... | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })
}

fn write_manifest(path: &Path, cfg: &RunConfig, argv: &str) -> Result<(), CliError> {
    let manifest = RunManifest::new(cfg, argv)?;
    write_text(path, &serde_json::to_string_pretty(&manifest)?)
}

fn csv<R>(header: &str, rows: impl IntoIterator<Item = R>) -> String
where
    R: fmt::Display,
{
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_string());
        out.push('\n');
    }
    out
}

pub fn run(cmd: Command, argv: &str) -> Result<(), CliError> {
    match cmd {
        Command::GenData { seed, out, per_class } => gen_data(seed, &out, per_class, argv),
        Command::TrainBaseline { config, out } => train_baseline(&config, &out, argv),
        Command::PretrainGae { config, out } => pretrain_gae(&config, &out, argv),
        Command::TrainAgent { config, warm_start, out } => {
            train_agent(&config, warm_start.as_deref(), &out, argv)
        }
        Command::Prune { policy, net, config, out } => {
            prune(&policy, &net, config.as_deref(), &out, argv)
        }
        Command::EsBaseline { config, policy, out } => {
            es_baseline(&config, policy.as_deref(), &out, argv)
        }
        Command::Analyze { mask_a, mask_b, net, out } => analyze(&mask_a, &mask_b, &net, &out, argv),
        Command::Eval { net, mask, data, out } => eval(&net, mask.as_deref(), &data, &out, argv),
    }
}

fn gen_data(seed: u64, out: &Path, per_class: usize, argv: &str) -> Result<(), CliError> {
    let (c, h, _) = toynets::INPUT_RESOLUTION;
    let ds = synth_dataset(seed, per_class, c, h);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    io::write_dataset(out, &ds)?;
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg.data.path = Some(out.display().to_string());
    write_manifest(&out.with_extension("manifest.json"), &cfg, argv)?;
    emit(&format!("wrote {} samples to {}", ds.len(), out.display()));
    Ok(())
}

fn train_baseline(config: &Path, out: &Path, argv: &str) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let prepared = trainer::prepare(&cfg)?;
    ensure_dir(out)?;
    io::save_network(&out.join("net.toml"), &prepared.net, Some("net-weights.gsccw"))?;
    write_text(
        &out.join("baseline.csv"),
        &csv(
            "epoch,train_loss,val_acc",
            prepared
                .epochs
                .iter()
                .map(|e| format!("{},{},{}", e.epoch, e.train_loss, e.val_acc)),
        ),
    )?;
    write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&json!({
            "baseline_acc": prepared.baseline_acc,
            "epochs": prepared.epochs.len(),
            "train_samples": prepared.train.len(),
            "val_samples": prepared.val.len(),
        }))?,
    )?;
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    emit(&format!("baseline accuracy {:.4}", prepared.baseline_acc));
    Ok(())
}

fn pretrain_gae(config: &Path, out: &Path, argv: &str) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let outcome = trainer::pretrain_encoder(&cfg)?;
    ensure_dir(out)?;
    gscc_core::gae::save_encoder(&out.join("encoder.gsccw"), &outcome.encoder, &outcome.scaler)?;
    write_text(
        &out.join("pretrain.csv"),
        &csv(
            "step,l_recon,l_adj,l_feat,l_edge",
            outcome.curve.iter().map(|s| {
                format!("{},{},{},{},{}", s.step, s.l_recon, s.l_adj, s.l_feat, s.l_edge)
            }),
        ),
    )?;
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    let (first, last) = (
        outcome.curve.first().map_or(f64::NAN, |s| s.l_recon),
        outcome.curve.last().map_or(f64::NAN, |s| s.l_recon),
    );
    emit(&format!("reconstruction loss {first:.3} -> {last:.3}"));
    Ok(())
}

fn train_agent(
    config: &Path,
    warm_start: Option<&Path>,
    out: &Path,
    argv: &str,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let warm = match warm_start {
        Some(path) => Some(load_encoder::<f64>(path)?),
        None => None,
    };
    let outcome = trainer::train_agent(&cfg, warm)?;
    ensure_dir(out)?;
    save_policy(&out.join("policy.gsccw"), &outcome.policy)?;
    write_text(&out.join("episodes.jsonl"), &to_jsonl(&outcome.episodes)?)?;
    write_text(&out.join("updates.jsonl"), &to_jsonl(&outcome.updates)?)?;
    write_text(
        &out.join("trajectory.csv"),
        &csv(
            "episode,acc,flops_ratio",
            outcome
                .episodes
                .iter()
                .map(|e| format!("{},{},{}", e.episode, e.acc_ep, e.flops_ratio)),
        ),
    )?;
    write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&json!({
            "baseline_acc": outcome.baseline_acc,
            "episodes": outcome.episodes.len(),
            "updates": outcome.updates.len(),
            "final_mean_reward": outcome.updates.last().map(|u| u.mean_reward),
        }))?,
    )?;
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    emit(&format!(
        "trained {} updates ({} episodes), baseline {:.4}",
        outcome.updates.len(),
        outcome.episodes.len(),
        outcome.baseline_acc
    ));
    Ok(())
}

fn prune(
    policy_path: &Path,
    net_path: &Path,
    config: Option<&Path>,
    out: &Path,
    argv: &str,
) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.net.path = Some(net_path.display().to_string());
    let net = io::load_network(net_path)?;
    let idx = build_indexing(&net)?;
    let (train, val) = trainer::build_datasets(&cfg)?;
    let baseline_acc = trainer::make_oracle(&cfg, &net, &val)?
        .top1(&PruningMask::keep_all(idx.num_units()))?;
    let prepared = trainer::Prepared { net, train, val, baseline_acc, epochs: Vec::new() };
    let mut env = trainer::make_env(&cfg, &prepared)?;
    let policy = load_policy::<f64>(policy_path)?;
    let picked = trainer::extract_mask(&policy, &mut env, cfg.prune.samples, cfg.seed)?;

    ensure_dir(out)?;
    io::write_mask(&out.join("mask.gsccm"), &picked.mask)?;
    let pruned = apply_mask(&prepared.net, &idx, &picked.mask)?;
    io::save_network(&out.join("pruned.toml"), &pruned, Some("pruned-weights.gsccw"))?;
    let layers: Vec<_> = layer_sparsity_report(&prepared.net, &idx, &picked.mask)?
        .iter()
        .map(|l| {
            json!({
                "layer": l.layer,
                "kept": l.kept,
                "pruned": l.pruned,
                "flops_ratio": l.flops_ratio,
            })
        })
        .collect();
    let report = json!({
        "acc": picked.acc,
        "baseline_acc": baseline_acc,
        "flops_ratio": picked.flops_ratio,
        "sparsity": picked.mask.sparsity(),
        "feasible": picked.feasible,
        "per_layer": layers,
    });
    write_text(&out.join("sparsity.json"), &serde_json::to_string_pretty(&report)?)?;
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    emit(&format!(
        "pruned to {:.1}% FLOPs at accuracy {:.4}",
        100.0 * picked.flops_ratio,
        picked.acc
    ));
    Ok(())
}

fn es_baseline(
    config: &Path,
    policy: Option<&Path>,
    out: &Path,
    argv: &str,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let (result, prepared) = trainer::es_baseline(&cfg)?;
    ensure_dir(out)?;
    io::write_mask(&out.join("mask.gsccm"), &result.best_mask)?;
    write_text(
        &out.join("generations.csv"),
        &csv(
            "generation,best_fitness,best_acc,best_s,mean_s,sigma",
            result.log.iter().map(|g| {
                format!(
                    "{},{},{},{},{},{}",
                    g.generation, g.best_fitness, g.best_acc, g.best_s, g.mean_s, g.sigma
                )
            }),
        ),
    )?;

    let oracle = trainer::make_oracle(&cfg, &prepared.net, &prepared.val)?;
    let target = cfg.env.flops_target_ratio;
    let mut rows = vec![json!({
        "method": "cma_es",
        "acc": result.best_acc,
        "flops_ratio": result.best_s,
        "feasible": result.best_s <= target,
    })];
    if let Some((mask, fitness, s)) = &result.best_feasible {
        rows.push(json!({
            "method": "cma_es_feasible",
            "acc": oracle.top1(mask)?,
            "fitness": fitness,
            "flops_ratio": s,
            "feasible": true,
        }));
    }
    let (mag_mask, mag_s) = trainer::magnitude_mask_at_budget(&prepared.net, target)?;
    rows.push(json!({
        "method": "weight_magnitude",
        "acc": oracle.top1(&mag_mask)?,
        "flops_ratio": mag_s,
        "feasible": true,
    }));
    if let Some(policy_path) = policy {
        let agent = load_policy::<f64>(policy_path)?;
        let mut env = trainer::make_env(&cfg, &prepared)?;
        let picked = trainer::extract_mask(&agent, &mut env, cfg.prune.samples, cfg.seed)?;
        rows.push(json!({
            "method": "agent",
            "acc": picked.acc,
            "flops_ratio": picked.flops_ratio,
            "feasible": picked.feasible,
        }));
    }
    let comparison = json!({
        "flops_target_ratio": target,
        "baseline_acc": prepared.baseline_acc,
        "generations": result.log.len(),
        "covariance_repairs": result.repairs,
        "rows": rows,
    });
    write_text(&out.join("comparison.json"), &serde_json::to_string_pretty(&comparison)?)?;
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    emit(&format!(
        "best fitness {:.4} (acc {:.4}, flops {:.3})",
        result.best_fitness, result.best_acc, result.best_s
    ));
    Ok(())
}

fn analyze(
    mask_a: &Path,
    mask_b: &Path,
    net_path: &Path,
    out: &Path,
    argv: &str,
) -> Result<(), CliError> {
    let net = io::load_network(net_path)?;
    let idx = build_indexing(&net)?;
    let a = io::read_mask(mask_a)?;
    let b = io::read_mask(mask_b)?;
    let sim = similarity(&a, &b)?;
    let per_layer: Vec<_> = per_layer_similarity(&net, &idx, &a, &b)?
        .iter()
        .map(|(layer, s)| {
            json!({
                "layer": layer,
                "jaccard": s.jaccard,
                "cosine": s.cosine,
                "hamming": s.hamming,
            })
        })
        .collect();
    let sparsity = |mask: &PruningMask| -> Result<serde_json::Value, CliError> {
        let layers: Vec<_> = layer_sparsity_report(&net, &idx, mask)?
            .iter()
            .map(|l| {
                json!({
                    "layer": l.layer,
                    "kept": l.kept,
                    "pruned": l.pruned,
                    "flops_ratio": l.flops_ratio,
                })
            })
            .collect();
        Ok(json!({
            "sparsity": mask.sparsity(),
            "flops_ratio": flops_ratio(&net, &idx, mask)?,
            "per_layer": layers,
        }))
    };
    let report = json!({
        "similarity": {
            "jaccard": sim.jaccard,
            "cosine": sim.cosine,
            "hamming": sim.hamming,
        },
        "per_layer": per_layer,
        "mask_a": sparsity(&a)?,
        "mask_b": sparsity(&b)?,
    });
    let text = serde_json::to_string_pretty(&report)?;
    emit(&text);
    ensure_dir(out)?;
    write_text(&out.join("analysis.json"), &text)?;
    let mut cfg = RunConfig::default();
    cfg.net.path = Some(net_path.display().to_string());
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    Ok(())
}

fn eval(
    net_path: &Path,
    mask: Option<&Path>,
    data: &Path,
    out: &Path,
    argv: &str,
) -> Result<(), CliError> {
    let net = io::load_network(net_path)?;
    let idx = build_indexing(&net)?;
    let ds = io::read_dataset(data)?;
    let mask = match mask {
        Some(p) => io::read_mask(p)?,
        None => PruningMask::keep_all(idx.num_units()),
    };
    let report = accuracy(&net, &idx, Some(&mask), &ds, 64)?;
    let text = serde_json::to_string_pretty(&json!({
        "top1": report.top1,
        "correct": report.correct,
        "n_samples": report.n_samples,
        "flops_ratio": flops_ratio(&net, &idx, &mask)?,
    }))?;
    emit(&text);
    ensure_dir(out)?;
    write_text(&out.join("accuracy.json"), &text)?;
    let mut cfg = RunConfig::default();
    cfg.net.path = Some(net_path.display().to_string());
    cfg.data.path = Some(data.display().to_string());
    write_manifest(&out.join("manifest.json"), &cfg, argv)?;
    Ok(())
}
