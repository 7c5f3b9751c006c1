//! End-to-end run orchestration: data and baseline preparation, agent
//! training with episode/update logs, mask extraction, encoder
//! pretraining, and the comparison baselines.
//!
//! Every random stream derives from the master seed with a purpose tag,
//! so a config + seed pair pins the whole run. Episode logs are plain
//! JSONL with a fixed field order; with `log.timing = false` (default)
//! they are byte-identical across replays.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{random_mask, uniform_magnitude_mask, AnalysisError};
use crate::cma::{run_es, EsConfig, EsError, EsRunResult};
use crate::config::{ConfigError, RunConfig};
use crate::diff::{AdamConfig, AdamState, Tensor};
use crate::env::{EnvConfig, EnvError, Mode, PruneEnv};
use crate::eval::{
    train_baseline, BaselineCfg, BuiltinOracle, Dataset, EvalError, EvalOracle, ExternalOracle,
    OracleError,
};
use crate::gae::{collect_random_episodes, pretrain, DecoderHeads, GaeError, PretrainStep};
use crate::gat::{GatEncoderParams, ObservationScaler};
use crate::io::IoError;
use crate::net::{build_indexing, flops_ratio, NetError, NetworkSpec, PruningMask};
use crate::ppo::{act, ppo_update, EpisodeRollout, Policy, PpoError, StepSample};
use crate::seed::{derive_seed, stream_rng};
use crate::toynets;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Gae(#[from] GaeError),
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("warm-start encoder is incompatible: {0}")]
    WarmStartMismatch(String),
}

/// One line of the episode JSONL; field order is part of the contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub mode: String,
    pub phase: String,
    pub acc_ep: f64,
    pub flops_ratio: f64,
    pub reward: i8,
    pub acc_ema: f64,
    pub flops_ema: f64,
    pub sparsity: f64,
    pub forced_keeps: usize,
    pub wall_ms: u64,
}

/// One line of the update-progress JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub value_loss: f64,
}

pub fn build_network(cfg: &RunConfig) -> Result<NetworkSpec, TrainerError> {
    if let Some(path) = &cfg.net.path {
        return Ok(crate::io::load_network(Path::new(path))?);
    }
    let seed = cfg.net.seed;
    Ok(match cfg.net.name.as_str() {
        "chain" => toynets::chain_net(seed),
        "toy_resnet" => toynets::toy_resnet(seed),
        "shortcut" => toynets::shortcut_net(seed),
        "chained_res" => toynets::chained_res_net(seed),
        "bn_chain" => toynets::bn_chain_net(seed),
        "random" => toynets::random_net(&mut crate::seed::rng_from_seed(seed)),
        other => {
            return Err(TrainerError::Config(ConfigError::InvalidValue {
                key: "net.name",
                msg: format!("unknown architecture {other:?}"),
            }))
        }
    })
}

pub fn build_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), TrainerError> {
    if let Some(path) = &cfg.data.path {
        let all = crate::io::read_dataset(Path::new(path))?;
        let frac = cfg.data.per_class as f64
            / (cfg.data.per_class + cfg.data.val_per_class).max(1) as f64;
        return Ok(crate::eval::stratified_split(&all, frac));
    }
    let (c, h, _) = toynets::INPUT_RESOLUTION;
    let per = cfg.data.per_class + cfg.data.val_per_class;
    let all = crate::eval::synth_dataset(cfg.data.seed, per, c, h);
    let frac = cfg.data.per_class as f64 / per as f64;
    Ok(crate::eval::stratified_split(&all, frac))
}

/// Everything downstream stages share: the trained network, its oracle,
/// and the measured baseline accuracy.
pub struct Prepared {
    pub net: NetworkSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub baseline_acc: f64,
    pub epochs: Vec<crate::eval::EpochLog>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, TrainerError> {
    let net = build_network(cfg)?;
    let (train, val) = build_datasets(cfg)?;
    let bl = BaselineCfg {
        epochs: cfg.baseline.epochs,
        lr: cfg.baseline.lr,
        batch: cfg.baseline.batch,
        seed: derive_seed(cfg.seed, "baseline", 0),
    };
    let (trained, epochs) = train_baseline(&net, &train, &val, &bl)?;
    let idx = build_indexing(&trained)?;
    let oracle = make_oracle(cfg, &trained, &val)?;
    let baseline_acc = oracle.top1(&PruningMask::keep_all(idx.num_units()))?;
    Ok(Prepared { net: trained, train, val, baseline_acc, epochs })
}

pub fn make_oracle(
    cfg: &RunConfig,
    net: &NetworkSpec,
    val: &Dataset,
) -> Result<Box<dyn EvalOracle>, TrainerError> {
    if cfg.oracle.command.is_empty() {
        Ok(Box::new(BuiltinOracle::new(
            net.clone(),
            val.clone(),
            cfg.oracle.batch,
        )?))
    } else {
        Ok(Box::new(ExternalOracle::new(
            cfg.oracle.command.clone(),
            std::time::Duration::from_secs(cfg.oracle.timeout_s),
        )?))
    }
}

/// Fresh environment over the prepared network. Edge features use
/// activation statistics from a training-data calibration batch.
pub fn make_env(cfg: &RunConfig, prepared: &Prepared) -> Result<PruneEnv, TrainerError> {
    let mode = cfg.env.mode_for(prepared.baseline_acc)?;
    let oracle = make_oracle(cfg, &prepared.net, &prepared.val)?;
    let n = prepared.train.len().min(16);
    let calib: Tensor<f32> = prepared.train.batch(0..n).0;
    Ok(PruneEnv::new(
        prepared.net.clone(),
        EnvConfig {
            mode,
            n_groups: cfg.env.n_groups,
            ema_beta: cfg.env.ema_beta,
        },
        oracle,
        Some(&calib),
    )?)
}

/// Fits the observation scaler on a deterministic random-rollout corpus
/// from a throwaway environment.
pub fn fit_scaler(cfg: &RunConfig, prepared: &Prepared) -> Result<ObservationScaler, TrainerError> {
    let mut env = make_env(cfg, prepared)?;
    let mut rng = stream_rng(cfg.seed, "scaler-corpus", 0);
    let episodes = 8.min(cfg.gae.episodes.max(1));
    let corpus = collect_random_episodes(&mut env, episodes, &mut rng)?;
    Ok(ObservationScaler::fit(&corpus))
}

pub struct TrainOutcome {
    pub policy: Policy<f64>,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateRecord>,
    pub baseline_acc: f64,
    pub prepared: Prepared,
}

/// Full agent training per the config. `warm_start` replaces the freshly
/// initialized encoder and the rollout-fitted scaler with a pretrained
/// pair (shape-checked) before any update.
pub fn train_agent(
    cfg: &RunConfig,
    warm_start: Option<(GatEncoderParams<f64>, ObservationScaler)>,
) -> Result<TrainOutcome, TrainerError> {
    let prepared = prepare(cfg)?;
    let (warm_enc, scaler) = match warm_start {
        Some((enc, scaler)) => (Some(enc), scaler),
        None => (None, fit_scaler(cfg, &prepared)?),
    };
    let mut env = make_env(cfg, &prepared)?;
    let probe = env.reset()?;
    let gat_cfg = cfg.gat.to_gat_config();
    let ppo_cfg = cfg.ppo.to_ppo_config();
    let max_group = env.group(0).len();

    let mut init_rng = stream_rng(cfg.seed, "policy-init", 0);
    let mut policy: Policy<f64> = Policy::init(
        probe.node_dim(),
        max_group,
        &gat_cfg,
        &ppo_cfg,
        scaler,
        &mut init_rng,
    )?;
    if let Some(enc) = warm_enc {
        if enc.node_dim() != policy.encoder.node_dim()
            || enc.embed_dim() != policy.encoder.embed_dim()
            || enc.layers.len() != policy.encoder.layers.len()
        {
            return Err(TrainerError::WarmStartMismatch(format!(
                "got node_dim {} embed {} rounds {}, expected {} / {} / {}",
                enc.node_dim(),
                enc.embed_dim(),
                enc.layers.len(),
                policy.encoder.node_dim(),
                policy.encoder.embed_dim(),
                policy.encoder.layers.len()
            )));
        }
        policy.encoder = enc;
    }

    let mut opt = AdamState::new(
        &policy.params_mut().iter().map(|p| &**p).collect::<Vec<_>>(),
        AdamConfig::with_lr(ppo_cfg.lr),
    );
    let gamma = if cfg.env.n_groups == 1 { 0.0 } else { 1.0 };
    let mut rollout_rng = stream_rng(cfg.seed, "rollout", 0);
    let mut update_rng = stream_rng(cfg.seed, "ppo-update", 0);

    let mut episodes = Vec::with_capacity(cfg.ppo.updates * ppo_cfg.episodes_per_update);
    let mut updates = Vec::with_capacity(cfg.ppo.updates);
    let mut episode_id = 0usize;
    for update in 0..cfg.ppo.updates {
        let mut buffer = Vec::with_capacity(ppo_cfg.episodes_per_update);
        let mut reward_sum = 0.0;
        for _ in 0..ppo_cfg.episodes_per_update {
            let started = Instant::now();
            let mut obs = env.reset()?;
            let mut steps = Vec::with_capacity(env.n_groups());
            let mut terminal = None;
            for g in 0..env.n_groups() {
                let group = env.group(g);
                let sample = act(&policy, &obs, group.len(), &mut rollout_rng)?;
                let out = env.step(&sample.bits)?;
                steps.push(StepSample {
                    obs,
                    group,
                    bits: sample.bits,
                    log_prob: sample.log_prob,
                    value: sample.value,
                });
                obs = out.obs;
                if let Some(result) = out.result {
                    terminal = Some(result);
                }
            }
            let result = terminal.expect("episode ran all groups");
            let tracker = env.tracker();
            episodes.push(EpisodeRecord {
                episode: episode_id,
                mode: env.mode().name().to_string(),
                phase: result.phase.name().to_string(),
                acc_ep: result.acc_ep,
                flops_ratio: result.flops_ratio,
                reward: result.reward,
                acc_ema: tracker.acc_ema,
                flops_ema: tracker.flops_ema,
                sparsity: result.mask.sparsity(),
                forced_keeps: result.forced_keeps,
                wall_ms: if cfg.log.timing {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
            reward_sum += result.reward as f64;
            buffer.push(EpisodeRollout {
                steps,
                reward: result.reward,
                generation: policy.generation,
            });
            episode_id += 1;
        }
        let report = ppo_update(&mut policy, &mut opt, &buffer, gamma, &ppo_cfg, &mut update_rng)?;
        updates.push(UpdateRecord {
            update,
            mean_reward: reward_sum / ppo_cfg.episodes_per_update as f64,
            clip_fraction: report.clip_fraction,
            entropy: report.entropy,
            value_loss: report.value_loss,
        });
    }
    Ok(TrainOutcome {
        policy,
        episodes,
        updates,
        baseline_acc: prepared.baseline_acc,
        prepared,
    })
}

/// Extracted final mask with its measured quality.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub mask: PruningMask,
    pub acc: f64,
    pub flops_ratio: f64,
    pub feasible: bool,
}

fn better_for(mode: Mode, a: &PruneOutcome, b: &PruneOutcome) -> bool {
    // Feasible beats infeasible; then the mode's objective decides.
    match (a.feasible, b.feasible) {
        (true, false) => return true,
        (false, true) => return false,
        _ => {}
    }
    match mode {
        Mode::ResourceConstrained { .. } => {
            if a.feasible {
                a.acc > b.acc
            } else {
                a.flops_ratio < b.flops_ratio
            }
        }
        Mode::PerformanceGuaranteed { .. } => {
            if a.feasible {
                a.flops_ratio < b.flops_ratio
            } else {
                a.acc > b.acc
            }
        }
    }
}

fn is_feasible(mode: Mode, acc: f64, s: f64) -> bool {
    match mode {
        Mode::ResourceConstrained { flops_target_ratio } => s <= flops_target_ratio,
        Mode::PerformanceGuaranteed { acc_target } => acc >= acc_target,
    }
}

/// Best-of-K mask extraction: K stochastic rollouts (the trained policy
/// explores around its mode) ranked mode-aware, feasibility first.
pub fn extract_mask(
    policy: &Policy<f64>,
    env: &mut PruneEnv,
    samples: usize,
    seed: u64,
) -> Result<PruneOutcome, TrainerError> {
    let mut rng = stream_rng(seed, "extract", 0);
    let mode = env.mode();
    let mut best: Option<PruneOutcome> = None;
    for _ in 0..samples.max(1) {
        let mut obs = env.reset()?;
        let mut terminal = None;
        for g in 0..env.n_groups() {
            let sample = act(policy, &obs, env.group(g).len(), &mut rng)?;
            let out = env.step(&sample.bits)?;
            obs = out.obs;
            if let Some(r) = out.result {
                terminal = Some(r);
            }
        }
        let r = terminal.expect("episode ran all groups");
        let cand = PruneOutcome {
            feasible: is_feasible(mode, r.acc_ep, r.flops_ratio),
            mask: r.mask,
            acc: r.acc_ep,
            flops_ratio: r.flops_ratio,
        };
        if best.as_ref().map_or(true, |b| better_for(mode, &cand, b)) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one sample"))
}

/// Best top-1 among `k` random masks satisfying the FLOPs budget.
pub fn best_random_feasible(
    net: &NetworkSpec,
    oracle: &dyn EvalOracle,
    target: f64,
    k: usize,
    seed: u64,
) -> Result<PruneOutcome, TrainerError> {
    let idx = build_indexing(net)?;
    let units = idx.num_units();
    let mut rng = stream_rng(seed, "random-baseline", 0);
    let mut best: Option<PruneOutcome> = None;
    for _ in 0..k {
        let mask = loop {
            let pruned = rand::Rng::gen_range(&mut rng, 0..=units);
            let m = random_mask(units, pruned, &mut rng);
            if flops_ratio(net, &idx, &m)? <= target {
                break m;
            }
        };
        let acc = oracle.top1(&mask)?;
        let s = flops_ratio(net, &idx, &mask)?;
        if best.as_ref().map_or(true, |b| acc > b.acc) {
            best = Some(PruneOutcome { mask, acc, flops_ratio: s, feasible: true });
        }
    }
    Ok(best.expect("k >= 1"))
}

/// Largest uniform keep rate whose magnitude mask satisfies the budget.
pub fn magnitude_mask_at_budget(
    net: &NetworkSpec,
    target: f64,
) -> Result<(PruningMask, f64), TrainerError> {
    let idx = build_indexing(net)?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let mask = uniform_magnitude_mask(net, &idx, mid)?;
        if flops_ratio(net, &idx, &mask)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mask = uniform_magnitude_mask(net, &idx, lo)?;
    let s = flops_ratio(net, &idx, &mask)?;
    Ok((mask, s))
}

pub struct PretrainOutcome {
    pub encoder: GatEncoderParams<f64>,
    pub scaler: ObservationScaler,
    pub curve: Vec<PretrainStep>,
}

/// Collects the random-episode corpus and pretrains an encoder on it.
/// The returned encoder plugs into `train_agent` as a warm start.
pub fn pretrain_encoder(cfg: &RunConfig) -> Result<PretrainOutcome, TrainerError> {
    let prepared = prepare(cfg)?;
    let mut env = make_env(cfg, &prepared)?;
    let mut corpus_rng = stream_rng(cfg.seed, "gae-corpus", 0);
    let corpus = collect_random_episodes(&mut env, cfg.gae.episodes, &mut corpus_rng)?;
    let scaler = ObservationScaler::fit(&corpus);
    let gat_cfg = cfg.gat.to_gat_config();
    let node_dim = corpus[0].node_dim();
    // Same stream as the cold-started policy so warm and cold runs differ
    // only by the pretraining itself.
    let mut init_rng = stream_rng(cfg.seed, "policy-init", 0);
    let mut encoder: GatEncoderParams<f64> =
        GatEncoderParams::init(node_dim, &gat_cfg, &mut init_rng)?;
    let mut heads: DecoderHeads<f64> = DecoderHeads::init(
        gat_cfg.hidden,
        node_dim,
        &mut stream_rng(cfg.seed, "gae-heads", 0),
    )?;
    let curve = pretrain(
        &mut encoder,
        &mut heads,
        &scaler,
        &corpus,
        &cfg.gae.to_pretrain_config(),
        &mut stream_rng(cfg.seed, "gae-train", 0),
    )?;
    Ok(PretrainOutcome { encoder, scaler, curve })
}

/// CMA-ES baseline over the prepared network and oracle.
pub fn es_baseline(cfg: &RunConfig) -> Result<(EsRunResult, Prepared), TrainerError> {
    let prepared = prepare(cfg)?;
    let idx = build_indexing(&prepared.net)?;
    let oracle = make_oracle(cfg, &prepared.net, &prepared.val)?;
    let mut es_cfg = EsConfig::for_dim(idx.num_units(), cfg.env.flops_target_ratio);
    if cfg.es.population > 0 {
        es_cfg.population = cfg.es.population;
        es_cfg.parents = (cfg.es.population / 2).max(1);
    }
    es_cfg.generations = cfg.es.generations;
    es_cfg.semantics = cfg.es.semantics()?;
    let result = run_es(
        &prepared.net,
        oracle.as_ref(),
        &es_cfg,
        derive_seed(cfg.seed, "es", 0),
    )?;
    Ok((result, prepared))
}

/// Serializes records as JSONL (one compact JSON object per line).
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
