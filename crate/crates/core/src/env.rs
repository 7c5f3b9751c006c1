//! The pruning decision process.
//!
//! One episode walks the channel decision units in `n_groups` slices; each
//! step prunes a subset of the current group. Transitions are deterministic.
//! Only the terminal step carries a reward, computed by self-competition:
//! the episode beats (or loses to) the agent's own running averages, with
//! the comparison signal switching once the constraint is met.

use thiserror::Error;

use crate::eval::{EvalError, EvalOracle, OracleError};
use crate::net::{
    build_graph, build_indexing, flops_ratio, group_partition, unit_l1, ChannelIndexing,
    GraphObservation, NetError, NetworkSpec, PruningMask,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Push FLOPs under a target ratio, then recover accuracy.
    ResourceConstrained { flops_target_ratio: f64 },
    /// Hold accuracy above a target, then shrink FLOPs.
    PerformanceGuaranteed { acc_target: f64 },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::ResourceConstrained { .. } => "resource_constrained",
            Mode::PerformanceGuaranteed { .. } => "performance_guaranteed",
        }
    }
}

/// Which signal drove the terminal reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Flops,
    Acc,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Flops => "flops",
            Phase::Acc => "acc",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnvConfig {
    pub mode: Mode,
    pub n_groups: usize,
    pub ema_beta: f64,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("oracle failure: {0}")]
    Oracle(#[from] OracleError),
    #[error("episode already finished; call reset")]
    EpisodeFinished,
    #[error("action has {got} bits, current group has {expected}")]
    BadAction { expected: usize, got: usize },
    #[error("invalid environment config: {0}")]
    BadConfig(String),
}

/// Running averages the agent competes against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaTracker {
    pub acc_ema: f64,
    pub flops_ema: f64,
    pub beta: f64,
}

impl EmaTracker {
    pub fn new(beta: f64, acc0: f64, flops0: f64) -> Self {
        Self { acc_ema: acc0, flops_ema: flops0, beta }
    }

    /// `v ← β·v + (1−β)·x`, once per completed episode.
    pub fn update(&mut self, acc_ep: f64, flops_ratio: f64) {
        self.acc_ema = self.beta * self.acc_ema + (1.0 - self.beta) * acc_ep;
        self.flops_ema = self.beta * self.flops_ema + (1.0 - self.beta) * flops_ratio;
    }
}

/// Three-valued sign.
pub fn sgn(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Terminal self-competition reward and the phase that produced it.
pub fn compute_reward(mode: Mode, acc_ep: f64, flops_ratio: f64, t: &EmaTracker) -> (i8, Phase) {
    match mode {
        Mode::ResourceConstrained { flops_target_ratio } => {
            if flops_ratio > flops_target_ratio {
                (-sgn(flops_ratio - t.flops_ema), Phase::Flops)
            } else {
                (sgn(acc_ep - t.acc_ema), Phase::Acc)
            }
        }
        Mode::PerformanceGuaranteed { acc_target } => {
            if acc_ep < acc_target {
                (sgn(acc_ep - t.acc_ema), Phase::Acc)
            } else {
                (-sgn(flops_ratio - t.flops_ema), Phase::Flops)
            }
        }
    }
}

/// Everything produced by a finished episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub mask: PruningMask,
    pub acc_ep: f64,
    pub flops_ratio: f64,
    pub reward: i8,
    pub phase: Phase,
    pub forced_keeps: usize,
}

/// One environment step's outputs.
pub struct StepOutcome {
    pub obs: GraphObservation,
    pub reward: i8,
    pub done: bool,
    /// Present exactly at the terminal step.
    pub result: Option<EpisodeResult>,
}

pub struct PruneEnv {
    net: NetworkSpec,
    idx: ChannelIndexing,
    groups: Vec<std::ops::Range<usize>>,
    cfg: EnvConfig,
    oracle: Box<dyn EvalOracle>,
    tracker: EmaTracker,
    baseline_acc: f64,
    edge_stats: Option<Vec<f32>>,
    c_max: usize,
    mask: PruningMask,
    cursor: usize,
    done: bool,
    forced_keeps: usize,
}

impl PruneEnv {
    /// Builds the environment around a frozen network.
    ///
    /// `calibration` optionally supplies images whose forward pass yields
    /// the per-edge activation statistic; without it the statistic is zero.
    /// The oracle is queried once here with the empty mask to anchor both
    /// EMAs at the unpruned network.
    pub fn new(
        net: NetworkSpec,
        cfg: EnvConfig,
        oracle: Box<dyn EvalOracle>,
        calibration: Option<&crate::diff::Tensor<f32>>,
    ) -> Result<Self, EnvError> {
        if !(0.0..1.0).contains(&cfg.ema_beta) {
            return Err(EnvError::BadConfig(format!("ema_beta {} not in [0,1)", cfg.ema_beta)));
        }
        match cfg.mode {
            Mode::ResourceConstrained { flops_target_ratio: t } if !(t > 0.0 && t <= 1.0) => {
                return Err(EnvError::BadConfig(format!("flops target {t} not in (0,1]")));
            }
            Mode::PerformanceGuaranteed { acc_target: t } if !(t > 0.0 && t <= 1.0) => {
                return Err(EnvError::BadConfig(format!("acc target {t} not in (0,1]")));
            }
            _ => {}
        }
        let idx = build_indexing(&net)?;
        let groups = group_partition(idx.num_units(), cfg.n_groups)?;
        let edge_stats = match calibration {
            Some(images) => {
                let per_layer = crate::eval::layer_activation_stats(&net, images)?;
                Some(net.edges().iter().map(|e| per_layer[e.src]).collect())
            }
            None => None,
        };
        let c_max = net.max_channels();
        let mask = PruningMask::keep_all(idx.num_units());
        let baseline_acc = oracle.top1(&mask)?;
        let tracker = EmaTracker::new(cfg.ema_beta, baseline_acc, 1.0);
        Ok(Self {
            net,
            idx,
            groups,
            cfg,
            oracle,
            tracker,
            baseline_acc,
            edge_stats,
            c_max,
            mask,
            cursor: 0,
            done: false,
            forced_keeps: 0,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> std::ops::Range<usize> {
        self.groups[g].clone()
    }

    pub fn num_units(&self) -> usize {
        self.idx.num_units()
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn indexing(&self) -> &ChannelIndexing {
        &self.idx
    }

    pub fn tracker(&self) -> EmaTracker {
        self.tracker
    }

    pub fn baseline_acc(&self) -> f64 {
        self.baseline_acc
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn c_max(&self) -> usize {
        self.c_max
    }

    fn observe(&self) -> Result<GraphObservation, EnvError> {
        let marks: Vec<usize> = if self.cursor < self.groups.len() {
            self.groups[self.cursor].clone().collect()
        } else {
            Vec::new()
        };
        Ok(build_graph(
            &self.net,
            &self.idx,
            &self.mask,
            &marks,
            self.edge_stats.as_deref(),
            self.c_max,
        )?)
    }

    /// Starts a new episode and returns the observation marking group 0.
    /// The EMA tracker persists across episodes.
    pub fn reset(&mut self) -> Result<GraphObservation, EnvError> {
        self.mask = PruningMask::keep_all(self.idx.num_units());
        self.cursor = 0;
        self.done = false;
        self.forced_keeps = 0;
        self.observe()
    }

    /// Prunes channel-producing layers that `mask` would silence by
    /// reviving, per empty layer, the highest-l1 unit among those pruned in
    /// this step. Returns how many units were revived.
    fn enforce_nonempty(&self, mask: &mut PruningMask, step_units: &[usize]) -> usize {
        let mut forced = 0;
        loop {
            let mut fixed_one = false;
            for layer in 0..self.net.len() {
                if !self.net.layer(layer).kind.produces_channels() {
                    continue;
                }
                let keep = self.idx.keep_vec(mask, layer);
                if keep.is_empty() || keep.iter().any(|&k| k) {
                    continue;
                }
                let l1 = |u: usize| unit_l1(&self.net, &self.idx, u).unwrap_or(0.0);
                let candidate = step_units
                    .iter()
                    .copied()
                    .filter(|&u| {
                        mask.is_pruned(u)
                            && self.idx.unit(u).iter().any(|&(l, _)| l == layer)
                    })
                    .max_by(|&a, &b| {
                        l1(a)
                            .partial_cmp(&l1(b))
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    });
                if let Some(u) = candidate {
                    mask.set_pruned(u, false);
                    forced += 1;
                    fixed_one = true;
                }
            }
            if !fixed_one {
                return forced;
            }
        }
    }

    /// Applies `action` (true = prune) to the current group. Non-terminal
    /// steps return reward 0; the final group triggers oracle evaluation,
    /// reward computation and the EMA update.
    pub fn step(&mut self, action: &[bool]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let group = self.groups[self.cursor].clone();
        if action.len() != group.len() {
            return Err(EnvError::BadAction { expected: group.len(), got: action.len() });
        }
        let mut next = self.mask.clone();
        let step_units: Vec<usize> = group
            .clone()
            .zip(action)
            .filter(|&(_, &prune)| prune)
            .map(|(u, _)| u)
            .collect();
        for &u in &step_units {
            next.set_pruned(u, true);
        }
        self.forced_keeps += self.enforce_nonempty(&mut next, &step_units);
        self.mask = next;
        self.cursor += 1;

        if self.cursor < self.groups.len() {
            return Ok(StepOutcome { obs: self.observe()?, reward: 0, done: false, result: None });
        }
        self.done = true;
        let acc_ep = self.oracle.top1(&self.mask)?;
        let f_ep = flops_ratio(&self.net, &self.idx, &self.mask)?;
        let (reward, phase) = compute_reward(self.cfg.mode, acc_ep, f_ep, &self.tracker);
        self.tracker.update(acc_ep, f_ep);
        let result = EpisodeResult {
            mask: self.mask.clone(),
            acc_ep,
            flops_ratio: f_ep,
            reward,
            phase,
            forced_keeps: self.forced_keeps,
        };
        Ok(StepOutcome { obs: self.observe()?, reward, done: true, result: Some(result) })
    }
}
