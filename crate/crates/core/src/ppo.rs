//! Clipped-surrogate PPO over graph embeddings with per-unit Bernoulli
//! actions.
//!
//! The actor head is sized to the largest group; smaller (final) groups use
//! a prefix of the logits. Rewards arrive only at episode end, so returns
//! are plain Monte-Carlo: `G_t = γ^{T-t} R_T` with γ ∈ {0, 1}.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::diff::{
    adam_step, AdamState, Activation, DiffError, Mlp, MlpVars, Real, Tape, Tensor,
    Var,
};
use crate::gat::{encode_on_tape, GatConfig, GatEncoderParams, GatVars, ObservationScaler};
use crate::net::GraphObservation;

pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    pub update_epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub episodes_per_update: usize,
    /// Hidden width of the actor/critic heads.
    pub head_hidden: usize,
    /// Initial per-unit prune probability (actor output bias).
    pub init_prune_prob: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            update_epochs: 4,
            minibatch: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            episodes_per_update: 16,
            head_hidden: 64,
            init_prune_prob: 0.05,
        }
    }
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("non-finite loss in minibatch {minibatch}")]
    NonFiniteLoss { minibatch: usize },
    #[error("rollout buffer invalid: {0}")]
    BadBuffer(String),
    #[error("checkpoint invalid: {0}")]
    BadCheckpoint(String),
}

/// Encoder plus actor/critic heads and the frozen feature scaler.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    pub encoder: GatEncoderParams<T>,
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub scaler: ObservationScaler,
    pub max_group: usize,
    /// Bumped on every update; rollouts collected under an older generation
    /// must not be replayed into `ppo_update`.
    pub generation: u64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<T: Real> Policy<T> {
    /// Orthogonal initialization everywhere; the actor's output layer uses
    /// gain 0.01 and a bias pushing initial prune probability to
    /// `cfg.init_prune_prob`.
    pub fn init(
        node_dim: usize,
        max_group: usize,
        gat_cfg: &GatConfig,
        cfg: &PpoConfig,
        scaler: ObservationScaler,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let encoder = GatEncoderParams::init(node_dim, gat_cfg, rng)?;
        let mut actor = Mlp::orthogonal(
            &[gat_cfg.embed, cfg.head_hidden, max_group],
            Activation::Tanh,
            Activation::Linear,
            0.01,
            rng,
        )?;
        let b0 = logit(cfg.init_prune_prob);
        for v in actor.biases.last_mut().expect("actor has layers").data_mut() {
            *v = T::from_f64(b0);
        }
        let critic = Mlp::orthogonal(
            &[gat_cfg.embed, cfg.head_hidden, 1],
            Activation::Tanh,
            Activation::Linear,
            1.0,
            rng,
        )?;
        Ok(Self { encoder, actor, critic, scaler, max_group, generation: 0 })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.actor.params_mut());
        out.extend(self.critic.params_mut());
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named("encoder");
        out.extend(self.actor.named("actor"));
        out.extend(self.critic.named("critic"));
        out
    }

    pub fn bind(&self, tape: &Tape<T>) -> PolicyVars {
        PolicyVars {
            encoder: self.encoder.bind(tape),
            actor: self.actor.bind(tape),
            critic: self.critic.bind(tape),
        }
    }

    pub fn cast<U: Real>(&self) -> Policy<U> {
        Policy {
            encoder: self.encoder.cast(),
            actor: self.actor.cast(),
            critic: self.critic.cast(),
            scaler: self.scaler.clone(),
            max_group: self.max_group,
            generation: self.generation,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

pub struct PolicyVars {
    pub encoder: GatVars,
    pub actor: MlpVars,
    pub critic: MlpVars,
}

impl PolicyVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = self.encoder.all_vars();
        out.extend(self.actor.all_vars());
        out.extend(self.critic.all_vars());
        out
    }
}

/// Encodes one observation and returns `(group logits, value)` vars.
pub fn heads_on_tape<T: Real>(
    tape: &Tape<T>,
    vars: &PolicyVars,
    scaler: &ObservationScaler,
    obs: &GraphObservation,
    group_size: usize,
) -> Result<(Var, Var), PpoError> {
    let (nodes, edges) = scaler.transform::<T>(obs);
    let emb = encode_on_tape(
        tape,
        &vars.encoder,
        tape.constant(nodes),
        tape.constant(edges),
        &obs.edge_index,
    )?
    .graph;
    let logits_full = vars.actor.forward(tape, emb)?;
    let width = tape.shape(logits_full)[1];
    if group_size > width {
        return Err(PpoError::BadBuffer(format!(
            "group of {group_size} exceeds actor width {width}"
        )));
    }
    let logits = if group_size == width {
        logits_full
    } else {
        tape.slice_cols(logits_full, 0, group_size)?
    };
    let logits = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let value = vars.critic.forward(tape, emb)?;
    Ok((logits, value))
}

/// One sampled decision.
#[derive(Debug, Clone)]
pub struct ActSample {
    pub bits: Vec<bool>,
    pub log_prob: f64,
    pub value: f64,
    /// Prune probabilities per unit of the group (diagnostics).
    pub probs: Vec<f64>,
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^z)`; `-softplus(∓z)` is the Bernoulli
/// log-probability of action 1/0 under logit `z`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (1.0 + (-z.abs()).exp()).ln()
}

/// Samples prune bits for the current group. Deterministic given the rng
/// state; the policy is read-only.
pub fn act<T: Real>(
    policy: &Policy<T>,
    obs: &GraphObservation,
    group_size: usize,
    rng: &mut impl Rng,
) -> Result<ActSample, PpoError> {
    let (logits, value) = policy_heads(policy, obs, group_size)?;
    let mut bits = Vec::with_capacity(group_size);
    let mut log_prob = 0.0;
    let mut probs = Vec::with_capacity(group_size);
    for &z in &logits {
        let p = stable_sigmoid(z);
        let bit = rng.gen::<f64>() < p;
        // log π(bit) = −softplus(∓z), numerically stable at saturation.
        log_prob -= if bit { softplus(-z) } else { softplus(z) };
        bits.push(bit);
        probs.push(p);
    }
    Ok(ActSample { bits, log_prob, value, probs })
}

/// Greedy variant: prune exactly where the prune probability exceeds 1/2.
pub fn act_greedy<T: Real>(
    policy: &Policy<T>,
    obs: &GraphObservation,
    group_size: usize,
) -> Result<Vec<bool>, PpoError> {
    let (logits, _) = policy_heads(policy, obs, group_size)?;
    Ok(logits.iter().map(|&z| z > 0.0).collect())
}

/// Raw group logits and value on a throwaway tape.
pub fn policy_heads<T: Real>(
    policy: &Policy<T>,
    obs: &GraphObservation,
    group_size: usize,
) -> Result<(Vec<f64>, f64), PpoError> {
    let tape: Tape<T> = Tape::new();
    let vars = policy.bind(&tape);
    let (logits, value) = heads_on_tape(&tape, &vars, &policy.scaler, obs, group_size)?;
    let z: Vec<f64> = tape.value(logits).data().iter().map(|v| v.into_f64()).collect();
    let v = tape.value(value).item().into_f64();
    Ok((z, v))
}

/// Writes the policy (parameters, scaler, and layout metadata) into a
/// single tensor container.
pub fn save_policy<T: Real>(path: &std::path::Path, policy: &Policy<T>) -> Result<(), PpoError> {
    let f32_policy: Policy<f32> = policy.cast();
    let rounds = f32_policy.encoder.layers.len();
    let hidden = f32_policy.encoder.layers[0].d_out();
    let embed = f32_policy.encoder.embed_dim();
    let head_hidden = f32_policy.critic.weights[0].shape()[0];
    let meta = Tensor::new(
        vec![9],
        vec![
            1.0, // format revision
            rounds as f32,
            hidden as f32,
            embed as f32,
            f32_policy.encoder.layers[0].leaky_slope as f32,
            f32_policy.max_group as f32,
            f32_policy.encoder.node_dim() as f32,
            head_hidden as f32,
            f32_policy.generation as f32,
        ],
    )?;
    let mut named: Vec<(String, Tensor<f32>)> = vec![("meta".into(), meta)];
    named.extend(
        f32_policy.named().iter().map(|(n, t)| (n.clone(), (*t).clone())),
    );
    named.extend(f32_policy.scaler.to_tensors("scaler"));
    let refs: Vec<(&str, &Tensor<f32>)> =
        named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    crate::io::write_tensors(path, &refs)?;
    Ok(())
}

/// Loads a policy saved by [`save_policy`].
pub fn load_policy<T: Real>(path: &std::path::Path) -> Result<Policy<T>, PpoError> {
    let tensors = crate::io::read_tensors(path)?;
    let lookup = |name: &str| -> Result<&Tensor<f32>, PpoError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| PpoError::BadCheckpoint(format!("missing tensor {name:?}")))
    };
    let meta = lookup("meta")?;
    if meta.data().len() != 9 || meta.data()[0] != 1.0 {
        return Err(PpoError::BadCheckpoint("unsupported meta layout".into()));
    }
    let rounds = meta.data()[1] as usize;
    let hidden = meta.data()[2] as usize;
    let embed = meta.data()[3] as usize;
    let leaky_slope = meta.data()[4] as f64;
    let max_group = meta.data()[5] as usize;
    let node_dim = meta.data()[6] as usize;
    let head_hidden = meta.data()[7] as usize;
    let generation = meta.data()[8] as u64;

    let gat_cfg = GatConfig { rounds, hidden, embed, leaky_slope };
    let mut rng = crate::seed::rng_from_seed(0);
    let mut template: Policy<f32> = Policy::init(
        node_dim,
        max_group,
        &gat_cfg,
        &PpoConfig { head_hidden, ..Default::default() },
        ObservationScaler::identity(node_dim),
        &mut rng,
    )?;
    for (name, tensor) in template.named_shapes() {
        let t = lookup(&name)?;
        if t.shape() != tensor.as_slice() {
            return Err(PpoError::BadCheckpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                tensor
            )));
        }
    }
    for (name, param) in template.named_mut() {
        *param = lookup(&name)?.clone();
    }
    template.scaler = ObservationScaler::from_tensors("scaler", &tensors)
        .ok_or_else(|| PpoError::BadCheckpoint("missing scaler tensors".into()))?;
    template.generation = generation;
    Ok(template.cast())
}

impl<T: Real> Policy<T> {
    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.named().iter().map(|(n, _)| n.clone()).collect();
        names.into_iter().zip(self.params_mut()).collect()
    }
}

/// One step of one episode as stored for the update.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub obs: GraphObservation,
    pub group: Range<usize>,
    pub bits: Vec<bool>,
    pub log_prob: f64,
    pub value: f64,
}

/// A complete episode: every group decided, terminal reward known.
#[derive(Debug, Clone)]
pub struct EpisodeRollout {
    pub steps: Vec<StepSample>,
    pub reward: i8,
    /// Policy generation the episode was collected under.
    pub generation: u64,
}

/// Monte-Carlo returns, flattened in buffer order.
pub fn compute_returns(episodes: &[EpisodeRollout], gamma: f64) -> Vec<f64> {
    let mut returns = Vec::new();
    for ep in episodes {
        let t_max = ep.steps.len();
        for t in 0..t_max {
            returns.push(gamma.powi((t_max - 1 - t) as i32) * ep.reward as f64);
        }
    }
    returns
}

/// `G_t − V(s_t)`, normalized to mean 0 / std 1 over the batch (ε = 1e-8).
/// A single-step batch has no spread and is left unnormalized.
pub fn compute_advantages(episodes: &[EpisodeRollout], returns: &[f64]) -> Vec<f64> {
    let mut adv: Vec<f64> = Vec::with_capacity(returns.len());
    let mut k = 0;
    for ep in episodes {
        for step in &ep.steps {
            adv.push(returns[k] - step.value);
            k += 1;
        }
    }
    if adv.len() < 2 {
        return adv;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Runs the clipped-surrogate update over the buffer and bumps the policy
/// generation. `opt` must have been created over `policy.params_mut()` and
/// reused across updates.
pub fn ppo_update<T: Real>(
    policy: &mut Policy<T>,
    opt: &mut AdamState<T>,
    episodes: &[EpisodeRollout],
    gamma: f64,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoReport, PpoError> {
    if episodes.is_empty() {
        return Err(PpoError::BadBuffer("no episodes".into()));
    }
    for ep in episodes {
        if ep.steps.is_empty() {
            return Err(PpoError::BadBuffer("empty episode".into()));
        }
        if let Some(s) = ep.steps.iter().find(|s| s.group.len() != s.bits.len()) {
            return Err(PpoError::BadBuffer(format!(
                "step has {} bits for a group of {}",
                s.bits.len(),
                s.group.len()
            )));
        }
        if ep.generation != policy.generation {
            return Err(PpoError::BadBuffer(format!(
                "episode from generation {} replayed into generation {}",
                ep.generation, policy.generation
            )));
        }
    }
    let returns = compute_returns(episodes, gamma);
    let advantages = compute_advantages(episodes, &returns);
    let flat: Vec<&StepSample> = episodes.iter().flat_map(|e| e.steps.iter()).collect();

    let mut report = PpoReport { policy_loss: 0.0, value_loss: 0.0, entropy: 0.0, clip_fraction: 0.0 };
    let mut minibatches = 0usize;
    let mut mb_id = 0usize;
    for _ in 0..cfg.update_epochs {
        let mut order: Vec<usize> = (0..flat.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let tape: Tape<T> = Tape::new();
            let vars = policy.bind(&tape);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut clipped = 0usize;
            let mut ent_sum = 0.0;
            let mut vloss_sum = 0.0;
            let mut ploss_sum = 0.0;
            for &k in chunk {
                let step = flat[k];
                let (logits, value) =
                    heads_on_tape(&tape, &vars, &policy.scaler, &step.obs, step.group.len())?;
                let acts = Tensor::new(
                    vec![1, step.bits.len()],
                    step.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
                )?;
                let lp_new = tape.bernoulli_logprob_sum(logits, &acts)?;
                let ratio = tape.exp(tape.add_const(lp_new, -step.log_prob));
                let a = advantages[k];
                let surr = tape.min2(
                    tape.scale_const(ratio, a),
                    tape.scale_const(tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), a),
                )?;
                let entropy = tape.bernoulli_entropy_sum(logits);
                let target = Tensor::full(&[1, 1], T::from_f64(returns[k]));
                let vloss = tape.sum_sq_err(value, &target)?;
                let loss = tape.sub(
                    tape.add(
                        tape.scale_const(surr, -1.0),
                        tape.scale_const(vloss, cfg.value_coef),
                    )?,
                    tape.scale_const(entropy, cfg.entropy_coef),
                )?;
                losses.push(loss);

                let r = tape.value(ratio).item().into_f64();
                if (r - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
                ent_sum += tape.value(entropy).item().into_f64();
                vloss_sum += tape.value(vloss).item().into_f64();
                ploss_sum -= tape.value(surr).item().into_f64();
            }
            let total = tape.mean(tape.stack_scalars(&losses)?);
            let total_val = tape.value(total).item().into_f64();
            if !total_val.is_finite() {
                return Err(PpoError::NonFiniteLoss { minibatch: mb_id });
            }
            let mut grads = tape.backward(total)?;
            let all_vars = vars.all_vars();
            let mut params = policy.params_mut();
            let gvec: Vec<Tensor<T>> = all_vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
                .collect();
            adam_step(opt, &mut params, &gvec)?;

            report.policy_loss += ploss_sum / chunk.len() as f64;
            report.value_loss += vloss_sum / chunk.len() as f64;
            report.entropy += ent_sum / chunk.len() as f64;
            report.clip_fraction += clipped as f64 / chunk.len() as f64;
            minibatches += 1;
            mb_id += 1;
        }
    }
    let n = minibatches.max(1) as f64;
    report.policy_loss /= n;
    report.value_loss /= n;
    report.entropy /= n;
    report.clip_fraction /= n;
    policy.generation += 1;
    debug_assert!(policy.all_finite());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_graph, build_indexing, PruningMask};
    use crate::seed::rng_from_seed;
    use crate::toynets;

    fn small_gat() -> GatConfig {
        GatConfig { rounds: 2, hidden: 12, embed: 10, leaky_slope: 0.2 }
    }

    fn obs_for(seed: u64, marks: &[usize]) -> GraphObservation {
        let net = toynets::chain_net(seed);
        let idx = build_indexing(&net).unwrap();
        let mask = PruningMask::keep_all(idx.num_units());
        build_graph(&net, &idx, &mask, marks, None, net.max_channels()).unwrap()
    }

    fn small_policy(seed: u64, max_group: usize) -> Policy<f64> {
        let obs = obs_for(50, &[]);
        let mut rng = rng_from_seed(seed);
        Policy::init(
            obs.node_dim(),
            max_group,
            &small_gat(),
            &PpoConfig::default(),
            ObservationScaler::identity(obs.node_dim()),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn actor_bias_matches_logit_of_p0() {
        let p = small_policy(1, 12);
        let b = p.actor.biases.last().unwrap();
        for &v in b.data() {
            assert!((v - (-2.9444389791664403)).abs() < 1e-9);
        }
    }

    #[test]
    fn initial_prune_rate_is_near_p0() {
        let p = small_policy(2, 12);
        let mut rng = rng_from_seed(7);
        let mut pruned = 0usize;
        let mut total = 0usize;
        for i in 0..200 {
            let obs = obs_for(50 + (i % 4) as u64, &[(i % 10) as usize]);
            let s = act(&p, &obs, 12, &mut rng).unwrap();
            pruned += s.bits.iter().filter(|&&b| b).count();
            total += s.bits.len();
        }
        let rate = pruned as f64 / total as f64;
        assert!(
            (0.03..=0.07).contains(&rate),
            "initial prune rate {rate} outside [0.03, 0.07]"
        );
    }

    #[test]
    fn act_is_deterministic_given_rng_state() {
        let p = small_policy(3, 8);
        let obs = obs_for(51, &[0, 1]);
        let a = act(&p, &obs, 8, &mut rng_from_seed(9)).unwrap();
        let b = act(&p, &obs, 8, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a.bits, b.bits);
        assert_eq!(a.log_prob, b.log_prob);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn zero_logits_give_k_ln2_log_prob() {
        let mut p = small_policy(4, 6);
        // Zero the actor entirely: logits become exactly 0.
        for w in &mut p.actor.weights {
            *w = Tensor::zeros(w.shape());
        }
        for b in &mut p.actor.biases {
            *b = Tensor::zeros(b.shape());
        }
        let obs = obs_for(52, &[3]);
        let s = act(&p, &obs, 6, &mut rng_from_seed(11)).unwrap();
        assert!((s.log_prob - (-6.0 * std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(s.probs.iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn returns_follow_gamma() {
        let mk = |steps: usize, reward: i8| EpisodeRollout {
            steps: (0..steps)
                .map(|_| StepSample {
                    obs: obs_for(50, &[]),
                    group: 0..1,
                    bits: vec![false],
                    log_prob: -0.7,
                    value: 0.1,
                })
                .collect(),
            reward,
            generation: 0,
        };
        assert_eq!(compute_returns(&[mk(4, 1)], 1.0), vec![1.0; 4]);
        assert_eq!(compute_returns(&[mk(1, -1)], 0.0), vec![-1.0]);
        let r = compute_returns(&[mk(3, 1)], 0.5);
        assert_eq!(r, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn advantages_are_normalized() {
        let eps: Vec<EpisodeRollout> = (0..4)
            .map(|i| EpisodeRollout {
                steps: vec![StepSample {
                    obs: obs_for(50, &[]),
                    group: 0..1,
                    bits: vec![false],
                    log_prob: -0.7,
                    value: 0.1 * i as f64,
                }],
                reward: if i % 2 == 0 { 1 } else { -1 },
                generation: 0,
            })
            .collect();
        let ret = compute_returns(&eps, 1.0);
        let adv = compute_advantages(&eps, &ret);
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        let var: f64 = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    fn collect_episode(
        policy: &Policy<f64>,
        n_steps: usize,
        reward: i8,
        rng: &mut impl Rng,
    ) -> EpisodeRollout {
        let steps = (0..n_steps)
            .map(|g| {
                let obs = obs_for(53, &[g]);
                let s = act(policy, &obs, 4, rng).unwrap();
                StepSample {
                    obs,
                    group: (4 * g)..(4 * g + 4),
                    bits: s.bits,
                    log_prob: s.log_prob,
                    value: s.value,
                }
            })
            .collect();
        EpisodeRollout { steps, reward, generation: policy.generation }
    }

    #[test]
    fn fresh_buffer_has_zero_clip_fraction_on_first_epoch() {
        let mut policy = small_policy(5, 4);
        let mut rng = rng_from_seed(21);
        let eps: Vec<EpisodeRollout> =
            (0..3).map(|i| collect_episode(&policy, 2, if i == 0 { 1 } else { -1 }, &mut rng)).collect();
        let mut opt = AdamState::new(
            &policy.params_mut().iter().map(|p| &**p).collect::<Vec<_>>(),
            AdamConfig::with_lr(1e-3),
        );
        let cfg = PpoConfig { update_epochs: 1, minibatch: 64, ..Default::default() };
        let report = ppo_update(&mut policy, &mut opt, &eps, 1.0, &cfg, &mut rng).unwrap();
        // One epoch over fresh data in a single minibatch: ratios are all
        // exactly 1 when the loss is evaluated, so nothing clips.
        assert_eq!(report.clip_fraction, 0.0);
        assert!(report.entropy >= 0.0 && report.entropy <= 4.0 * std::f64::consts::LN_2 + 1e-9);
        assert_eq!(policy.generation, 1);
        assert!(policy.all_finite());
    }

    #[test]
    fn positive_advantage_increases_action_log_prob() {
        let mut policy = small_policy(6, 4);
        let mut rng = rng_from_seed(22);
        let ep = collect_episode(&policy, 1, 1, &mut rng);
        let step = ep.steps[0].clone();
        let before = step.log_prob;
        let mut opt = AdamState::new(
            &policy.params_mut().iter().map(|p| &**p).collect::<Vec<_>>(),
            AdamConfig::with_lr(1e-3),
        );
        let cfg = PpoConfig { update_epochs: 1, minibatch: 8, ..Default::default() };
        ppo_update(&mut policy, &mut opt, &[ep], 0.0, &cfg, &mut rng).unwrap();
        // Reward +1, single step: advantage = 1 − V(s) > 0 for a fresh
        // critic (|V| small), so the sampled action must become likelier.
        let (logits, _) = policy_heads(&policy, &step.obs, 4).unwrap();
        let after: f64 = logits
            .iter()
            .zip(&step.bits)
            .map(|(&z, &b)| -if b { softplus(-z) } else { softplus(z) })
            .sum();
        assert!(
            after > before,
            "log-prob did not increase: {before} -> {after}"
        );
    }

    #[test]
    fn checkpoint_round_trips_behavior() {
        let mut policy = small_policy(9, 5);
        policy.generation = 3;
        policy.scaler.node_mean[2] = 1.5;
        policy.scaler.node_std[4] = 2.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.gsccw");
        save_policy(&path, &policy).unwrap();
        let back: Policy<f64> = load_policy(&path).unwrap();
        assert_eq!(back.generation, 3);
        assert_eq!(back.max_group, 5);
        let obs = obs_for(54, &[1, 2]);
        let (za, va) = policy_heads(&policy, &obs, 5).unwrap();
        let (zb, vb) = policy_heads(&back, &obs, 5).unwrap();
        // Storage is f32, so round-tripped heads agree to f32 precision.
        for (a, b) in za.iter().zip(&zb) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!((va - vb).abs() < 1e-4);
    }

    #[test]
    fn stale_generation_is_rejected() {
        let mut policy = small_policy(7, 4);
        let mut rng = rng_from_seed(23);
        let mut ep = collect_episode(&policy, 1, 1, &mut rng);
        ep.generation = 5;
        let mut opt = AdamState::new(
            &policy.params_mut().iter().map(|p| &**p).collect::<Vec<_>>(),
            AdamConfig::default(),
        );
        let err = ppo_update(&mut policy, &mut opt, &[ep], 1.0, &PpoConfig::default(), &mut rng);
        assert!(matches!(err, Err(PpoError::BadBuffer(_))));
    }

    #[test]
    fn ppo_loss_gradients_pass_fd_check() {
        let policy = small_policy(8, 4);
        let mut rng = rng_from_seed(24);
        let mut eps: Vec<EpisodeRollout> =
            (0..2).map(|i| collect_episode(&policy, 2, if i == 0 { 1 } else { -1 }, &mut rng)).collect();
        // One step uses a 3-wide group so the logit tail mask is on the
        // differentiated path.
        {
            let obs = obs_for(53, &[1]);
            let (logits, value) = policy_heads(&policy, &obs, 3).unwrap();
            let bits = vec![true, false, false];
            let log_prob: f64 = logits
                .iter()
                .zip(&bits)
                .map(|(&z, &b)| -if b { softplus(-z) } else { softplus(z) })
                .sum();
            eps[1].steps[1] = StepSample { obs, group: 4..7, bits, log_prob, value };
        }
        // Offset stored log-probs slightly so ratios sit strictly inside
        // the clip interval, where the loss is smooth.
        for (i, e) in eps.iter_mut().enumerate() {
            for (j, s) in e.steps.iter_mut().enumerate() {
                s.log_prob += if (i + j) % 2 == 0 { 0.03 } else { -0.03 };
            }
        }
        let returns = compute_returns(&eps, 1.0);
        let advantages = compute_advantages(&eps, &returns);
        let flat: Vec<StepSample> =
            eps.iter().flat_map(|e| e.steps.iter().cloned()).collect();

        let template = policy.clone();
        let cfg = PpoConfig::default();
        let inputs: Vec<Tensor<f64>> =
            policy.named().iter().map(|(_, t)| (*t).clone()).collect();
        let report = crate::diff::check_gradients(
            &inputs,
            move |tape, vars| {
                let mut pv = template.bind(tape);
                let mut it = vars.iter().copied();
                for l in &mut pv.encoder.layers {
                    l.theta_s = it.next().unwrap();
                    l.theta_t = it.next().unwrap();
                    l.theta_e = it.next().unwrap();
                    l.attn = it.next().unwrap();
                }
                for slot in [&mut pv.encoder.pool_gate, &mut pv.encoder.pool_proj, &mut pv.actor, &mut pv.critic]
                {
                    let n = slot.ws.len();
                    for i in 0..n {
                        slot.ws[i] = it.next().unwrap();
                    }
                    for i in 0..n {
                        slot.bs[i] = it.next().unwrap();
                    }
                }
                let mut losses = Vec::new();
                for (k, step) in flat.iter().enumerate() {
                    let (logits, value) = heads_on_tape(
                        tape,
                        &pv,
                        &template.scaler,
                        &step.obs,
                        step.bits.len(),
                    )
                    .map_err(|e| match e {
                        PpoError::Diff(d) => d,
                        other => DiffError::InvalidArgument {
                            op: "fd",
                            msg: other.to_string(),
                        },
                    })?;
                    let acts = Tensor::new(
                        vec![1, step.bits.len()],
                        step.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                    )?;
                    let lp_new = tape.bernoulli_logprob_sum(logits, &acts)?;
                    let ratio = tape.exp(tape.add_const(lp_new, -step.log_prob));
                    let a = advantages[k];
                    let surr = tape.min2(
                        tape.scale_const(ratio, a),
                        tape.scale_const(tape.clamp(ratio, 0.8, 1.2), a),
                    )?;
                    let entropy = tape.bernoulli_entropy_sum(logits);
                    let target = Tensor::full(&[1, 1], returns[k]);
                    let vloss = tape.sum_sq_err(value, &target)?;
                    losses.push(tape.sub(
                        tape.add(
                            tape.scale_const(surr, -1.0),
                            tape.scale_const(vloss, cfg.value_coef),
                        )?,
                        tape.scale_const(entropy, cfg.entropy_coef),
                    )?);
                }
                Ok(tape.mean(tape.stack_scalars(&losses)?))
            },
            &crate::diff::FdOptions { h: 1e-5, max_coords: 10 },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "fd mismatch: {}", report.max_rel_err);
    }
}
