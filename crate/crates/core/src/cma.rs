//! CMA-ES baseline over continuous genomes that binarize to pruning masks.
//!
//! Standard (μ/μ_w, λ) CMA-ES: rank-one and rank-μ covariance updates with
//! cumulative step-size adaptation. Genomes live in R^C; a sampled value
//! squashes through a sigmoid and prunes its unit when the result exceeds
//! 1/2. The covariance is kept symmetric positive-definite by flooring
//! eigenvalues at 1e-12; repairs are counted, not fatal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::eval::EvalOracle;
use crate::net::{build_indexing, flops_ratio, NetError, NetworkSpec, PruningMask};
use crate::seed::rng_from_seed;

pub const EIG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardSemantics {
    /// Literal printed branches: full accuracy when the constraint is
    /// violated, penalty when satisfied.
    AsPaper,
    /// Penalize constraint violation; matches the surrounding prose.
    #[default]
    Corrected,
}

/// Penalty fitness for a mask with accuracy `acc` and FLOPs ratio `s`.
pub fn es_fitness(acc: f64, s: f64, s_target: f64, semantics: RewardSemantics) -> f64 {
    let violated = match semantics {
        RewardSemantics::AsPaper => s <= s_target,
        RewardSemantics::Corrected => s > s_target,
    };
    if violated {
        acc - (s - s_target).abs()
    } else {
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsConfig {
    pub population: usize,
    pub parents: usize,
    pub s_target: f64,
    pub generations: usize,
    pub semantics: RewardSemantics,
}

impl EsConfig {
    /// Defaults for genome dimension `c`: λ = 4 + ⌊3 ln c⌋, μ = ⌊λ/2⌋.
    pub fn for_dim(c: usize, s_target: f64) -> Self {
        let population = (4 + (3.0 * (c as f64).ln()).floor() as usize).max(4);
        Self {
            population,
            parents: population / 2,
            s_target,
            generations: 100,
            semantics: RewardSemantics::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EsError {
    #[error("population must be at least 2, got {0}")]
    PopulationTooSmall(usize),
    #[error("parents must lie in 1..=population/2, got {0}")]
    BadParents(usize),
    #[error("expected {want} values, got {got}")]
    LengthMismatch { want: usize, got: usize },
    #[error("non-finite fitness at index {0}")]
    NonFiniteFitness(usize),
    #[error("ask must precede tell within a generation")]
    TellBeforeAsk,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("oracle failed: {0}")]
    Oracle(String),
}

/// Full strategy state. Constants follow the standard parameterization
/// for (μ/μ_w, λ) selection.
#[derive(Debug, Clone)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sigma: f64,
    pub generation: usize,
    /// Count of eigenvalue-floor repairs across all updates.
    pub repairs: usize,
    lambda: usize,
    mu: usize,
    weights: DVector<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    eig_b: DMatrix<f64>,
    eig_d: DVector<f64>,
    pending: Option<Vec<DVector<f64>>>,
}

impl CmaState {
    pub fn new(mean: Vec<f64>, sigma: f64, cfg: &EsConfig) -> Result<Self, EsError> {
        if cfg.population < 2 {
            return Err(EsError::PopulationTooSmall(cfg.population));
        }
        if cfg.parents == 0 || cfg.parents > cfg.population / 2 {
            return Err(EsError::BadParents(cfg.parents));
        }
        let c = mean.len();
        let n = c as f64;
        let lambda = cfg.population;
        let mu = cfg.parents;
        let raw: Vec<f64> =
            (1..=mu).map(|i| ((mu as f64) + 0.5).ln() - (i as f64).ln()).collect();
        let sum: f64 = raw.iter().sum();
        let weights = DVector::from_iterator(mu, raw.iter().map(|w| w / sum));
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
        let c_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff))
            .min(1.0 - c_1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance: DMatrix::identity(c, c),
            sigma,
            generation: 0,
            repairs: 0,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            p_sigma: DVector::zeros(c),
            p_c: DVector::zeros(c),
            eig_b: DMatrix::identity(c, c),
            eig_d: DVector::from_element(c, 1.0),
            pending: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn population(&self) -> usize {
        self.lambda
    }

    /// Samples λ genomes from N(mean, σ²·covariance).
    pub fn ask(&mut self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let c = self.dim();
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z = DVector::from_iterator(
                c,
                (0..c).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)),
            );
            let y = &self.eig_b * self.eig_d.component_mul(&z);
            out.push((&self.mean + self.sigma * y).iter().cloned().collect());
        }
        self.pending =
            Some(out.iter().map(|g| DVector::from_vec(g.clone())).collect());
        out
    }

    /// Ranks genomes by fitness (maximization) and applies the standard
    /// mean, evolution-path, covariance, and step-size updates.
    pub fn tell(&mut self, fitnesses: &[f64]) -> Result<(), EsError> {
        let xs = self.pending.take().ok_or(EsError::TellBeforeAsk)?;
        if fitnesses.len() != xs.len() {
            return Err(EsError::LengthMismatch { want: xs.len(), got: fitnesses.len() });
        }
        if let Some(i) = fitnesses.iter().position(|f| !f.is_finite()) {
            return Err(EsError::NonFiniteFitness(i));
        }
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| fitnesses[b].partial_cmp(&fitnesses[a]).unwrap());

        let old_mean = self.mean.clone();
        let mut new_mean = DVector::zeros(self.dim());
        for (i, &k) in order.iter().take(self.mu).enumerate() {
            new_mean += self.weights[i] * &xs[k];
        }
        let y_w = (&new_mean - &old_mean) / self.sigma;
        self.mean = new_mean;

        // C^{-1/2} y_w via the cached eigendecomposition.
        let inv_sqrt_y = &self.eig_b
            * DVector::from_iterator(
                self.dim(),
                (self.eig_b.transpose() * &y_w)
                    .iter()
                    .zip(self.eig_d.iter())
                    .map(|(v, d)| v / d),
            );
        let cs = self.c_sigma;
        self.p_sigma =
            (1.0 - cs) * &self.p_sigma + (cs * (2.0 - cs) * self.mu_eff).sqrt() * inv_sqrt_y;

        let expected_decay =
            (1.0 - (1.0 - cs).powi(2 * (self.generation as i32 + 1))).sqrt();
        let h_sigma = if self.p_sigma.norm() / expected_decay
            < (1.4 + 2.0 / (self.dim() as f64 + 1.0)) * self.chi_n
        {
            1.0
        } else {
            0.0
        };
        let cc = self.c_c;
        self.p_c = (1.0 - cc) * &self.p_c
            + h_sigma * (cc * (2.0 - cc) * self.mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::zeros(self.dim(), self.dim());
        for (i, &k) in order.iter().take(self.mu).enumerate() {
            let y = (&xs[k] - &old_mean) / self.sigma;
            rank_mu += self.weights[i] * (&y * y.transpose());
        }
        let rank_one = &self.p_c * self.p_c.transpose()
            + (1.0 - h_sigma) * cc * (2.0 - cc) * &self.covariance;
        self.covariance = (1.0 - self.c_1 - self.c_mu) * &self.covariance
            + self.c_1 * rank_one
            + self.c_mu * rank_mu;

        self.sigma *= ((cs / self.d_sigma) * (self.p_sigma.norm() / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.refresh_eigen();
        Ok(())
    }

    /// Symmetrizes, floors eigenvalues at `EIG_FLOOR`, and caches the
    /// decomposition used by `ask`.
    fn refresh_eigen(&mut self) {
        let sym = (&self.covariance + self.covariance.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let mut vals = eig.eigenvalues;
        let mut repaired = false;
        for v in vals.iter_mut() {
            if *v < EIG_FLOOR {
                *v = EIG_FLOOR;
                repaired = true;
            }
        }
        if repaired {
            self.repairs += 1;
            self.covariance = &eig.eigenvectors
                * DMatrix::from_diagonal(&vals)
                * eig.eigenvectors.transpose();
        } else {
            self.covariance = sym;
        }
        self.eig_d = vals.map(f64::sqrt);
        self.eig_b = eig.eigenvectors;
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eig_d.iter().map(|d| d * d).fold(f64::INFINITY, f64::min)
    }
}

/// Sigmoid-squash then strict threshold: prune unit i iff σ(g_i) > 1/2.
pub fn binarize(genome: &[f64]) -> PruningMask {
    PruningMask::from_bits(
        genome.iter().map(|&g| 1.0 / (1.0 + (-g).exp()) > 0.5).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationLog {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_acc: f64,
    pub best_s: f64,
    pub mean_s: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct EsRunResult {
    pub log: Vec<GenerationLog>,
    /// Highest-fitness mask seen across the whole run.
    pub best_mask: PruningMask,
    pub best_fitness: f64,
    pub best_acc: f64,
    pub best_s: f64,
    /// Highest-fitness mask among those with `s ≤ s_target`, if any.
    pub best_feasible: Option<(PruningMask, f64, f64)>,
    pub repairs: usize,
}

/// Optimizes masks for `net` against the oracle under the penalty fitness.
pub fn run_es(
    net: &NetworkSpec,
    oracle: &dyn EvalOracle,
    cfg: &EsConfig,
    seed: u64,
) -> Result<EsRunResult, EsError> {
    let idx = build_indexing(net)?;
    let dim = idx.num_units();
    let mut state = CmaState::new(vec![0.0; dim], 0.5, cfg)?;
    let mut rng = rng_from_seed(seed);
    let mut log = Vec::with_capacity(cfg.generations);
    let mut best: Option<(PruningMask, f64, f64, f64)> = None;
    let mut best_feasible: Option<(PruningMask, f64, f64)> = None;
    for g in 0..cfg.generations {
        let genomes = state.ask(&mut rng);
        let mut fitnesses = Vec::with_capacity(genomes.len());
        let mut gen_best: Option<(usize, f64)> = None;
        let mut accs = Vec::with_capacity(genomes.len());
        let mut ss = Vec::with_capacity(genomes.len());
        for (i, genome) in genomes.iter().enumerate() {
            let mask = binarize(genome);
            let acc =
                oracle.top1(&mask).map_err(|e| EsError::Oracle(e.to_string()))?;
            let s = flops_ratio(net, &idx, &mask)?;
            let f = es_fitness(acc, s, cfg.s_target, cfg.semantics);
            if gen_best.map_or(true, |(_, bf)| f > bf) {
                gen_best = Some((i, f));
            }
            if best.as_ref().map_or(true, |(_, bf, _, _)| f > *bf) {
                best = Some((mask.clone(), f, acc, s));
            }
            if s <= cfg.s_target
                && best_feasible.as_ref().map_or(true, |(_, bf, _)| f > *bf)
            {
                best_feasible = Some((mask.clone(), f, s));
            }
            fitnesses.push(f);
            accs.push(acc);
            ss.push(s);
        }
        let (bi, bf) = gen_best.expect("population is nonempty");
        log.push(GenerationLog {
            generation: g,
            best_fitness: bf,
            best_acc: accs[bi],
            best_s: ss[bi],
            mean_s: ss.iter().sum::<f64>() / ss.len() as f64,
            sigma: state.sigma,
        });
        state.tell(&fitnesses)?;
    }
    let (best_mask, best_fitness, best_acc, best_s) = best.expect("ran at least one generation");
    Ok(EsRunResult {
        log,
        best_mask,
        best_fitness,
        best_acc,
        best_s,
        best_feasible,
        repairs: state.repairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{synth_dataset, BuiltinOracle};
    use crate::toynets;

    #[test]
    fn fitness_branches_match_both_semantics() {
        assert_eq!(es_fitness(0.9, 0.6, 0.5, RewardSemantics::AsPaper), 0.9);
        let f = es_fitness(0.9, 0.4, 0.5, RewardSemantics::AsPaper);
        assert!((f - 0.8).abs() < 1e-12);
        let g = es_fitness(0.9, 0.6, 0.5, RewardSemantics::Corrected);
        assert!((g - 0.8).abs() < 1e-12);
        assert_eq!(es_fitness(0.9, 0.4, 0.5, RewardSemantics::Corrected), 0.9);
        // Zero penalty exactly at the boundary under both readings.
        assert_eq!(es_fitness(0.9, 0.5, 0.5, RewardSemantics::AsPaper), 0.9);
        assert_eq!(es_fitness(0.9, 0.5, 0.5, RewardSemantics::Corrected), 0.9);
    }

    #[test]
    fn binarize_thresholds_strictly_above_half() {
        let logits: Vec<f64> = [0.7f64, 0.3, 0.5]
            .iter()
            .map(|p| (p / (1.0 - p)).ln())
            .collect();
        let mask = binarize(&logits);
        assert_eq!(mask.bits(), &[true, false, false]);
    }

    fn sphere_target(dim: usize) -> Vec<f64> {
        (0..dim).map(|i| 0.3 - 0.07 * i as f64).collect()
    }

    #[test]
    fn sphere_converges_within_two_hundred_generations() {
        let dim = 10;
        let target = sphere_target(dim);
        let cfg = EsConfig::for_dim(dim, 0.5);
        assert_eq!(cfg.population, 10);
        let mut state = CmaState::new(vec![0.0; dim], 0.5, &cfg).unwrap();
        let mut rng = rng_from_seed(17);
        for _ in 0..200 {
            let genomes = state.ask(&mut rng);
            let fits: Vec<f64> = genomes
                .iter()
                .map(|g| {
                    -g.iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>()
                })
                .collect();
            state.tell(&fits).unwrap();
        }
        let err: f64 = state
            .mean
            .iter()
            .zip(&target)
            .map(|(m, t)| (m - t) * (m - t))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-2, "mean missed the optimum by {err}");
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let dim = 6;
        let cfg = EsConfig::for_dim(dim, 0.5);
        let mut state = CmaState::new(vec![0.1; dim], 0.3, &cfg).unwrap();
        let mut rng = rng_from_seed(18);
        for g in 0..60 {
            let genomes = state.ask(&mut rng);
            // Degenerate fitness (all equal) stresses the update.
            let fits: Vec<f64> =
                genomes.iter().map(|x| if g % 3 == 0 { 0.0 } else { x[0] }).collect();
            state.tell(&fits).unwrap();
            assert!(state.min_eigenvalue() >= EIG_FLOOR);
            for i in 0..dim {
                for j in 0..i {
                    let d = (state.covariance[(i, j)] - state.covariance[(j, i)]).abs();
                    assert!(d < 1e-12, "asymmetry {d} at generation {g}");
                }
            }
        }
    }

    #[test]
    fn tell_requires_a_pending_ask() {
        let cfg = EsConfig::for_dim(4, 0.5);
        let mut state = CmaState::new(vec![0.0; 4], 0.5, &cfg).unwrap();
        assert!(matches!(state.tell(&[0.0; 7]), Err(EsError::TellBeforeAsk)));
        let mut rng = rng_from_seed(1);
        state.ask(&mut rng);
        assert!(matches!(
            state.tell(&[0.0; 3]),
            Err(EsError::LengthMismatch { .. })
        ));
    }

    fn toy_run(seed: u64, semantics: RewardSemantics) -> EsRunResult {
        let net = toynets::chain_net(70);
        let data = synth_dataset(71, 4, 1, 16);
        let oracle = BuiltinOracle::new(net.clone(), data, 20).unwrap();
        let cfg = EsConfig {
            generations: 12,
            semantics,
            ..EsConfig::for_dim(
                build_indexing(&net).unwrap().num_units(),
                0.6,
            )
        };
        run_es(&net, &oracle, &cfg, seed).unwrap()
    }

    #[test]
    fn toy_run_best_mask_is_feasible_under_corrected_semantics() {
        let result = toy_run(19, RewardSemantics::Corrected);
        assert!(result.best_s <= 0.6, "best mask infeasible: S = {}", result.best_s);
        let (_, _, fs) = result.best_feasible.as_ref().unwrap();
        assert!(*fs <= 0.6);
    }

    #[test]
    fn identical_seeds_reproduce_the_generation_log() {
        let a = toy_run(20, RewardSemantics::Corrected);
        let b = toy_run(20, RewardSemantics::Corrected);
        assert_eq!(a.log, b.log);
        assert_eq!(a.best_mask, b.best_mask);
    }

    #[test]
    fn best_so_far_fitness_is_non_decreasing() {
        let result = toy_run(21, RewardSemantics::Corrected);
        let mut best = f64::NEG_INFINITY;
        for entry in &result.log {
            // Per-generation best can dip; the tracked running best never does.
            best = best.max(entry.best_fitness);
        }
        assert!((best - result.best_fitness).abs() < 1e-15);
        assert!(result.best_fitness >= result.log[0].best_fitness);
    }
}
