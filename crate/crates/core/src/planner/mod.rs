//! iCEM model-predictive control over TS1 rollouts.

pub mod control;
mod noise;
pub mod toy;

pub use control::{control_loop, ControlConfig, RunLog, RunLogRow, RunOutput};
pub use noise::{colored_noise, ColoredNoise};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rollout_batch, rollout_rng, DynamicsError, Ensemble, LatentSource, RolloutStart, Trajectory};
use crate::gridmap::MapError;
use crate::mapper::MapperError;
use crate::sim::{Action, Path, Pose2, SimError};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error("aborted after {interventions} interventions at t={t:.1}s")]
    TooManyInterventions { interventions: usize, t: f64 },
    #[error("scorer returned {got} scores for {expected} sequences")]
    ScoreCount { expected: usize, got: usize },
    #[error("mapping thread failed: {0}")]
    MappingThread(String),
    #[error("run log: {0}")]
    Csv(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcemConfig {
    pub horizon: usize,
    /// Samples in the first iteration.
    pub samples: usize,
    pub iterations: usize,
    /// Colored-noise exponent.
    pub beta: f64,
    /// Sample-count decay per iteration.
    pub decay: f64,
    /// TS1 rollouts per action sequence.
    pub hypotheses: usize,
    pub elite_fraction: f64,
    pub min_elites: usize,
    /// Weight of the previous mean and std when refitting.
    pub momentum: f64,
    /// Initial std of every action dimension.
    pub init_std: f64,
}

impl Default for IcemConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            samples: 32,
            iterations: 2,
            beta: 4.0,
            decay: 1.3,
            hypotheses: 4,
            elite_fraction: 0.1,
            min_elites: 4,
            momentum: 0.1,
            init_std: 0.5,
        }
    }
}

impl IcemConfig {
    pub fn elites(&self) -> usize {
        self.min_elites.max((self.elite_fraction * self.samples as f64).round() as usize)
    }

    /// Fresh samples drawn in iteration `i` (0-based).
    pub fn samples_at(&self, i: usize) -> usize {
        ((self.samples as f64 * self.decay.powi(-(i as i32))).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Config(m.to_string()));
        if self.horizon == 0 || self.samples == 0 || self.iterations == 0 || self.hypotheses == 0 {
            return bad("horizon, samples, iterations and hypotheses must be at least 1");
        }
        if self.elites() > self.samples {
            return bad("elite count exceeds the sample count");
        }
        if !(self.decay >= 1.0) {
            return bad("decay must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.init_std > 0.0) || !self.beta.is_finite() {
            return bad("init_std must be positive and beta finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_p: f64,
    pub w_cte: f64,
    pub w_a: f64,
    pub w_b: f64,
    /// Boundary distance; the lane half-width when absent.
    #[serde(default)]
    pub d_b: Option<f64>,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_p: 40.0,
            w_cte: 10.0,
            w_a: 20.0,
            w_b: 20000.0,
            d_b: None,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), PlanError> {
        let ok = [self.w_p, self.w_cte, self.w_a, self.w_b].iter().all(|w| *w >= 0.0) && self.d_b.is_none_or(|d| d > 0.0);
        if ok {
            Ok(())
        } else {
            Err(PlanError::Config("reward weights must be non-negative and d_b positive".into()))
        }
    }

    pub fn boundary(&self, lane_half_width: f64) -> f64 {
        self.d_b.unwrap_or(lane_half_width)
    }
}

/// Unweighted reward terms of one trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    /// Arc-length progress along the path.
    pub progress: f64,
    /// Mean distance of the trajectory points to the path.
    pub cte: f64,
    /// Absolute throttle change against the last executed command.
    pub action: f64,
    /// 1 when any point leaves the corridor.
    pub boundary: f64,
}

impl RewardTerms {
    pub fn total(&self, w: &RewardWeights) -> f64 {
        w.w_p * self.progress - w.w_cte * self.cte - w.w_a * self.action - w.w_b * self.boundary
    }

    fn accumulate(&mut self, o: &RewardTerms, scale: f64) {
        self.progress += scale * o.progress;
        self.cte += scale * o.cte;
        self.action += scale * o.action;
        self.boundary += scale * o.boundary;
    }
}

/// Reward of the trajectory `start → points`. `None` for an invalid or empty
/// trajectory, which scores −∞.
pub fn reward_terms(start: Pose2, points: &[Pose2], path: &Path, d_b: f64, first_throttle: f64, last_throttle: f64) -> Option<RewardTerms> {
    if points.is_empty() || points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return None;
    }
    let mut s = path.project(start.x, start.y).s;
    let mut terms = RewardTerms {
        action: (last_throttle - first_throttle).abs(),
        ..Default::default()
    };
    for p in points {
        let proj = path.project(p.x, p.y);
        terms.progress += path.progress_delta(s, proj.s);
        s = proj.s;
        terms.cte += proj.distance;
        if proj.distance > d_b {
            terms.boundary = 1.0;
        }
    }
    terms.cte /= points.len() as f64;
    Some(terms)
}

/// Total reward and terms of a rollout; −∞ when it is invalid.
pub fn reward(traj: &Trajectory, first_throttle: f64, path: &Path, w: &RewardWeights, d_b: f64, last_throttle: f64) -> (f64, RewardTerms) {
    if !traj.valid {
        return (f64::NEG_INFINITY, RewardTerms::default());
    }
    match reward_terms(traj.start, &traj.poses, path, d_b, first_throttle, last_throttle) {
        Some(t) => (t.total(w), t),
        None => (f64::NEG_INFINITY, RewardTerms::default()),
    }
}

/// Scores candidate action sequences for [`icem`].
pub trait SequenceScorer {
    type Info: Clone;
    /// Score (higher is better) and side information for each sequence.
    fn score(&mut self, seqs: &[Vec<Action>]) -> Result<Vec<(f64, Self::Info)>, PlanError>;
}

#[derive(Clone, Debug)]
pub struct IcemOutcome<I> {
    pub best: Vec<Action>,
    pub best_score: f64,
    pub best_info: Option<I>,
    pub elite_mean: Vec<[f64; 2]>,
    pub elite_std: Vec<[f64; 2]>,
    /// Best elite score after each iteration.
    pub best_per_iteration: Vec<f64>,
    /// Sequences scored in each iteration.
    pub samples_per_iteration: Vec<usize>,
}

/// Drops the first step and repeats the last.
pub fn shift_solution(seq: &[Action]) -> Vec<Action> {
    if seq.is_empty() {
        return Vec::new();
    }
    let mut out = seq[1..].to_vec();
    out.push(*seq.last().expect("non-empty"));
    out
}

/// Improved cross-entropy search over action sequences in `[-1, 1]²`.
///
/// Elites carry over between iterations with their scores, so the best elite
/// score never decreases within a call.
pub fn icem<S: SequenceScorer, R: Rng + ?Sized>(
    cfg: &IcemConfig,
    scorer: &mut S,
    init_mean: Option<&[Action]>,
    rng: &mut R,
) -> Result<IcemOutcome<S::Info>, PlanError> {
    cfg.validate()?;
    let h = cfg.horizon;
    let mut mean: Vec<[f64; 2]> = match init_mean {
        Some(seq) if seq.len() == h => seq.iter().map(|a| a.to_array()).collect(),
        _ => vec![[0.0; 2]; h],
    };
    let mut std = vec![[cfg.init_std; 2]; h];
    let noise = ColoredNoise::new(cfg.beta, h);
    let n_elite = cfg.elites();
    let mut elites: Vec<(f64, Vec<Action>, S::Info)> = Vec::new();
    let mut best_per_iteration = Vec::with_capacity(cfg.iterations);
    let mut samples_per_iteration = Vec::with_capacity(cfg.iterations);

    for i in 0..cfg.iterations {
        let n = cfg.samples_at(i).max(n_elite);
        let mut seqs: Vec<Vec<Action>> = (0..n)
            .map(|_| {
                let z = noise.sample_matrix(2, rng);
                (0..h)
                    .map(|t| Action::new(mean[t][0] + std[t][0] * z[t][0], mean[t][1] + std[t][1] * z[t][1]))
                    .collect()
            })
            .collect();
        // The warm start competes in the first iteration and the refit mean in the last.
        if i == 0 {
            if let Some(seq) = init_mean.filter(|s| s.len() == h) {
                seqs.push(seq.to_vec());
            }
        }
        if i + 1 == cfg.iterations {
            seqs.push(mean.iter().map(|m| Action::new(m[0], m[1])).collect());
        }
        let scores = scorer.score(&seqs)?;
        if scores.len() != seqs.len() {
            return Err(PlanError::ScoreCount {
                expected: seqs.len(),
                got: scores.len(),
            });
        }
        samples_per_iteration.push(seqs.len());
        let mut pool: Vec<(f64, Vec<Action>, S::Info)> = seqs.into_iter().zip(scores).map(|(s, (v, info))| (v, s, info)).collect();
        pool.append(&mut elites);
        // Stable sort: ties keep fresh samples ahead of carried elites.
        pool.sort_by(|a, b| b.0.total_cmp(&a.0));
        pool.truncate(n_elite);
        elites = pool;
        best_per_iteration.push(elites[0].0);

        let finite: Vec<&Vec<Action>> = elites.iter().filter(|e| e.0.is_finite()).map(|e| &e.1).collect();
        if finite.is_empty() {
            continue;
        }
        let m = finite.len() as f64;
        for t in 0..h {
            for d in 0..2 {
                let vals: Vec<f64> = finite.iter().map(|s| s[t].to_array()[d]).collect();
                let mu = vals.iter().sum::<f64>() / m;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                mean[t][d] = cfg.momentum * mean[t][d] + (1.0 - cfg.momentum) * mu;
                std[t][d] = cfg.momentum * std[t][d] + (1.0 - cfg.momentum) * var.sqrt();
            }
        }
    }
    let (best_score, best, info) = elites.into_iter().next().expect("at least one elite");
    Ok(IcemOutcome {
        best,
        best_score,
        best_info: best_score.is_finite().then_some(info),
        elite_mean: mean,
        elite_std: std,
        best_per_iteration,
        samples_per_iteration,
    })
}

/// Scores sequences by the mean reward of their TS1 rollouts.
pub struct RolloutScorer<'a> {
    pub ens: &'a Ensemble,
    pub latents: &'a dyn LatentSource,
    pub start: RolloutStart,
    pub path: &'a Path,
    pub weights: &'a RewardWeights,
    pub d_b: f64,
    pub last_throttle: f64,
    pub hypotheses: usize,
    pub seed: u64,
    /// Rollouts issued so far; keeps RNG streams distinct across calls.
    pub issued: u64,
}

#[derive(Clone, Debug)]
pub struct RolloutInfo {
    /// Mean terms over the hypotheses.
    pub terms: RewardTerms,
    /// First hypothesis.
    pub trajectory: Trajectory,
}

impl SequenceScorer for RolloutScorer<'_> {
    type Info = RolloutInfo;

    fn score(&mut self, seqs: &[Vec<Action>]) -> Result<Vec<(f64, RolloutInfo)>, PlanError> {
        let k = self.hypotheses;
        let n = seqs.len() * k;
        let starts = vec![self.start; n];
        let mut rngs: Vec<_> = (0..n as u64).map(|i| rollout_rng(self.seed, self.issued + i)).collect();
        self.issued += n as u64;
        let horizon = seqs.first().map_or(0, Vec::len);
        let trajs = rollout_batch(self.ens, &starts, horizon, |r, t| seqs[r / k][t], self.latents, &mut rngs)?;
        let mut out = Vec::with_capacity(seqs.len());
        for (j, seq) in seqs.iter().enumerate() {
            let mut total = 0.0;
            let mut terms = RewardTerms::default();
            for traj in &trajs[j * k..(j + 1) * k] {
                let (r, t) = reward(traj, seq[0].throttle, self.path, self.weights, self.d_b, self.last_throttle);
                total += r / k as f64;
                terms.accumulate(&t, 1.0 / k as f64);
            }
            out.push((
                total,
                RolloutInfo {
                    terms,
                    trajectory: trajs[j * k].clone(),
                },
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub action: Action,
    pub sequence: Vec<Action>,
    pub trajectory: Option<Trajectory>,
    pub elite_mean: Vec<[f64; 2]>,
    pub elite_std: Vec<[f64; 2]>,
    pub score: f64,
    pub terms: RewardTerms,
    pub best_per_iteration: Vec<f64>,
    /// Every rollout was invalid; the action is zero.
    pub all_invalid: bool,
}

/// One planning call from `start` against a fixed latent view.
#[allow(clippy::too_many_arguments)]
pub fn plan<R: Rng + ?Sized>(
    cfg: &IcemConfig,
    ens: &Ensemble,
    latents: &dyn LatentSource,
    start: RolloutStart,
    path: &Path,
    weights: &RewardWeights,
    d_b: f64,
    prev_solution: Option<&[Action]>,
    last_throttle: f64,
    rng: &mut R,
) -> Result<PlanResult, PlanError> {
    let mut scorer = RolloutScorer {
        ens,
        latents,
        start,
        path,
        weights,
        d_b,
        last_throttle,
        hypotheses: cfg.hypotheses,
        seed: rng.random(),
        issued: 0,
    };
    let out = icem(cfg, &mut scorer, prev_solution, rng)?;
    let all_invalid = !out.best_score.is_finite();
    let (trajectory, terms) = match out.best_info {
        Some(info) => (Some(info.trajectory), info.terms),
        None => (None, RewardTerms::default()),
    };
    Ok(PlanResult {
        action: if all_invalid { Action::new(0.0, 0.0) } else { out.best[0] },
        sequence: out.best,
        trajectory,
        elite_mean: out.elite_mean,
        elite_std: out.elite_std,
        score: out.best_score,
        terms,
        best_per_iteration: out.best_per_iteration,
        all_invalid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EnsembleSpec, NoLatent, Normalizer};
    use crate::gridmap::{GridSpec, LatentMap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight() -> Path {
        Path::new(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]).unwrap()
    }

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory {
            start: Pose2::new(points[0].0, points[0].1, 0.0),
            poses: points[1..].iter().map(|&(x, y)| Pose2::new(x, y, 0.0)).collect(),
            states: vec![[0.0; 7]; points.len() - 1],
            valid: true,
        }
    }

    #[test]
    fn reward_examples() {
        let p = straight();
        let w = RewardWeights::default();
        let (r, _) = reward(&traj(&[(2.0, 0.0), (2.0, 0.0), (2.0, 0.0)]), 0.3, &p, &w, 0.6, 0.3);
        assert_eq!(r, 0.0);
        let (r, t) = reward(&traj(&[(2.0, 0.0), (2.5, 0.0), (3.0, 0.0)]), 0.3, &p, &w, 0.6, 0.3);
        assert!((r - 40.0).abs() < 1e-12, "{r}");
        assert!((t.progress - 1.0).abs() < 1e-12);
        let (r, t) = reward(&traj(&[(2.0, 0.0), (2.0, 0.0), (2.0, 0.0)]), 0.3, &p, &RewardWeights { w_cte: 0.0, ..w.clone() }, 0.0, 0.3);
        assert_eq!(t.boundary, 0.0);
        assert_eq!(r, 0.0);
        let mut off = traj(&[(2.0, 0.0), (2.0, 0.0), (2.0, 0.0)]);
        off.poses[1].y = -0.7;
        let (r, _) = reward(&off, 0.3, &p, &RewardWeights { w_cte: 0.0, ..w.clone() }, 0.6, 0.3);
        assert!((r + 20000.0).abs() < 1e-9, "{r}");
        let mut bad = traj(&[(2.0, 0.0), (2.5, 0.0)]);
        bad.valid = false;
        assert_eq!(reward(&bad, 0.0, &p, &w, 0.6, 0.0).0, f64::NEG_INFINITY);
    }

    #[test]
    fn progress_wraps_across_the_start() {
        let p = straight();
        let len = p.length();
        let (_, t) = reward(&traj(&[(0.0, 0.5), (0.0, 0.1), (0.5, 0.0)]), 0.0, &p, &RewardWeights::default(), 0.6, 0.0);
        assert!((t.progress - 1.0).abs() < 1e-9, "{} of {len}", t.progress);
    }

    #[test]
    fn reward_decomposes_and_scales_linearly() {
        let p = straight();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = RewardWeights::default();
        let w2 = RewardWeights {
            w_p: 80.0,
            w_cte: 20.0,
            w_a: 40.0,
            w_b: 40000.0,
            d_b: None,
        };
        for _ in 0..50 {
            let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.0..10.0), rng.random_range(-1.0..1.0))).collect();
            let t = traj(&pts);
            let (r, terms) = reward(&t, 0.2, &p, &w, 0.6, -0.4);
            assert_eq!(r, w.w_p * terms.progress - w.w_cte * terms.cte - w.w_a * terms.action - w.w_b * terms.boundary);
            let (r2, _) = reward(&t, 0.2, &p, &w2, 0.6, -0.4);
            assert!((r2 - 2.0 * r).abs() <= 1e-9 * r.abs().max(1.0));
        }
    }

    #[test]
    fn config_counts() {
        let c = IcemConfig::default();
        assert_eq!(c.elites(), 4);
        assert_eq!(c.samples_at(0), 32);
        assert_eq!(c.samples_at(1), 25);
        assert!(IcemConfig { samples: 2, ..c.clone() }.validate().is_err());
        assert!(IcemConfig { horizon: 0, ..c }.validate().is_err());
    }

    #[test]
    fn shift_drops_first_and_repeats_last() {
        let s = vec![Action::new(0.1, 0.0), Action::new(0.2, 0.0), Action::new(0.3, 0.1)];
        assert_eq!(shift_solution(&s), vec![Action::new(0.2, 0.0), Action::new(0.3, 0.1), Action::new(0.3, 0.1)]);
    }

    #[test]
    fn icem_solves_double_integrator() {
        let run = toy::run_double_integrator(&IcemConfig::default(), toy::DoubleIntegrator::default(), 20, 5).unwrap();
        assert!(run.elites_monotone && run.actions_bounded);
        assert!(run.initial_distance == 1.5);
        assert!(run.final_distance < 0.05 * run.initial_distance, "final distance {}", run.final_distance);
    }

    #[test]
    fn plan_on_unknown_map_uses_zero_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = EnsembleSpec {
            members: 2,
            hidden_dims: vec![8],
            latent_dim: 3,
        };
        let ens = Ensemble::new(spec, Normalizer::identity(), &mut rng).unwrap();
        let map = LatentMap::new(GridSpec::new(-20.0, -20.0, 0.5, 80, 80).unwrap(), 3).unwrap();
        let snap = map.snapshot();
        let path = straight();
        let start = RolloutStart {
            s_in: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            pose: Pose2::new(2.0, 0.0, 0.0),
        };
        let w = RewardWeights::default();
        let r = plan(&IcemConfig::default(), &ens, &snap, start, &path, &w, 0.6, None, 0.0, &mut rng).unwrap();
        assert!(!r.all_invalid);
        assert_eq!(r.best_per_iteration.len(), 2);
        assert!(r.best_per_iteration[1] >= r.best_per_iteration[0]);
        assert!(r.action.throttle.abs() <= 1.0 && r.action.steer.abs() <= 1.0);

        let blind = Ensemble::new(EnsembleSpec { latent_dim: 0, ..ens.spec().clone() }, Normalizer::identity(), &mut rng).unwrap();
        assert!(plan(&IcemConfig::default(), &blind, &NoLatent, start, &path, &w, 0.6, None, 0.0, &mut rng).is_ok());
    }

    struct AllInvalid;

    impl SequenceScorer for AllInvalid {
        type Info = ();
        fn score(&mut self, seqs: &[Vec<Action>]) -> Result<Vec<(f64, ())>, PlanError> {
            Ok(vec![(f64::NEG_INFINITY, ()); seqs.len()])
        }
    }

    #[test]
    fn all_invalid_is_reported() {
        let out = icem(&IcemConfig::default(), &mut AllInvalid, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.best_score, f64::NEG_INFINITY);
        assert!(out.best_info.is_none());
    }
}
