//! Ensemble of probabilistic dynamics networks and TS1 trajectory unrolling.
//!
//! Each member maps `[s_in, action]` (normalized) concatenated with a raw
//! latent vector to a Gaussian over the normalized 10-dim output state.

use std::fs;
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::MapSnapshot;
use crate::nn::{self, Graph, Mlp, MlpSpec, NnError, ParamOwner, ParamStore, Tensor, Var};
use crate::sim::dataset::OUTPUT_DIM;
use crate::sim::sensors::{ACTION_DIM, STATE_DIM};
use crate::sim::{Action, Pose2, Transition, World};

/// Width of the normalized `[s_in, action]` block.
pub const BASE_INPUT_DIM: usize = STATE_DIM + ACTION_DIM;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("member {0} out of range")]
    Member(usize),
    #[error("expected {expected} values for {what}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("invalid ensemble spec: {0}")]
    Spec(String),
    #[error("cannot fit a normalizer on an empty dataset")]
    EmptyData,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 5,
            hidden_dims: vec![128, 128],
            latent_dim: 10,
        }
    }
}

impl EnsembleSpec {
    pub fn input_dim(&self) -> usize {
        BASE_INPUT_DIM + self.latent_dim
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim(), self.hidden_dims.clone(), 2 * OUTPUT_DIM)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.members == 0 {
            return Err(DynamicsError::Spec("ensemble needs at least one member".into()));
        }
        self.mlp_spec().validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mean: [f64; OUTPUT_DIM],
    pub log_var: [f64; OUTPUT_DIM],
}

/// `mean + exp(½ log_var) ⊙ noise`.
pub fn sample_next(pred: &GaussianPrediction, noise: &[f64; OUTPUT_DIM]) -> [f64; OUTPUT_DIM] {
    let mut out = [0.0; OUTPUT_DIM];
    for i in 0..OUTPUT_DIM {
        out[i] = pred.mean[i] + (0.5 * pred.log_var[i]).exp() * noise[i];
    }
    out
}

/// Per-dimension affine normalization of inputs and targets. Latents stay raw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-8;

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for i in 0..dim {
            mean[i] += r[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for i in 0..dim {
            var[i] += (r[i] - mean[i]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(MIN_STD)).collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            in_mean: vec![0.0; BASE_INPUT_DIM],
            in_std: vec![1.0; BASE_INPUT_DIM],
            out_mean: vec![0.0; OUTPUT_DIM],
            out_std: vec![1.0; OUTPUT_DIM],
        }
    }

    pub fn fit<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Result<Self, DynamicsError> {
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for t in transitions {
            let mut row = t.s_in.to_vec();
            row.extend_from_slice(&t.action.to_array());
            ins.push(row);
            outs.push(t.s_out.to_vec());
        }
        if ins.is_empty() {
            return Err(DynamicsError::EmptyData);
        }
        let in_refs: Vec<&[f64]> = ins.iter().map(Vec::as_slice).collect();
        let out_refs: Vec<&[f64]> = outs.iter().map(Vec::as_slice).collect();
        let (in_mean, in_std) = mean_std(&in_refs, BASE_INPUT_DIM);
        let (out_mean, out_std) = mean_std(&out_refs, OUTPUT_DIM);
        Ok(Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        })
    }

    /// Writes the normalized `[s_in, action]` block followed by the raw latent.
    pub fn input_row(&self, s_in: &[f64], action: Action, latent: &[f64], out: &mut [f64]) {
        let a = action.to_array();
        for i in 0..STATE_DIM {
            out[i] = (s_in[i] - self.in_mean[i]) / self.in_std[i];
        }
        for j in 0..ACTION_DIM {
            let i = STATE_DIM + j;
            out[i] = (a[j] - self.in_mean[i]) / self.in_std[i];
        }
        out[BASE_INPUT_DIM..BASE_INPUT_DIM + latent.len()].copy_from_slice(latent);
    }

    pub fn normalize_target(&self, s_out: &[f64], out: &mut [f64]) {
        for i in 0..OUTPUT_DIM {
            out[i] = (s_out[i] - self.out_mean[i]) / self.out_std[i];
        }
    }

    /// Maps a normalized Gaussian back to output units.
    pub fn denormalize(&self, mean: &[f64], log_var: &[f64]) -> GaussianPrediction {
        let mut p = GaussianPrediction {
            mean: [0.0; OUTPUT_DIM],
            log_var: [0.0; OUTPUT_DIM],
        };
        for i in 0..OUTPUT_DIM {
            p.mean[i] = mean[i] * self.out_std[i] + self.out_mean[i];
            p.log_var[i] = log_var[i] + 2.0 * self.out_std[i].ln();
        }
        p
    }
}

/// One member: its parameters and the resolved network.
#[derive(Clone, Debug)]
pub struct Member {
    pub params: ParamStore,
    net: Mlp,
}

impl Member {
    pub fn net(&self) -> &Mlp {
        &self.net
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    spec: EnsembleSpec,
    pub normalizer: Normalizer,
    members: Vec<Member>,
}

impl Ensemble {
    pub fn new<R: Rng + ?Sized>(spec: EnsembleSpec, normalizer: Normalizer, rng: &mut R) -> Result<Self, DynamicsError> {
        spec.validate()?;
        let mlp = spec.mlp_spec();
        let members = (0..spec.members)
            .map(|_| {
                let mut params = ParamStore::new(ParamOwner::Dynamics);
                let net = mlp.init_into(&mut params, "", rng)?;
                Ok(Member { params, net })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        Ok(Self {
            spec,
            normalizer,
            members,
        })
    }

    /// Reassembles an ensemble from stored member parameters.
    pub fn from_parts(spec: EnsembleSpec, normalizer: Normalizer, params: Vec<ParamStore>) -> Result<Self, DynamicsError> {
        spec.validate()?;
        if params.len() != spec.members {
            return Err(DynamicsError::Shape {
                what: "ensemble members",
                expected: spec.members,
                got: params.len(),
            });
        }
        let members = params
            .into_iter()
            .map(|p| {
                let net = Mlp::attach(spec.mlp_spec(), &p, "")?;
                Ok(Member { params: p, net })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        Ok(Self {
            spec,
            normalizer,
            members,
        })
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Member] {
        &mut self.members
    }

    /// Prediction of one member for one input.
    pub fn predict(&self, member: usize, s_in: &[f64], action: Action, latent: &[f64]) -> Result<GaussianPrediction, DynamicsError> {
        let m = self.members.get(member).ok_or(DynamicsError::Member(member))?;
        if s_in.len() != STATE_DIM {
            return Err(DynamicsError::Shape {
                what: "s_in",
                expected: STATE_DIM,
                got: s_in.len(),
            });
        }
        if latent.len() != self.spec.latent_dim {
            return Err(DynamicsError::Shape {
                what: "latent",
                expected: self.spec.latent_dim,
                got: latent.len(),
            });
        }
        let mut row = vec![0.0; self.spec.input_dim()];
        self.normalizer.input_row(s_in, action, latent, &mut row);
        let out = m.net.forward(&m.params, &Tensor::row(&row))?;
        Ok(self.head(out.row_slice(0)))
    }

    /// Splits raw network output into a denormalized Gaussian.
    fn head(&self, raw: &[f64]) -> GaussianPrediction {
        let lv: Vec<f64> = raw[OUTPUT_DIM..].iter().map(|&v| nn::soft_clamp_log_var_value(v)).collect();
        self.normalizer.denormalize(&raw[..OUTPUT_DIM], &lv)
    }

    /// Batched prediction of one member over normalized input rows.
    pub fn predict_rows(&self, member: usize, rows: &Tensor) -> Result<Vec<GaussianPrediction>, DynamicsError> {
        let m = self.members.get(member).ok_or(DynamicsError::Member(member))?;
        let out = m.net.forward(&m.params, rows)?;
        Ok((0..out.rows()).map(|r| self.head(out.row_slice(r))).collect())
    }

    /// Records member `member` on `g` using leaves `vars` bound from its
    /// parameter store; returns normalized `(mean, clamped log_var)`.
    pub fn forward_graph(&self, member: usize, g: &mut Graph, vars: &[Var], input: Var) -> Result<(Var, Var), DynamicsError> {
        let m = self.members.get(member).ok_or(DynamicsError::Member(member))?;
        let out = m.net.forward_graph(g, vars, input)?;
        let mean = g.slice_cols(out, 0, OUTPUT_DIM)?;
        let raw_lv = g.slice_cols(out, OUTPUT_DIM, 2 * OUTPUT_DIM)?;
        Ok((mean, nn::soft_clamp_log_var(g, raw_lv)))
    }

    /// Writes `dynamics.json` plus one parameter file per member into `dir`.
    pub fn save(&self, dir: &FsPath) -> Result<(), DynamicsError> {
        fs::create_dir_all(dir)?;
        let files: Vec<String> = (0..self.len()).map(|i| format!("member{i}.params")).collect();
        for (m, f) in self.members.iter().zip(&files) {
            nn::write_params(&m.params, &dir.join(f))?;
        }
        let manifest = EnsembleManifest {
            spec: self.spec.clone(),
            normalizer: self.normalizer.clone(),
            member_files: files,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &FsPath) -> Result<Self, DynamicsError> {
        let manifest: EnsembleManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let params = manifest
            .member_files
            .iter()
            .map(|f| nn::read_params(&dir.join(f), ParamOwner::Dynamics))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(manifest.spec, manifest.normalizer, params)
    }
}

pub const MANIFEST_FILE: &str = "dynamics.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleManifest {
    spec: EnsembleSpec,
    normalizer: Normalizer,
    member_files: Vec<String>,
}

/// Where rollouts read their per-step latent vector.
pub trait LatentSource {
    fn latent_dim(&self) -> usize;
    /// Fills `out` for the global position `(x, y)` using standard-normal `noise`.
    fn sample(&self, x: f64, y: f64, noise: &[f64], out: &mut [f64]);
}

impl LatentSource for MapSnapshot {
    fn latent_dim(&self) -> usize {
        MapSnapshot::latent_dim(self)
    }

    fn sample(&self, x: f64, y: f64, noise: &[f64], out: &mut [f64]) {
        self.sample_at(x, y, noise, out);
    }
}

/// Latent-blind models.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoLatent;

impl LatentSource for NoLatent {
    fn latent_dim(&self) -> usize {
        0
    }

    fn sample(&self, _: f64, _: f64, _: &[f64], _: &mut [f64]) {}
}

/// 1-dim ground-truth code of material `id`: the id plus one, so that
/// material 0 stays distinct from the zero-knowledge vector.
pub fn material_code(id: u32) -> f64 {
    id as f64 + 1.0
}

/// The true material code under each position as a 1-dim latent.
#[derive(Clone, Copy, Debug)]
pub struct MaterialLatent<'a>(pub &'a World);

impl LatentSource for MaterialLatent<'_> {
    fn latent_dim(&self) -> usize {
        1
    }

    fn sample(&self, x: f64, y: f64, _: &[f64], out: &mut [f64]) {
        out[0] = material_code(self.0.material_id_at(x, y));
    }
}

/// Start of a rollout: input state and global pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutStart {
    pub s_in: [f64; STATE_DIM],
    pub pose: Pose2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: Pose2,
    /// Global pose after each step.
    pub poses: Vec<Pose2>,
    /// Input state after each step.
    pub states: Vec<[f64; STATE_DIM]>,
    /// False when a non-finite prediction cut the rollout short.
    pub valid: bool,
}

/// Seeds the dedicated stream of rollout `index` under `seed`.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// TS1 rollouts advanced in lockstep.
///
/// At every step each rollout draws, from its own RNG and in this order: the
/// ensemble member, the latent noise, and the output noise. Results are
/// therefore independent of how rollouts are batched.
/// `actions(r, t)` supplies action `t` of rollout `r`.
pub fn rollout_batch<L, A, R>(
    ens: &Ensemble,
    starts: &[RolloutStart],
    horizon: usize,
    actions: A,
    latents: &L,
    rngs: &mut [R],
) -> Result<Vec<Trajectory>, DynamicsError>
where
    L: LatentSource + ?Sized,
    A: Fn(usize, usize) -> Action,
    R: Rng,
{
    let k = ens.latent_dim();
    if latents.latent_dim() != k {
        return Err(DynamicsError::Shape {
            what: "latent source",
            expected: k,
            got: latents.latent_dim(),
        });
    }
    if rngs.len() != starts.len() {
        return Err(DynamicsError::Shape {
            what: "rollout rngs",
            expected: starts.len(),
            got: rngs.len(),
        });
    }
    let n = starts.len();
    let d = ens.spec.input_dim();
    let b = ens.len();
    let mut trajs: Vec<Trajectory> = starts
        .iter()
        .map(|s| Trajectory {
            start: s.pose,
            poses: Vec::with_capacity(horizon),
            states: Vec::with_capacity(horizon),
            valid: true,
        })
        .collect();
    let mut cur: Vec<RolloutStart> = starts.to_vec();
    let mut latent = vec![0.0; k];
    let mut noise = vec![0.0; k];
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); b];

    for t in 0..horizon {
        for g in groups.iter_mut() {
            g.clear();
        }
        for r in rows.iter_mut() {
            r.clear();
        }
        for i in 0..n {
            if !trajs[i].valid {
                continue;
            }
            let rng = &mut rngs[i];
            let m = rng.random_range(0..b);
            for z in noise.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            latents.sample(cur[i].pose.x, cur[i].pose.y, &noise, &mut latent);
            let start = rows[m].len();
            rows[m].resize(start + d, 0.0);
            ens.normalizer.input_row(&cur[i].s_in, actions(i, t), &latent, &mut rows[m][start..]);
            groups[m].push(i);
        }
        let mut preds: Vec<Option<GaussianPrediction>> = vec![None; n];
        for m in 0..b {
            if groups[m].is_empty() {
                continue;
            }
            let input = Tensor::matrix(groups[m].len(), d, std::mem::take(&mut rows[m]))?;
            for (p, &i) in ens.predict_rows(m, &input)?.into_iter().zip(&groups[m]) {
                preds[i] = Some(p);
            }
        }
        for i in 0..n {
            let Some(pred) = preds[i].take() else { continue };
            let mut z = [0.0; OUTPUT_DIM];
            for v in z.iter_mut() {
                *v = rngs[i].sample(StandardNormal);
            }
            let s = sample_next(&pred, &z);
            if s.iter().any(|v| !v.is_finite()) {
                trajs[i].valid = false;
                continue;
            }
            let pose = cur[i].pose.compose(s[0], s[1], s[2]);
            let mut s_in = [0.0; STATE_DIM];
            s_in.copy_from_slice(&s[3..]);
            cur[i] = RolloutStart { s_in, pose };
            trajs[i].poses.push(pose);
            trajs[i].states.push(s_in);
        }
    }
    Ok(trajs)
}

/// Single TS1 rollout under `actions`.
pub fn ts1_rollout<L: LatentSource + ?Sized, R: Rng>(
    ens: &Ensemble,
    start: RolloutStart,
    actions: &[Action],
    latents: &L,
    rng: &mut R,
) -> Result<Trajectory, DynamicsError> {
    let mut one = [rng];
    let mut out = rollout_batch(ens, &[start], actions.len(), |_, t| actions[t], latents, &mut one)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{GridSpec, LatentMap};
    use crate::nn::MIN_LOG_VAR;
    use std::cell::Cell;

    fn small_spec(k: usize, members: usize) -> EnsembleSpec {
        EnsembleSpec {
            members,
            hidden_dims: vec![8],
            latent_dim: k,
        }
    }

    fn zero_params(ens: &mut Ensemble) {
        for m in ens.members_mut() {
            for i in 0..m.params.len() {
                m.params.values_mut(i).fill(0.0);
            }
        }
    }

    /// Sets the last-layer bias so every member predicts a fixed normalized
    /// mean and log-variance.
    fn constant_model(k: usize, members: usize, mean: [f64; OUTPUT_DIM], raw_lv: f64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ens = Ensemble::new(small_spec(k, members), Normalizer::identity(), &mut rng).unwrap();
        zero_params(&mut ens);
        for m in ens.members_mut() {
            let bi = m.params.index_of("layer1.bias").unwrap();
            let b = m.params.values_mut(bi);
            b[..OUTPUT_DIM].copy_from_slice(&mean);
            b[OUTPUT_DIM..].fill(raw_lv);
        }
        ens
    }

    #[test]
    fn zero_network_predicts_target_means() {
        let norm = Normalizer {
            in_mean: vec![0.0; BASE_INPUT_DIM],
            in_std: vec![1.0; BASE_INPUT_DIM],
            out_mean: (0..OUTPUT_DIM).map(|i| i as f64).collect(),
            out_std: vec![2.0; OUTPUT_DIM],
        };
        let mut ens = Ensemble::new(small_spec(3, 2), norm, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        zero_params(&mut ens);
        let p = ens.predict(1, &[0.3; 7], Action::new(0.2, -0.1), &[1.0, 2.0, 3.0]).unwrap();
        for i in 0..OUTPUT_DIM {
            assert_eq!(p.mean[i], i as f64);
        }
        assert!(ens.predict(2, &[0.0; 7], Action::default(), &[0.0; 3]).is_err());
        assert!(ens.predict(0, &[0.0; 7], Action::default(), &[0.0; 2]).is_err());
    }

    #[test]
    fn predictions_are_deterministic() {
        let ens = Ensemble::new(small_spec(2, 3), Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = ens.predict(1, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], Action::new(0.5, 0.5), &[0.1, -0.1]).unwrap();
        let b = ens.predict(1, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], Action::new(0.5, 0.5), &[0.1, -0.1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_next_basics() {
        let p = GaussianPrediction {
            mean: [1.0; OUTPUT_DIM],
            log_var: [MIN_LOG_VAR; OUTPUT_DIM],
        };
        assert_eq!(sample_next(&p, &[0.0; OUTPUT_DIM]), [1.0; OUTPUT_DIM]);
        let s = sample_next(&p, &[1.0; OUTPUT_DIM]);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn sample_statistics_match_prediction() {
        let mut p = GaussianPrediction {
            mean: [0.0; OUTPUT_DIM],
            log_var: [0.0; OUTPUT_DIM],
        };
        p.mean[0] = 2.0;
        p.log_var[0] = 2.0_f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let mut z = [0.0; OUTPUT_DIM];
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                sample_next(&p, &z)[0]
            })
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        // standard errors: sqrt(σ²/n) for the mean, σ²·sqrt(2/(n−1)) for the variance
        assert!((m - 2.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
        assert!((v - 2.0).abs() < 3.0 * 2.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn normalizer_fit_has_floor_and_moments() {
        let w = World::held_out();
        let ds = crate::sim::collect_dataset(&w, 5.0, 0).unwrap();
        let n = Normalizer::fit(&ds.transitions).unwrap();
        assert!(n.in_std.iter().chain(&n.out_std).all(|s| *s >= MIN_STD));
        let vx_mean = ds.transitions.iter().map(|t| t.s_in[0]).sum::<f64>() / ds.len() as f64;
        assert!((n.in_mean[0] - vx_mean).abs() < 1e-12);
        assert!(Normalizer::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn constant_step_model_walks_along_heading() {
        let mut mean = [0.0; OUTPUT_DIM];
        mean[0] = 0.1;
        let ens = constant_model(0, 3, mean, -1e3);
        let start = RolloutStart {
            s_in: [0.0; STATE_DIM],
            pose: Pose2::new(1.0, 2.0, 0.6),
        };
        let h = 12;
        let tr = ts1_rollout(&ens, start, &vec![Action::default(); h], &NoLatent, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let end = tr.poses.last().unwrap();
        let d = 0.1 * h as f64;
        // log-variance floor leaves a noise std of e^-5 per step
        let tol = 5.0 * (0.5 * MIN_LOG_VAR).exp() * (h as f64).sqrt();
        assert!((end.x - (1.0 + d * 0.6f64.cos())).abs() < tol);
        assert!((end.y - (2.0 + d * 0.6f64.sin())).abs() < tol);
    }

    #[test]
    fn pose_chain_matches_transform_oracle() {
        let ens = Ensemble::new(small_spec(0, 2), Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let start = RolloutStart {
            s_in: [0.5, 0.0, 0.1, 0.0, 0.0, 0.0, 100.0],
            pose: Pose2::new(-1.0, 0.5, 2.0),
        };
        let acts: Vec<Action> = (0..15).map(|i| Action::new(0.5, (i as f64 * 0.3).sin())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr = ts1_rollout(&ens, start, &acts, &NoLatent, &mut rng).unwrap();
        assert!(tr.valid && tr.poses.len() == 15);
        // homogeneous-matrix oracle over the predicted local displacements
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = [[2.0f64.cos(), -2.0f64.sin(), -1.0], [2.0f64.sin(), 2.0f64.cos(), 0.5], [0.0, 0.0, 1.0]];
        let mut s_in = start.s_in;
        for (t, a) in acts.iter().enumerate() {
            let member = rng.random_range(0..2);
            let p = ens.predict(member, &s_in, *a, &[]).unwrap();
            let mut z = [0.0; OUTPUT_DIM];
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let s = sample_next(&p, &z);
            let step = [[s[2].cos(), -s[2].sin(), s[0]], [s[2].sin(), s[2].cos(), s[1]], [0.0, 0.0, 1.0]];
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    next[i][j] = (0..3).map(|q| m[i][q] * step[q][j]).sum();
                }
            }
            m = next;
            s_in.copy_from_slice(&s[3..]);
            let pose = tr.poses[t];
            assert!((pose.x - m[0][2]).abs() < 1e-9 && (pose.y - m[1][2]).abs() < 1e-9);
            assert!((pose.yaw.sin() - m[1][0]).abs() < 1e-9 && (pose.yaw.cos() - m[0][0]).abs() < 1e-9);
        }
    }

    #[test]
    fn rollout_concatenation_is_associative() {
        let ens = Ensemble::new(small_spec(0, 3), Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let start = RolloutStart {
            s_in: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0],
            pose: Pose2::new(0.0, 0.0, 0.3),
        };
        let acts: Vec<Action> = (0..10).map(|i| Action::new(0.3, 0.1 * i as f64 - 0.5)).collect();
        let mut rng = rollout_rng(9, 0);
        let whole = ts1_rollout(&ens, start, &acts, &NoLatent, &mut rng).unwrap();
        let mut rng = rollout_rng(9, 0);
        let first = ts1_rollout(&ens, start, &acts[..4], &NoLatent, &mut rng).unwrap();
        let mid = RolloutStart {
            s_in: *first.states.last().unwrap(),
            pose: *first.poses.last().unwrap(),
        };
        let second = ts1_rollout(&ens, mid, &acts[4..], &NoLatent, &mut rng).unwrap();
        let joined: Vec<Pose2> = first.poses.iter().chain(&second.poses).copied().collect();
        assert_eq!(joined, whole.poses);
    }

    #[test]
    fn batching_does_not_change_results() {
        let ens = Ensemble::new(small_spec(0, 4), Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let starts: Vec<RolloutStart> = (0..6)
            .map(|i| RolloutStart {
                s_in: [i as f64 * 0.2; STATE_DIM],
                pose: Pose2::new(i as f64, 0.0, 0.0),
            })
            .collect();
        let act = |r: usize, t: usize| Action::new(0.1 * r as f64, 0.05 * t as f64);
        let mut rngs: Vec<_> = (0..6).map(|i| rollout_rng(3, i)).collect();
        let batch = rollout_batch(&ens, &starts, 5, act, &NoLatent, &mut rngs).unwrap();
        for (i, s) in starts.iter().enumerate() {
            let acts: Vec<Action> = (0..5).map(|t| act(i, t)).collect();
            let single = ts1_rollout(&ens, *s, &acts, &NoLatent, &mut rollout_rng(3, i as u64)).unwrap();
            assert_eq!(single, batch[i]);
        }
    }

    #[test]
    fn member_choice_is_uniform() {
        let b = 5;
        let mut rng = rollout_rng(11, 0);
        let mut counts = [0usize; 5];
        let n = 10_000;
        // same draw sequence the rollout uses for the member choice
        for _ in 0..n {
            counts[rng.random_range(0..b)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / b as f64).abs() <= 0.02);
        }
    }

    struct Recording<'a> {
        inner: &'a MapSnapshot,
        nonzero: Cell<usize>,
        calls: Cell<usize>,
    }

    impl LatentSource for Recording<'_> {
        fn latent_dim(&self) -> usize {
            self.inner.latent_dim()
        }

        fn sample(&self, x: f64, y: f64, noise: &[f64], out: &mut [f64]) {
            self.inner.sample(x, y, noise, out);
            self.calls.set(self.calls.get() + 1);
            if out.iter().any(|v| *v != 0.0) {
                self.nonzero.set(self.nonzero.get() + 1);
            }
        }
    }

    #[test]
    fn unknown_map_feeds_zero_latents() {
        let map = LatentMap::new(GridSpec::new(-5.0, -5.0, 0.5, 20, 20).unwrap(), 4).unwrap();
        let snap = map.snapshot();
        let rec = Recording {
            inner: &snap,
            nonzero: Cell::new(0),
            calls: Cell::new(0),
        };
        let ens = Ensemble::new(small_spec(4, 2), Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let starts = vec![
            RolloutStart {
                s_in: [0.5; STATE_DIM],
                pose: Pose2::default(),
            };
            5
        ];
        let mut rngs: Vec<_> = (0..5).map(|i| rollout_rng(1, i)).collect();
        rollout_batch(&ens, &starts, 7, |_, _| Action::new(0.5, 0.0), &rec, &mut rngs).unwrap();
        assert_eq!(rec.calls.get(), 35);
        assert_eq!(rec.nonzero.get(), 0);
    }

    #[test]
    fn floor_variance_rollouts_depend_only_on_latent_draws() {
        let mut mean = [0.0; OUTPUT_DIM];
        mean[0] = 0.05;
        let ens = constant_model(1, 4, mean, -1e3);
        let start = RolloutStart {
            s_in: [0.0; STATE_DIM],
            pose: Pose2::default(),
        };
        let acts = vec![Action::default(); 6];
        let a = ts1_rollout(&ens, start, &acts, &NoLatentOfDim1, &mut rollout_rng(1, 0)).unwrap();
        let b = ts1_rollout(&ens, start, &acts, &NoLatentOfDim1, &mut rollout_rng(2, 0)).unwrap();
        // identical members: streams differ only through the floor noise
        let tol = 5.0 * (0.5 * MIN_LOG_VAR).exp() * 6f64.sqrt();
        for (p, q) in a.poses.iter().zip(&b.poses) {
            assert!((p.x - q.x).abs() < tol && (p.y - q.y).abs() < tol);
        }
        assert!((a.poses[5].x - 0.3).abs() < tol);
    }

    struct NoLatentOfDim1;
    impl LatentSource for NoLatentOfDim1 {
        fn latent_dim(&self) -> usize {
            1
        }
        fn sample(&self, _: f64, _: f64, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    #[test]
    fn non_finite_prediction_truncates() {
        let mut mean = [0.0; OUTPUT_DIM];
        mean[0] = f64::MAX;
        let mut ens = constant_model(0, 1, mean, 0.0);
        ens.normalizer.out_std = vec![10.0; OUTPUT_DIM];
        let start = RolloutStart {
            s_in: [0.0; STATE_DIM],
            pose: Pose2::default(),
        };
        let tr = ts1_rollout(&ens, start, &[Action::default(); 4], &NoLatent, &mut rollout_rng(0, 0)).unwrap();
        assert!(!tr.valid);
        assert!(tr.poses.is_empty());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ens = Ensemble::new(small_spec(2, 3), Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        ens.save(dir.path()).unwrap();
        let back = Ensemble::load(dir.path()).unwrap();
        for (a, b) in ens.members().iter().zip(back.members()) {
            for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
                assert_eq!(x, y);
            }
        }
        assert_eq!(back.spec(), ens.spec());
        assert_eq!(back.normalizer, ens.normalizer);
    }
}
