//! Mapping network: per-modality encoders fused with the previous cell
//! estimate into an updated latent Gaussian.

use std::fs;
use std::path::Path as FsPath;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::material_code;
use crate::gridmap::{CellIndex, LatentCell, LatentDistribution};
use crate::nn::{self, Activation, Graph, Mlp, MlpSpec, NnError, ParamOwner, ParamStore, Tensor, Var, MIN_LOG_VAR};
use crate::sim::sensors::{SensorBundle, ACTION_DIM, FEATURE_DIM, HISTORY_LEN, STATE_DIM};
use crate::sim::{TrackSpec, Transition};

#[derive(Debug, Error)]
pub enum MapperError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("at least one modality must be enabled")]
    NoModalities,
    #[error("unknown modality set `{0}` (expected a combination of A, I, S)")]
    UnknownVariant(String),
    #[error("traversal has no transitions")]
    EmptyTraversal,
    #[error("expected latent dimension {expected}, got {got}")]
    LatentDim { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modalities {
    pub image: bool,
    pub audio: bool,
    /// State and action histories.
    pub state_action: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        image: true,
        audio: true,
        state_action: true,
    };

    /// Parses a variant label such as `AIS`, `AS` or `S`.
    pub fn from_label(label: &str) -> Result<Self, MapperError> {
        let mut m = Modalities {
            image: false,
            audio: false,
            state_action: false,
        };
        for ch in label.chars() {
            match ch.to_ascii_uppercase() {
                'A' if !m.audio => m.audio = true,
                'I' if !m.image => m.image = true,
                'S' if !m.state_action => m.state_action = true,
                _ => return Err(MapperError::UnknownVariant(label.to_string())),
            }
        }
        if m.count() == 0 {
            return Err(MapperError::UnknownVariant(label.to_string()));
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.audio {
            s.push('A');
        }
        if self.image {
            s.push('I');
        }
        if self.state_action {
            s.push('S');
        }
        s
    }

    pub fn count(&self) -> usize {
        usize::from(self.image) + usize::from(self.audio) + usize::from(self.state_action)
    }
}

/// One encoder branch of the mapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    Image,
    Audio,
    StateHistory,
    ActionHistory,
}

impl Encoder {
    pub fn input_dim(self) -> usize {
        match self {
            Encoder::Image | Encoder::Audio => FEATURE_DIM,
            Encoder::StateHistory => HISTORY_LEN * STATE_DIM,
            Encoder::ActionHistory => HISTORY_LEN * ACTION_DIM,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Encoder::Image => "enc_image.",
            Encoder::Audio => "enc_audio.",
            Encoder::StateHistory => "enc_state.",
            Encoder::ActionHistory => "enc_action.",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperSpec {
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub fusion_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub modalities: Modalities,
}

impl Default for MapperSpec {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64, 64],
            feature_dim: 32,
            fusion_hidden: vec![128],
            latent_dim: 10,
            modalities: Modalities::ALL,
        }
    }
}

impl MapperSpec {
    /// Same spec restricted to `enabled` modalities.
    pub fn with_modalities(&self, enabled: Modalities) -> Result<Self, MapperError> {
        if enabled.count() == 0 {
            return Err(MapperError::NoModalities);
        }
        Ok(Self {
            modalities: enabled,
            ..self.clone()
        })
    }

    pub fn encoders(&self) -> Vec<Encoder> {
        let m = self.modalities;
        let mut v = Vec::new();
        if m.image {
            v.push(Encoder::Image);
        }
        if m.audio {
            v.push(Encoder::Audio);
        }
        if m.state_action {
            v.push(Encoder::StateHistory);
            v.push(Encoder::ActionHistory);
        }
        v
    }

    /// Width of the previous-estimate block: mean, log-variance and visited flag.
    pub fn prev_dim(&self) -> usize {
        2 * self.latent_dim + 1
    }

    pub fn fusion_input_dim(&self) -> usize {
        self.encoders().len() * self.feature_dim + self.prev_dim()
    }

    fn encoder_spec(&self, e: Encoder) -> MlpSpec {
        MlpSpec {
            output_activation: Activation::Tanh,
            ..MlpSpec::new(e.input_dim(), self.encoder_hidden.clone(), self.feature_dim)
        }
    }

    fn fusion_spec(&self) -> MlpSpec {
        MlpSpec::new(self.fusion_input_dim(), self.fusion_hidden.clone(), 2 * self.latent_dim)
    }

    pub fn validate(&self) -> Result<(), MapperError> {
        if self.modalities.count() == 0 {
            return Err(MapperError::NoModalities);
        }
        for e in self.encoders() {
            self.encoder_spec(e).validate()?;
        }
        self.fusion_spec().validate()?;
        Ok(())
    }
}

/// Previous estimate of a cell as seen by the mapper.
#[derive(Clone, Debug, PartialEq)]
pub struct PrevLatent {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub visited: bool,
}

impl PrevLatent {
    pub fn zero_knowledge(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            log_var: vec![0.0; k],
            visited: false,
        }
    }

    pub fn from_cell(cell: Option<&LatentCell>, k: usize) -> Self {
        match cell {
            Some(c) if c.visited => Self {
                mean: c.mean.clone(),
                log_var: c.log_var.clone(),
                visited: true,
            },
            _ => Self::zero_knowledge(k),
        }
    }

    pub fn from_distribution(d: &LatentDistribution, k: usize) -> Self {
        match d {
            LatentDistribution::ZeroKnowledge => Self::zero_knowledge(k),
            LatentDistribution::Gaussian { mean, log_var } => Self {
                mean: mean.clone(),
                log_var: log_var.clone(),
                visited: true,
            },
        }
    }

    fn write(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.log_var);
        out.push(if self.visited { 1.0 } else { 0.0 });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapperInput {
    pub sensors: SensorBundle,
    pub prev: PrevLatent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapperOutput {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Representative sensors of a traversal: those of its last transition.
pub fn aggregate_traversal(transitions: &[Transition]) -> Result<SensorBundle, MapperError> {
    transitions
        .last()
        .map(|t| t.sensors.clone())
        .ok_or(MapperError::EmptyTraversal)
}

/// Anything that turns a traversal observation into a cell update.
pub trait CellMapper: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn update_batch(&self, items: &[(CellIndex, MapperInput)]) -> Result<Vec<MapperOutput>, MapperError>;

    fn update(&self, cell: CellIndex, input: &MapperInput) -> Result<MapperOutput, MapperError> {
        let mut out = self.update_batch(&[(cell, input.clone())])?;
        Ok(out.remove(0))
    }
}

/// Ground-truth variant emitting [`material_code`] of the cell.
#[derive(Clone, Debug)]
pub struct MaterialMapper {
    pub track: TrackSpec,
}

impl CellMapper for MaterialMapper {
    fn latent_dim(&self) -> usize {
        1
    }

    fn update_batch(&self, items: &[(CellIndex, MapperInput)]) -> Result<Vec<MapperOutput>, MapperError> {
        Ok(items
            .iter()
            .map(|(c, _)| MapperOutput {
                mean: vec![material_code(self.track.material_at_cell(*c))],
                log_var: vec![MIN_LOG_VAR],
            })
            .collect())
    }
}

/// Affine scaling of the state and action histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryNorm {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl HistoryNorm {
    pub fn identity() -> Self {
        Self {
            state_mean: vec![0.0; STATE_DIM],
            state_std: vec![1.0; STATE_DIM],
            action_mean: vec![0.0; ACTION_DIM],
            action_std: vec![1.0; ACTION_DIM],
        }
    }

    pub fn fit<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Self {
        let mut n = 0.0;
        let mut s = [0.0; STATE_DIM];
        let mut s2 = [0.0; STATE_DIM];
        let mut a = [0.0; ACTION_DIM];
        let mut a2 = [0.0; ACTION_DIM];
        for t in transitions {
            n += 1.0;
            for i in 0..STATE_DIM {
                s[i] += t.s_in[i];
                s2[i] += t.s_in[i] * t.s_in[i];
            }
            let act = t.action.to_array();
            for i in 0..ACTION_DIM {
                a[i] += act[i];
                a2[i] += act[i] * act[i];
            }
        }
        if n == 0.0 {
            return Self::identity();
        }
        let moments = |sum: &[f64], sq: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let m: Vec<f64> = sum.iter().map(|v| v / n).collect();
            let sd = sq.iter().zip(&m).map(|(q, mu)| (q / n - mu * mu).max(0.0).sqrt().max(1e-6)).collect();
            (m, sd)
        };
        let (state_mean, state_std) = moments(&s, &s2);
        let (action_mean, action_std) = moments(&a, &a2);
        Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
        }
    }

    fn encode(&self, e: Encoder, b: &SensorBundle, out: &mut Vec<f64>) {
        match e {
            Encoder::Image => out.extend_from_slice(&b.image_feat),
            Encoder::Audio => out.extend_from_slice(&b.audio_feat),
            Encoder::StateHistory => {
                for row in &b.state_hist {
                    out.extend(row.iter().enumerate().map(|(i, v)| (v - self.state_mean[i]) / self.state_std[i]));
                }
            }
            Encoder::ActionHistory => {
                for row in &b.action_hist {
                    out.extend(row.iter().enumerate().map(|(i, v)| (v - self.action_mean[i]) / self.action_std[i]));
                }
            }
        }
    }
}

/// Per-encoder input matrices and the previous-estimate block for a batch.
#[derive(Clone, Debug)]
pub struct MapperBatch {
    pub encoder_inputs: Vec<Tensor>,
    pub prev: Tensor,
}

#[derive(Clone, Debug)]
pub struct Mapper {
    spec: MapperSpec,
    pub norm: HistoryNorm,
    pub params: ParamStore,
    encoders: Vec<(Encoder, Mlp)>,
    fusion: Mlp,
}

pub const MAPPER_MANIFEST: &str = "mapper.json";
pub const MAPPER_PARAMS: &str = "mapper.params";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapperManifest {
    spec: MapperSpec,
    norm: HistoryNorm,
    params_file: String,
}

impl Mapper {
    pub fn new<R: Rng + ?Sized>(spec: MapperSpec, norm: HistoryNorm, rng: &mut R) -> Result<Self, MapperError> {
        spec.validate()?;
        let mut params = ParamStore::new(ParamOwner::Mapper);
        let mut encoders = Vec::new();
        for e in spec.encoders() {
            encoders.push((e, spec.encoder_spec(e).init_into(&mut params, e.prefix(), rng)?));
        }
        let fusion = spec.fusion_spec().init_into(&mut params, "fusion.", rng)?;
        Ok(Self {
            spec,
            norm,
            params,
            encoders,
            fusion,
        })
    }

    pub fn from_parts(spec: MapperSpec, norm: HistoryNorm, params: ParamStore) -> Result<Self, MapperError> {
        spec.validate()?;
        let mut encoders = Vec::new();
        for e in spec.encoders() {
            encoders.push((e, Mlp::attach(spec.encoder_spec(e), &params, e.prefix())?));
        }
        let fusion = Mlp::attach(spec.fusion_spec(), &params, "fusion.")?;
        Ok(Self {
            spec,
            norm,
            params,
            encoders,
            fusion,
        })
    }

    pub fn spec(&self) -> &MapperSpec {
        &self.spec
    }

    pub fn encoders(&self) -> impl Iterator<Item = Encoder> + '_ {
        self.encoders.iter().map(|(e, _)| *e)
    }

    /// Builds the network inputs for a batch of sensor bundles and previous
    /// estimates.
    pub fn batch<'a>(&self, items: impl IntoIterator<Item = (&'a SensorBundle, &'a PrevLatent)>) -> Result<MapperBatch, MapperError> {
        let k = self.spec.latent_dim;
        let mut enc_data: Vec<Vec<f64>> = vec![Vec::new(); self.encoders.len()];
        let mut prev = Vec::new();
        let mut rows = 0;
        for (sensors, p) in items {
            if p.mean.len() != k || p.log_var.len() != k {
                return Err(MapperError::LatentDim {
                    expected: k,
                    got: p.mean.len(),
                });
            }
            for (j, (e, _)) in self.encoders.iter().enumerate() {
                self.norm.encode(*e, sensors, &mut enc_data[j]);
            }
            p.write(&mut prev);
            rows += 1;
        }
        let encoder_inputs = self
            .encoders
            .iter()
            .zip(enc_data)
            .map(|((e, _), d)| Tensor::matrix(rows, e.input_dim(), d))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MapperBatch {
            encoder_inputs,
            prev: Tensor::matrix(rows, self.spec.prev_dim(), prev)?,
        })
    }

    /// Tape-free forward pass.
    pub fn forward(&self, batch: &MapperBatch) -> Result<Vec<MapperOutput>, MapperError> {
        let k = self.spec.latent_dim;
        let rows = batch.prev.rows();
        let feats = self
            .encoders
            .iter()
            .zip(&batch.encoder_inputs)
            .map(|((_, net), x)| net.forward(&self.params, x))
            .collect::<Result<Vec<_>, _>>()?;
        let width = self.spec.fusion_input_dim();
        let mut fused = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for f in &feats {
                fused.extend_from_slice(f.row_slice(r));
            }
            fused.extend_from_slice(batch.prev.row_slice(r));
        }
        let out = self.fusion.forward(&self.params, &Tensor::matrix(rows, width, fused)?)?;
        Ok((0..rows)
            .map(|r| {
                let row = out.row_slice(r);
                MapperOutput {
                    mean: row[..k].to_vec(),
                    log_var: row[k..].iter().map(|&v| nn::soft_clamp_log_var_value(v)).collect(),
                }
            })
            .collect())
    }

    /// Graph forward with the previous-estimate block supplied as a variable,
    /// so autoregressive chains stay differentiable. Returns `(mean, log_var)`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], encoder_inputs: &[Var], prev: Var) -> Result<(Var, Var), MapperError> {
        let k = self.spec.latent_dim;
        let mut parts = Vec::with_capacity(self.encoders.len() + 1);
        for ((_, net), &x) in self.encoders.iter().zip(encoder_inputs) {
            parts.push(net.forward_graph(g, vars, x)?);
        }
        parts.push(prev);
        let fused = g.concat_cols(&parts)?;
        let out = self.fusion.forward_graph(g, vars, fused)?;
        let mean = g.slice_cols(out, 0, k)?;
        let raw = g.slice_cols(out, k, 2 * k)?;
        Ok((mean, nn::soft_clamp_log_var(g, raw)))
    }

    pub fn save(&self, dir: &FsPath) -> Result<(), MapperError> {
        fs::create_dir_all(dir)?;
        nn::write_params(&self.params, &dir.join(MAPPER_PARAMS))?;
        let manifest = MapperManifest {
            spec: self.spec.clone(),
            norm: self.norm.clone(),
            params_file: MAPPER_PARAMS.to_string(),
        };
        fs::write(dir.join(MAPPER_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &FsPath) -> Result<Self, MapperError> {
        let m: MapperManifest = serde_json::from_str(&fs::read_to_string(dir.join(MAPPER_MANIFEST))?)?;
        let params = nn::read_params(&dir.join(&m.params_file), ParamOwner::Mapper)?;
        Self::from_parts(m.spec, m.norm, params)
    }
}

impl CellMapper for Mapper {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn update_batch(&self, items: &[(CellIndex, MapperInput)]) -> Result<Vec<MapperOutput>, MapperError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(items.iter().map(|(_, i)| (&i.sensors, &i.prev)))?;
        self.forward(&batch)
    }
}

/// Single mapper update; see [`CellMapper::update`].
pub fn map_update(mapper: &Mapper, input: &MapperInput) -> Result<MapperOutput, MapperError> {
    mapper.update(CellIndex::new(0, 0), input)
}
