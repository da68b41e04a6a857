//! Encoder plus the task heads a given training mode uses.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::decoder::{
    classify_on_tape, hierarchical_on_tape, ClassifierParams, HierarchicalParams, NtnParams,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::graph::NormalizedRelationSet;
use crate::linalg::DenseMatrix;

/// Which losses participate in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskMode {
    /// Node classification only.
    SingleClass,
    /// Link prediction on one relation only.
    SingleLink(usize),
    /// Classification plus every relation's link task, summed.
    Timme,
    /// Like `Timme`, with the classifier reading a λ-weighted mix of
    /// per-relation task embeddings.
    Hierarchical,
}

impl TaskMode {
    pub fn has_classification(self) -> bool {
        !matches!(self, TaskMode::SingleLink(_))
    }

    pub fn link_tasks(self, num_relations: usize) -> Vec<usize> {
        match self {
            TaskMode::SingleClass => vec![],
            TaskMode::SingleLink(r) => vec![r],
            TaskMode::Timme | TaskMode::Hierarchical => (0..num_relations).collect(),
        }
    }

    pub fn is_hierarchical(self) -> bool {
        self == TaskMode::Hierarchical
    }
}

/// Textual mode as written in config files, before relation names are
/// resolved: `single_class`, `single_link(NAME)`, `timme`, `hierarchical`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ModeSpec {
    SingleClass,
    SingleLink(String),
    Timme,
    Hierarchical,
}

impl ModeSpec {
    pub fn resolve(&self, relation_names: &[String]) -> Result<TaskMode> {
        Ok(match self {
            ModeSpec::SingleClass => TaskMode::SingleClass,
            ModeSpec::Timme => TaskMode::Timme,
            ModeSpec::Hierarchical => TaskMode::Hierarchical,
            ModeSpec::SingleLink(name) => {
                let r = relation_names
                    .iter()
                    .position(|n| n == name)
                    .or_else(|| name.parse::<usize>().ok().filter(|&r| r < relation_names.len()))
                    .ok_or_else(|| Error::Config(format!("single_link: unknown relation {name:?}")))?;
                TaskMode::SingleLink(r)
            }
        })
    }
}

impl FromStr for ModeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "single_class" | "single" => return Ok(ModeSpec::SingleClass),
            "timme" => return Ok(ModeSpec::Timme),
            "hierarchical" | "timme_hierarchical" => return Ok(ModeSpec::Hierarchical),
            _ => {}
        }
        let inner = t
            .strip_prefix("single_link(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| t.strip_prefix("single_link:"));
        match inner {
            Some(name) if !name.trim().is_empty() => Ok(ModeSpec::SingleLink(name.trim().to_string())),
            _ => Err(Error::Config(format!(
                "unknown mode {t:?} (expected single_class, single_link(NAME), timme, hierarchical)"
            ))),
        }
    }
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeSpec::SingleClass => write!(f, "single_class"),
            ModeSpec::SingleLink(name) => write!(f, "single_link({name})"),
            ModeSpec::Timme => write!(f, "timme"),
            ModeSpec::Hierarchical => write!(f, "hierarchical"),
        }
    }
}

impl From<ModeSpec> for String {
    fn from(m: ModeSpec) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for ModeSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub num_relations: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Width of each hierarchical task embedding.
    pub task_dim: usize,
    pub dropout: f64,
    pub mode: TaskMode,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub embeddings: Var,
    pub alphas: Vec<Var>,
    /// N x 2 probabilities when classification participates.
    pub class_probs: Option<Var>,
    /// The embedding each link task reads, indexed by relation.
    pub link_inputs: Vec<Option<Var>>,
    pub lambda: Option<Var>,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub embeddings: DenseMatrix,
    pub alphas: Vec<Vec<f64>>,
    pub class_probs: Option<DenseMatrix>,
    pub link_inputs: Vec<Option<DenseMatrix>>,
    pub lambda: Option<Vec<f64>>,
}

impl Inference {
    pub fn from_tape(tape: &Tape<'_>, out: &ModelOutput) -> Self {
        Self {
            embeddings: tape.value(out.embeddings).clone(),
            alphas: out.alphas.iter().map(|&a| tape.value(a).data().to_vec()).collect(),
            class_probs: out.class_probs.map(|p| tape.value(p).clone()),
            link_inputs: out
                .link_inputs
                .iter()
                .map(|v| v.map(|v| tape.value(v).clone()))
                .collect(),
            lambda: out.lambda.map(|l| tape.value(l).data().to_vec()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.num_relations == 0 {
            return Err(Error::Config("at least one relation is required".into()));
        }
        if let TaskMode::SingleLink(r) = config.mode {
            if r >= config.num_relations {
                return Err(Error::Config(format!("link relation {r} out of range")));
            }
        }
        if config.task_dim == 0 {
            return Err(Error::Config("task_dim must be positive".into()));
        }
        let encoder = Encoder::new(EncoderConfig {
            input_dim: config.input_dim,
            hidden_dim: config.hidden_dim,
            embed_dim: config.embed_dim,
            branches: 2 * config.num_relations + 1,
            dropout: config.dropout,
        })?;
        Ok(Self { config, encoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> TaskMode {
        self.config.mode
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn head_dim(&self) -> usize {
        if self.config.mode.is_hierarchical() {
            self.config.task_dim
        } else {
            self.config.embed_dim
        }
    }

    /// Fresh parameters for this model, drawn from `seed`.
    pub fn init_params(&self, features: &FeatureStore, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        features.register(&mut params, &mut rng)?;
        self.encoder.register(&mut params, &mut rng)?;
        let head_dim = self.head_dim();
        if self.config.mode.is_hierarchical() {
            HierarchicalParams::register(
                self.config.num_relations,
                self.config.embed_dim,
                self.config.task_dim,
                &mut params,
                &mut rng,
            )?;
        }
        if self.config.mode.has_classification() {
            ClassifierParams::register(head_dim, &mut params, &mut rng)?;
        }
        for r in self.config.mode.link_tasks(self.config.num_relations) {
            NtnParams::register(r, head_dim, &mut params, &mut rng)?;
        }
        Ok(params)
    }

    pub fn forward<'g>(
        &self,
        tape: &mut Tape<'g>,
        norm: &'g NormalizedRelationSet,
        features: &FeatureStore,
        params: &ParameterStore,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutput> {
        if norm.num_nodes() != self.config.num_nodes {
            return Err(Error::shape(
                "forward",
                format!("graph has {} nodes, model expects {}", norm.num_nodes(), self.config.num_nodes),
            ));
        }
        let enc = self.encoder.encode(tape, norm, features, params, dropout_rng)?;
        let h = enc.embeddings;
        let r_count = self.config.num_relations;
        let mut link_inputs = vec![None; r_count];
        let (class_probs, lambda) = match self.config.mode {
            TaskMode::Hierarchical => {
                let hier = hierarchical_on_tape(tape, h, r_count, params)?;
                for (r, &e) in hier.task_embeddings.iter().enumerate() {
                    link_inputs[r] = Some(e);
                }
                (Some(hier.probs), Some(hier.lambda))
            }
            mode => {
                for r in mode.link_tasks(r_count) {
                    link_inputs[r] = Some(h);
                }
                let probs = if mode.has_classification() {
                    Some(classify_on_tape(tape, h, params)?)
                } else {
                    None
                };
                (probs, None)
            }
        };
        Ok(ModelOutput {
            embeddings: h,
            alphas: enc.alphas,
            class_probs,
            link_inputs,
            lambda,
        })
    }

    /// Forward pass without dropout, returning plain matrices.
    pub fn infer(
        &self,
        norm: &NormalizedRelationSet,
        features: &FeatureStore,
        params: &ParameterStore,
    ) -> Result<Inference> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, norm, features, params, None)?;
        Ok(Inference::from_tape(&tape, &out))
    }

    /// Checks that `params` has exactly the slots and shapes this model
    /// registers.
    pub fn check_params(&self, features: &FeatureStore, params: &ParameterStore) -> Result<()> {
        let expected = self.init_params(features, 0)?;
        for (name, slot) in expected.iter() {
            let got = params
                .value(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            if got.shape() != slot.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    got.shape(),
                    slot.value().shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }
}

/// λ weights paired with relation names.
pub fn lambda_readout(inference: &Inference, relation_names: &[String]) -> Result<Vec<(String, f64)>> {
    let lambda = inference
        .lambda
        .as_ref()
        .ok_or_else(|| Error::Mode("λ weights exist only in hierarchical mode".into()))?;
    if lambda.len() != relation_names.len() {
        return Err(Error::shape(
            "lambda_readout",
            format!("{} weights for {} relations", lambda.len(), relation_names.len()),
        ));
    }
    Ok(relation_names.iter().cloned().zip(lambda.iter().copied()).collect())
}
