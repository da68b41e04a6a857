//! Flat `key = value` experiment configuration.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::read_lines;
use crate::model::ModeSpec;
use crate::optim::LrSchedule;

/// Input files. Relative paths in a config file resolve against the
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DataConfig {
    /// One edge list per relation.
    pub edges: Vec<PathBuf>,
    /// Overrides the relation names taken from edge-list file stems.
    pub relation_names: Option<Vec<String>>,
    /// Keeps only these relations, in this order, after naming.
    pub relations: Option<Vec<String>>,
    pub node_map: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub feature_dim: Option<usize>,
    pub regions: Option<PathBuf>,
    pub counts: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub mode: ModeSpec,
    /// `None` means 300, or 200 for single-link runs.
    pub epochs: Option<usize>,
    pub schedule: LrSchedule,
    pub link_batch: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub task_dim: usize,
    pub dropout: f64,
    /// Stop after this many epochs without a better validation score.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ModeSpec::Timme,
            epochs: None,
            schedule: LrSchedule::default(),
            link_batch: 512,
            seed: 0,
            hidden_dim: 100,
            embed_dim: 100,
            task_dim: 100,
            dropout: 0.0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            ModeSpec::SingleLink(_) => 200,
            _ => 300,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = Path::new(value.trim());
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Every key `set` accepts.
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "edges",
        "relation_names",
        "relations",
        "node_map",
        "seeds",
        "labels",
        "features",
        "feature_dim",
        "regions",
        "counts",
        "epochs",
        "lr",
        "milestones",
        "decay_factor",
        "link_batch",
        "seed",
        "hidden_dim",
        "embed_dim",
        "task_dim",
        "dropout",
        "patience",
        "out_dir",
    ];

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        for (lineno, line) in read_lines(path)? {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, lineno, "expected key = value"))?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies one setting; paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "mode" => t.mode = value.parse()?,
            "edges" => d.edges = parse_list(value).iter().map(|p| resolve(base, p)).collect(),
            "relation_names" => d.relation_names = Some(parse_list(value)),
            "relations" => d.relations = Some(parse_list(value)),
            "node_map" => d.node_map = Some(resolve(base, value)),
            "seeds" => d.seeds = Some(resolve(base, value)),
            "labels" => d.labels = Some(resolve(base, value)),
            "features" => d.features = Some(resolve(base, value)),
            "feature_dim" => d.feature_dim = Some(parse_num(key, value)?),
            "regions" => d.regions = Some(resolve(base, value)),
            "counts" => d.counts = Some(resolve(base, value)),
            "epochs" => t.epochs = Some(parse_num(key, value)?),
            "lr" => t.schedule.base = parse_num(key, value)?,
            "milestones" => {
                t.schedule.milestones = parse_list(value)
                    .iter()
                    .map(|m| parse_num(key, m))
                    .collect::<Result<_>>()?
            }
            "decay_factor" => t.schedule.factor = parse_num(key, value)?,
            "link_batch" => t.link_batch = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "hidden_dim" => t.hidden_dim = parse_num(key, value)?,
            "embed_dim" => t.embed_dim = parse_num(key, value)?,
            "task_dim" => t.task_dim = parse_num(key, value)?,
            "dropout" => t.dropout = parse_num(key, value)?,
            "patience" => t.patience = Some(parse_num(key, value)?),
            "out_dir" => self.out_dir = Some(resolve(base, value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.validate()
    }

    /// Renders the configuration in the format [`ExperimentConfig::load`]
    /// reads. Every key is written, so the text pins down the run.
    pub fn to_conf_string(&self) -> String {
        fn path(p: &Path) -> String {
            p.display().to_string()
        }
        fn join<T: ToString>(items: &[T]) -> String {
            items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
        }
        let d = &self.data;
        let t = &self.train;
        let mut lines = vec![
            format!("mode = {}", t.mode),
            format!("edges = {}", join(&d.edges.iter().map(|p| path(p)).collect::<Vec<_>>())),
        ];
        let optional = [
            ("relation_names", d.relation_names.as_ref().map(|n| join(n))),
            ("relations", d.relations.as_ref().map(|n| join(n))),
            ("node_map", d.node_map.as_deref().map(path)),
            ("seeds", d.seeds.as_deref().map(path)),
            ("labels", d.labels.as_deref().map(path)),
            ("features", d.features.as_deref().map(path)),
            ("feature_dim", d.feature_dim.map(|v| v.to_string())),
            ("regions", d.regions.as_deref().map(path)),
            ("counts", d.counts.as_deref().map(path)),
        ];
        for (key, value) in optional {
            if let Some(value) = value {
                lines.push(format!("{key} = {value}"));
            }
        }
        lines.extend([
            format!("epochs = {}", t.epochs()),
            format!("lr = {}", t.schedule.base),
            format!("milestones = {}", join(&t.schedule.milestones)),
            format!("decay_factor = {}", t.schedule.factor),
            format!("link_batch = {}", t.link_batch),
            format!("seed = {}", t.seed),
            format!("hidden_dim = {}", t.hidden_dim),
            format!("embed_dim = {}", t.embed_dim),
            format!("task_dim = {}", t.task_dim),
            format!("dropout = {}", t.dropout),
        ]);
        if let Some(p) = t.patience {
            lines.push(format!("patience = {p}"));
        }
        if let Some(out) = &self.out_dir {
            lines.push(format!("out_dir = {}", path(out)));
        }
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.link_batch == 0 {
            return Err(Error::Config("link_batch must be positive".into()));
        }
        if !(t.schedule.base > 0.0 && t.schedule.base.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(t.schedule.factor > 0.0 && t.schedule.factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if t.hidden_dim == 0 || t.embed_dim == 0 || t.task_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if t.epochs == Some(0) {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}
