//! Initial node representations: implicit one-hot, fixed external vectors,
//! or external vectors with trainable rows for nodes that have none.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::NodeIndex;
use crate::io::{parse_vector, read_lines};
use crate::linalg::DenseMatrix;

/// Parameter slot holding the rows of featureless nodes.
pub const TRAINABLE_ROWS: &str = "features.trainable";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    OneHot,
    Fixed,
    Mixed,
}

#[derive(Clone, Debug)]
pub struct FeatureStore {
    mode: FeatureMode,
    dim: usize,
    num_nodes: usize,
    /// N x dim; rows of featureless nodes are zero. Empty in one-hot mode.
    fixed: DenseMatrix,
    featured: Vec<bool>,
    featureless: Vec<usize>,
}

impl FeatureStore {
    pub fn one_hot(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("one-hot features need at least one node".into()));
        }
        Ok(Self {
            mode: FeatureMode::OneHot,
            dim: n,
            num_nodes: n,
            fixed: DenseMatrix::zeros(0, 0),
            featured: vec![true; n],
            featureless: Vec::new(),
        })
    }

    /// Builds a store from per-node optional vectors of length `dim`.
    pub fn from_rows(rows: Vec<Option<Vec<f64>>>, dim: usize) -> Result<Self> {
        let n = rows.len();
        let mut fixed = DenseMatrix::zeros(n, dim);
        let mut featured = vec![false; n];
        let mut featureless = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            match row {
                Some(v) if v.len() == dim => {
                    fixed.row_mut(i).copy_from_slice(&v);
                    featured[i] = true;
                }
                Some(v) => {
                    return Err(Error::Invalid(format!(
                        "node {i}: {} feature values, expected {dim}",
                        v.len()
                    )))
                }
                None => featureless.push(i),
            }
        }
        let mode = if featureless.is_empty() {
            FeatureMode::Fixed
        } else {
            FeatureMode::Mixed
        };
        Ok(Self {
            mode,
            dim,
            num_nodes: n,
            fixed,
            featured,
            featureless,
        })
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn is_featured(&self, i: usize) -> bool {
        self.featured[i]
    }

    pub fn featureless(&self) -> &[usize] {
        &self.featureless
    }

    pub fn num_trainable_rows(&self) -> usize {
        self.featureless.len()
    }

    /// Registers the trainable rows (mixed mode only), initialized uniformly
    /// in `[-1/sqrt(dim), 1/sqrt(dim)]`.
    pub fn register(&self, params: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        if self.mode != FeatureMode::Mixed {
            return Ok(());
        }
        let bound = 1.0 / (self.dim as f64).sqrt();
        let data = (0..self.featureless.len() * self.dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        params.insert(
            TRAINABLE_ROWS,
            DenseMatrix::from_vec(self.featureless.len(), self.dim, data)?,
            true,
        )
    }

    /// `H^(0)` as a tape node, or `None` in one-hot mode where the encoder
    /// uses its first-layer weights directly.
    pub fn input<'g>(&self, tape: &mut Tape<'g>, params: &ParameterStore) -> Result<Option<Var>> {
        match self.mode {
            FeatureMode::OneHot => Ok(None),
            FeatureMode::Fixed => Ok(Some(tape.constant(self.fixed.clone()))),
            FeatureMode::Mixed => {
                let base = tape.constant(self.fixed.clone());
                let rows = tape.param(params, TRAINABLE_ROWS)?;
                tape.replace_rows(base, rows, &self.featureless).map(Some)
            }
        }
    }

    /// The explicit `H^(0)` matrix. One-hot mode yields the identity.
    pub fn materialize(&self, params: &ParameterStore) -> Result<DenseMatrix> {
        match self.mode {
            FeatureMode::OneHot => Ok(DenseMatrix::identity(self.num_nodes)),
            FeatureMode::Fixed => Ok(self.fixed.clone()),
            FeatureMode::Mixed => {
                let rows = params.value(TRAINABLE_ROWS)?;
                let mut out = self.fixed.clone();
                for (k, &i) in self.featureless.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(rows.row(k));
                }
                Ok(out)
            }
        }
    }
}

/// Reads `node_id<TAB>f1,f2,...` lines. Nodes absent from the file become
/// featureless.
pub fn load_feature_file(path: &Path, nodes: &NodeIndex, dim: usize) -> Result<FeatureStore> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    for (lineno, line) in read_lines(path)? {
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "expected node_id<TAB>f1,f2,..."))?;
        let i = nodes
            .index_of(id.trim())
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown node id {:?}", id.trim())))?;
        let v = parse_vector(values).map_err(|m| Error::parse(path, lineno, m))?;
        if v.len() != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!("{} feature values, expected {dim}", v.len()),
            ));
        }
        if rows[i].replace(v).is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate features for {:?}", id.trim())));
        }
    }
    FeatureStore::from_rows(rows, dim)
}
