//! Task heads: the two-class node classifier, the per-relation diagonal
//! neural-tensor link scorer, and the hierarchical classifier that mixes
//! per-relation task embeddings with attention weights `λ`.

use rand::Rng;

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::encoder::{attention_on_tape, glorot};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

pub fn ntn_diag_name(r: usize) -> String {
    format!("ntn.r{r}.diag")
}

pub fn ntn_v_name(r: usize) -> String {
    format!("ntn.r{r}.v")
}

pub fn ntn_bias_name(r: usize) -> String {
    format!("ntn.r{r}.bias")
}

pub fn task_map_name(r: usize) -> String {
    format!("hier.map.r{r}")
}

/// Affine map to two logits followed by a softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// d x 2
    pub weight: DenseMatrix,
    /// 1 x 2
    pub bias: DenseMatrix,
}

impl ClassifierParams {
    pub fn register(dim: usize, params: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        params.insert(CLASSIFIER_WEIGHT, glorot(dim, 2, rng), true)?;
        params.insert(CLASSIFIER_BIAS, DenseMatrix::zeros(1, 2), true)
    }

    pub fn from_store(params: &ParameterStore) -> Result<Self> {
        Ok(Self {
            weight: params.value(CLASSIFIER_WEIGHT)?.clone(),
            bias: params.value(CLASSIFIER_BIAS)?.clone(),
        })
    }
}

/// N x 2 class probabilities.
pub fn classify(h: &DenseMatrix, params: &ClassifierParams) -> Result<DenseMatrix> {
    let mut logits = h.matmul(&params.weight)?;
    if params.bias.shape() != (1, logits.cols()) {
        return Err(Error::shape("classify", format!("bias {:?}", params.bias.shape())));
    }
    for i in 0..logits.rows() {
        for (o, b) in logits.row_mut(i).iter_mut().zip(params.bias.row(0)) {
            *o += b;
        }
    }
    Ok(logits.softmax_rows())
}

pub fn classify_on_tape(tape: &mut Tape<'_>, h: Var, params: &ParameterStore) -> Result<Var> {
    let w = tape.param(params, CLASSIFIER_WEIGHT)?;
    let b = tape.param(params, CLASSIFIER_BIAS)?;
    let logits = tape.matmul(h, w)?;
    let logits = tape.add_row_broadcast(logits, b)?;
    Ok(tape.softmax_rows(logits))
}

/// Predicted class per row; ties go to class 0.
pub fn predict_labels(probs: &DenseMatrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| usize::from(probs.get(i, 1) > probs.get(i, 0)))
        .collect()
}

/// Link scorer for one relation: `Σ_k w_k h_i[k] h_j[k] + v·[h_i; h_j] + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct NtnHead {
    pub diag_w: Vec<f64>,
    pub v: Vec<f64>,
    pub bias: f64,
}

impl NtnHead {
    pub fn dim(&self) -> usize {
        self.diag_w.len()
    }

    pub fn score(&self, h_i: &[f64], h_j: &[f64]) -> Result<f64> {
        let d = self.dim();
        if h_i.len() != d || h_j.len() != d || self.v.len() != 2 * d {
            return Err(Error::shape(
                "ntn_score",
                format!("embeddings {} / {}, head dim {d}", h_i.len(), h_j.len()),
            ));
        }
        let bilinear: f64 = (0..d).map(|k| (h_i[k] * h_j[k]) * self.diag_w[k]).sum();
        let linear: f64 = h_i.iter().chain(h_j).zip(&self.v).map(|(h, v)| h * v).sum();
        Ok(bilinear + linear + self.bias)
    }
}

/// One scorer per original relation.
#[derive(Clone, Debug, PartialEq)]
pub struct NtnParams {
    pub heads: Vec<Option<NtnHead>>,
}

impl NtnParams {
    /// Registers the head of relation `r`: diagonal initialized to ones,
    /// `v` Glorot-uniform, bias zero.
    pub fn register(r: usize, dim: usize, params: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        params.insert(ntn_diag_name(r), DenseMatrix::filled(dim, 1, 1.0), true)?;
        params.insert(ntn_v_name(r), glorot(2 * dim, 1, rng), true)?;
        params.insert(ntn_bias_name(r), DenseMatrix::zeros(1, 1), true)
    }

    /// Reads whatever heads are registered for relations `0..num_relations`.
    pub fn from_store(params: &ParameterStore, num_relations: usize) -> Result<Self> {
        let heads = (0..num_relations)
            .map(|r| {
                if !params.contains(&ntn_diag_name(r)) {
                    return Ok(None);
                }
                Ok(Some(NtnHead {
                    diag_w: params.value(&ntn_diag_name(r))?.data().to_vec(),
                    v: params.value(&ntn_v_name(r))?.data().to_vec(),
                    bias: params.value(&ntn_bias_name(r))?.data()[0],
                }))
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    pub fn head(&self, r: usize) -> Result<&NtnHead> {
        self.heads
            .get(r)
            .ok_or_else(|| Error::Invalid(format!("relation {r} out of range (R = {})", self.heads.len())))?
            .as_ref()
            .ok_or_else(|| Error::Mode(format!("no link head trained for relation {r}")))
    }
}

pub fn ntn_score(h_i: &[f64], h_j: &[f64], r: usize, params: &NtnParams) -> Result<f64> {
    params.head(r)?.score(h_i, h_j)
}

/// Scores `(i, r, j)` triples against an embedding matrix, in order.
pub fn score_links_batch(h: &DenseMatrix, triples: &[(usize, usize, usize)], params: &NtnParams) -> Result<Vec<f64>> {
    triples
        .iter()
        .map(|&(i, r, j)| {
            if i >= h.rows() || j >= h.rows() {
                return Err(Error::Invalid(format!("node index out of range in ({i},{r},{j})")));
            }
            ntn_score(h.row(i), h.row(j), r, params)
        })
        .collect()
}

/// Scores for `(src, dst)` pairs of relation `r` as an m x 1 tape column.
pub fn score_links_on_tape(
    tape: &mut Tape<'_>,
    h: Var,
    r: usize,
    pairs: &[(usize, usize)],
    params: &ParameterStore,
) -> Result<Var> {
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let hi = tape.gather_rows(h, &src)?;
    let hj = tape.gather_rows(h, &dst)?;
    let diag = tape.param(params, &ntn_diag_name(r))?;
    let v = tape.param(params, &ntn_v_name(r))?;
    let b = tape.param(params, &ntn_bias_name(r))?;
    let prod = tape.hadamard(hi, hj)?;
    let bilinear = tape.matmul(prod, diag)?;
    let cat = tape.concat_cols(hi, hj)?;
    let linear = tape.matmul(cat, v)?;
    let sum = tape.add(bilinear, linear)?;
    tape.add_row_broadcast(sum, b)
}

/// Per-relation task maps `M_r` for the hierarchical decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalParams {
    pub task_maps: Vec<DenseMatrix>,
    pub classifier: ClassifierParams,
}

impl HierarchicalParams {
    pub fn register(
        num_relations: usize,
        embed_dim: usize,
        task_dim: usize,
        params: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for r in 0..num_relations {
            params.insert(task_map_name(r), glorot(embed_dim, task_dim, rng), true)?;
        }
        Ok(())
    }

    pub fn from_store(params: &ParameterStore, num_relations: usize) -> Result<Self> {
        let task_maps = (0..num_relations)
            .map(|r| params.value(&task_map_name(r)).cloned())
            .collect::<Result<_>>()?;
        Ok(Self {
            task_maps,
            classifier: ClassifierParams::from_store(params)?,
        })
    }
}

/// Tape handles of the hierarchical decoder.
#[derive(Clone, Debug)]
pub struct HierarchicalOutput {
    /// `E_r = H M_r`, consumed by link task `r`.
    pub task_embeddings: Vec<Var>,
    /// 1 x R attention weights.
    pub lambda: Var,
    /// `Σ_r λ_r E_r`, consumed by the classifier.
    pub combined: Var,
    pub probs: Var,
}

pub fn hierarchical_on_tape(
    tape: &mut Tape<'_>,
    h: Var,
    num_relations: usize,
    params: &ParameterStore,
) -> Result<HierarchicalOutput> {
    if num_relations == 0 {
        return Err(Error::Invalid("hierarchical decoder needs at least one relation".into()));
    }
    let mut task_embeddings = Vec::with_capacity(num_relations);
    for r in 0..num_relations {
        let m = tape.param(params, &task_map_name(r))?;
        task_embeddings.push(tape.matmul(h, m)?);
    }
    let pooled: Vec<Var> = task_embeddings.iter().map(|&e| tape.mean_rows(e)).collect();
    let lambda = attention_on_tape(tape, &pooled)?;
    let mut weighted = Vec::with_capacity(num_relations);
    for (r, &e) in task_embeddings.iter().enumerate() {
        let l = tape.element(lambda, 0, r)?;
        weighted.push(tape.scale_by(l, e)?);
    }
    let combined = tape.add_all(&weighted)?;
    let probs = classify_on_tape(tape, combined, params)?;
    Ok(HierarchicalOutput {
        task_embeddings,
        lambda,
        combined,
        probs,
    })
}

/// `(N x 2 probabilities, λ)` without a tape.
pub fn hierarchical_classify(h: &DenseMatrix, params: &HierarchicalParams) -> Result<(DenseMatrix, Vec<f64>)> {
    if params.task_maps.is_empty() {
        return Err(Error::Invalid("hierarchical decoder needs at least one relation".into()));
    }
    let embeddings = params
        .task_maps
        .iter()
        .map(|m| h.matmul(m))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Vec<f64>> = embeddings.iter().map(|e| e.mean_rows().into_data()).collect();
    let lambda = crate::encoder::relation_attention(&DenseMatrix::from_rows(&pooled)?).into_data();
    let (rows, cols) = embeddings[0].shape();
    let mut combined = DenseMatrix::zeros(rows, cols);
    for (e, &l) in embeddings.iter().zip(&lambda) {
        combined.axpy(l, e)?;
    }
    Ok((classify(&combined, &params.classifier)?, lambda))
}
