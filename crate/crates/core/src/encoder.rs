//! Two-layer multi-relational graph convolution with per-layer attention
//! over the relation branches.
//!
//! Layer `l` computes, for every branch `r` of the augmented relation set,
//! `Y_r = Â_r H W_r`; the attention weights `α` come from the mean-pooled
//! branch outputs, and the layer output is `ReLU(Σ_r α_r Y_r)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::graph::NormalizedRelationSet;
use crate::linalg::DenseMatrix;

pub const NUM_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `d^(0)`; equals N in one-hot mode.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Number of relation branches, `2R + 1`.
    pub branches: usize,
    /// Dropout on the hidden representation between the two layers.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        match layer {
            0 => (self.input_dim, self.hidden_dim),
            _ => (self.hidden_dim, self.embed_dim),
        }
    }
}

pub fn weight_name(layer: usize, branch: usize) -> String {
    format!("encoder.l{layer}.b{branch}")
}

/// Glorot-uniform matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Attention weights over stacked mean-pooled outputs (one row per branch):
/// `softmax(colsum(S Sᵀ / sqrt(d)))`, returned as a 1 x k matrix.
pub fn relation_attention(stacked: &DenseMatrix) -> DenseMatrix {
    let d = stacked.cols().max(1) as f64;
    let gram = stacked
        .matmul(&stacked.transpose())
        .expect("gram of a matrix is well-shaped");
    gram.scale(1.0 / d.sqrt()).col_sums().softmax_rows()
}

/// Tape version of [`relation_attention`] over 1 x d pooled rows.
pub fn attention_on_tape(tape: &mut Tape<'_>, pooled: &[Var]) -> Result<Var> {
    let stacked = tape.stack_rows(pooled)?;
    let d = tape.value(stacked).cols().max(1) as f64;
    let t = tape.transpose(stacked);
    let gram = tape.matmul(stacked, t)?;
    let scores = tape.col_sums(gram);
    let scores = tape.scale(1.0 / d.sqrt(), scores);
    Ok(tape.softmax_rows(scores))
}

/// Tape handles produced by [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `H^(2)`, N x embed_dim.
    pub embeddings: Var,
    pub hidden: Var,
    /// One 1 x (2R+1) attention vector per layer.
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.branches == 0 || config.input_dim == 0 || config.hidden_dim == 0 || config.embed_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn register(&self, params: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for layer in 0..NUM_LAYERS {
            let (rows, cols) = self.config.layer_dims(layer);
            for b in 0..self.config.branches {
                params.insert(weight_name(layer, b), glorot(rows, cols, rng), true)?;
            }
        }
        Ok(())
    }

    /// One propagation layer. `input = None` stands for the identity matrix
    /// (one-hot features), in which case `Â_r W_r` is computed directly.
    pub fn layer<'g>(
        &self,
        tape: &mut Tape<'g>,
        norm: &'g NormalizedRelationSet,
        params: &ParameterStore,
        layer: usize,
        input: Option<Var>,
    ) -> Result<(Var, Var)> {
        if norm.len() != self.config.branches {
            return Err(Error::shape(
                "encoder_layer",
                format!("{} relation matrices for {} branches", norm.len(), self.config.branches),
            ));
        }
        let mut outputs = Vec::with_capacity(norm.len());
        for (b, a_hat) in norm.matrices().iter().enumerate() {
            let w = tape.param(params, &weight_name(layer, b))?;
            let projected = match input {
                Some(h) => tape.matmul(h, w)?,
                None => w,
            };
            outputs.push(tape.spmm(a_hat, projected)?);
        }
        let pooled: Vec<Var> = outputs.iter().map(|&y| tape.mean_rows(y)).collect();
        let alpha = attention_on_tape(tape, &pooled)?;
        let mut weighted = Vec::with_capacity(outputs.len());
        for (b, &y) in outputs.iter().enumerate() {
            let a = tape.element(alpha, 0, b)?;
            weighted.push(tape.scale_by(a, y)?);
        }
        let pre = tape.add_all(&weighted)?;
        Ok((tape.relu(pre), alpha))
    }

    /// Full forward pass. Dropout is applied only when `dropout_rng` is given.
    pub fn encode<'g>(
        &self,
        tape: &mut Tape<'g>,
        norm: &'g NormalizedRelationSet,
        features: &FeatureStore,
        params: &ParameterStore,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        if features.dim() != self.config.input_dim {
            return Err(Error::shape(
                "encode",
                format!("features have dim {}, encoder expects {}", features.dim(), self.config.input_dim),
            ));
        }
        let input = features.input(tape, params)?;
        let (hidden, alpha0) = self.layer(tape, norm, params, 0, input)?;
        let mut layer_input = hidden;
        if let (Some(rng), p) = (dropout_rng, self.config.dropout) {
            if p > 0.0 {
                let (rows, cols) = tape.value(hidden).shape();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..rows * cols)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                layer_input = tape.mul_const(hidden, DenseMatrix::from_vec(rows, cols, mask)?)?;
            }
        }
        let (embeddings, alpha1) = self.layer(tape, norm, params, 1, Some(layer_input))?;
        Ok(EncoderOutput {
            embeddings,
            hidden,
            alphas: vec![alpha0, alpha1],
        })
    }
}
