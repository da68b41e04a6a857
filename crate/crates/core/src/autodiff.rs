//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records one forward pass. Every node stores its value and the
//! operation that produced it; [`Tape::backward`] walks the tape in reverse
//! and accumulates gradients into every node that depends on a trainable
//! parameter. Only the kernel set the model uses is supported.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SparseMatrix};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ParamSlot {
    value: DenseMatrix,
    trainable: bool,
    grad: Option<DenseMatrix>,
}

impl ParamSlot {
    pub fn value(&self) -> &DenseMatrix {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> Option<&DenseMatrix> {
        self.grad.as_ref()
    }
}

/// Named parameter matrices, each trainable or frozen. Trainable slots carry
/// a gradient buffer of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, ParamSlot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = trainable.then(|| DenseMatrix::zeros(value.rows(), value.cols()));
        self.slots.insert(
            name,
            ParamSlot {
                value,
                trainable,
                grad,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&DenseMatrix> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseMatrix> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    /// Replaces a parameter value, keeping its trainable flag. Shapes must match.
    pub fn assign(&mut self, name: &str, value: DenseMatrix) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!("{name}: {:?} vs {:?}", slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.slots.get(name).is_some_and(|s| s.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSlot)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.slots
            .iter()
            .filter(|(_, s)| s.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            if let Some(g) = slot.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// Copies a backward pass's gradients into the matching slots. Slots the
    /// pass did not reach are zeroed.
    pub fn set_grads(&mut self, grads: &GradientMap) -> Result<()> {
        self.zero_grad();
        for (name, g) in grads.iter() {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name:?}")))?;
            let buf = slot
                .grad
                .as_mut()
                .ok_or_else(|| Error::Invalid(format!("gradient for frozen parameter {name:?}")))?;
            if buf.shape() != g.shape() {
                return Err(Error::shape("set_grads", name.to_string()));
            }
            buf.data_mut().copy_from_slice(g.data());
        }
        Ok(())
    }
}

/// Gradients of one scalar loss, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<String, DenseMatrix>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'g> {
    Leaf,
    Param(String),
    SpMM(&'g SparseMatrix, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Hadamard(Var, Var),
    ScaleBy(Var, Var),
    ScaleConst(f64, Var),
    MulConst(Var, DenseMatrix),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ColSums(Var),
    MeanRows(Var),
    RowSums(Var),
    Sum(Var),
    StackRows(Vec<Var>),
    Element(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ReplaceRows(Var, Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    BinaryNll(Var, Vec<usize>, Vec<f64>),
}

struct Node<'g> {
    value: DenseMatrix,
    op: Op<'g>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// Sparse operands are borrowed for the lifetime of the tape.
#[derive(Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
    params: HashMap<String, Var>,
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).as_scalar()
    }

    fn push(&mut self, value: DenseMatrix, op: Op<'g>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Places a parameter on the tape. Frozen parameters become constants.
    /// Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let slot = store
            .slot(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        let value = slot.value().clone();
        let v = if slot.trainable() {
            self.push(value, Op::Param(name.to_string()))
        } else {
            self.push(value, Op::Leaf)
        };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn spmm(&mut self, a: &'g SparseMatrix, x: Var) -> Result<Var> {
        let value = a.spmm(self.value(x))?;
        Ok(self.push(value, Op::SpMM(a, x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Sum of several same-shaped nodes, accumulated left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `x + 1 * b` where `b` is a single row broadcast over the rows of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (o, &bias) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *o += bias;
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast(x, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    /// Multiplies `x` by the 1x1 node `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        let factor = self
            .scalar(s)
            .ok_or_else(|| Error::shape("scale_by", format!("scale node is {:?}", self.value(s).shape())))?;
        let value = self.value(x).scale(factor);
        Ok(self.push(value, Op::ScaleBy(s, x)))
    }

    pub fn scale(&mut self, factor: f64, x: Var) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::ScaleConst(factor, x))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, x: Var, mask: DenseMatrix) -> Result<Var> {
        let value = self.value(x).hadamard(&mask)?;
        Ok(self.push(value, Op::MulConst(x, mask)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        self.push(value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn col_sums(&mut self, x: Var) -> Var {
        let value = self.value(x).col_sums();
        self.push(value, Op::ColSums(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        self.push(value, Op::MeanRows(x))
    }

    pub fn row_sums(&mut self, x: Var) -> Var {
        let value = self.value(x).row_sums();
        self.push(value, Op::RowSums(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Stacks 1 x d rows into a k x d matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut cols = None;
        for &r in rows {
            let v = self.value(r);
            if v.rows() != 1 || cols.is_some_and(|c| c != v.cols()) {
                return Err(Error::shape("stack_rows", format!("row node {:?}", v.shape())));
            }
            cols = Some(v.cols());
            data.extend_from_slice(v.data());
        }
        let value = DenseMatrix::from_vec(rows.len(), cols.unwrap_or(0), data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec())))
    }

    /// The (i, j) entry of `x` as a 1x1 node.
    pub fn element(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let v = self.value(x);
        if i >= v.rows() || j >= v.cols() {
            return Err(Error::shape("element", format!("({i},{j}) of {:?}", v.shape())));
        }
        let value = DenseMatrix::scalar(v.get(i, j));
        Ok(self.push(value, Op::Element(x, i, j)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut out = DenseMatrix::zeros(idx.len(), v.cols());
        for (k, &i) in idx.iter().enumerate() {
            if i >= v.rows() {
                return Err(Error::shape("gather_rows", format!("row {i} of {:?}", v.shape())));
            }
            out.row_mut(k).copy_from_slice(v.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat_cols", format!("{:?} | {:?}", av.shape(), bv.shape())));
        }
        let mut out = DenseMatrix::zeros(av.rows(), av.cols() + bv.cols());
        for i in 0..av.rows() {
            let row = out.row_mut(i);
            row[..av.cols()].copy_from_slice(av.row(i));
            row[av.cols()..].copy_from_slice(bv.row(i));
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Copy of `base` with row `rows[k]` replaced by row `k` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if sv.rows() != rows.len() || sv.cols() != bv.cols() {
            return Err(Error::shape(
                "replace_rows",
                format!("{} rows of {:?} into {:?}", rows.len(), sv.shape(), bv.shape()),
            ));
        }
        let mut out = bv.clone();
        for (k, &i) in rows.iter().enumerate() {
            if i >= out.rows() {
                return Err(Error::shape("replace_rows", format!("row {i} of {:?}", bv.shape())));
            }
            out.row_mut(i).copy_from_slice(sv.row(k));
        }
        Ok(self.push(out, Op::ReplaceRows(base, src, rows.to_vec())))
    }

    /// Summed binary cross-entropy of `sigmoid(scores)` against `labels`.
    /// `scores` is an m x 1 column of logits.
    pub fn bce_with_logits(&mut self, scores: Var, labels: &[f64]) -> Result<Var> {
        let s = self.value(scores);
        if s.cols() != 1 || s.rows() != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} scores for {} labels", s.shape(), labels.len()),
            ));
        }
        let total = s
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        Ok(self.push(DenseMatrix::scalar(total), Op::BceWithLogits(scores, labels.to_vec())))
    }

    /// Summed binary cross-entropy over selected rows of an N x 2 probability
    /// matrix, using column 1 as the positive-class probability.
    pub fn binary_nll(&mut self, probs: Var, rows: &[usize], labels: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.cols() != 2 || rows.len() != labels.len() || rows.iter().any(|&i| i >= p.rows()) {
            return Err(Error::shape(
                "binary_nll",
                format!("{:?} probabilities, {} rows, {} labels", p.shape(), rows.len(), labels.len()),
            ));
        }
        let total = rows
            .iter()
            .zip(labels)
            .map(|(&i, &y)| {
                let q = p.get(i, 1).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        Ok(self.push(
            DenseMatrix::scalar(total),
            Op::BinaryNll(probs, rows.to_vec(), labels.to_vec()),
        ))
    }

    /// Gradients of the 1x1 node `root` with respect to every trainable
    /// parameter it depends on.
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        if self.value(root).as_scalar().is_none() {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DenseMatrix::scalar(1.0));
        let mut out = GradientMap::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            for (input, contribution) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&contribution)?,
                    None => grads[input.0] = Some(contribution),
                }
            }
            if let Op::Param(name) = &node.op {
                out.grads.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, node: &Node<'g>, g: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::SpMM(a, x) => out.push((*x, a.transpose().spmm(g)?)),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose())?));
                }
                if self.needs(*b) {
                    out.push((*b, val(*a).transpose().matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRowBroadcast(x, b) => {
                out.push((*x, g.clone()));
                out.push((*b, g.col_sums()));
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.hadamard(val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, g.hadamard(val(*a))?));
                }
            }
            Op::ScaleBy(s, x) => {
                let factor = val(*s).data()[0];
                if self.needs(*s) {
                    let dot: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    out.push((*s, DenseMatrix::scalar(dot)));
                }
                if self.needs(*x) {
                    out.push((*x, g.scale(factor)));
                }
            }
            Op::ScaleConst(c, x) => out.push((*x, g.scale(*c))),
            Op::MulConst(x, mask) => out.push((*x, g.hadamard(mask)?)),
            Op::Relu(x) => {
                let mut d = g.clone();
                for (o, &inp) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if inp <= 0.0 {
                        *o = 0.0;
                    }
                }
                out.push((*x, d));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &yy) in d.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yy * (gy - dot);
                    }
                }
                out.push((*x, d));
            }
            Op::Transpose(x) => out.push((*x, g.transpose())),
            Op::ColSums(x) => {
                let rows = val(*x).rows();
                let mut d = DenseMatrix::zeros(rows, g.cols());
                for i in 0..rows {
                    d.row_mut(i).copy_from_slice(g.row(0));
                }
                out.push((*x, d));
            }
            Op::MeanRows(x) => {
                let rows = val(*x).rows();
                let inv = 1.0 / rows.max(1) as f64;
                let mut d = DenseMatrix::zeros(rows, g.cols());
                for i in 0..rows {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = gv * inv;
                    }
                }
                out.push((*x, d));
            }
            Op::RowSums(x) => {
                let (rows, cols) = val(*x).shape();
                let mut d = DenseMatrix::zeros(rows, cols);
                for i in 0..rows {
                    d.row_mut(i).fill(g.get(i, 0));
                }
                out.push((*x, d));
            }
            Op::Sum(x) => {
                let (rows, cols) = val(*x).shape();
                out.push((*x, DenseMatrix::filled(rows, cols, g.data()[0])));
            }
            Op::StackRows(rows) => {
                for (k, &r) in rows.iter().enumerate() {
                    let row = DenseMatrix::from_vec(1, g.cols(), g.row(k).to_vec())?;
                    out.push((r, row));
                }
            }
            Op::Element(x, i, j) => {
                let (rows, cols) = val(*x).shape();
                let mut d = DenseMatrix::zeros(rows, cols);
                d.set(*i, *j, g.data()[0]);
                out.push((*x, d));
            }
            Op::GatherRows(x, idx) => {
                let (rows, cols) = val(*x).shape();
                let mut d = DenseMatrix::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                out.push((*x, d));
            }
            Op::ConcatCols(a, b) => {
                let split = val(*a).cols();
                let rows = g.rows();
                let mut da = DenseMatrix::zeros(rows, split);
                let mut db = DenseMatrix::zeros(rows, g.cols() - split);
                for i in 0..rows {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..split]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[split..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::ReplaceRows(base, src, rows) => {
                if self.needs(*src) {
                    let mut d = DenseMatrix::zeros(rows.len(), g.cols());
                    for (k, &i) in rows.iter().enumerate() {
                        d.row_mut(k).copy_from_slice(g.row(i));
                    }
                    out.push((*src, d));
                }
                if self.needs(*base) {
                    let mut d = g.clone();
                    for &i in rows {
                        d.row_mut(i).fill(0.0);
                    }
                    out.push((*base, d));
                }
            }
            Op::BceWithLogits(scores, labels) => {
                let upstream = g.data()[0];
                let s = val(*scores);
                let data = s
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| upstream * (sigmoid(z) - y))
                    .collect();
                out.push((*scores, DenseMatrix::from_vec(s.rows(), 1, data)?));
            }
            Op::BinaryNll(probs, rows, labels) => {
                let upstream = g.data()[0];
                let p = val(*probs);
                let mut d = DenseMatrix::zeros(p.rows(), p.cols());
                for (&i, &y) in rows.iter().zip(labels) {
                    let raw = p.get(i, 1);
                    // Clamped region is flat.
                    if raw <= PROB_CLAMP || raw >= 1.0 - PROB_CLAMP {
                        continue;
                    }
                    let cur = d.get(i, 1);
                    d.set(i, 1, cur + upstream * (-(y / raw) + (1.0 - y) / (1.0 - raw)));
                }
                out.push((*probs, d));
            }
        }
        Ok(out)
    }
}

fn inputs(op: &Op<'_>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::SpMM(_, x)
        | Op::ScaleConst(_, x)
        | Op::MulConst(x, _)
        | Op::Relu(x)
        | Op::SoftmaxRows(x)
        | Op::Transpose(x)
        | Op::ColSums(x)
        | Op::MeanRows(x)
        | Op::RowSums(x)
        | Op::Sum(x)
        | Op::Element(x, _, _)
        | Op::GatherRows(x, _)
        | Op::BceWithLogits(x, _)
        | Op::BinaryNll(x, _, _) => vec![*x],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRowBroadcast(a, b)
        | Op::Hadamard(a, b)
        | Op::ScaleBy(a, b)
        | Op::ConcatCols(a, b)
        | Op::ReplaceRows(a, b, _) => vec![*a, *b],
        Op::StackRows(rows) => rows.clone(),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are compared against this
    /// floor rather than against themselves.
    pub abs_floor: f64,
    /// Coordinates sampled per trainable parameter; `None` checks all.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub pass: bool,
}

/// Compares tape gradients with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on sampled coordinates of every trainable
/// parameter. Frozen parameters are skipped.
pub fn finite_difference_check<'g, F>(forward: F, params: &ParameterStore, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&ParameterStore, &mut Tape<'g>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = forward(params, &mut tape)?;
        tape.backward(loss)?
    };
    let eval = |p: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(p, &mut tape)?;
        tape.scalar(loss)
            .ok_or_else(|| Error::shape("finite_difference_check", "loss is not 1x1"))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = FdReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        pass: true,
    };
    for name in params.trainable_names() {
        let len = params.value(&name)?.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if let Some(k) = opts.coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(k);
            coords.sort_unstable();
        }
        for idx in coords {
            let original = params.value(&name)?.data()[idx];
            work.value_mut(&name)?.data_mut()[idx] = original + opts.epsilon;
            let plus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[idx] = original - opts.epsilon;
            let minus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let exact = analytic.get(&name).map_or(0.0, |g| g.data()[idx]);
            let denom = exact.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx, exact, numeric));
            }
        }
    }
    report.pass = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Pins a closure to the signature `finite_difference_check` expects.
    fn typed<'g, F>(f: F) -> F
    where
        F: Fn(&ParameterStore, &mut Tape<'g>) -> Result<Var>,
    {
        f
    }

    fn store_with(name: &str, value: DenseMatrix) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, value, true).unwrap();
        s
    }

    #[test]
    fn sum_gradient_is_ones() {
        let store = store_with("w", dm(&[&[1.0, -2.0], &[3.0, 4.0]]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &DenseMatrix::filled(2, 2, 1.0));
    }

    #[test]
    fn relu_subgradient() {
        let store = store_with("w", dm(&[&[-1.0, 2.0]]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let r = tape.relu(w);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &dm(&[&[0.0, 1.0]]));

        let store = store_with("w", dm(&[&[0.0]]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let r = tape.relu(w);
        let loss = tape.sum(r);
        assert_eq!(tape.backward(loss).unwrap().get("w").unwrap(), &dm(&[&[0.0]]));
    }

    #[test]
    fn half_square_gradient() {
        let store = store_with("w", dm(&[&[3.0]]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.hadamard(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(0.5, s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &dm(&[&[3.0]]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = store_with("w", dm(&[&[1.0, 2.0]]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Shape { .. })));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParameterStore::new();
        store.insert("a", dm(&[&[1.0, 2.0]]), true).unwrap();
        store.insert("b", dm(&[&[3.0, 4.0]]), false).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let p = tape.hadamard(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get("a").unwrap(), &dm(&[&[3.0, 4.0]]));
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut store = store_with("w", dm(&[&[1.0]]));
        assert!(store.insert("w", dm(&[&[1.0]]), true).is_err());
    }

    #[test]
    fn quadratic_fd_matches() {
        // f(W) = ½‖W‖², analytic gradient W.
        let store = store_with("w", dm(&[&[0.3, -1.2, 2.5], &[0.7, 0.0, -0.4]]));
        let forward = typed(|p, tape| {
            let w = tape.param(p, "w")?;
            let sq = tape.hadamard(w, w)?;
            let s = tape.sum(sq);
            Ok(tape.scale(0.5, s))
        });
        let report = finite_difference_check(forward, &store, &FdOptions::default()).unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn fd_skips_frozen() {
        let mut store = ParameterStore::new();
        store.insert("a", dm(&[&[1.0, 2.0]]), true).unwrap();
        store.insert("b", dm(&[&[3.0, 4.0, 5.0]]), false).unwrap();
        let forward = typed(|p, tape| {
            let a = tape.param(p, "a")?;
            let b = tape.param(p, "b")?;
            let sa = tape.sum(a);
            let sb = tape.sum(b);
            tape.scale_by(sb, sa)
        });
        let report = finite_difference_check(forward, &store, &FdOptions::default()).unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.pass);
    }

    /// Every op the model uses, composed, against central differences.
    #[test]
    fn op_zoo_matches_finite_differences() {
        let sparse = SparseMatrix::from_triplets(3, 3, vec![(0, 1, 0.5), (1, 1, 1.0), (2, 0, 0.7), (2, 2, 0.2)])
            .unwrap();
        let mut store = ParameterStore::new();
        store.insert("x", dm(&[&[0.3, -0.8], &[1.1, 0.4], &[-0.2, 0.9]]), true).unwrap();
        store.insert("w", dm(&[&[0.5, -0.3], &[0.2, 0.8]]), true).unwrap();
        store.insert("b", dm(&[&[0.1, -0.2]]), true).unwrap();
        store.insert("v", dm(&[&[0.4], &[-0.6], &[0.3], &[0.2]]), true).unwrap();
        store.insert("feat", dm(&[&[0.25, -0.5]]), true).unwrap();
        let base = dm(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);

        let forward = typed(|p, tape| {
            let x = tape.param(p, "x")?;
            let feat = tape.param(p, "feat")?;
            let base = tape.constant(base.clone());
            let merged = tape.replace_rows(base, feat, &[1])?;
            let x = tape.add(x, merged)?;
            let w = tape.param(p, "w")?;
            let b = tape.param(p, "b")?;
            let ax = tape.spmm(&sparse, x)?;
            let h = tape.matmul(ax, w)?;
            let h = tape.add_row_broadcast(h, b)?;
            let h = tape.relu(h);
            let m = tape.mean_rows(h);
            let m2 = tape.col_sums(x);
            let stacked = tape.stack_rows(&[m, m2])?;
            let st = tape.transpose(stacked);
            let gram = tape.matmul(stacked, st)?;
            let cs = tape.col_sums(gram);
            let cs = tape.scale(0.7, cs);
            let alpha = tape.softmax_rows(cs);
            let a0 = tape.element(alpha, 0, 1)?;
            let scaled = tape.scale_by(a0, h)?;
            let pair = tape.gather_rows(scaled, &[0, 2, 0])?;
            let other = tape.gather_rows(x, &[1, 1, 2])?;
            let cat = tape.concat_cols(pair, other)?;
            let v = tape.param(p, "v")?;
            let lin = tape.matmul(cat, v)?;
            let prod = tape.hadamard(pair, other)?;
            let bil = tape.row_sums(prod);
            let scores = tape.add(lin, bil)?;
            let l1 = tape.bce_with_logits(scores, &[1.0, 0.0, 1.0])?;
            let probs = tape.softmax_rows(h);
            let l2 = tape.binary_nll(probs, &[0, 2], &[1.0, 0.0])?;
            let masked = tape.mul_const(x, dm(&[&[2.0, 0.0], &[0.0, 2.0], &[2.0, 2.0]]))?;
            let l3 = tape.sum(masked);
            let l3 = tape.scale(0.1, l3);
            tape.add_all(&[l1, l2, l3])
        });
        let report = finite_difference_check(forward, &store, &FdOptions::default()).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checked, 6 + 4 + 2 + 4 + 2);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
