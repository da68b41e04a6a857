//! Loading a dataset, preparing splits, training, and evaluation.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{sigmoid, softplus, ParameterStore, Tape, PROB_CLAMP};
use crate::config::{DataConfig, TrainConfig};
use crate::decoder::{predict_labels, score_links_batch, score_links_on_tape, NtnParams};
use crate::error::{Error, Result};
use crate::features::{load_feature_file, FeatureStore};
use crate::graph::{load_edge_lists, remove_links, Edge, NormalizedRelationSet, RelGraph};
use crate::io::{create, read_lines};
use crate::linalg::DenseMatrix;
use crate::metrics::{classification_metrics, link_metrics, load_regions, roc_auc};
use crate::model::{Inference, Model, ModelConfig, TaskMode};
use crate::optim::Adam;
use crate::split::{
    eval_negatives, load_labels, positive_set, sample_negative_links, split_links, split_node_labels,
    EvalNegatives, Labels, LinkSplit, NodeSplit,
};

/// Derives an independent stream seed from the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: RelGraph,
    pub features: FeatureStore,
    pub labels: Labels,
    pub regions: Option<Vec<Option<String>>>,
}

fn infer_feature_dim(path: &Path) -> Result<usize> {
    let lines = read_lines(path)?;
    let (lineno, first) = lines.first().ok_or_else(|| Error::Load {
        path: path.to_path_buf(),
        message: "feature file is empty".into(),
    })?;
    let values = first
        .split_once('\t')
        .map(|(_, v)| v)
        .ok_or_else(|| Error::parse(path, *lineno, "expected node_id<TAB>f1,f2,..."))?;
    Ok(values.split(',').count())
}

impl Dataset {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        if cfg.edges.is_empty() {
            return Err(Error::Config("no edge lists given (key `edges`)".into()));
        }
        let node_map = cfg
            .node_map
            .as_deref()
            .ok_or_else(|| Error::Config("no node map given (key `node_map`)".into()))?;
        let (mut graph, _) = load_edge_lists(&cfg.edges, node_map, cfg.seeds.as_deref())?;
        if let Some(names) = &cfg.relation_names {
            graph = graph.with_relation_names(names.clone())?;
        }
        if let Some(keep) = &cfg.relations {
            graph = graph.select_relations(keep)?;
        }
        let features = match &cfg.features {
            Some(path) => {
                let dim = match cfg.feature_dim {
                    Some(d) => d,
                    None => infer_feature_dim(path)?,
                };
                load_feature_file(path, graph.nodes(), dim)?
            }
            None => FeatureStore::one_hot(graph.num_nodes())?,
        };
        let labels = match &cfg.labels {
            Some(path) => load_labels(path, graph.nodes())?,
            None => Vec::new(),
        };
        let regions = cfg
            .regions
            .as_deref()
            .map(|p| load_regions(p, graph.nodes()))
            .transpose()?;
        Ok(Self {
            graph,
            features,
            labels,
            regions,
        })
    }

    pub fn relation_names(&self) -> &[String] {
        self.graph.relation_names()
    }
}

/// Splits, leakage-free training graph, and its normalized relation set.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub node_split: Option<NodeSplit>,
    /// Present whenever a link task participates; covers every relation.
    pub link_splits: Option<Vec<LinkSplit>>,
    pub eval_negatives: Option<Vec<EvalNegatives>>,
    /// The graph the encoder propagates over during training and evaluation.
    pub train_graph: RelGraph,
    pub norm: NormalizedRelationSet,
    /// Every positive edge of the full graph, per relation.
    pub positives: Vec<HashSet<Edge>>,
}

/// Builds splits for `mode`. When any link task participates, the
/// validation and test positives of every relation are removed from the
/// graph the encoder sees.
pub fn prepare(data: &Dataset, mode: TaskMode, seed: u64) -> Result<Prepared> {
    let split_seed = derive_seed(seed, STREAM_SPLIT);
    let node_split = if mode.has_classification() {
        if data.labels.is_empty() {
            return Err(Error::Config("classification needs a label file (key `labels`)".into()));
        }
        Some(split_node_labels(&data.labels, split_seed)?)
    } else {
        None
    };
    let g = &data.graph;
    let (link_splits, negatives, train_graph) = if mode.link_tasks(g.num_relations()).is_empty() {
        (None, None, g.clone())
    } else {
        let splits = split_links(g, split_seed)?;
        let negatives = eval_negatives(g, &splits, split_seed)?;
        let holdout: Vec<Vec<Edge>> = splits
            .iter()
            .map(|s| s.valid.iter().chain(&s.test).copied().collect())
            .collect();
        let removal = remove_links(g, &holdout)?;
        (Some(splits), Some(negatives), removal.graph)
    };
    let norm = NormalizedRelationSet::from_graph(&train_graph)?;
    let positives = (0..g.num_relations()).map(|r| positive_set(g, r)).collect();
    Ok(Prepared {
        node_split,
        link_splits,
        eval_negatives: negatives,
        train_graph,
        norm,
        positives,
    })
}

pub fn build_model(data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let mode = cfg.mode.resolve(data.relation_names())?;
    Model::new(ModelConfig {
        num_nodes: data.graph.num_nodes(),
        num_relations: data.graph.num_relations(),
        input_dim: data.features.dim(),
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        task_dim: cfg.task_dim,
        dropout: cfg.dropout,
        mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskLoss {
    pub task: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub losses: Vec<TaskLoss>,
    pub joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationScore {
    pub relation: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationLog {
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub link_roc_auc: Vec<RelationScore>,
    /// Summed validation loss of every participating task; breaks ties in
    /// `score`.
    pub loss: f64,
    /// Accuracy, or mean link ROC-AUC in link-only modes.
    pub score: f64,
    /// Mean link ROC-AUC when link tasks participate.
    pub mean_link_roc_auc: Option<f64>,
}

impl ValidationLog {
    /// Selection order: higher score, then higher mean link ROC-AUC, then
    /// lower loss.
    fn better_than(&self, other: &ValidationLog) -> bool {
        let link = |v: &ValidationLog| v.mean_link_roc_auc.unwrap_or(0.0);
        (self.score, link(self), -self.loss) > (other.score, link(other), -other.loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: Vec<StepLog>,
    /// Relation attention per encoder layer, after the epoch's updates.
    pub alphas: Vec<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub validation: ValidationLog,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ParameterStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn class_rows(labels: &[(usize, u8)]) -> (Vec<usize>, Vec<f64>) {
    labels.iter().map(|&(i, l)| (i, f64::from(l))).unzip()
}

/// Summed binary cross-entropy on `p(class 1)`, clamped like the training loss.
fn nll(probs: &DenseMatrix, labels: &[(usize, u8)]) -> f64 {
    labels
        .iter()
        .map(|&(i, l)| {
            let q = probs.get(i, 1).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if l == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum()
}

/// Link scores and labels for positives followed by negatives.
fn link_eval_scores(
    inference: &Inference,
    params: &NtnParams,
    head: usize,
    input: usize,
    pos: &[Edge],
    neg: &[Edge],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let h = inference.link_inputs[input]
        .as_ref()
        .ok_or_else(|| Error::Mode(format!("relation {input} has no link embedding in this mode")))?;
    let triples: Vec<(usize, usize, usize)> = pos.iter().chain(neg).map(|&(i, j)| (i, head, j)).collect();
    let scores = score_links_batch(h, &triples, params)?;
    let labels = (0..pos.len()).map(|_| true).chain((0..neg.len()).map(|_| false)).collect();
    Ok((scores, labels))
}

fn link_bce(scores: &[f64], labels: &[bool]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y { softplus(-s) } else { softplus(s) })
        .sum()
}

fn validate(
    model: &Model,
    data: &Dataset,
    prep: &Prepared,
    params: &ParameterStore,
    inference: &Inference,
) -> Result<ValidationLog> {
    let mode = model.mode();
    let names = data.relation_names();
    let mut log = ValidationLog {
        accuracy: None,
        macro_f1: None,
        link_roc_auc: vec![],
        loss: 0.0,
        score: 0.0,
        mean_link_roc_auc: None,
    };
    if let (Some(probs), Some(split)) = (&inference.class_probs, &prep.node_split) {
        let pred = predict_labels(probs);
        let p: Vec<u8> = split.valid.iter().map(|&(i, _)| pred[i] as u8).collect();
        let t: Vec<u8> = split.valid.iter().map(|&(_, l)| l).collect();
        let m = classification_metrics(&p, &t)?;
        log.accuracy = Some(m.accuracy);
        log.macro_f1 = Some(m.macro_f1);
        log.loss = nll(probs, &split.valid);
        log.score = m.accuracy;
    }
    let tasks = mode.link_tasks(names.len());
    if !tasks.is_empty() {
        let splits = prep.link_splits.as_ref().expect("link splits prepared");
        let negs = prep.eval_negatives.as_ref().expect("eval negatives prepared");
        let ntn = NtnParams::from_store(params, names.len())?;
        let mut link_loss = 0.0;
        let mut roc_sum = 0.0;
        for &r in &tasks {
            let (scores, labels) = link_eval_scores(inference, &ntn, r, r, &splits[r].valid, &negs[r].valid)?;
            let roc = roc_auc(&scores, &labels)?;
            link_loss += link_bce(&scores, &labels);
            roc_sum += roc;
            log.link_roc_auc.push(RelationScore {
                relation: names[r].clone(),
                value: roc,
            });
        }
        let mean = roc_sum / tasks.len() as f64;
        log.loss += link_loss;
        log.mean_link_roc_auc = Some(mean);
        if !mode.has_classification() {
            log.score = mean;
        }
    }
    Ok(log)
}

/// Trains from fresh parameters. `on_epoch` sees each epoch's log as soon
/// as it is complete.
pub fn train(
    model: &Model,
    data: &Dataset,
    prep: &Prepared,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let mode = model.mode();
    let names = data.relation_names().to_vec();
    let tasks = mode.link_tasks(names.len());
    let mut params = model.init_params(&data.features, derive_seed(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::default();
    let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_NEGATIVES));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT));
    let class_train = prep.node_split.as_ref().map(|s| class_rows(&s.train));

    let mut best: Option<(ValidationLog, usize, ParameterStore)> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs() {
        let lr = cfg.schedule.rate(epoch);
        // Fresh negatives and a fresh positive order per epoch.
        let mut batches: Vec<(usize, Vec<(Vec<Edge>, Vec<f64>)>)> = Vec::with_capacity(tasks.len());
        for &r in &tasks {
            let splits = prep.link_splits.as_ref().expect("link splits prepared");
            let mut pos = splits[r].train.clone();
            pos.shuffle(&mut shuffle_rng);
            let neg = sample_negative_links(data.graph.num_nodes(), pos.len(), &prep.positives[r], &mut neg_rng)?;
            let chunks = pos
                .chunks(cfg.link_batch)
                .zip(neg.chunks(cfg.link_batch))
                .map(|(p, n)| {
                    let pairs: Vec<Edge> = p.iter().chain(n).copied().collect();
                    let labels = (0..p.len()).map(|_| 1.0).chain((0..n.len()).map(|_| 0.0)).collect();
                    (pairs, labels)
                })
                .collect();
            batches.push((r, chunks));
        }
        let steps = batches.iter().map(|b| b.1.len()).max().unwrap_or(1).max(1);

        let mut step_logs = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &prep.norm, &data.features, &params, Some(&mut dropout_rng))?;
            let mut terms = Vec::new();
            let mut losses = Vec::new();
            if let (Some(probs), Some((rows, labels))) = (out.class_probs, &class_train) {
                let l = tape.binary_nll(probs, rows, labels)?;
                terms.push(l);
                losses.push(TaskLoss {
                    task: "classification".into(),
                    loss: tape.value(l).get(0, 0),
                });
            }
            for (r, chunks) in &batches {
                let (pairs, labels) = &chunks[step % chunks.len()];
                let h = out.link_inputs[*r].expect("link input for link task");
                let scores = score_links_on_tape(&mut tape, h, *r, pairs, &params)?;
                let l = tape.bce_with_logits(scores, labels)?;
                terms.push(l);
                losses.push(TaskLoss {
                    task: names[*r].clone(),
                    loss: tape.value(l).get(0, 0),
                });
            }
            let joint = tape.add_all(&terms)?;
            let joint_value = tape.value(joint).get(0, 0);
            if !joint_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("joint loss became {joint_value} at step {}", step + 1),
                });
            }
            let grads = tape.backward(joint)?;
            adam.step(&mut params, &grads, lr)?;
            step_logs.push(StepLog {
                losses,
                joint: joint_value,
            });
        }

        let inference = model.infer(&prep.norm, &data.features, &params)?;
        if inference.embeddings.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                detail: "embeddings are no longer finite".into(),
            });
        }
        let validation = validate(model, data, prep, &params, &inference)?;
        if best.as_ref().map_or(true, |(b, _, _)| validation.better_than(b)) {
            best = Some((validation.clone(), epoch, params.clone()));
        }
        let entry = EpochLog {
            epoch,
            lr,
            steps: step_logs,
            alphas: inference.alphas.clone(),
            lambda: inference.lambda.clone(),
            validation,
        };
        on_epoch(&entry)?;
        log.push(entry);
        if let (Some(patience), Some((_, best_epoch, _))) = (cfg.patience, &best) {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.ok_or_else(|| Error::Config("no epochs were run".into()))?;
    Ok(TrainOutcome {
        params,
        best_epoch,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub test_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkReport {
    pub relation: String,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: String,
    pub classification: Option<ClassificationReport>,
    pub links: Vec<LinkReport>,
    pub alphas: Vec<Vec<f64>>,
    pub lambda: Option<Vec<RelationScore>>,
}

/// Test-split metrics of `params`.
pub fn evaluate(model: &Model, data: &Dataset, prep: &Prepared, params: &ParameterStore) -> Result<MetricsReport> {
    let mode = model.mode();
    let names = data.relation_names();
    let inference = model.infer(&prep.norm, &data.features, params)?;
    let classification = match (&inference.class_probs, &prep.node_split) {
        (Some(probs), Some(split)) => {
            let pred = predict_labels(probs);
            let p: Vec<u8> = split.test.iter().map(|&(i, _)| pred[i] as u8).collect();
            let t: Vec<u8> = split.test.iter().map(|&(_, l)| l).collect();
            let m = classification_metrics(&p, &t)?;
            Some(ClassificationReport {
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
                test_nodes: t.len(),
            })
        }
        _ => None,
    };
    let mut links = Vec::new();
    let tasks = mode.link_tasks(names.len());
    if !tasks.is_empty() {
        let splits = prep.link_splits.as_ref().expect("link splits prepared");
        let negs = prep.eval_negatives.as_ref().expect("eval negatives prepared");
        let ntn = NtnParams::from_store(params, names.len())?;
        for r in tasks {
            let (scores, labels) = link_eval_scores(&inference, &ntn, r, r, &splits[r].test, &negs[r].test)?;
            let m = link_metrics(&scores, &labels)?;
            links.push(LinkReport {
                relation: names[r].clone(),
                roc_auc: m.roc_auc,
                pr_auc: m.pr_auc,
                positives: splits[r].test.len(),
                negatives: negs[r].test.len(),
            });
        }
    }
    let lambda = inference.lambda.as_ref().map(|l| {
        names
            .iter()
            .zip(l)
            .map(|(n, &v)| RelationScore {
                relation: n.clone(),
                value: v,
            })
            .collect()
    });
    Ok(MetricsReport {
        mode: mode_label(mode, names),
        classification,
        links,
        alphas: inference.alphas,
        lambda,
    })
}

pub fn mode_label(mode: TaskMode, names: &[String]) -> String {
    match mode {
        TaskMode::SingleClass => "single_class".into(),
        TaskMode::SingleLink(r) => format!("single_link({})", names[r]),
        TaskMode::Timme => "timme".into(),
        TaskMode::Hierarchical => "hierarchical".into(),
    }
}

/// ROC-AUC of single-relation models on every relation's test set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossRelationTable {
    pub relations: Vec<String>,
    /// `values[i][j]`: the model trained on relation `i`, scoring relation
    /// `j`'s test pairs with its own head.
    pub values: Vec<Vec<f64>>,
}

impl CrossRelationTable {
    /// Aligned plain-text rendering, rows = trained relation.
    pub fn to_text(&self) -> String {
        let corner = "train\\test";
        let width = self
            .relations
            .iter()
            .map(|n| n.len())
            .chain([corner.len(), 6])
            .max()
            .unwrap_or(6);
        let mut out = format!("{corner:<width$}");
        for name in &self.relations {
            out.push_str(&format!("  {name:>width$}"));
        }
        out.push('\n');
        for (name, row) in self.relations.iter().zip(&self.values) {
            out.push_str(&format!("{name:<width$}"));
            for v in row {
                out.push_str(&format!("  {v:>width$.4}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn cross_relation(data: &Dataset, cfg: &TrainConfig) -> Result<CrossRelationTable> {
    let names = data.relation_names().to_vec();
    let r_count = names.len();
    // Every single-link mode prepares the same splits for a given seed.
    let prep = prepare(data, TaskMode::SingleLink(0), cfg.seed)?;
    let splits = prep.link_splits.as_ref().expect("link splits prepared");
    let negs = prep.eval_negatives.as_ref().expect("eval negatives prepared");
    let mut values = Vec::with_capacity(r_count);
    for i in 0..r_count {
        let mut run_cfg = cfg.clone();
        run_cfg.mode = crate::model::ModeSpec::SingleLink(names[i].clone());
        let model = build_model(data, &run_cfg)?;
        let outcome = train(&model, data, &prep, &run_cfg, |_| Ok(()))?;
        let inference = model.infer(&prep.norm, &data.features, &outcome.params)?;
        let ntn = NtnParams::from_store(&outcome.params, r_count)?;
        let mut row = Vec::with_capacity(r_count);
        for j in 0..r_count {
            let (scores, labels) = link_eval_scores(&inference, &ntn, i, i, &splits[j].test, &negs[j].test)?;
            row.push(roc_auc(&scores, &labels)?);
        }
        values.push(row);
    }
    Ok(CrossRelationTable {
        relations: names,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub node: usize,
    pub p_liberal: f64,
    pub p_conservative: f64,
    pub label: u8,
}

pub fn predictions(inference: &Inference) -> Result<Vec<Prediction>> {
    let probs = inference
        .class_probs
        .as_ref()
        .ok_or_else(|| Error::Mode("this mode has no classifier".into()))?;
    let labels = predict_labels(probs);
    Ok((0..probs.rows())
        .map(|i| Prediction {
            node: i,
            p_liberal: probs.get(i, 0),
            p_conservative: probs.get(i, 1),
            label: labels[i] as u8,
        })
        .collect())
}

/// `node_id<TAB>p_liberal<TAB>p_conservative<TAB>label`.
pub fn write_predictions(path: &Path, graph: &RelGraph, preds: &[Prediction]) -> Result<()> {
    use std::io::Write;
    let mut w = create(path)?;
    for p in preds {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            graph.nodes().id(p.node),
            p.p_liberal,
            p.p_conservative,
            p.label
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `node_id<TAB>v1,v2,...`.
pub fn write_embeddings(path: &Path, graph: &RelGraph, h: &DenseMatrix) -> Result<()> {
    use std::io::Write;
    let mut w = create(path)?;
    for i in 0..h.rows() {
        writeln!(w, "{}\t{}", graph.nodes().id(i), crate::io::format_vector(h.row(i)))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Probability that `src` links to `dst` under relation `r`.
pub fn link_probability(
    inference: &Inference,
    params: &ParameterStore,
    r: usize,
    src: usize,
    dst: usize,
) -> Result<f64> {
    let ntn = NtnParams::from_store(params, inference.link_inputs.len())?;
    let (scores, _) = link_eval_scores(inference, &ntn, r, r, &[(src, dst)], &[])?;
    Ok(sigmoid(scores[0]))
}
