//! Classification and ranking metrics, and regional aggregation of
//! predicted labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::NodeIndex;
use crate::io::read_lines;
use crate::split::LIBERAL;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over classes {0, 1}. A class with no true and no
/// predicted members contributes F1 = 0.
pub fn classification_metrics(predicted: &[u8], truth: &[u8]) -> Result<ClassificationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "classification_metrics",
            format!("{} predictions for {} labels", predicted.len(), truth.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("classification metrics need at least one label".into()));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut f1_sum = 0.0;
    for class in [0u8, 1] {
        let tp = predicted.iter().zip(truth).filter(|&(&p, &t)| p == class && t == class).count();
        let fp = predicted.iter().zip(truth).filter(|&(&p, &t)| p == class && t != class).count();
        let fn_ = predicted.iter().zip(truth).filter(|&(&p, &t)| p != class && t == class).count();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: f1_sum / 2.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinkMetrics {
    pub roc_auc: f64,
    pub pr_auc: f64,
}

fn check_ranking_input(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "link_metrics",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(format!(
            "ranking metrics need both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_ranking_input(scores, labels)?;
    // Walk from the lowest score up, counting negatives already passed.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    for group in tie_groups(scores).iter().rev() {
        let gp = group.iter().filter(|&&i| labels[i]).count();
        let gn = group.len() - gp;
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve with step interpolation:
/// `Σ (R_k − R_{k−1}) P_k` over descending distinct-score thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_ranking_input(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for group in tie_groups(scores) {
        let gp = group.iter().filter(|&&i| labels[i]).count();
        tp += gp;
        fp += group.len() - gp;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

pub fn link_metrics(scores: &[f64], labels: &[bool]) -> Result<LinkMetrics> {
    Ok(LinkMetrics {
        roc_auc: roc_auc(scores, labels)?,
        pr_auc: pr_auc(scores, labels)?,
    })
}

/// Node-to-region assignment read from `node_id<TAB>region` lines.
pub fn load_regions(path: &Path, nodes: &NodeIndex) -> Result<Vec<Option<String>>> {
    let mut out = vec![None; nodes.len()];
    for (lineno, line) in read_lines(path)? {
        let (id, region) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "expected node_id<TAB>region"))?;
        let i = nodes
            .index_of(id.trim())
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown node id {:?}", id.trim())))?;
        let region = region.trim();
        if region.is_empty() {
            return Err(Error::parse(path, lineno, "empty region"));
        }
        out[i] = Some(region.to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionStat {
    pub region: String,
    pub users: usize,
    pub liberal: usize,
    /// `liberal / users`, absent when the region has no users.
    pub liberal_fraction: Option<f64>,
    /// Color bin `min(floor(8 f), 7)`, absent when the region has no users.
    pub bin: Option<u8>,
}

pub const GEO_BINS: usize = 8;

/// Per-region share of nodes predicted liberal. Every region named in
/// `regions` is reported, including those none of whose nodes carry a
/// prediction; nodes without a region are skipped.
pub fn geo_aggregate(predictions: &[(usize, u8)], regions: &[Option<String>]) -> Result<Vec<RegionStat>> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for region in regions.iter().flatten() {
        counts.entry(region.as_str()).or_default();
    }
    for &(i, label) in predictions {
        let region = regions
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("prediction for unknown node {i}")))?;
        if let Some(region) = region {
            let c = counts.get_mut(region.as_str()).expect("region registered above");
            c.0 += 1;
            c.1 += usize::from(label == LIBERAL);
        }
    }
    Ok(counts
        .into_iter()
        .map(|(region, (users, liberal))| {
            let fraction = (users > 0).then(|| liberal as f64 / users as f64);
            RegionStat {
                region: region.to_string(),
                users,
                liberal,
                liberal_fraction: fraction,
                bin: fraction.map(|f| ((f * GEO_BINS as f64).floor() as usize).min(GEO_BINS - 1) as u8),
            }
        })
        .collect())
}
