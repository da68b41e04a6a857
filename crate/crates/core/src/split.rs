//! Node labels, train/validation/test splits, and negative link sampling.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Edge, NodeIndex, RelGraph};
use crate::io::read_lines;

/// Class 0.
pub const LIBERAL: u8 = 0;
/// Class 1.
pub const CONSERVATIVE: u8 = 1;

pub fn label_name(label: u8) -> &'static str {
    if label == LIBERAL {
        "liberal"
    } else {
        "conservative"
    }
}

fn parse_label(text: &str) -> Option<u8> {
    match text.trim().to_ascii_lowercase().as_str() {
        "0" | "liberal" | "l" | "d" => Some(LIBERAL),
        "1" | "conservative" | "c" | "r" => Some(CONSERVATIVE),
        _ => None,
    }
}

/// `(node, label)` pairs sorted by node.
pub type Labels = Vec<(usize, u8)>;

/// Reads `node_id<TAB>label` lines; labels are `0`/`1` or
/// `liberal`/`conservative`.
pub fn load_labels(path: &Path, nodes: &NodeIndex) -> Result<Labels> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in read_lines(path)? {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::parse(path, lineno, "expected node_id<TAB>label"));
        }
        let id = cols[0].trim();
        let i = nodes
            .index_of(id)
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown node id {id:?}")))?;
        let label = parse_label(cols[1])
            .ok_or_else(|| Error::parse(path, lineno, format!("bad label {:?}", cols[1].trim())))?;
        if !seen.insert(i) {
            return Err(Error::parse(path, lineno, format!("duplicate label for {id:?}")));
        }
        out.push((i, label));
    }
    out.sort_unstable();
    Ok(out)
}

pub fn save_labels(path: &Path, nodes: &NodeIndex, labels: &[(usize, u8)]) -> Result<()> {
    let text: String = labels
        .iter()
        .map(|&(i, l)| format!("{}\t{}\n", nodes.id(i), l))
        .collect();
    crate::io::write_string(path, &text)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeSplit {
    pub train: Labels,
    pub valid: Labels,
    pub test: Labels,
}

/// Splits `total` into per-class quotas proportional to `class_sizes`,
/// distributing leftovers by largest fractional remainder.
fn proportional(total: usize, class_sizes: &[usize]) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let mut quota: Vec<usize> = class_sizes.iter().map(|&c| total * c / n).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    // Remainder of total*c/n is (total*c) % n; ties go to the lower class.
    order.sort_by_key(|&k| std::cmp::Reverse((total * class_sizes[k]) % n));
    let mut left = total - quota.iter().sum::<usize>();
    for k in order {
        if left == 0 {
            break;
        }
        quota[k] += 1;
        left -= 1;
    }
    quota
}

/// Stratified 8:1:1 split of labeled nodes. Validation and test each get
/// `floor(n/10)` nodes; the remainder trains.
pub fn split_node_labels(labels: &[(usize, u8)], seed: u64) -> Result<NodeSplit> {
    if labels.len() < 10 {
        return Err(Error::Invalid(format!(
            "need at least 10 labeled nodes to split, got {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &(i, l) in labels {
        by_class[usize::from(l == CONSERVATIVE)].push(i);
    }
    for class in by_class.iter_mut() {
        class.sort_unstable();
        class.shuffle(&mut rng);
    }
    let sizes = [by_class[0].len(), by_class[1].len()];
    let held = labels.len() / 10;
    let valid_q = proportional(held, &sizes);
    let test_q = proportional(held, &sizes);
    let mut split = NodeSplit {
        train: vec![],
        valid: vec![],
        test: vec![],
    };
    for (c, nodes) in by_class.iter().enumerate() {
        let label = c as u8;
        let (v, t) = (valid_q[c], test_q[c]);
        if v + t >= nodes.len() {
            return Err(Error::Invalid(format!(
                "class {} has no training nodes after splitting",
                label_name(label)
            )));
        }
        split.valid.extend(nodes[..v].iter().map(|&i| (i, label)));
        split.test.extend(nodes[v..v + t].iter().map(|&i| (i, label)));
        split.train.extend(nodes[v + t..].iter().map(|&i| (i, label)));
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LinkSplit {
    pub train: Vec<Edge>,
    pub valid: Vec<Edge>,
    pub test: Vec<Edge>,
}

/// Minimum edges a relation needs for an 85:5:10 split.
pub const MIN_LINK_EDGES: usize = 20;

/// Per-relation 85:5:10 split of positive edges: `floor(m/10)` test,
/// `floor(m/20)` validation, the rest train.
pub fn split_links(g: &RelGraph, seed: u64) -> Result<Vec<LinkSplit>> {
    let mut out = Vec::with_capacity(g.num_relations());
    for r in 0..g.num_relations() {
        let mut edges = g.edges(r);
        let m = edges.len();
        if m < MIN_LINK_EDGES {
            return Err(Error::Invalid(format!(
                "relation {:?} has {m} edges; link splits need at least {MIN_LINK_EDGES}",
                g.relation_names()[r]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        edges.shuffle(&mut rng);
        let (t, v) = (m / 10, m / 20);
        let mut test = edges[..t].to_vec();
        let mut valid = edges[t..t + v].to_vec();
        let mut train = edges[t + v..].to_vec();
        test.sort_unstable();
        valid.sort_unstable();
        train.sort_unstable();
        out.push(LinkSplit { train, valid, test });
    }
    Ok(out)
}

/// Draws `count` distinct ordered pairs `(i, j)`, `i != j`, uniformly from
/// pairs not in `exclude`.
pub fn sample_negative_links(
    num_nodes: usize,
    count: usize,
    exclude: &HashSet<Edge>,
    rng: &mut impl Rng,
) -> Result<Vec<Edge>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let total = num_nodes.saturating_mul(num_nodes.saturating_sub(1));
    let blocked = exclude.iter().filter(|&&(i, j)| i != j && i < num_nodes && j < num_nodes).count();
    if total.saturating_sub(blocked) < count {
        return Err(Error::Invalid(format!(
            "cannot draw {count} negative pairs: only {} non-edges exist",
            total.saturating_sub(blocked)
        )));
    }
    let max_attempts = 100 * count + 10_000;
    let mut drawn = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Invalid(format!(
                "negative sampling gave up after {max_attempts} attempts ({} of {count} drawn)",
                out.len()
            )));
        }
        let i = rng.gen_range(0..num_nodes);
        let j = rng.gen_range(0..num_nodes);
        if i == j || exclude.contains(&(i, j)) || !drawn.insert((i, j)) {
            continue;
        }
        out.push((i, j));
    }
    Ok(out)
}

/// Fixed negatives for evaluating one relation, disjoint from its positives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EvalNegatives {
    pub valid: Vec<Edge>,
    pub test: Vec<Edge>,
}

pub fn positive_set(g: &RelGraph, r: usize) -> HashSet<Edge> {
    g.relation(r).iter().map(|(i, j, _)| (i, j)).collect()
}

/// One validation and one test negative per held-out positive, drawn with
/// a seed of its own so they do not move with training randomness.
pub fn eval_negatives(g: &RelGraph, splits: &[LinkSplit], seed: u64) -> Result<Vec<EvalNegatives>> {
    splits
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (r as u64));
            let exclude = positive_set(g, r);
            let all = sample_negative_links(g.num_nodes(), s.valid.len() + s.test.len(), &exclude, &mut rng)?;
            let (v, t) = all.split_at(s.valid.len());
            Ok(EvalNegatives {
                valid: v.to_vec(),
                test: t.to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pos: usize, neg: usize) -> Labels {
        (0..pos + neg).map(|i| (i, u8::from(i < pos))).collect()
    }

    #[test]
    fn hundred_labels_split_80_10_10() {
        let s = split_node_labels(&labels(50, 50), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let ones = |v: &Labels| v.iter().filter(|p| p.1 == 1).count();
        assert_eq!(ones(&s.valid), 5);
        assert_eq!(ones(&s.test), 5);
    }

    #[test]
    fn too_few_labels() {
        assert!(split_node_labels(&labels(5, 4), 0).is_err());
    }

    #[test]
    fn missing_class_in_train_is_error() {
        // One conservative node ends up held out.
        let mut l = labels(0, 19);
        l.push((19, 1));
        let err = split_node_labels(&l, 0);
        assert!(err.is_err() || err.unwrap().train.iter().any(|p| p.1 == 1));
        assert!(split_node_labels(&labels(0, 20), 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let l = labels(37, 63);
        assert_eq!(split_node_labels(&l, 9).unwrap(), split_node_labels(&l, 9).unwrap());
        assert_ne!(split_node_labels(&l, 9).unwrap(), split_node_labels(&l, 10).unwrap());
    }

    fn chain_graph(n: usize, m: usize) -> RelGraph {
        let edges: Vec<Edge> = (0..m).map(|k| (k % n, (k / n + k + 1) % n)).collect();
        RelGraph::new(NodeIndex::sequential(n), vec!["a".into()], vec![edges], vec![false; n]).unwrap()
    }

    #[test]
    fn thousand_edges_split_850_50_100() {
        let g = chain_graph(200, 1000);
        let m = g.num_edges(0);
        let s = &split_links(&g, 1).unwrap()[0];
        assert_eq!(s.test.len(), m / 10);
        assert_eq!(s.valid.len(), m / 20);
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), m);
        if m == 1000 {
            assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (850, 50, 100));
        }
    }

    #[test]
    fn tiny_relation_named_in_error() {
        let g = RelGraph::new(
            NodeIndex::sequential(5),
            vec!["sparse".into()],
            vec![vec![(0, 1), (1, 2)]],
            vec![false; 5],
        )
        .unwrap();
        let msg = split_links(&g, 0).unwrap_err().to_string();
        assert!(msg.contains("sparse"), "{msg}");
    }

    #[test]
    fn negatives_avoid_positives_and_self_loops() {
        let g = chain_graph(30, 200);
        let pos = positive_set(&g, 0);
        let neg = sample_negative_links(30, 150, &pos, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(neg.len(), 150);
        assert!(neg.iter().all(|&(i, j)| i != j && !pos.contains(&(i, j))));
        let uniq: HashSet<_> = neg.iter().collect();
        assert_eq!(uniq.len(), 150);
    }

    #[test]
    fn zero_negatives_and_complete_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negative_links(4, 0, &HashSet::new(), &mut rng).unwrap().is_empty());
        let complete: HashSet<Edge> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
        assert!(sample_negative_links(4, 1, &complete, &mut rng).is_err());
    }

    #[test]
    fn eval_negatives_disjoint_and_fixed() {
        let g = chain_graph(40, 300);
        let splits = split_links(&g, 2).unwrap();
        let a = eval_negatives(&g, &splits, 11).unwrap();
        assert_eq!(a, eval_negatives(&g, &splits, 11).unwrap());
        let pos = positive_set(&g, 0);
        assert_eq!(a[0].valid.len(), splits[0].valid.len());
        assert_eq!(a[0].test.len(), splits[0].test.len());
        assert!(a[0].valid.iter().chain(&a[0].test).all(|e| !pos.contains(e)));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.tsv");
        let nodes = NodeIndex::from_ids(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        save_labels(&p, &nodes, &[(0, 1), (2, 0)]).unwrap();
        assert_eq!(load_labels(&p, &nodes).unwrap(), vec![(0, 1), (2, 0)]);
        std::fs::write(&p, "a\tliberal\nb\tconservative\n").unwrap();
        assert_eq!(load_labels(&p, &nodes).unwrap(), vec![(0, 0), (1, 1)]);
        std::fs::write(&p, "a\tmaybe\n").unwrap();
        assert!(load_labels(&p, &nodes).is_err());
    }

    proptest! {
        #[test]
        fn stratified_within_one_per_class(pos in 5usize..120, neg in 5usize..120, seed in 0u64..50) {
            let l = labels(pos, neg);
            let n = l.len();
            let s = split_node_labels(&l, seed).unwrap();
            prop_assert_eq!(s.valid.len(), n / 10);
            prop_assert_eq!(s.test.len(), n / 10);
            prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n);
            for part in [&s.valid, &s.test] {
                let ones = part.iter().filter(|p| p.1 == 1).count() as f64;
                let ideal = part.len() as f64 * pos as f64 / n as f64;
                prop_assert!((ones - ideal).abs() <= 1.0);
            }
            let all: BTreeSet<usize> = s.train.iter().chain(&s.valid).chain(&s.test).map(|p| p.0).collect();
            prop_assert_eq!(all.len(), n);
        }
    }
}
