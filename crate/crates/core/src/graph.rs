//! The multi-relational directed graph, its augmented relation set, and the
//! edits the training protocol needs (link hold-out, subgroup filtering).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{create, read_lines};
use crate::linalg::SparseMatrix;

/// A directed edge `(src, dst)` in dense indices.
pub type Edge = (usize, usize);

/// Bijection between external node ids and dense indices `0..N`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl NodeIndex {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id {id:?}")));
            }
        }
        Ok(Self { ids, lookup })
    }

    /// Ids `"0"`, `"1"`, ... for tests and synthetic graphs.
    pub fn sequential(n: usize) -> Self {
        Self::from_ids((0..n).map(|i| i.to_string()).collect()).expect("distinct ids")
    }

    /// Reads `external_id<TAB>dense_index` lines. Indices must cover `0..N`
    /// exactly once.
    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let n = lines.len();
        let mut ids: Vec<Option<String>> = vec![None; n];
        for (lineno, line) in lines {
            let mut parts = line.split('\t');
            let (Some(id), Some(idx), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, lineno, "expected external_id<TAB>dense_index"));
            };
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad dense index {idx:?}")))?;
            if idx >= n {
                return Err(Error::parse(path, lineno, format!("dense index {idx} outside 0..{n}")));
            }
            if ids[idx].replace(id.to_string()).is_some() {
                return Err(Error::parse(path, lineno, format!("dense index {idx} assigned twice")));
            }
        }
        let ids = ids.into_iter().map(|i| i.expect("every slot filled")).collect();
        Self::from_ids(ids).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        for (i, id) in self.ids.iter().enumerate() {
            writeln!(w, "{id}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Node set plus `R` directed binary relations.
#[derive(Clone, Debug, PartialEq)]
pub struct RelGraph {
    nodes: NodeIndex,
    relations: Vec<SparseMatrix>,
    relation_names: Vec<String>,
    seed_flags: Vec<bool>,
}

/// Per-relation line statistics from [`load_edge_lists`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadReport {
    pub relation: String,
    pub lines: usize,
    pub edges: usize,
    pub duplicates: usize,
}

impl RelGraph {
    /// Builds a graph from per-relation edge lists. Duplicate edges within a
    /// relation collapse to one.
    pub fn new(
        nodes: NodeIndex,
        relation_names: Vec<String>,
        edges: Vec<Vec<Edge>>,
        seed_flags: Vec<bool>,
    ) -> Result<Self> {
        let n = nodes.len();
        if relation_names.is_empty() {
            return Err(Error::Graph("at least one relation is required".into()));
        }
        if relation_names.len() != edges.len() {
            return Err(Error::Graph(format!(
                "{} relation names for {} edge lists",
                relation_names.len(),
                edges.len()
            )));
        }
        let unique: HashSet<&String> = relation_names.iter().collect();
        if unique.len() != relation_names.len() {
            return Err(Error::Graph("relation names must be unique".into()));
        }
        if seed_flags.len() != n {
            return Err(Error::Graph(format!("{} seed flags for {n} nodes", seed_flags.len())));
        }
        let mut relations = Vec::with_capacity(edges.len());
        for (name, list) in relation_names.iter().zip(edges) {
            if let Some(&(i, j)) = list.iter().find(|&&(i, j)| i >= n || j >= n) {
                return Err(Error::Graph(format!("relation {name}: edge ({i},{j}) outside 0..{n}")));
            }
            let unique: BTreeSet<Edge> = list.into_iter().collect();
            relations.push(SparseMatrix::from_triplets(
                n,
                n,
                unique.into_iter().map(|(i, j)| (i, j, 1.0)),
            )?);
        }
        Ok(Self {
            nodes,
            relations,
            relation_names,
            seed_flags,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn nodes(&self) -> &NodeIndex {
        &self.nodes
    }

    pub fn relation(&self, r: usize) -> &SparseMatrix {
        &self.relations[r]
    }

    pub fn relations(&self) -> &[SparseMatrix] {
        &self.relations
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|n| n == name)
    }

    pub fn seed_flags(&self) -> &[bool] {
        &self.seed_flags
    }

    pub fn num_edges(&self, r: usize) -> usize {
        self.relations[r].nnz()
    }

    pub fn has_edge(&self, r: usize, e: Edge) -> bool {
        self.relations[r].contains(e.0, e.1)
    }

    /// Edges of relation `r` in row-major order.
    pub fn edges(&self, r: usize) -> Vec<Edge> {
        self.relations[r].iter().map(|(i, j, _)| (i, j)).collect()
    }

    pub fn with_relation_names(mut self, names: Vec<String>) -> Result<Self> {
        let edges = (0..self.num_relations()).map(|r| self.edges(r)).collect();
        self = Self::new(self.nodes, names, edges, self.seed_flags)?;
        Ok(self)
    }

    /// Keeps only the named relations, in the given order.
    pub fn select_relations(&self, names: &[String]) -> Result<Self> {
        let mut edges = Vec::with_capacity(names.len());
        for name in names {
            let r = self
                .relation_index(name)
                .ok_or_else(|| Error::Graph(format!("unknown relation {name:?}")))?;
            edges.push(self.edges(r));
        }
        Self::new(self.nodes.clone(), names.to_vec(), edges, self.seed_flags.clone())
    }

    /// Writes one `src<TAB>dst` file per relation into `dir`, named
    /// `<relation>.tsv`.
    pub fn save_edge_lists(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::new();
        for (r, name) in self.relation_names.iter().enumerate() {
            let path = dir.join(format!("{name}.tsv"));
            let mut w = create(&path)?;
            for (i, j) in self.edges(r) {
                writeln!(w, "{}\t{}", self.nodes.id(i), self.nodes.id(j)).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub fn save_seeds(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        for (i, &s) in self.seed_flags.iter().enumerate() {
            if s {
                writeln!(w, "{}", self.nodes.id(i)).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads one relation per edge-list file, named after the file stem.
pub fn load_edge_lists(
    paths: &[impl AsRef<Path>],
    node_map: &Path,
    seed_path: Option<&Path>,
) -> Result<(RelGraph, Vec<LoadReport>)> {
    let nodes = NodeIndex::load(node_map)?;
    let mut names = Vec::with_capacity(paths.len());
    let mut edges = Vec::with_capacity(paths.len());
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("relation")
            .to_string();
        let lines = read_lines(path)?;
        if lines.is_empty() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                message: "relation file has no edges".into(),
            });
        }
        let mut seen = HashSet::with_capacity(lines.len());
        let mut list = Vec::with_capacity(lines.len());
        for (lineno, line) in &lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.len() {
                2 => {}
                3 => {
                    return Err(Error::parse(path, *lineno, "weighted edges are not supported"));
                }
                _ => return Err(Error::parse(path, *lineno, "expected src<TAB>dst")),
            }
            let lookup = |id: &str| {
                nodes
                    .index_of(id.trim())
                    .ok_or_else(|| Error::parse(path, *lineno, format!("unknown node id {:?}", id.trim())))
            };
            let edge = (lookup(fields[0])?, lookup(fields[1])?);
            if seen.insert(edge) {
                list.push(edge);
            }
        }
        reports.push(LoadReport {
            relation: name.clone(),
            lines: lines.len(),
            edges: list.len(),
            duplicates: lines.len() - list.len(),
        });
        names.push(name);
        edges.push(list);
    }
    let mut seeds = vec![false; nodes.len()];
    if let Some(seed_path) = seed_path {
        for (lineno, line) in read_lines(seed_path)? {
            let id = line.trim();
            let i = nodes
                .index_of(id)
                .ok_or_else(|| Error::parse(seed_path, lineno, format!("unknown node id {id:?}")))?;
            seeds[i] = true;
        }
    }
    let graph = RelGraph::new(nodes, names, edges, seeds)?;
    Ok((graph, reports))
}

/// Where a matrix of the augmented relation set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationOrigin {
    Forward(usize),
    Reverse(usize),
    Identity,
}

/// `[A_1..A_R, A_1^T..A_R^T, I_N]`. The graph is left untouched.
pub fn augment_relations(g: &RelGraph) -> Vec<SparseMatrix> {
    let mut out: Vec<SparseMatrix> = g.relations().to_vec();
    out.extend(g.relations().iter().map(SparseMatrix::transpose));
    out.push(SparseMatrix::identity(g.num_nodes()));
    out
}

pub fn augmented_origins(num_relations: usize) -> Vec<RelationOrigin> {
    (0..num_relations)
        .map(RelationOrigin::Forward)
        .chain((0..num_relations).map(RelationOrigin::Reverse))
        .chain(std::iter::once(RelationOrigin::Identity))
        .collect()
}

/// `D^(-1/2) (A + I) D^(-1/2)` with `d_i` the row sum of `A + I`.
pub fn normalize_adjacency(raw: &SparseMatrix, n: usize) -> Result<SparseMatrix> {
    if raw.rows() != raw.cols() || raw.rows() != n {
        return Err(Error::shape(
            "normalize_adjacency",
            format!("expected {n}x{n}, got {:?}", raw.shape()),
        ));
    }
    if raw.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("adjacency entries must be nonnegative".into()));
    }
    let with_loops = SparseMatrix::from_triplets(
        n,
        n,
        raw.iter().chain((0..n).map(|i| (i, i, 1.0))),
    )?;
    let degree = with_loops.row_sums();
    SparseMatrix::from_triplets(
        n,
        n,
        with_loops
            .iter()
            .map(|(i, j, v)| (i, j, v / (degree[i] * degree[j]).sqrt())),
    )
}

/// The `2R+1` normalized matrices the encoder propagates over.
#[derive(Clone, Debug)]
pub struct NormalizedRelationSet {
    matrices: Vec<SparseMatrix>,
    origins: Vec<RelationOrigin>,
    num_nodes: usize,
}

impl NormalizedRelationSet {
    pub fn from_graph(g: &RelGraph) -> Result<Self> {
        let n = g.num_nodes();
        let matrices = augment_relations(g)
            .iter()
            .map(|raw| normalize_adjacency(raw, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            matrices,
            origins: augmented_origins(g.num_relations()),
            num_nodes: n,
        })
    }

    /// A set built from arbitrary already-normalized matrices; used by test
    /// rigs that collapse the relation set.
    pub fn from_matrices(matrices: Vec<SparseMatrix>, origins: Vec<RelationOrigin>) -> Result<Self> {
        let num_nodes = matrices.first().map_or(0, SparseMatrix::rows);
        if matrices.is_empty() || matrices.len() != origins.len() {
            return Err(Error::Invalid("one origin per matrix required".into()));
        }
        if matrices.iter().any(|m| m.shape() != (num_nodes, num_nodes)) {
            return Err(Error::shape("NormalizedRelationSet", "matrices must be square and equal-sized"));
        }
        Ok(Self {
            matrices,
            origins,
            num_nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn matrices(&self) -> &[SparseMatrix] {
        &self.matrices
    }

    pub fn matrix(&self, k: usize) -> &SparseMatrix {
        &self.matrices[k]
    }

    pub fn origins(&self) -> &[RelationOrigin] {
        &self.origins
    }
}

/// Result of [`remove_links`].
#[derive(Clone, Debug)]
pub struct Removal {
    pub graph: RelGraph,
    pub removed: usize,
    /// Hold-out edges that were not present in the graph.
    pub missing: usize,
}

/// Returns a copy of `g` without any hold-out edge. `holdout[r]` lists the
/// edges to drop from relation `r`; relations past the end of `holdout` are
/// kept whole.
pub fn remove_links(g: &RelGraph, holdout: &[Vec<Edge>]) -> Result<Removal> {
    if holdout.len() > g.num_relations() {
        return Err(Error::Graph(format!(
            "hold-out for {} relations, graph has {}",
            holdout.len(),
            g.num_relations()
        )));
    }
    let mut edges = Vec::with_capacity(g.num_relations());
    let (mut removed, mut missing) = (0, 0);
    for r in 0..g.num_relations() {
        let drop: HashSet<Edge> = holdout.get(r).map(|h| h.iter().copied().collect()).unwrap_or_default();
        missing += drop.iter().filter(|&&e| !g.has_edge(r, e)).count();
        let kept: Vec<Edge> = g.edges(r).into_iter().filter(|e| !drop.contains(e)).collect();
        removed += g.num_edges(r) - kept.len();
        edges.push(kept);
    }
    let graph = RelGraph::new(
        g.nodes.clone(),
        g.relation_names.clone(),
        edges,
        g.seed_flags.clone(),
    )?;
    Ok(Removal {
        graph,
        removed,
        missing,
    })
}

/// A natural number or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExtCount {
    Finite(u64),
    Infinite,
}

impl FromStr for ExtCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(ExtCount::Infinite),
            _ => t
                .parse()
                .map(ExtCount::Finite)
                .map_err(|_| Error::Invalid(format!("bad count {t:?}"))),
        }
    }
}

impl fmt::Display for ExtCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtCount::Finite(n) => write!(f, "{n}"),
            ExtCount::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeBound {
    Included(ExtCount),
    Excluded(ExtCount),
}

/// An interval over the extended naturals, written `[a,b)`, `(a,b]`,
/// `[a,inf)` and so on, or a singleton `{a}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThresholdRange {
    pub lower: RangeBound,
    pub upper: RangeBound,
}

impl ThresholdRange {
    pub fn singleton(v: ExtCount) -> Self {
        Self {
            lower: RangeBound::Included(v),
            upper: RangeBound::Included(v),
        }
    }

    pub fn contains(&self, t: ExtCount) -> bool {
        let above = match self.lower {
            RangeBound::Included(lo) => t >= lo,
            RangeBound::Excluded(lo) => t > lo,
        };
        let below = match self.upper {
            RangeBound::Included(hi) => t <= hi,
            RangeBound::Excluded(hi) => t < hi,
        };
        above && below
    }
}

impl FromStr for ThresholdRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::Invalid(format!("bad threshold range {t:?}"));
        if let Some(inner) = t.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            return Ok(Self::singleton(inner.parse()?));
        }
        let mut chars = t.chars();
        let open = chars.next().ok_or_else(bad)?;
        let close = chars.next_back().ok_or_else(bad)?;
        let (lo, hi) = chars.as_str().split_once(',').ok_or_else(bad)?;
        let (lo, hi): (ExtCount, ExtCount) = (lo.parse()?, hi.parse()?);
        let lower = match open {
            '[' => RangeBound::Included(lo),
            '(' => RangeBound::Excluded(lo),
            _ => return Err(bad()),
        };
        let upper = match close {
            ']' => RangeBound::Included(hi),
            ')' => RangeBound::Excluded(hi),
            _ => return Err(bad()),
        };
        Ok(Self { lower, upper })
    }
}

impl fmt::Display for ThresholdRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let (RangeBound::Included(a), RangeBound::Included(b)) = (self.lower, self.upper) {
            if a == b {
                return write!(f, "{{{a}}}");
            }
        }
        match self.lower {
            RangeBound::Included(a) => write!(f, "[{a},")?,
            RangeBound::Excluded(a) => write!(f, "({a},")?,
        }
        match self.upper {
            RangeBound::Included(b) => write!(f, "{b}]"),
            RangeBound::Excluded(b) => write!(f, "{b})"),
        }
    }
}

/// Political-measurement counts `(t1, t2)` per node: how many seeds follow
/// the node, and how many seeds the node follows.
pub type FollowCounts = Vec<Option<(ExtCount, ExtCount)>>;

/// Reads `external_id<TAB>t1<TAB>t2` lines.
pub fn load_counts(path: &Path, nodes: &NodeIndex) -> Result<FollowCounts> {
    let mut counts = vec![None; nodes.len()];
    for (lineno, line) in read_lines(path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "expected external_id<TAB>t1<TAB>t2"));
        }
        let i = nodes
            .index_of(fields[0].trim())
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown node id {:?}", fields[0])))?;
        let t1 = fields[1].parse().map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        let t2 = fields[2].parse().map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        counts[i] = Some((t1, t2));
    }
    Ok(counts)
}

#[derive(Clone, Debug)]
pub struct Subgroup {
    /// Kept nodes as indices into the original graph, ascending.
    pub kept: Vec<usize>,
    pub graph: RelGraph,
}

/// Keeps seeds plus every node whose `max(t1, t2)` lies in `range`, and the
/// edges among kept nodes.
pub fn filter_subgroup(g: &RelGraph, counts: &FollowCounts, range: &ThresholdRange) -> Result<Subgroup> {
    if counts.len() != g.num_nodes() {
        return Err(Error::Invalid(format!(
            "{} count entries for {} nodes",
            counts.len(),
            g.num_nodes()
        )));
    }
    let mut kept = Vec::new();
    for (i, (&seed, c)) in g.seed_flags.iter().zip(counts).enumerate() {
        let keep = if seed {
            true
        } else {
            let (t1, t2) = c.ok_or_else(|| {
                Error::Invalid(format!("no follow counts for node {:?}", g.nodes.id(i)))
            })?;
            range.contains(t1.max(t2))
        };
        if keep {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::Graph(format!("no node satisfies range {range}")));
    }
    let mut remap = vec![usize::MAX; g.num_nodes()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let ids = kept.iter().map(|&i| g.nodes.id(i).to_string()).collect();
    let edges = (0..g.num_relations())
        .map(|r| {
            g.edges(r)
                .into_iter()
                .filter(|&(i, j)| remap[i] != usize::MAX && remap[j] != usize::MAX)
                .map(|(i, j)| (remap[i], remap[j]))
                .collect()
        })
        .collect();
    let seeds = kept.iter().map(|&i| g.seed_flags[i]).collect();
    let graph = RelGraph::new(NodeIndex::from_ids(ids)?, g.relation_names.clone(), edges, seeds)?;
    Ok(Subgroup { kept, graph })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use std::fs;

    fn graph(n: usize, rels: Vec<Vec<Edge>>) -> RelGraph {
        let names = (0..rels.len()).map(|r| format!("r{r}")).collect();
        RelGraph::new(NodeIndex::sequential(n), names, rels, vec![false; n]).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_two_relations() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(dir.path(), "nodes.tsv", "a\t0\nb\t1\nc\t2\n");
        let f1 = write(dir.path(), "follow.tsv", "a\tb\n");
        let f2 = write(dir.path(), "reply.tsv", "b\tc\n");
        let (g, reports) = load_edge_lists(&[f1, f2], &map, None).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_relations(), 2);
        assert_eq!(g.relation_names(), &["follow".to_string(), "reply".to_string()]);
        assert_eq!(g.edges(0), vec![(0, 1)]);
        assert_eq!(g.edges(1), vec![(1, 2)]);
        assert_eq!(reports[0].edges, 1);
    }

    #[test]
    fn load_dedups_lines() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(dir.path(), "nodes.tsv", "a\t0\nb\t1\n");
        let f = write(dir.path(), "like.tsv", "a\tb\na\tb\n");
        let (g, reports) = load_edge_lists(&[f], &map, None).unwrap();
        assert_eq!(g.num_edges(0), 1);
        assert_eq!(reports[0].duplicates, 1);
    }

    #[test]
    fn load_unknown_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(dir.path(), "nodes.tsv", "a\t0\nb\t1\n");
        let f = write(dir.path(), "like.tsv", "a\tb\nzzz\ta\n");
        let err = load_edge_lists(&[f.clone()], &map, None).unwrap_err();
        match err {
            Error::Parse { path, line, message } => {
                assert_eq!(path, f);
                assert_eq!(line, 2);
                assert!(message.contains("zzz"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_empty_and_weighted() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(dir.path(), "nodes.tsv", "a\t0\nb\t1\n");
        let empty = write(dir.path(), "empty.tsv", "");
        assert!(matches!(load_edge_lists(&[empty], &map, None), Err(Error::Load { .. })));
        let weighted = write(dir.path(), "w.tsv", "a\tb\t0.5\n");
        assert!(matches!(load_edge_lists(&[weighted], &map, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn load_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(dir.path(), "nodes.tsv", "a\t0\nb\t1\nc\t2\n");
        let f = write(dir.path(), "follow.tsv", "a\tb\n");
        let seeds = write(dir.path(), "seeds.txt", "c\n");
        let (g, _) = load_edge_lists(&[f], &map, Some(&seeds)).unwrap();
        assert_eq!(g.seed_flags(), &[false, false, true]);
    }

    #[test]
    fn node_map_must_be_bijection() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(dir.path(), "nodes.tsv", "a\t0\nb\t0\n");
        assert!(NodeIndex::load(&map).is_err());
        let map = write(dir.path(), "nodes2.tsv", "a\t0\nb\t5\n");
        assert!(NodeIndex::load(&map).is_err());
    }

    #[test]
    fn graph_invariants_enforced() {
        let nodes = NodeIndex::sequential(2);
        assert!(RelGraph::new(nodes.clone(), vec![], vec![], vec![false; 2]).is_err());
        assert!(RelGraph::new(nodes.clone(), vec!["a".into()], vec![vec![(0, 2)]], vec![false; 2]).is_err());
        assert!(RelGraph::new(
            nodes,
            vec!["a".into(), "a".into()],
            vec![vec![], vec![]],
            vec![false; 2]
        )
        .is_err());
    }

    #[test]
    fn augment_counts_and_order() {
        let g = graph(4, vec![vec![(0, 1)]; 5]);
        let aug = augment_relations(&g);
        assert_eq!(aug.len(), 11);
        assert_eq!(aug[5].iter().collect::<Vec<_>>(), vec![(1, 0, 1.0)]);
        assert_eq!(aug[10], SparseMatrix::identity(4));
        assert_eq!(aug[0], *g.relation(0));
    }

    #[test]
    fn normalize_hand_example() {
        let raw = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        let norm = normalize_adjacency(&raw, 2).unwrap().to_dense();
        // d = [2, 1]: (0,0) = 1/2, (0,1) = 1/sqrt(2), (1,1) = 1.
        assert!((norm.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((norm.get(0, 1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(norm.get(1, 0), 0.0);
        assert!((norm.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_fixed_points() {
        let zero = normalize_adjacency(&SparseMatrix::zeros(3, 3), 3).unwrap();
        assert_eq!(zero.to_dense(), DenseMatrix::identity(3));
        let eye = normalize_adjacency(&SparseMatrix::identity(3), 3).unwrap();
        assert_eq!(eye.to_dense(), DenseMatrix::identity(3));
    }

    #[test]
    fn normalize_rejects_non_square() {
        assert!(normalize_adjacency(&SparseMatrix::zeros(2, 3), 2).is_err());
    }

    #[test]
    fn normalized_set_identity_member() {
        let g = graph(3, vec![vec![(0, 1), (1, 2)], vec![(2, 0)]]);
        let set = NormalizedRelationSet::from_graph(&g).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.origins()[4], RelationOrigin::Identity);
        assert_eq!(set.matrix(4).to_dense(), DenseMatrix::identity(3));
        assert_eq!(set.origins()[3], RelationOrigin::Reverse(1));
    }

    #[test]
    fn remove_links_cases() {
        let edges: Vec<Edge> = (0..10).map(|i| (i, (i + 1) % 10)).collect();
        let g = graph(10, vec![edges.clone()]);
        let out = remove_links(&g, &[edges[..3].to_vec()]).unwrap();
        assert_eq!(out.graph.num_edges(0), 7);
        assert_eq!(g.num_edges(0), 10);

        let same = remove_links(&g, &[]).unwrap();
        assert_eq!(same.graph, g);

        let out = remove_links(&g, &[vec![(0, 5), (0, 1)]]).unwrap();
        assert_eq!(out.missing, 1);
        assert_eq!(out.removed, 1);
        assert_eq!(out.graph.num_edges(0), 9);
    }

    fn counts(pairs: &[(u64, u64)]) -> FollowCounts {
        pairs
            .iter()
            .map(|&(a, b)| Some((ExtCount::Finite(a), ExtCount::Finite(b))))
            .collect()
    }

    #[test]
    fn filter_infinity_keeps_seeds_only() {
        let mut g = graph(4, vec![vec![(0, 1), (1, 2), (2, 3), (3, 0)]]);
        g.seed_flags = vec![true, true, false, false];
        let c = counts(&[(0, 0), (0, 0), (60, 3), (1, 1)]);
        let sub = filter_subgroup(&g, &c, &"{inf}".parse().unwrap()).unwrap();
        assert_eq!(sub.kept, vec![0, 1]);
        assert_eq!(sub.graph.edges(0), vec![(0, 1)]);
    }

    #[test]
    fn filter_uses_max_of_counts() {
        let g = graph(3, vec![vec![(0, 1), (1, 2)]]);
        let c = counts(&[(3, 60), (10, 10), (0, 25)]);
        let sub = filter_subgroup(&g, &c, &"[50,inf)".parse().unwrap()).unwrap();
        assert_eq!(sub.kept, vec![0]);
        let sub = filter_subgroup(&g, &c, &"[20,50)".parse().unwrap()).unwrap();
        assert_eq!(sub.kept, vec![2]);
        assert!(filter_subgroup(&g, &c, &"[100,200)".parse().unwrap()).is_err());
    }

    #[test]
    fn threshold_range_parse_and_display() {
        for text in ["[50,inf)", "[20,50)", "{inf}", "(1,5]"] {
            let r: ThresholdRange = text.parse().unwrap();
            assert_eq!(r.to_string(), text);
        }
        assert!("50,inf".parse::<ThresholdRange>().is_err());
        let r: ThresholdRange = "[20,inf)".parse().unwrap();
        assert!(r.contains(ExtCount::Finite(20)));
        assert!(!r.contains(ExtCount::Infinite));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_graph() -> impl Strategy<Value = RelGraph> {
            (2usize..20, 1usize..4).prop_flat_map(|(n, r)| {
                proptest::collection::vec(proptest::collection::vec((0..n, 0..n), 0..40), r)
                    .prop_map(move |rels| graph(n, rels))
            })
        }

        proptest! {
            #[test]
            fn normalized_entries_match_brute_force(g in random_graph()) {
                let n = g.num_nodes();
                for raw in augment_relations(&g) {
                    let norm = normalize_adjacency(&raw, n).unwrap();
                    let mut plus = raw.to_dense();
                    for i in 0..n {
                        plus.set(i, i, plus.get(i, i) + 1.0);
                    }
                    let deg: Vec<f64> = (0..n).map(|i| plus.row(i).iter().sum()).collect();
                    for i in 0..n {
                        for j in 0..n {
                            let want = plus.get(i, j) / (deg[i] * deg[j]).sqrt();
                            prop_assert!((norm.get(i, j) - want).abs() <= 1e-15);
                            prop_assert_eq!(norm.get(i, j) != 0.0, plus.get(i, j) != 0.0);
                            prop_assert!(norm.get(i, j) >= 0.0);
                        }
                    }
                }
            }

            #[test]
            fn reverse_counts_match_forward(g in random_graph()) {
                let aug = augment_relations(&g);
                let r = g.num_relations();
                for k in 0..r {
                    prop_assert_eq!(aug[k].nnz(), aug[r + k].nnz());
                }
            }

            #[test]
            fn removed_edges_are_gone(g in random_graph(), pick in proptest::collection::vec(any::<prop::sample::Index>(), 0..15)) {
                let holdout: Vec<Vec<Edge>> = (0..g.num_relations())
                    .map(|r| {
                        let edges = g.edges(r);
                        if edges.is_empty() { return vec![]; }
                        pick.iter().map(|ix| edges[ix.index(edges.len())]).collect()
                    })
                    .collect();
                let out = remove_links(&g, &holdout).unwrap().graph;
                for (r, h) in holdout.iter().enumerate() {
                    for &e in h {
                        prop_assert!(!out.has_edge(r, e));
                    }
                }
            }

            #[test]
            fn widening_range_never_shrinks(
                t in proptest::collection::vec((0u64..100, 0u64..100), 12),
                lo in 0u64..60, width in 1u64..40, extra in 0u64..30,
            ) {
                let g = graph(12, vec![vec![(0, 1)]]);
                let c = counts(&t);
                let narrow = ThresholdRange { lower: RangeBound::Included(ExtCount::Finite(lo)), upper: RangeBound::Excluded(ExtCount::Finite(lo + width)) };
                let wide = ThresholdRange { lower: RangeBound::Included(ExtCount::Finite(lo.saturating_sub(extra))), upper: RangeBound::Excluded(ExtCount::Infinite) };
                if let Ok(small) = filter_subgroup(&g, &c, &narrow) {
                    let big = filter_subgroup(&g, &c, &wide).unwrap();
                    prop_assert!(small.kept.iter().all(|k| big.kept.contains(k)));
                }
            }
        }
    }
}
