//! Planted-partition multi-relational graphs with known node classes.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Edge, ExtCount, FollowCounts, NodeIndex, RelGraph};
use crate::io::write_string;
use crate::split::{save_labels, Labels};

const RELATION_NAMES: [&str; 5] = ["follow", "reply", "retweet", "like", "mention"];

pub fn default_relation_name(r: usize) -> String {
    RELATION_NAMES
        .get(r)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("rel{r}"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub blocks: usize,
    pub relations: usize,
    /// Edge probability between distinct nodes of the same block.
    pub intra_p: f64,
    /// Edge probability between nodes of different blocks.
    pub inter_p: f64,
    /// Share of nodes whose label is written out.
    pub label_fraction: f64,
    /// Probability that a relation carries a latent tie between two nodes.
    /// Each relation also draws independent edges at rate `p (1 - overlap)`,
    /// so the per-relation edge density stays close to `p`. Zero gives
    /// independent relations.
    pub overlap: f64,
    pub regions_per_block: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_nodes: 200,
            blocks: 2,
            relations: 3,
            intra_p: 0.05,
            inter_p: 0.005,
            label_fraction: 0.1,
            overlap: 0.8,
            regions_per_block: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub graph: RelGraph,
    /// Planted block of every node.
    pub blocks: Vec<usize>,
    /// Published labels (`block % 2`) for a random subset of nodes.
    pub labels: Labels,
    pub regions: Vec<Option<String>>,
    /// Seeds are the labeled nodes; counts are taken in the first relation.
    pub counts: FollowCounts,
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    let n = cfg.num_nodes;
    if n < 2 || cfg.blocks == 0 || cfg.blocks > n || cfg.relations == 0 {
        return Err(Error::Config(
            "need at least two nodes, between one and n blocks, and one relation".into(),
        ));
    }
    for (name, p) in [
        ("intra_p", cfg.intra_p),
        ("inter_p", cfg.inter_p),
        ("label_fraction", cfg.label_fraction),
        ("overlap", cfg.overlap),
    ] {
        check_probability(name, p)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks: Vec<usize> = (0..n).map(|i| i * cfg.blocks / n).collect();

    let mut edges: Vec<Vec<Edge>> = vec![Vec::new(); cfg.relations];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = if blocks[i] == blocks[j] { cfg.intra_p } else { cfg.inter_p };
            let latent = rng.gen::<f64>() < p;
            let noise = p * (1.0 - cfg.overlap);
            for rel in edges.iter_mut() {
                let kept = latent && rng.gen::<f64>() < cfg.overlap;
                let fresh = rng.gen::<f64>() < noise;
                if kept || fresh {
                    rel.push((i, j));
                }
            }
        }
    }

    let labeled = (cfg.label_fraction * n as f64).floor() as usize;
    let mut chosen = sample(&mut rng, n, labeled).into_vec();
    chosen.sort_unstable();
    let labels: Labels = chosen.iter().map(|&i| (i, (blocks[i] % 2) as u8)).collect();
    let mut seeds = vec![false; n];
    for &i in &chosen {
        seeds[i] = true;
    }

    let total_regions = cfg.blocks * cfg.regions_per_block;
    let regions = (0..n)
        .map(|i| {
            if total_regions == 0 {
                return None;
            }
            let k = if rng.gen::<f64>() < 0.8 {
                blocks[i] * cfg.regions_per_block + rng.gen_range(0..cfg.regions_per_block)
            } else {
                rng.gen_range(0..total_regions)
            };
            Some(format!("region{k:02}"))
        })
        .collect();

    let names = (0..cfg.relations).map(default_relation_name).collect();
    let ids = (0..n).map(|i| format!("u{i:04}")).collect();
    let graph = RelGraph::new(NodeIndex::from_ids(ids)?, names, edges, seeds.clone())?;

    let mut t1 = vec![0u64; n];
    let mut t2 = vec![0u64; n];
    for (i, j) in graph.edges(0) {
        if seeds[i] {
            t1[j] += 1;
        }
        if seeds[j] {
            t2[i] += 1;
        }
    }
    let counts = (0..n)
        .map(|i| {
            Some(if seeds[i] {
                (ExtCount::Infinite, ExtCount::Infinite)
            } else {
                (ExtCount::Finite(t1[i]), ExtCount::Finite(t2[i]))
            })
        })
        .collect();

    Ok(Synthetic {
        graph,
        blocks,
        labels,
        regions,
        counts,
    })
}

/// Writes edge lists, node map, labels, seeds, regions, counts, and a
/// `timme.conf` pointing at them. Returns the config path.
pub fn write_dataset(data: &Synthetic, dir: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &data.graph;
    let nodes = g.nodes();
    nodes.save(&dir.join("nodes.tsv"))?;
    let edge_files = g.save_edge_lists(dir)?;
    save_labels(&dir.join("labels.tsv"), nodes, &data.labels)?;
    g.save_seeds(&dir.join("seeds.txt"))?;
    let regions: String = data
        .regions
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().map(|r| format!("{}\t{r}\n", nodes.id(i))))
        .collect();
    write_string(&dir.join("regions.tsv"), &regions)?;
    let counts: String = data
        .counts
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|(a, b)| format!("{}\t{a}\t{b}\n", nodes.id(i))))
        .collect();
    write_string(&dir.join("counts.tsv"), &counts)?;
    let edge_names: Vec<String> = edge_files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let conf = format!(
        "edges = {}\nnode_map = nodes.tsv\nlabels = labels.tsv\nseeds = seeds.txt\n\
         regions = regions.tsv\ncounts = counts.tsv\nseed = {seed}\n",
        edge_names.join(", ")
    );
    let conf_path = dir.join("timme.conf");
    write_string(&conf_path, &conf)?;
    Ok(conf_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.len(), 20);
        assert_eq!(a.graph.relation_names(), &["follow", "reply", "retweet"]);
        let other = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.graph, other.graph);
    }

    #[test]
    fn density_tracks_block_probabilities() {
        let s = generate(&SynthConfig {
            num_nodes: 400,
            ..SynthConfig::default()
        })
        .unwrap();
        let (mut intra, mut inter) = (0usize, 0usize);
        for (i, j) in s.graph.edges(0) {
            if s.blocks[i] == s.blocks[j] {
                intra += 1;
            } else {
                inter += 1;
            }
        }
        let intra_rate = intra as f64 / (2.0 * 200.0 * 199.0);
        let inter_rate = inter as f64 / (2.0 * 200.0 * 200.0);
        assert!((intra_rate - 0.05).abs() < 0.006, "{intra_rate}");
        assert!((inter_rate - 0.005).abs() < 0.002, "{inter_rate}");
    }

    #[test]
    fn labels_follow_blocks() {
        let s = generate(&SynthConfig::default()).unwrap();
        assert!(s.labels.iter().all(|&(i, l)| usize::from(l) == s.blocks[i] % 2));
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(generate(&SynthConfig {
            intra_p: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
    }

    #[test]
    fn written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SynthConfig::default()).unwrap();
        let conf = write_dataset(&s, dir.path(), 0).unwrap();
        let cfg = crate::config::ExperimentConfig::load(&conf).unwrap();
        let data = crate::experiment::Dataset::load(&cfg.data).unwrap();
        assert_eq!(data.graph, s.graph);
        assert_eq!(data.labels, s.labels);
        assert_eq!(data.regions.as_ref().unwrap(), &s.regions);
    }
}
