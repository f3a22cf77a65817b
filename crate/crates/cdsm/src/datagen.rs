//! Synthetic planted-topic textual graphs.
//!
//! Nodes carry a primary topic (a fraction carry two — "hubs"); documents
//! mix topic-vocabulary tokens with shared noise tokens, and edges are drawn
//! with a higher probability inside a topic than across. Hubs bridge two
//! topics, so their neighbor lists mix topics and a neighbor's usefulness
//! depends on which counterpart is being matched.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdsmError, Result};
use crate::graphstore::{MatchTask, NodeId, Split, TextGraph};
use crate::numerics::seeded_rng;

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_nodes: usize,
    pub num_topics: usize,
    pub tokens_per_doc: usize,
    /// Tokens in each topic's private vocabulary.
    pub topic_vocab: usize,
    /// Tokens in the shared noise vocabulary.
    pub noise_vocab: usize,
    /// Probability that a sampled token comes from the noise vocabulary.
    pub noise_frac: f64,
    pub intra_p: f64,
    pub inter_p: f64,
    /// Fraction of nodes assigned a second topic.
    pub multi_topic_frac: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        // mean degree lands near 20 with these probabilities
        GenConfig {
            num_nodes: 2000,
            num_topics: 16,
            tokens_per_doc: 12,
            topic_vocab: 64,
            noise_vocab: 256,
            noise_frac: 0.25,
            intra_p: 0.10,
            inter_p: 0.002,
            multi_topic_frac: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(CdsmError::Config("num_topics must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.multi_topic_frac) {
            return Err(CdsmError::Config("multi_topic_frac must be in [0,1]".into()));
        }
        if !(self.inter_p >= 0.0 && self.inter_p < self.intra_p && self.intra_p <= 1.0) {
            return Err(CdsmError::Config(
                "need 0 <= inter_p < intra_p <= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_frac) {
            return Err(CdsmError::Config("noise_frac must be in [0,1]".into()));
        }
        if self.num_nodes == 0 || self.tokens_per_doc == 0 || self.topic_vocab == 0 {
            return Err(CdsmError::Config(
                "num_nodes, tokens_per_doc, topic_vocab must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Planted topic assignment per node: one topic, or two for hubs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub topics: Vec<Vec<u16>>,
}

impl GroundTruth {
    pub fn topics_of(&self, node: NodeId) -> Result<&[u16]> {
        self.topics
            .get(node as usize)
            .map(|v| v.as_slice())
            .ok_or_else(|| CdsmError::Lookup(format!("node {} not in ground truth", node)))
    }

    pub fn is_hub(&self, node: NodeId) -> bool {
        self.topics
            .get(node as usize)
            .map(|t| t.len() > 1)
            .unwrap_or(false)
    }

    pub fn shares_topic(&self, a: NodeId, b: NodeId) -> Result<bool> {
        let ta = self.topics_of(a)?;
        let tb = self.topics_of(b)?;
        Ok(ta.iter().any(|t| tb.contains(t)))
    }
}

/// Raw generated dataset before graph construction.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub records: Vec<(String, String)>,
    pub edges: Vec<(String, String)>,
    pub truth: GroundTruth,
}

fn node_name(i: usize) -> String {
    format!("n{}", i)
}

fn topic_token(topic: u16, j: usize) -> String {
    format!("t{}w{}", topic, j)
}

fn noise_token(j: usize) -> String {
    format!("z{}", j)
}

/// Generate the raw records, edges and ground truth for a config.
pub fn generate_records(config: &GenConfig) -> Result<GeneratedData> {
    config.validate()?;
    let n = config.num_nodes;
    let k = config.num_topics as u16;

    // topic assignment: primary uniform, hubs get a distinct second topic
    let mut rng = seeded_rng(config.seed, "datagen/topics");
    let num_hubs = (n as f64 * config.multi_topic_frac).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let hub_set: std::collections::HashSet<usize> = order[..num_hubs].iter().copied().collect();
    let mut topics: Vec<Vec<u16>> = Vec::with_capacity(n);
    for i in 0..n {
        let primary = rng.gen_range(0..k);
        if hub_set.contains(&i) {
            let mut second = rng.gen_range(0..k - 1);
            if second >= primary {
                second += 1;
            }
            topics.push(vec![primary, second]);
        } else {
            topics.push(vec![primary]);
        }
    }

    // documents: per token, noise with prob noise_frac, else a token from a
    // uniformly chosen owned topic
    let mut rng = seeded_rng(config.seed, "datagen/texts");
    let mut records = Vec::with_capacity(n);
    for (i, owned) in topics.iter().enumerate() {
        let mut words = Vec::with_capacity(config.tokens_per_doc);
        for _ in 0..config.tokens_per_doc {
            if rng.gen_bool(config.noise_frac) {
                words.push(noise_token(rng.gen_range(0..config.noise_vocab)));
            } else {
                let topic = owned[rng.gen_range(0..owned.len())];
                words.push(topic_token(topic, rng.gen_range(0..config.topic_vocab)));
            }
        }
        records.push((node_name(i), words.join(" ")));
    }

    // edges: planted partition over shared-topic membership
    let mut rng = seeded_rng(config.seed, "datagen/edges");
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let shared = topics[u].iter().any(|t| topics[v].contains(t));
            let p = if shared { config.intra_p } else { config.inter_p };
            if rng.gen_bool(p) {
                edges.push((node_name(u), node_name(v)));
            }
        }
    }

    Ok(GeneratedData {
        records,
        edges,
        truth: GroundTruth { topics },
    })
}

/// Generate a graph and its ground truth in one call. The graph is built
/// through the same constructor the file loader uses, so writing the records
/// to disk and reloading them reproduces it exactly.
pub fn generate_graph(config: &GenConfig, max_len: usize) -> Result<(TextGraph, GroundTruth)> {
    let data = generate_records(config)?;
    let graph = TextGraph::from_records(&data.records, &data.edges, max_len)?;
    Ok((graph, data.truth))
}

/// Ground-truth usefulness of a neighbor inside a (positive-pair) task:
/// true iff the neighbor shares a topic with the matching counterpart.
pub fn usefulness_oracle(
    gt: &GroundTruth,
    task: &MatchTask,
    side: crate::supervision::Side,
    neighbor: NodeId,
) -> Result<bool> {
    use crate::supervision::Side;
    let (list, counterpart) = match side {
        Side::Query => (&task.query_neighbors, task.positive_key),
        Side::Key => (&task.positive_neighbors, task.query),
    };
    if !list.neighbors.contains(&neighbor) {
        return Err(CdsmError::Lookup(format!(
            "neighbor {} not in the {:?}-side list of task ({}, {})",
            neighbor, side, task.query, task.positive_key
        )));
    }
    gt.shares_topic(neighbor, counterpart)
}

/// A hub node together with two neighbors and two counterparts witnessing
/// counterpart-conditional usefulness: neighbor `n_a` is useful only for
/// counterpart `cp_a`, and `n_b` only for `cp_b`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalPair {
    pub hub: NodeId,
    pub n_a: NodeId,
    pub n_b: NodeId,
    pub cp_a: NodeId,
    pub cp_b: NodeId,
}

/// Find a conditional-usefulness witness on a generated graph.
pub fn find_conditional_pair(graph: &TextGraph, gt: &GroundTruth) -> Option<ConditionalPair> {
    for hub in graph.nodes() {
        let ht = gt.topics_of(hub).ok()?;
        if ht.len() < 2 {
            continue;
        }
        let (ta, tb) = (ht[0], ht[1]);
        let only = |n: NodeId, want: u16, not: u16| -> bool {
            let t = gt.topics_of(n).unwrap();
            t.contains(&want) && !t.contains(&not)
        };
        let neigh = graph.neighbors(hub);
        let n_a = neigh.iter().copied().find(|&n| only(n, ta, tb));
        let n_b = neigh.iter().copied().find(|&n| only(n, tb, ta));
        let (Some(n_a), Some(n_b)) = (n_a, n_b) else {
            continue;
        };
        // counterparts: any single-topic nodes of the two topics
        let cp_a = graph
            .nodes()
            .find(|&c| c != hub && c != n_a && c != n_b && only(c, ta, tb));
        let cp_b = graph
            .nodes()
            .find(|&c| c != hub && c != n_a && c != n_b && only(c, tb, ta));
        if let (Some(cp_a), Some(cp_b)) = (cp_a, cp_b) {
            return Some(ConditionalPair {
                hub,
                n_a,
                n_b,
                cp_a,
                cp_b,
            });
        }
    }
    None
}

/// Assign every edge a split by hashing-free sequential shuffle:
/// deterministic fractions of train/valid/test.
pub fn assign_splits(
    edges: &[(String, String)],
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Vec<(String, String, Split)> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    let mut rng = seeded_rng(seed, "datagen/splits");
    order.shuffle(&mut rng);
    let n = edges.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    let mut out: Vec<(String, String, Split)> = Vec::with_capacity(n);
    for (pos, &e) in order.iter().enumerate() {
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        let (a, b) = &edges[e];
        // orientation: even positions query->key as stored, odd flipped
        if pos % 2 == 0 {
            out.push((a.clone(), b.clone(), split));
        } else {
            out.push((b.clone(), a.clone(), split));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    id: String,
    topics: Vec<u16>,
}

/// Write nodes.jsonl, edges.tsv, splits.jsonl and ground_truth.jsonl.
pub fn write_dataset(
    dir: &Path,
    data: &GeneratedData,
    splits: &[(String, String, Split)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CdsmError::io(dir.display().to_string(), e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        let mut f =
            std::fs::File::create(&path).map_err(|e| CdsmError::io(path.display().to_string(), e))?;
        f.write_all(content.as_bytes())
            .map_err(|e| CdsmError::io(path.display().to_string(), e))
    };

    let mut nodes = String::new();
    for (id, text) in &data.records {
        nodes.push_str(&serde_json::to_string(&serde_json::json!({"id": id, "text": text}))?);
        nodes.push('\n');
    }
    write("nodes.jsonl", nodes)?;

    let mut edges = String::new();
    for (a, b) in &data.edges {
        edges.push_str(&format!("{}\t{}\n", a, b));
    }
    write("edges.tsv", edges)?;

    let mut sp = String::new();
    for (q, k, s) in splits {
        sp.push_str(&serde_json::to_string(&crate::graphstore::SplitRecord {
            query: q.clone(),
            key: k.clone(),
            split: *s,
        })?);
        sp.push('\n');
    }
    write("splits.jsonl", sp)?;

    let mut gt = String::new();
    for (i, topics) in data.truth.topics.iter().enumerate() {
        gt.push_str(&serde_json::to_string(&TruthRecord {
            id: node_name(i),
            topics: topics.clone(),
        })?);
        gt.push('\n');
    }
    write("ground_truth.jsonl", gt)?;
    Ok(())
}

/// Read a ground-truth file written by [`write_dataset`], reindexed against
/// the given graph.
pub fn load_ground_truth(path: &Path, graph: &TextGraph) -> Result<GroundTruth> {
    let content =
        std::fs::read_to_string(path).map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    let mut topics = vec![Vec::new(); graph.num_nodes()];
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TruthRecord = serde_json::from_str(line).map_err(|e| CdsmError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let node = graph.resolve(&rec.id)?;
        topics[node as usize] = rec.topics;
    }
    if topics.iter().any(|t| t.is_empty()) {
        return Err(CdsmError::Integrity(
            "ground truth missing topics for some nodes".into(),
        ));
    }
    Ok(GroundTruth { topics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig {
            num_nodes: 300,
            num_topics: 6,
            intra_p: 0.15,
            inter_p: 0.004,
            seed: 42,
            ..GenConfig::default()
        }
    }

    #[test]
    fn node_count_matches_config() {
        let cfg = GenConfig {
            num_nodes: 200,
            ..small_config()
        };
        let (g, _) = generate_graph(&cfg, 32).unwrap();
        assert_eq!(g.num_nodes(), 200);
    }

    #[test]
    fn intra_edge_fraction_dominates() {
        let cfg = small_config();
        let (g, gt) = generate_graph(&cfg, 32).unwrap();
        let mut intra = 0usize;
        let mut inter = 0usize;
        for u in g.nodes() {
            for &v in g.neighbors(u) {
                if v <= u {
                    continue;
                }
                if gt.shares_topic(u, v).unwrap() {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        // the edge model draws shared-topic pairs ~40x more often, but there
        // are ~5x more cross-topic pairs; intra must still dominate clearly
        assert!(intra > 3 * inter, "intra={} inter={}", intra, inter);
    }

    #[test]
    fn zero_hub_fraction_keeps_neighborhoods_pure_up_to_noise() {
        let cfg = GenConfig {
            multi_topic_frac: 0.0,
            ..small_config()
        };
        let (g, gt) = generate_graph(&cfg, 32).unwrap();
        let mut mismatched = 0usize;
        let mut total = 0usize;
        for u in g.nodes() {
            for &v in g.neighbors(u) {
                if v <= u {
                    continue;
                }
                total += 1;
                if !gt.shares_topic(u, v).unwrap() {
                    mismatched += 1;
                }
            }
        }
        // expected cross-topic share = inter mass / total mass; allow 2x slack
        let n = cfg.num_nodes as f64;
        let same_pairs = n * (n / cfg.num_topics as f64 - 1.0) / 2.0;
        let cross_pairs = n * (n - 1.0) / 2.0 - same_pairs;
        let expected =
            cross_pairs * cfg.inter_p / (cross_pairs * cfg.inter_p + same_pairs * cfg.intra_p);
        let got = mismatched as f64 / total as f64;
        assert!(got < 2.0 * expected, "got {} expected ~{}", got, expected);
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small_config();
        let a = generate_records(&cfg).unwrap();
        let b = generate_records(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.truth.topics, b.truth.topics);
    }

    #[test]
    fn conditional_pair_exists_with_hubs() {
        let cfg = small_config();
        let (g, gt) = generate_graph(&cfg, 32).unwrap();
        let pair = find_conditional_pair(&g, &gt).expect("hub with cross-topic neighbors");
        assert!(gt.shares_topic(pair.n_a, pair.cp_a).unwrap());
        assert!(!gt.shares_topic(pair.n_a, pair.cp_b).unwrap());
        assert!(gt.shares_topic(pair.n_b, pair.cp_b).unwrap());
        assert!(!gt.shares_topic(pair.n_b, pair.cp_a).unwrap());
    }

    #[test]
    fn oracle_matches_topic_intersection() {
        use crate::graphstore::build_tasks;
        use crate::supervision::Side;
        let cfg = small_config();
        let (g, gt) = generate_graph(&cfg, 32).unwrap();
        // take any edge as a positive pair
        let q = g.nodes().find(|&u| g.degree(u) > 2).unwrap();
        let k = g.neighbors(q)[0];
        let tasks = build_tasks(&g, &[(q, k)], 5, 20, 1).unwrap();
        let t = &tasks[0];
        for &n in &t.query_neighbors.neighbors {
            let useful = usefulness_oracle(&gt, t, Side::Query, n).unwrap();
            assert_eq!(useful, gt.shares_topic(n, t.positive_key).unwrap());
        }
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let cfg = GenConfig {
            num_nodes: 120,
            ..small_config()
        };
        let data = generate_records(&cfg).unwrap();
        let splits = assign_splits(&data.edges, 0.7, 0.1, cfg.seed);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &splits).unwrap();
        let g = crate::graphstore::load_graph(
            &dir.path().join("nodes.jsonl"),
            &dir.path().join("edges.tsv"),
            32,
        )
        .unwrap();
        let (g2, gt) = generate_graph(&cfg, 32).unwrap();
        assert_eq!(g.num_nodes(), g2.num_nodes());
        for n in g.nodes() {
            assert_eq!(g.doc(n).unwrap(), g2.doc(n).unwrap());
            assert_eq!(g.neighbors(n), g2.neighbors(n));
        }
        let loaded_gt = load_ground_truth(&dir.path().join("ground_truth.jsonl"), &g).unwrap();
        assert_eq!(loaded_gt.topics, gt.topics);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GenConfig {
            intra_p: 0.01,
            inter_p: 0.5,
            ..GenConfig::default()
        };
        assert!(generate_records(&cfg).is_err());
    }
}
