//! The textual graph: token-indexed documents over an undirected adjacency,
//! neighbor sampling, and ranking-task construction.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdsmError, Result};
use crate::numerics::seeded_rng;

/// Dense node index, assigned in nodes-file order.
pub type NodeId = u32;

/// Dataset split for positive edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One node's text as vocabulary indices, truncated to the load-time cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: NodeId,
    pub tokens: Vec<u32>,
}

/// A neighbor list sampled for one node: distinct ids, never the owner,
/// length at most the cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub owner: NodeId,
    pub neighbors: Vec<NodeId>,
}

impl NeighborList {
    pub fn empty(owner: NodeId) -> Self {
        NeighborList {
            owner,
            neighbors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// One ranking task: a query, its positive key, sampled negative keys, and
/// capped neighbor lists for every document involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTask {
    pub query: NodeId,
    pub positive_key: NodeId,
    pub negative_keys: Vec<NodeId>,
    pub query_neighbors: NeighborList,
    pub positive_neighbors: NeighborList,
    pub negative_neighbors: Vec<NeighborList>,
}

impl MatchTask {
    /// Candidate keys in ranking order: positive first, then negatives.
    pub fn candidates(&self) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::once(self.positive_key).chain(self.negative_keys.iter().copied())
    }

    pub fn num_candidates(&self) -> usize {
        1 + self.negative_keys.len()
    }

    pub fn candidate_neighbors(&self, idx: usize) -> &NeighborList {
        if idx == 0 {
            &self.positive_neighbors
        } else {
            &self.negative_neighbors[idx - 1]
        }
    }
}

/// Immutable textual graph: documents, symmetric adjacency, vocabulary.
#[derive(Debug, Clone)]
pub struct TextGraph {
    ids: Vec<String>,
    index: HashMap<String, NodeId>,
    docs: Vec<Document>,
    adj: Vec<Vec<NodeId>>,
    vocab: Vec<String>,
}

impl TextGraph {
    /// Build from (id, text) records and undirected edges given as external
    /// id pairs. The vocabulary is assigned by first appearance, documents
    /// are whitespace-tokenized and truncated to `max_len` tokens.
    pub fn from_records(
        records: &[(String, String)],
        edges: &[(String, String)],
        max_len: usize,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        let mut vocab: Vec<String> = Vec::new();
        let mut vocab_index: HashMap<String, u32> = HashMap::new();
        let mut docs = Vec::with_capacity(records.len());

        for (pos, (id, text)) in records.iter().enumerate() {
            if index.contains_key(id) {
                return Err(CdsmError::Integrity(format!("duplicate node id `{}`", id)));
            }
            let node = pos as NodeId;
            let mut tokens = Vec::new();
            for word in text.split_whitespace().take(max_len) {
                let tok = match vocab_index.get(word) {
                    Some(&t) => t,
                    None => {
                        let t = vocab.len() as u32;
                        vocab.push(word.to_string());
                        vocab_index.insert(word.to_string(), t);
                        t
                    }
                };
                tokens.push(tok);
            }
            if tokens.is_empty() {
                return Err(CdsmError::Integrity(format!(
                    "node `{}` has no tokens after truncation",
                    id
                )));
            }
            index.insert(id.clone(), node);
            ids.push(id.clone());
            docs.push(Document { id: node, tokens });
        }

        let mut adj: Vec<HashSet<NodeId>> = vec![HashSet::new(); records.len()];
        for (a, b) in edges {
            let &u = index
                .get(a)
                .ok_or_else(|| CdsmError::Integrity(format!("edge endpoint `{}` unknown", a)))?;
            let &v = index
                .get(b)
                .ok_or_else(|| CdsmError::Integrity(format!("edge endpoint `{}` unknown", b)))?;
            if u == v {
                return Err(CdsmError::Integrity(format!("self-loop on `{}`", a)));
            }
            adj[u as usize].insert(v);
            adj[v as usize].insert(u);
        }
        let adj = adj
            .into_iter()
            .map(|s| {
                let mut v: Vec<NodeId> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .collect();

        Ok(TextGraph {
            ids,
            index,
            docs,
            adj,
            vocab,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.docs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn doc(&self, node: NodeId) -> Result<&Document> {
        self.docs
            .get(node as usize)
            .ok_or_else(|| CdsmError::Lookup(format!("node {} out of range", node)))
    }

    pub fn external_id(&self, node: NodeId) -> &str {
        &self.ids[node as usize]
    }

    pub fn resolve(&self, id: &str) -> Result<NodeId> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| CdsmError::Lookup(format!("unknown node id `{}`", id)))
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.adj[node as usize]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adj[node as usize].len()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.adj[u as usize].binary_search(&v).is_ok()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        0..self.num_nodes() as NodeId
    }

    /// Sorted union of 1-hop and 2-hop neighbors, excluding `node` itself
    /// and any id in `exclude`.
    pub fn two_hop_pool(&self, node: NodeId, exclude: &[NodeId]) -> Vec<NodeId> {
        let mut pool: HashSet<NodeId> = HashSet::new();
        for &n in self.neighbors(node) {
            pool.insert(n);
            for &m in self.neighbors(n) {
                pool.insert(m);
            }
        }
        pool.remove(&node);
        for e in exclude {
            pool.remove(e);
        }
        let mut v: Vec<NodeId> = pool.into_iter().collect();
        v.sort_unstable();
        v
    }
}

/// Uniform sample without replacement from the 1/2-hop pool of `node`.
/// Deterministic for a fixed (graph, node, cap, seed). An isolated node
/// yields an empty list.
pub fn sample_neighbors(graph: &TextGraph, node: NodeId, cap: usize, seed: u64) -> NeighborList {
    sample_neighbors_excluding(graph, node, &[], cap, seed)
}

/// As [`sample_neighbors`], with ids in `exclude` removed from the pool
/// before sampling (used to hide the evaluated positive edge).
pub fn sample_neighbors_excluding(
    graph: &TextGraph,
    node: NodeId,
    exclude: &[NodeId],
    cap: usize,
    seed: u64,
) -> NeighborList {
    let mut pool = graph.two_hop_pool(node, exclude);
    let label = format!("neighbors/{}", node);
    let mut rng = seeded_rng(seed, &label);
    if pool.len() <= cap {
        pool.shuffle(&mut rng);
        return NeighborList {
            owner: node,
            neighbors: pool,
        };
    }
    let (sampled, _) = pool.partial_shuffle(&mut rng, cap);
    NeighborList {
        owner: node,
        neighbors: sampled.to_vec(),
    }
}

/// Build one [`MatchTask`] per positive edge. Negatives are sampled
/// uniformly from nodes not adjacent to the query; the positive edge is
/// hidden from both endpoints' neighbor lists.
pub fn build_tasks(
    graph: &TextGraph,
    positive_edges: &[(NodeId, NodeId)],
    num_negatives: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<MatchTask>> {
    let mut tasks = Vec::with_capacity(positive_edges.len());
    for (task_idx, &(query, key)) in positive_edges.iter().enumerate() {
        if !graph.has_edge(query, key) {
            return Err(CdsmError::Integrity(format!(
                "positive edge ({}, {}) not present in graph",
                graph.external_id(query),
                graph.external_id(key)
            )));
        }
        let task_seed = seed.wrapping_add(task_idx as u64).wrapping_mul(0x9e3779b97f4a7c15);

        let mut rng = seeded_rng(task_seed, "negatives");
        let adjacent: HashSet<NodeId> = graph.neighbors(query).iter().copied().collect();
        let mut negatives = Vec::with_capacity(num_negatives);
        let mut taken: HashSet<NodeId> = HashSet::new();
        let n = graph.num_nodes() as NodeId;
        let eligible = (0..n)
            .filter(|c| *c != query && *c != key && !adjacent.contains(c))
            .count();
        if eligible < num_negatives {
            return Err(CdsmError::Integrity(format!(
                "query `{}` has only {} eligible negatives, {} requested",
                graph.external_id(query),
                eligible,
                num_negatives
            )));
        }
        while negatives.len() < num_negatives {
            let c: NodeId = rng.gen_range(0..n);
            if c == query || c == key || adjacent.contains(&c) || taken.contains(&c) {
                continue;
            }
            taken.insert(c);
            negatives.push(c);
        }

        let query_neighbors =
            sample_neighbors_excluding(graph, query, &[key], cap, task_seed);
        let positive_neighbors =
            sample_neighbors_excluding(graph, key, &[query], cap, task_seed);
        let negative_neighbors = negatives
            .iter()
            .map(|&neg| sample_neighbors_excluding(graph, neg, &[], cap, task_seed))
            .collect();

        tasks.push(MatchTask {
            query,
            positive_key: key,
            negative_keys: negatives,
            query_neighbors,
            positive_neighbors,
            negative_neighbors,
        });
    }
    Ok(tasks)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub query: String,
    pub key: String,
    pub split: Split,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let f = std::fs::File::open(path).map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    Ok(BufReader::new(f).lines())
}

/// Load and validate a graph from a JSON-lines nodes file and a TSV edges
/// file; token sequences are truncated to `max_len`.
pub fn load_graph(nodes_path: &Path, edges_path: &Path, max_len: usize) -> Result<TextGraph> {
    let mut records = Vec::new();
    for (lineno, line) in open_lines(nodes_path)?.enumerate() {
        let line = line.map_err(|e| CdsmError::io(nodes_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord = serde_json::from_str(&line).map_err(|e| CdsmError::Parse {
            path: nodes_path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push((rec.id, rec.text));
    }

    let mut edges = Vec::new();
    for (lineno, line) in open_lines(edges_path)?.enumerate() {
        let line = line.map_err(|e| CdsmError::io(edges_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a.to_string(), b.to_string()),
            _ => {
                return Err(CdsmError::Parse {
                    path: edges_path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected exactly two tab-separated node ids".into(),
                })
            }
        };
        edges.push((a, b));
    }

    TextGraph::from_records(&records, &edges, max_len)
}

/// Read the positive-edge split assignments.
pub fn load_splits(path: &Path) -> Result<Vec<SplitRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| CdsmError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SplitRecord = serde_json::from_str(&line).map_err(|e| CdsmError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Resolve split records of one split into node-id pairs, in file order.
pub fn edges_for_split(
    graph: &TextGraph,
    records: &[SplitRecord],
    split: Split,
) -> Result<Vec<(NodeId, NodeId)>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| Ok((graph.resolve(&r.query)?, graph.resolve(&r.key)?)))
        .collect()
}

/// Write the vocabulary, one token per line, index order implicit.
pub fn write_vocab(path: &Path, graph: &TextGraph) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    for tok in graph.vocab() {
        writeln!(f, "{}", tok).map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph() -> TextGraph {
        let records = vec![
            ("a".to_string(), "alpha beta".to_string()),
            ("b".to_string(), "beta gamma".to_string()),
            ("c".to_string(), "gamma delta".to_string()),
        ];
        let edges = vec![
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "c".to_string()),
        ];
        TextGraph::from_records(&records, &edges, 32).unwrap()
    }

    #[test]
    fn adjacency_is_symmetric() {
        let g = tiny_graph();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1]);
        for u in g.nodes() {
            for &v in g.neighbors(u) {
                assert!(g.has_edge(v, u));
            }
        }
    }

    #[test]
    fn dangling_edge_is_integrity_error() {
        let records = vec![("a".to_string(), "x".to_string())];
        let edges = vec![("a".to_string(), "zz".to_string())];
        let err = TextGraph::from_records(&records, &edges, 8).unwrap_err();
        assert!(matches!(err, CdsmError::Integrity(_)));
    }

    #[test]
    fn truncation_keeps_prefix() {
        let long = (0..50).map(|i| format!("w{}", i)).collect::<Vec<_>>().join(" ");
        let records = vec![("a".to_string(), long)];
        let g = TextGraph::from_records(&records, &[], 32).unwrap();
        let doc = g.doc(0).unwrap();
        assert_eq!(doc.tokens.len(), 32);
        assert_eq!(g.vocab()[doc.tokens[0] as usize], "w0");
        assert_eq!(g.vocab()[doc.tokens[31] as usize], "w31");
    }

    #[test]
    fn empty_text_rejected() {
        let records = vec![("a".to_string(), "   ".to_string())];
        assert!(TextGraph::from_records(&records, &[], 8).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_capped() {
        let g = tiny_graph();
        // node b: 1-hop {a, c}, 2-hop adds b's neighbors' neighbors = {b} (excluded)
        let s1 = sample_neighbors(&g, 1, 50, 7);
        let s2 = sample_neighbors(&g, 1, 50, 7);
        assert_eq!(s1, s2);
        let mut got = s1.neighbors.clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 2]);

        let s3 = sample_neighbors(&g, 1, 1, 7);
        assert_eq!(s3.len(), 1);
    }

    #[test]
    fn two_hop_pool_reaches_second_order() {
        let g = tiny_graph();
        // node a: 1-hop {b}, 2-hop {c}
        let pool = g.two_hop_pool(0, &[]);
        assert_eq!(pool, vec![1, 2]);
    }

    #[test]
    fn isolated_node_gets_empty_list() {
        let records = vec![
            ("a".to_string(), "x".to_string()),
            ("b".to_string(), "y".to_string()),
        ];
        let g = TextGraph::from_records(&records, &[], 8).unwrap();
        assert!(sample_neighbors(&g, 0, 50, 1).is_empty());
    }

    fn chain_graph(n: usize) -> TextGraph {
        let records: Vec<(String, String)> = (0..n)
            .map(|i| (format!("n{}", i), format!("tok{} tok{}", i, (i + 1) % n)))
            .collect();
        let edges: Vec<(String, String)> = (0..n - 1)
            .map(|i| (format!("n{}", i), format!("n{}", i + 1)))
            .collect();
        TextGraph::from_records(&records, &edges, 8).unwrap()
    }

    #[test]
    fn tasks_exclude_positive_edge_from_neighbor_lists() {
        let g = chain_graph(40);
        let tasks = build_tasks(&g, &[(5, 6)], 10, 50, 3).unwrap();
        let t = &tasks[0];
        assert_eq!(t.num_candidates(), 11);
        assert!(!t.query_neighbors.neighbors.contains(&t.positive_key));
        assert!(!t.positive_neighbors.neighbors.contains(&t.query));
        for &neg in &t.negative_keys {
            assert!(!g.has_edge(t.query, neg));
            assert_ne!(neg, t.query);
            assert_ne!(neg, t.positive_key);
        }
    }

    #[test]
    fn tasks_are_deterministic() {
        let g = chain_graph(40);
        let a = build_tasks(&g, &[(5, 6), (10, 11)], 5, 50, 9).unwrap();
        let b = build_tasks(&g, &[(5, 6), (10, 11)], 5, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = build_tasks(&g, &[(5, 6), (10, 11)], 5, 50, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_negatives_names_the_query() {
        let g = tiny_graph();
        let err = build_tasks(&g, &[(0, 1)], 5, 50, 1).unwrap_err();
        assert!(err.to_string().contains('a'));
    }

    #[test]
    fn neighbor_lists_stay_within_two_hops() {
        let g = chain_graph(40);
        let tasks = build_tasks(&g, &[(20, 21)], 3, 50, 4).unwrap();
        let t = &tasks[0];
        let pool = g.two_hop_pool(t.query, &[t.positive_key]);
        for n in &t.query_neighbors.neighbors {
            assert!(pool.contains(n));
        }
    }
}
