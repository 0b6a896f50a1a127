//! Graphs, virtual-node augmentation and the structure matrices injected into
//! the fine-tuning blocks.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Node-labeled undirected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub id: String,
    num_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    pub node_features: Vec<usize>,
    pub label: f64,
    has_virtual: bool,
}

impl Graph {
    /// Builds a graph, normalizing each edge to `(min, max)`; duplicates
    /// collapse. Self-loops and out-of-range endpoints are rejected.
    pub fn new(
        id: impl Into<String>,
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_features: Vec<usize>,
        label: f64,
    ) -> Result<Self> {
        let id = id.into();
        if num_nodes == 0 {
            bail!(Data, "graph '{id}' has no nodes");
        }
        if node_features.len() != num_nodes {
            bail!(
                Data,
                "graph '{id}' has {num_nodes} nodes but {} features",
                node_features.len()
            );
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                bail!(Data, "graph '{id}': edge ({i},{j}) out of range for {num_nodes} nodes");
            }
            if i == j {
                bail!(Data, "graph '{id}': self-loop at node {i}");
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Graph {
            id,
            num_nodes,
            edges: set,
            node_features,
            label,
            has_virtual: false,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn has_virtual_node(&self) -> bool {
        self.has_virtual
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors().iter().map(Vec::len).collect()
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.neighbors();
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Prepends a virtual node (index 0) joined to every original node, which are
/// shifted by one. The virtual node carries `virtual_feature`.
pub fn add_virtual_node(g: &Graph, virtual_feature: usize) -> Result<Graph> {
    if g.has_virtual {
        bail!(Contract, "graph '{}' already has a virtual node", g.id);
    }
    let n = g.num_nodes;
    let mut edges: BTreeSet<(usize, usize)> = g.edges.iter().map(|&(i, j)| (i + 1, j + 1)).collect();
    edges.extend((1..=n).map(|v| (0, v)));
    let mut features = Vec::with_capacity(n + 1);
    features.push(virtual_feature);
    features.extend_from_slice(&g.node_features);
    Ok(Graph {
        id: g.id.clone(),
        num_nodes: n + 1,
        edges,
        node_features: features,
        label: g.label,
        has_virtual: true,
    })
}

/// Value written for pairs in different components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unreachable {
    #[default]
    Zero,
    NumNodes,
}

/// BFS from every node. Unreachable pairs get the sentinel.
pub fn all_pairs_shortest_paths(g: &Graph, sentinel: Unreachable) -> Vec<Vec<usize>> {
    let n = g.num_nodes;
    let fill = match sentinel {
        Unreachable::Zero => 0,
        Unreachable::NumNodes => n,
    };
    let adj = g.neighbors();
    let mut dist = vec![vec![fill; n]; n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let mut seen = vec![false; n];
        seen[src] = true;
        dist[src][src] = 0;
        queue.push_back((src, 0usize));
        while let Some((u, d)) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    dist[src][v] = d + 1;
                    queue.push_back((v, d + 1));
                }
            }
        }
    }
    dist
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StructureKind {
    /// Adjacency with self-connections, `A + I`.
    S1,
    /// Symmetric degree normalization of `S1`.
    S2,
    /// Shortest-path distances.
    S3,
    /// `alpha·S2 + beta·S3`.
    S4,
}

impl std::fmt::Display for StructureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for StructureKind {
    type Err = crate::error::LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(StructureKind::S1),
            "S2" | "s2" => Ok(StructureKind::S2),
            "S3" | "s3" => Ok(StructureKind::S3),
            "S4" | "s4" => Ok(StructureKind::S4),
            other => bail!(Config, "unknown structure kind '{other}'"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureMatrix {
    pub kind: StructureKind,
    pub matrix: Tensor,
    /// Mixing weights, present only for S4.
    pub mix: Option<(f64, f64)>,
}

impl StructureMatrix {
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }
}

fn self_looped_adjacency(g: &Graph) -> Tensor {
    let n = g.num_nodes;
    let mut a = Tensor::eye(n);
    for (i, j) in g.edges() {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    a
}

fn normalized_adjacency(g: &Graph) -> Tensor {
    let mut a = self_looped_adjacency(g);
    let n = g.num_nodes;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            a.set(i, j, v);
        }
    }
    a
}

fn distance_matrix(g: &Graph, sentinel: Unreachable) -> Tensor {
    let n = g.num_nodes;
    let dist = all_pairs_shortest_paths(g, sentinel);
    let data = dist.into_iter().flatten().map(|d| d as f64).collect();
    Tensor::new(vec![n, n], data).expect("square distance matrix")
}

/// Builds one of S1–S4. `mix = (alpha, beta)` is required for S4 and
/// rejected otherwise.
pub fn build_structure(
    g: &Graph,
    kind: StructureKind,
    mix: Option<(f64, f64)>,
    sentinel: Unreachable,
) -> Result<StructureMatrix> {
    let matrix = match (kind, mix) {
        (StructureKind::S4, None) => bail!(Config, "S4 needs alpha and beta"),
        (StructureKind::S4, Some((alpha, beta))) => {
            let norm = normalized_adjacency(g);
            let dist = distance_matrix(g, sentinel);
            let data = norm
                .data()
                .iter()
                .zip(dist.data())
                .map(|(s, d)| alpha * s + beta * d)
                .collect();
            Tensor::new(norm.shape().to_vec(), data)?
        }
        (other, Some(_)) => bail!(Config, "alpha/beta only apply to S4, got them for {other}"),
        (StructureKind::S1, None) => self_looped_adjacency(g),
        (StructureKind::S2, None) => normalized_adjacency(g),
        (StructureKind::S3, None) => distance_matrix(g, sentinel),
    };
    Ok(StructureMatrix { kind, matrix, mix })
}

/// Zero-padded stack of structure matrices with a real-node mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub size: usize,
    /// One `size × size` matrix per graph.
    pub matrices: Vec<Tensor>,
    /// `mask[b][i]` is true for real nodes.
    pub mask: Vec<Vec<bool>>,
}

pub fn pad_matrix(m: &Tensor, size: usize) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    if r > size || c > size {
        bail!(Batching, "matrix {r}x{c} does not fit in {size}x{size}");
    }
    let mut out = Tensor::zeros(&[size, size]);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, m.get(i, j));
        }
    }
    Ok(out)
}

pub fn pad_batch(structures: &[StructureMatrix], size: usize) -> Result<PaddedBatch> {
    let mut matrices = Vec::with_capacity(structures.len());
    let mut mask = Vec::with_capacity(structures.len());
    for s in structures {
        let m = s.size();
        if m > size {
            bail!(Batching, "structure of size {m} exceeds batch size {size}");
        }
        matrices.push(pad_matrix(&s.matrix, size)?);
        mask.push((0..size).map(|i| i < m).collect());
    }
    Ok(PaddedBatch {
        size,
        matrices,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new("g", n, edges.iter().copied(), vec![0; n], 0.0).unwrap()
    }

    fn triangle() -> Graph {
        graph(3, &[(0, 1), (1, 2), (0, 2)])
    }

    #[test]
    fn virtual_node_on_single_node() {
        let v = add_virtual_node(&graph(1, &[]), 7).unwrap();
        assert_eq!(v.num_nodes(), 2);
        assert_eq!(v.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(v.node_features, vec![7, 0]);
    }

    #[test]
    fn virtual_node_on_triangle() {
        let v = add_virtual_node(&triangle(), 9).unwrap();
        assert_eq!(v.num_nodes(), 4);
        assert_eq!(v.num_edges(), 6);
        assert_eq!(v.degrees()[0], 3);
        for (i, j) in triangle().edges() {
            assert!(v.has_edge(i + 1, j + 1));
        }
        assert!(add_virtual_node(&v, 9).is_err());
    }

    #[test]
    fn shortest_paths_small_cases() {
        let d = all_pairs_shortest_paths(&triangle(), Unreachable::Zero);
        for (i, row) in d.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, usize::from(i != j));
            }
        }
        let path = graph(3, &[(0, 1), (1, 2)]);
        assert_eq!(all_pairs_shortest_paths(&path, Unreachable::Zero)[0][2], 2);
        let apart = graph(2, &[]);
        assert_eq!(all_pairs_shortest_paths(&apart, Unreachable::Zero)[0][1], 0);
        assert_eq!(all_pairs_shortest_paths(&apart, Unreachable::NumNodes)[0][1], 2);
    }

    #[test]
    fn single_node_structures() {
        let g = graph(1, &[]);
        for kind in [StructureKind::S1, StructureKind::S2] {
            let s = build_structure(&g, kind, None, Unreachable::Zero).unwrap();
            assert_eq!(s.matrix.data(), &[1.0]);
        }
    }

    #[test]
    fn two_node_normalization() {
        let s = build_structure(&graph(2, &[(0, 1)]), StructureKind::S2, None, Unreachable::Zero).unwrap();
        for v in s.matrix.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn s4_requires_mix_and_composes() {
        let g = triangle();
        assert!(matches!(
            build_structure(&g, StructureKind::S4, None, Unreachable::Zero),
            Err(crate::error::LabError::Config(_))
        ));
        assert!(build_structure(&g, StructureKind::S1, Some((1.0, 1.0)), Unreachable::Zero).is_err());
        let s4 = build_structure(&g, StructureKind::S4, Some((1.0, 1.0)), Unreachable::Zero).unwrap();
        let s2 = build_structure(&g, StructureKind::S2, None, Unreachable::Zero).unwrap();
        let s3 = build_structure(&g, StructureKind::S3, None, Unreachable::Zero).unwrap();
        for i in 0..9 {
            assert_eq!(s4.matrix.data()[i], s2.matrix.data()[i] + s3.matrix.data()[i]);
        }
    }

    #[test]
    fn s1_row_sums_are_degree_plus_one() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (1, 3), (3, 4)]);
        let s = build_structure(&g, StructureKind::S1, None, Unreachable::Zero).unwrap();
        for (i, deg) in g.degrees().into_iter().enumerate() {
            assert_eq!(s.matrix.row(i).iter().sum::<f64>(), (deg + 1) as f64);
        }
    }

    #[test]
    fn padding_fills_zeros_and_masks() {
        let s = build_structure(&triangle(), StructureKind::S1, None, Unreachable::Zero).unwrap();
        let same = pad_batch(std::slice::from_ref(&s), 3).unwrap();
        assert_eq!(same.matrices[0], s.matrix);
        assert_eq!(same.mask[0], vec![true; 3]);
        let padded = pad_batch(std::slice::from_ref(&s), 5).unwrap();
        let m = &padded.matrices[0];
        for i in 0..5 {
            for j in 0..5 {
                if i >= 3 || j >= 3 {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
        assert_eq!(padded.mask[0], vec![true, true, true, false, false]);
        assert!(matches!(
            pad_batch(&[s], 2),
            Err(crate::error::LabError::Batching(_))
        ));
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(Graph::new("x", 2, [(0, 0)], vec![0, 0], 0.0).is_err());
        assert!(Graph::new("x", 2, [(0, 2)], vec![0, 0], 0.0).is_err());
        let g = Graph::new("x", 2, [(1, 0), (0, 1)], vec![0, 0], 0.0).unwrap();
        assert_eq!(g.num_edges(), 1);
    }
}
