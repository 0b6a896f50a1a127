//! Synthetic structure-labeled graph datasets, JSON-lines storage and
//! stratified splitting.
//!
//! Downstream tasks draw node features uniformly at random, independent of
//! the label, so only the topology carries signal.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, LabError, Result};
use crate::graph::{all_pairs_shortest_paths, Graph, Unreachable};
use crate::model::TaskKind;
use crate::tensor::{derive_seed, seeded_rng, LabRng};

/// Smallest and largest graph sizes a generator accepts.
pub const MIN_NODES: usize = 4;
pub const MAX_NODES: usize = 24;

const MAX_ATTEMPTS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Label 1 iff the graph contains a 3-cycle.
    TriangleClf,
    /// Label 1 iff the diameter is at most the threshold.
    DiameterClf,
    /// Label is the mean shortest-path length over unordered node pairs.
    MeanpathReg,
    /// Unlabeled corpus for masked-node pretraining; features follow degree.
    DegreeCorpus,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::TriangleClf,
        DatasetKind::DiameterClf,
        DatasetKind::MeanpathReg,
        DatasetKind::DegreeCorpus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TriangleClf => "triangle_clf",
            DatasetKind::DiameterClf => "diameter_clf",
            DatasetKind::MeanpathReg => "meanpath_reg",
            DatasetKind::DegreeCorpus => "degree_corpus",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            DatasetKind::MeanpathReg => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown dataset kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub kind: DatasetKind,
    pub count: usize,
    pub n_range: (usize, usize),
    pub seed: u64,
    /// Node features are drawn from `0..vocab`.
    pub vocab: usize,
    pub diameter_threshold: usize,
    /// Fraction of corpus features replaced by noise.
    pub feature_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kind: DatasetKind::TriangleClf,
            count: 100,
            n_range: (8, 16),
            seed: 0,
            vocab: 16,
            diameter_threshold: 4,
            feature_noise: 0.2,
        }
    }
}

/// A task-homogeneous list of graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub graphs: Vec<Graph>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<usize>,
    label: f64,
    task: TaskKind,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for g in &self.graphs {
            let rec = Record {
                id: g.id.clone(),
                num_nodes: g.num_nodes(),
                edges: g.edges().map(|(i, j)| [i, j]).collect(),
                node_features: g.node_features.clone(),
                label: g.label,
                task: self.task,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON lines; blank lines are skipped. All records must share a
    /// task and have distinct ids.
    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut task = None;
        let mut graphs = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| LabError::Data(format!("line {}: {e}", lineno + 1)))?;
            if !seen.insert(rec.id.clone()) {
                bail!(Data, "duplicate graph id '{}'", rec.id);
            }
            match task {
                None => task = Some(rec.task),
                Some(t) if t != rec.task => bail!(Data, "graph '{}' mixes task kinds", rec.id),
                _ => {}
            }
            let edges = rec.edges.iter().map(|e| (e[0], e[1]));
            graphs.push(Graph::new(rec.id, rec.num_nodes, edges, rec.node_features, rec.label)?);
        }
        let Some(task) = task else {
            bail!(Data, "dataset has no records");
        };
        Ok(Dataset { task, graphs })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Writes JSON lines, creating missing parent directories.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        std::fs::write(path, self.to_jsonl()?).map_err(|e| LabError::io(path, e))
    }
}

pub fn has_triangle(g: &Graph) -> bool {
    let adj = g.neighbors();
    g.edges()
        .any(|(i, j)| adj[i].iter().any(|k| *k != j && adj[j].contains(k)))
}

/// Longest shortest path; `None` for disconnected graphs.
pub fn diameter(g: &Graph) -> Option<usize> {
    if !g.is_connected() {
        return None;
    }
    let d = all_pairs_shortest_paths(g, Unreachable::Zero);
    d.iter().flatten().copied().max()
}

/// Mean distance over unordered pairs; `None` when disconnected or n < 2.
pub fn mean_path_length(g: &Graph) -> Option<f64> {
    let n = g.num_nodes();
    if n < 2 || !g.is_connected() {
        return None;
    }
    let d = all_pairs_shortest_paths(g, Unreachable::Zero);
    let sum: usize = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d[i][j]).sum();
    Some(sum as f64 / (n * (n - 1) / 2) as f64)
}

/// Label of `g` under `kind`, from its structure alone.
pub fn structural_label(kind: DatasetKind, g: &Graph, diameter_threshold: usize) -> Result<f64> {
    let need = |v: Option<f64>| v.ok_or_else(|| LabError::Data(format!("graph '{}' is disconnected", g.id)));
    Ok(match kind {
        DatasetKind::TriangleClf => f64::from(u8::from(has_triangle(g))),
        DatasetKind::DiameterClf => need(diameter(g).map(|d| f64::from(u8::from(d <= diameter_threshold))))?,
        DatasetKind::MeanpathReg => need(mean_path_length(g))?,
        DatasetKind::DegreeCorpus => 0.0,
    })
}

/// Random labeled tree plus `extra` distinct chords. Always connected.
fn random_connected_edges(n: usize, extra: usize, rng: &mut LabRng) -> Vec<(usize, usize)> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut edges: HashSet<(usize, usize)> = HashSet::new();
    for i in 1..n {
        let j = rng.gen_range(0..i);
        let (a, b) = (perm[i], perm[j]);
        edges.insert((a.min(b), a.max(b)));
    }
    let max_edges = n * (n - 1) / 2;
    let target = (n - 1 + extra).min(max_edges);
    while edges.len() < target {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut out: Vec<(usize, usize)> = edges.into_iter().collect();
    out.sort_unstable();
    out
}

/// Chords added on top of the spanning tree: `0..=n`, so edge density
/// varies widely across a dataset.
fn sample_shape(cfg: &GenConfig, rng: &mut LabRng) -> (usize, usize) {
    let n = rng.gen_range(cfg.n_range.0..=cfg.n_range.1);
    let k = rng.gen_range(0..=n);
    (n, k)
}

fn noise_features(n: usize, vocab: usize, rng: &mut LabRng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Rejection sampling into per-class quotas of `count / 2` and the rest.
fn sample_balanced(cfg: &GenConfig, rng: &mut LabRng) -> Result<Vec<(usize, Vec<(usize, usize)>)>> {
    let mut quota = [cfg.count - cfg.count / 2, cfg.count / 2];
    let mut out = Vec::with_capacity(cfg.count);
    let budget = MAX_ATTEMPTS.max(200 * cfg.count);
    for _ in 0..budget {
        if out.len() == cfg.count {
            return Ok(out);
        }
        let (n, k) = sample_shape(cfg, rng);
        let edges = random_connected_edges(n, k, rng);
        let g = Graph::new("", n, edges.iter().copied(), vec![0; n], 0.0)?;
        let class = structural_label(cfg.kind, &g, cfg.diameter_threshold)? as usize;
        if quota[class] > 0 {
            quota[class] -= 1;
            out.push((n, edges));
        }
    }
    if out.len() == cfg.count {
        return Ok(out);
    }
    bail!(
        Generation,
        "could not balance {} classes after {budget} attempts (n in {:?}, still missing {:?})",
        cfg.kind,
        cfg.n_range,
        quota
    )
}

fn degree_features(g: &Graph, cfg: &GenConfig, rng: &mut LabRng) -> Vec<usize> {
    g.degrees()
        .into_iter()
        .map(|d| {
            if rng.gen_bool(cfg.feature_noise) {
                rng.gen_range(0..cfg.vocab)
            } else {
                d.min(cfg.vocab - 1)
            }
        })
        .collect()
}

/// Generates a dataset. Deterministic in the config.
pub fn gen_data(cfg: &GenConfig) -> Result<Dataset> {
    let (lo, hi) = cfg.n_range;
    if lo < MIN_NODES || hi > MAX_NODES || lo > hi {
        bail!(Config, "n_range {:?} must lie within [{MIN_NODES}, {MAX_NODES}]", cfg.n_range);
    }
    if cfg.count == 0 {
        bail!(Config, "count must be positive");
    }
    if cfg.vocab == 0 {
        bail!(Config, "vocab must be positive");
    }
    if !(0.0..=1.0).contains(&cfg.feature_noise) {
        bail!(Config, "feature_noise must lie in [0, 1]");
    }
    let mut rng = seeded_rng(derive_seed(cfg.seed, 0xda7a));
    let mut balanced = match cfg.kind {
        DatasetKind::TriangleClf | DatasetKind::DiameterClf => Some(sample_balanced(cfg, &mut rng)?.into_iter()),
        _ => None,
    };
    let width = (cfg.count - 1).to_string().len();
    let mut graphs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let id = format!("{}-{i:0width$}", cfg.kind);
        let (n, edges) = match balanced.as_mut() {
            Some(it) => it.next().expect("one sample per graph"),
            None => {
                let (n, k) = sample_shape(cfg, &mut rng);
                (n, random_connected_edges(n, k, &mut rng))
            }
        };
        let skeleton = Graph::new(id.clone(), n, edges.iter().copied(), vec![0; n], 0.0)?;
        let features = match cfg.kind {
            DatasetKind::DegreeCorpus => degree_features(&skeleton, cfg, &mut rng),
            _ => noise_features(n, cfg.vocab, &mut rng),
        };
        let label = structural_label(cfg.kind, &skeleton, cfg.diameter_threshold)?;
        graphs.push(Graph::new(id, n, edges, features, label)?);
    }
    Ok(Dataset {
        task: cfg.kind.task(),
        graphs,
    })
}

/// Deterministic partition into train/valid/test. Classification sets are
/// stratified by label.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail!(Config, "split ratios {ratios:?} must be non-negative and sum to 1");
    }
    let n = dataset.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_valid);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        bail!(Data, "split of {n} samples at {ratios:?} leaves an empty part");
    }
    let mut rng = seeded_rng(derive_seed(seed, 0x5b11));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    if dataset.task == TaskKind::Classification {
        // spread each class evenly along the sequence so every contiguous
        // segment keeps the global balance
        let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(n);
        for class in [0.0, 1.0] {
            let members: Vec<usize> = order.iter().copied().filter(|&i| dataset.graphs[i].label == class).collect();
            let m = members.len() as f64;
            for (rank, i) in members.into_iter().enumerate() {
                keyed.push(((rank as f64 + 0.5) / m, class as u8, i));
            }
        }
        if keyed.len() != n {
            bail!(Data, "classification labels must be 0 or 1");
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order = keyed.into_iter().map(|(_, _, i)| i).collect();
    }
    let part = |range: std::ops::Range<usize>| Dataset {
        task: dataset.task,
        graphs: order[range].iter().map(|&i| dataset.graphs[i].clone()).collect(),
    };
    Ok([
        part(0..n_train),
        part(n_train..n_train + n_valid),
        part(n_train + n_valid..n),
    ])
}
