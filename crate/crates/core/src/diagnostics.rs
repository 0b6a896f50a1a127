//! Feature-shift measurement, performance gaps, checkpoints and profiling.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{bail, LabError, Result};
use crate::model::{GraphInput, Model, TaskKind};
use crate::peft::{trainable_ratio, FreezeMask};
use crate::tensor::Tensor;
use crate::training::Metric;

/// Last-layer virtual-node representation of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub id: String,
    pub vector: Vec<f64>,
}

/// One vector per input, in input order.
pub fn extract_features(model: &Model, inputs: &[GraphInput]) -> Result<Vec<FeatureSample>> {
    let vectors = model.graph_features(inputs)?;
    Ok(inputs
        .iter()
        .zip(vectors)
        .map(|(g, vector)| FeatureSample {
            id: g.id.clone(),
            vector,
        })
        .collect())
}

pub const MIN_BINS: usize = 10;

/// Equal-width bins spanning the joint range of every coordinate of every
/// sample in `sets`.
pub fn shared_edges(sets: &[&[FeatureSample]], bins: usize) -> Result<Vec<f64>> {
    if bins < MIN_BINS {
        bail!(Config, "need at least {MIN_BINS} bins, got {bins}");
    }
    let mut values = sets.iter().flat_map(|s| s.iter()).flat_map(|f| f.vector.iter().copied());
    let Some(first) = values.next() else {
        bail!(Data, "no samples to bin");
    };
    let (mut lo, mut hi) = (first, first);
    for v in values {
        if !v.is_finite() {
            bail!(Domain, "non-finite feature value {v}");
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    Ok(edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
    pub eps: f64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.probs.len()
    }
}

/// Pools every coordinate into one population, counts it on `edges`, adds
/// `eps` to each bin mass and renormalizes.
pub fn build_histogram(samples: &[FeatureSample], edges: &[f64], eps: f64) -> Result<Histogram> {
    let bins = edges.len().saturating_sub(1);
    if bins < MIN_BINS {
        bail!(Config, "need at least {MIN_BINS} bins, got {bins}");
    }
    if !(eps > 0.0) {
        bail!(Config, "smoothing eps must be positive");
    }
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    for v in samples.iter().flat_map(|s| s.vector.iter()) {
        if *v < lo || *v > hi {
            bail!(Contract, "value {v} outside histogram range [{lo}, {hi}]");
        }
        // the lookup is by search so it agrees exactly with the stored edges
        let idx = edges[1..bins].partition_point(|e| e <= v);
        counts[idx] += 1;
        total += 1;
    }
    if total == 0 {
        bail!(Data, "histogram needs at least one value");
    }
    let norm = 1.0 + eps * bins as f64;
    let probs = counts
        .iter()
        .map(|&c| (c as f64 / total as f64 + eps) / norm)
        .collect();
    Ok(Histogram {
        edges: edges.to_vec(),
        probs,
        eps,
    })
}

fn kl(p: &[f64], q: &[f64], ln_base: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        / ln_base
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    js_divergence_base(p, q, std::f64::consts::E)
}

/// Jensen–Shannon divergence with logarithms in `base`.
pub fn js_divergence_base(p: &Histogram, q: &Histogram, base: f64) -> Result<f64> {
    if p.edges != q.edges {
        bail!(Contract, "histograms have different bin edges");
    }
    if !(base > 0.0 && base != 1.0) {
        bail!(Config, "invalid logarithm base {base}");
    }
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let ln_base = base.ln();
    let js = 0.5 * kl(&p.probs, &m, ln_base) + 0.5 * kl(&q.probs, &m, ln_base);
    Ok(js.max(0.0))
}

/// JS divergence between the feature distributions of two models on the
/// same inputs, on shared bins.
pub fn feature_shift(a: &[FeatureSample], b: &[FeatureSample], bins: usize, eps: f64) -> Result<(f64, Histogram, Histogram)> {
    let edges = shared_edges(&[a, b], bins)?;
    let ha = build_histogram(a, &edges, eps)?;
    let hb = build_histogram(b, &edges, eps)?;
    Ok((js_divergence(&ha, &hb)?, ha, hb))
}

/// A metric value on one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub metric: Metric,
    pub value: f64,
}

impl Score {
    fn oriented(self) -> f64 {
        if self.metric.higher_is_better() {
            self.value
        } else {
            -self.value
        }
    }
}

/// Mean oriented PEFT score minus mean oriented full fine-tuning score, over
/// the shared dataset keys. Negative means the PEFT method is worse.
pub fn performance_gap(peft: &BTreeMap<String, Score>, full: &BTreeMap<String, Score>) -> Result<f64> {
    if peft.is_empty() {
        bail!(Report, "no datasets to compare");
    }
    for key in peft.keys() {
        if !full.contains_key(key) {
            bail!(Report, "dataset '{key}' has no full fine-tuning result");
        }
    }
    for key in full.keys() {
        if !peft.contains_key(key) {
            bail!(Report, "dataset '{key}' has no PEFT result");
        }
    }
    let mut sum = 0.0;
    for (key, p) in peft {
        let f = full[key];
        if p.metric != f.metric {
            bail!(Report, "dataset '{key}' compares {} with {}", p.metric.name(), f.metric.name());
        }
        sum += p.oriented() - f.oriented();
    }
    Ok(sum / peft.len() as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GADP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Delta,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Full => 0,
            CheckpointKind::Delta => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(CheckpointKind::Full),
            1 => Ok(CheckpointKind::Delta),
            _ => bail!(Parse, "unknown checkpoint kind tag {t}"),
        }
    }
}

/// Identity of the model a checkpoint belongs to. A delta digest also covers
/// the exact bytes of every frozen parameter, so a delta only loads onto
/// the backbone it was trained from.
pub fn model_digest(model: &Model, kind: CheckpointKind) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model.config.architecture_key().as_bytes());
    h.update(format!(";head={:?}", model.config.head).as_bytes());
    let peft = model.instrumentation().map_or_else(|| "none".to_string(), |i| i.spec.tag());
    h.update(format!(";peft={peft}").as_bytes());
    if kind == CheckpointKind::Delta {
        for p in model.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

/// Serialized byte count of a set of tensors, by enumeration.
pub fn checkpoint_size<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> usize {
    let header = 4 + 4 + 32 + 1 + 4;
    header
        + entries
            .into_iter()
            .map(|(name, t)| 4 + name.len() + 1 + 4 + 8 * t.shape().len() + 8 * t.numel())
            .sum::<usize>()
}

/// Serializes every parameter (full) or the trainable ones (delta).
pub fn save_checkpoint(model: &Model, kind: CheckpointKind) -> Result<Vec<u8>> {
    let params: Vec<_> = model
        .params
        .iter()
        .filter(|p| kind == CheckpointKind::Full || p.trainable)
        .collect();
    let mut out = Vec::with_capacity(checkpoint_size(params.iter().map(|p| (p.name.as_str(), &p.tensor))));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&model_digest(model, kind));
    out.push(kind.tag());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Checks that the trainable set of `model` is exactly `mask`, then saves a
/// delta checkpoint.
pub fn save_delta(model: &Model, mask: &FreezeMask) -> Result<Vec<u8>> {
    if model.params.trainable_names() != mask.trainable {
        bail!(Contract, "freeze mask does not match the model's trainable set");
    }
    save_checkpoint(model, CheckpointKind::Delta)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Parse, "checkpoint truncated at byte {} (wanted {n} more)", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub kind: CheckpointKind,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        bail!(Parse, "not a checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        bail!(Load, "unsupported checkpoint version {version}");
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let kind = CheckpointKind::from_tag(r.u8()?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| LabError::Parse("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            bail!(Parse, "tensor '{name}' has unknown dtype tag {dtype}");
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| LabError::Parse("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        bail!(Parse, "{} trailing bytes after checkpoint", bytes.len() - r.pos);
    }
    Ok(Checkpoint {
        version,
        digest,
        kind,
        tensors,
    })
}

/// Restores a checkpoint onto `base`, which must have the same architecture,
/// head and fine-tuning layout; for a delta, also the same frozen backbone.
pub fn load_checkpoint(bytes: &[u8], base: &Model) -> Result<Model> {
    let ckpt = parse_checkpoint(bytes)?;
    if ckpt.digest != model_digest(base, ckpt.kind) {
        bail!(Load, "config digest mismatch: checkpoint does not belong to this model");
    }
    let mut model = base.clone();
    match ckpt.kind {
        CheckpointKind::Full => {
            if ckpt.tensors.len() != model.params.len() {
                bail!(Load, "full checkpoint has {} tensors, model has {}", ckpt.tensors.len(), model.params.len());
            }
        }
        CheckpointKind::Delta => {
            let names: std::collections::BTreeSet<String> = ckpt.tensors.iter().map(|(n, _)| n.clone()).collect();
            if names != model.params.trainable_names() {
                bail!(Load, "delta tensors do not match the trainable set");
            }
        }
    }
    for (name, t) in ckpt.tensors {
        model.params.assign(&name, t)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub ms_per_sample: f64,
    pub checkpoint_bytes_full: usize,
    pub checkpoint_bytes_delta: usize,
    pub gamma: f64,
}

pub const WARMUP_PASSES: usize = 10;

/// Median single-graph forward time over `passes` (at least 100) runs after
/// warm-up, plus serialized checkpoint sizes and the trainable ratio.
pub fn profile(model: &Model, inputs: &[GraphInput], task: TaskKind, passes: usize) -> Result<Profile> {
    if inputs.is_empty() {
        bail!(Data, "profiling needs at least one graph");
    }
    let passes = passes.max(100);
    let run = |input: &GraphInput| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let y = model.forward(&mut tape, &vars, input, task)?;
        Ok(tape.value(y).item())
    };
    for i in 0..WARMUP_PASSES {
        run(&inputs[i % inputs.len()])?;
    }
    let mut times = Vec::with_capacity(passes);
    for i in 0..passes {
        let start = Instant::now();
        std::hint::black_box(run(&inputs[i % inputs.len()])?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 0 {
        0.5 * (times[mid - 1] + times[mid])
    } else {
        times[mid]
    };
    let mask = FreezeMask {
        trainable: model.params.trainable_names(),
    };
    Ok(Profile {
        ms_per_sample: median,
        checkpoint_bytes_full: save_checkpoint(model, CheckpointKind::Full)?.len(),
        checkpoint_bytes_delta: save_checkpoint(model, CheckpointKind::Delta)?.len(),
        gamma: trainable_ratio(model, &mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::peft::{instrument, Method, PeftSpec};

    fn sample(id: &str, v: Vec<f64>) -> FeatureSample {
        FeatureSample { id: id.into(), vector: v }
    }

    fn tiny() -> Model {
        Model::new(ModelConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_values_fill_one_bin() {
        let s = [sample("a", vec![2.0; 5])];
        let edges = shared_edges(&[&s], 10).unwrap();
        let h = build_histogram(&s, &edges, 1e-8).unwrap();
        let max = h.probs.iter().cloned().fold(0.0, f64::max);
        assert!(max > 1.0 - 1e-6);
        assert!((h.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicating_samples_keeps_histogram() {
        let s = vec![sample("a", vec![0.1, 0.7, -0.3]), sample("b", vec![0.4, 0.4, 0.9])];
        let edges = shared_edges(&[&s], 12).unwrap();
        let mut doubled = s.clone();
        doubled.extend(s.clone());
        assert_eq!(
            build_histogram(&s, &edges, 1e-8).unwrap(),
            build_histogram(&doubled, &edges, 1e-8).unwrap()
        );
    }

    #[test]
    fn histogram_preconditions() {
        let s = [sample("a", vec![1.0, 2.0])];
        assert!(shared_edges(&[&s], 5).is_err());
        let edges = shared_edges(&[&s], 10).unwrap();
        assert!(build_histogram(&s, &edges, 0.0).is_err());
        assert!(build_histogram(&[], &edges, 1e-8).is_err());
    }

    #[test]
    fn js_examples() {
        let mk = |probs: Vec<f64>| Histogram {
            edges: (0..=probs.len()).map(|i| i as f64).collect(),
            probs,
            eps: 0.0,
        };
        let p = mk(vec![1.0, 0.0]);
        let q = mk(vec![0.0, 1.0]);
        assert!((js_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((js_divergence_base(&p, &q, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let r = mk(vec![0.5, 0.5, 0.0]);
        assert!(matches!(js_divergence(&p, &r), Err(LabError::Contract(_))));
    }

    #[test]
    fn gap_examples() {
        let s = |v| Score { metric: Metric::Auc, value: v };
        let peft = BTreeMap::from([("hiv".to_string(), s(0.790))]);
        let full = BTreeMap::from([("hiv".to_string(), s(0.804))]);
        assert!((performance_gap(&peft, &full).unwrap() + 0.014).abs() < 1e-12);
        assert_eq!(performance_gap(&full, &full).unwrap(), 0.0);
        let other = BTreeMap::from([("tox".to_string(), s(0.8))]);
        assert!(matches!(performance_gap(&peft, &other), Err(LabError::Report(_))));
        let r = |v| Score { metric: Metric::Rmse, value: v };
        let a = BTreeMap::from([("x".to_string(), r(1.0))]);
        let b = BTreeMap::from([("x".to_string(), r(1.5))]);
        assert_eq!(performance_gap(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn full_round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = save_checkpoint(&m, CheckpointKind::Full).unwrap();
        let loaded = load_checkpoint(&bytes, &m).unwrap();
        assert_eq!(save_checkpoint(&loaded, CheckpointKind::Full).unwrap(), bytes);
        let sizes = m.params.iter().map(|p| (p.name.as_str(), &p.tensor));
        assert_eq!(bytes.len(), checkpoint_size(sizes));
    }

    #[test]
    fn load_errors() {
        let m = tiny();
        let bytes = save_checkpoint(&m, CheckpointKind::Full).unwrap();
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 3], &m), Err(LabError::Parse(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(load_checkpoint(&bad_version, &m), Err(LabError::Load(_))));
        let other = Model::new(ModelConfig {
            hidden: 12,
            ..m.config.clone()
        })
        .unwrap();
        assert!(matches!(load_checkpoint(&bytes, &other), Err(LabError::Load(_))));
    }

    #[test]
    fn delta_needs_matching_backbone() {
        let (mut tuned, mask) = instrument(tiny(), &PeftSpec::new(Method::Gadapter, 2), 0).unwrap();
        let base = tuned.clone();
        let id = tuned.params.id("head.bias").unwrap();
        tuned.params.get_mut(id).tensor = Tensor::vector(vec![0.25]);
        let bytes = save_delta(&tuned, &mask).unwrap();
        let restored = load_checkpoint(&bytes, &base).unwrap();
        for (a, b) in restored.params.iter().zip(tuned.params.iter()) {
            assert_eq!(a, b);
        }
        let mut shifted = base.clone();
        let emb = shifted.params.id("emb.table").unwrap();
        shifted.params.get_mut(emb).tensor.data_mut()[0] += 1.0;
        assert!(matches!(load_checkpoint(&bytes, &shifted), Err(LabError::Load(_))));
    }
}
