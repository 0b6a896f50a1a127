//! Miniature graph transformer: node embedding, post-LN encoder layers with an
//! optional structural attention bias, virtual-node readout and prediction
//! heads. Fine-tuning modules plug in through [`crate::peft`] hooks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::graph::{add_virtual_node, build_structure, pad_matrix, Graph, StructureKind, Unreachable};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::peft::{Instrumentation, LoraTarget, Position};
use crate::tensor::{derive_seed, seeded_rng, InitScheme, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    BinaryClassification,
    Regression,
    MaskedNode,
}

/// Downstream task type, as stored in dataset files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "clf")]
    Classification,
    #[serde(rename = "reg")]
    Regression,
}

impl TaskKind {
    pub fn head(self) -> HeadKind {
        match self {
            TaskKind::Classification => HeadKind::BinaryClassification,
            TaskKind::Regression => HeadKind::Regression,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Number of real node feature ids. Two more embedding rows are reserved
    /// for the virtual node and the mask token.
    pub vocab: usize,
    pub head: HeadKind,
    pub use_structure_bias: bool,
    pub bias_structure: StructureKind,
    pub ln_eps: f64,
    pub unreachable: Unreachable,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 64,
            vocab: 16,
            head: HeadKind::BinaryClassification,
            use_structure_bias: true,
            bias_structure: StructureKind::S2,
            ln_eps: 1e-5,
            unreachable: Unreachable::Zero,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 {
            bail!(Config, "hidden, heads and ffn_dim must be positive");
        }
        if self.hidden % self.heads != 0 {
            bail!(
                Config,
                "hidden size {} is not divisible by {} heads",
                self.hidden,
                self.heads
            );
        }
        if self.vocab == 0 {
            bail!(Config, "vocab must be positive");
        }
        if !(self.ln_eps > 0.0) {
            bail!(Config, "ln_eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn virtual_id(&self) -> usize {
        self.vocab
    }

    pub fn mask_id(&self) -> usize {
        self.vocab + 1
    }

    /// Architecture fields that determine backbone parameter shapes.
    pub fn architecture_key(&self) -> String {
        format!(
            "L={};d={};h={};ff={};V={};sb={}:{};eps={:e};unreach={:?}",
            self.num_layers,
            self.hidden,
            self.heads,
            self.ffn_dim,
            self.vocab,
            self.use_structure_bias,
            self.bias_structure,
            self.ln_eps,
            self.unreachable
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerSlots {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub spatial: Option<usize>,
    pub ln1: (usize, usize),
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2: (usize, usize),
}

/// A graph ready for the forward pass: augmented with its virtual node and
/// carrying the constant structure matrices it needs.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub id: String,
    /// Embedding rows, virtual node first.
    pub ids: Vec<usize>,
    /// Structure matrix consumed by fine-tuning blocks.
    pub structure: Option<Tensor>,
    /// Structure matrix for the attention bias.
    pub bias: Option<Tensor>,
    /// Real-node mask; `None` means every position is real.
    pub keep: Option<Vec<bool>>,
    pub label: f64,
}

impl GraphInput {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    /// Zero-pads every matrix to `size` and marks the padding.
    pub fn padded(&self, size: usize, filler_id: usize) -> Result<GraphInput> {
        let m = self.size();
        if m > size {
            bail!(Batching, "graph '{}' has {m} nodes, batch size is {size}", self.id);
        }
        let mut ids = self.ids.clone();
        ids.resize(size, filler_id);
        let pad = |t: &Option<Tensor>| t.as_ref().map(|t| pad_matrix(t, size)).transpose();
        let keep = (0..size)
            .map(|i| i < m && self.keep.as_ref().is_none_or(|k| k[i]))
            .collect();
        Ok(GraphInput {
            id: self.id.clone(),
            ids,
            structure: pad(&self.structure)?,
            bias: pad(&self.bias)?,
            keep: Some(keep),
            label: self.label,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) emb: usize,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) head: (usize, usize),
    pub(crate) peft: Option<Instrumentation>,
}

fn xavier(store: &mut ParamStore, name: String, shape: &[usize], seed: u64) -> Result<usize> {
    store.init(&name, shape, InitScheme::XavierUniform, seed)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, ff, seed) = (config.hidden, config.ffn_dim, config.seed);
        let mut p = ParamStore::new();
        let emb = xavier(&mut p, "emb.table".into(), &[config.vocab + 2, d], seed)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let n = |role: &str| format!("enc.{l}.{role}");
            let zeros = |p: &mut ParamStore, role: &str, len: usize| p.init(&n(role), &[len], InitScheme::Zeros, seed);
            let ones = |p: &mut ParamStore, role: &str, len: usize| p.init(&n(role), &[len], InitScheme::Ones, seed);
            let wq = xavier(&mut p, n("attn.wq"), &[d, d], seed)?;
            let bq = zeros(&mut p, "attn.bq", d)?;
            let wk = xavier(&mut p, n("attn.wk"), &[d, d], seed)?;
            let bk = zeros(&mut p, "attn.bk", d)?;
            let wv = xavier(&mut p, n("attn.wv"), &[d, d], seed)?;
            let bv = zeros(&mut p, "attn.bv", d)?;
            let wo = xavier(&mut p, n("attn.wo"), &[d, d], seed)?;
            let bo = zeros(&mut p, "attn.bo", d)?;
            let spatial = if config.use_structure_bias {
                Some(p.init(&n("attn.spatial"), &[1, config.heads], InitScheme::Zeros, seed)?)
            } else {
                None
            };
            let ln1 = (ones(&mut p, "ln1.gamma", d)?, zeros(&mut p, "ln1.beta", d)?);
            let w1 = xavier(&mut p, n("ffn.w1"), &[d, ff], seed)?;
            let b1 = zeros(&mut p, "ffn.b1", ff)?;
            let w2 = xavier(&mut p, n("ffn.w2"), &[ff, d], seed)?;
            let b2 = zeros(&mut p, "ffn.b2", d)?;
            let ln2 = (ones(&mut p, "ln2.gamma", d)?, zeros(&mut p, "ln2.beta", d)?);
            layers.push(LayerSlots {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                spatial,
                ln1,
                w1,
                b1,
                w2,
                b2,
                ln2,
            });
        }
        let head = match config.head {
            HeadKind::MaskedNode => (
                xavier(&mut p, "mlm.weight".into(), &[d, config.vocab], seed)?,
                p.init("mlm.bias", &[config.vocab], InitScheme::Zeros, seed)?,
            ),
            _ => (
                xavier(&mut p, "head.weight".into(), &[d, 1], seed)?,
                p.init("head.bias", &[1], InitScheme::Zeros, seed)?,
            ),
        };
        Ok(Model {
            config,
            params: p,
            emb,
            layers,
            head,
            peft: None,
        })
    }

    /// True for embedding and encoder parameters (not heads, not added modules).
    pub fn is_backbone_name(&self, name: &str) -> bool {
        name == "emb.table"
            || self
                .layers
                .iter()
                .enumerate()
                .any(|(l, _)| name.starts_with(&format!("enc.{l}.")) && is_backbone_role(name))
    }

    pub fn is_head_name(name: &str) -> bool {
        name.starts_with("head.") || name.starts_with("mlm.")
    }

    /// Copies every backbone parameter from `source` by name.
    pub fn load_backbone(&mut self, source: &Model) -> Result<()> {
        if source.config.architecture_key() != self.config.architecture_key() {
            bail!(
                Load,
                "backbone architecture mismatch: {} vs {}",
                source.config.architecture_key(),
                self.config.architecture_key()
            );
        }
        for p in source.params.iter() {
            if source.is_backbone_name(&p.name) {
                self.params.assign(&p.name, p.tensor.clone())?;
            }
        }
        Ok(())
    }

    pub fn instrumentation(&self) -> Option<&Instrumentation> {
        self.peft.as_ref()
    }

    /// Augments a graph with its virtual node and builds the structure
    /// matrices this model consumes.
    pub fn prepare(&self, g: &Graph) -> Result<GraphInput> {
        if let Some(&bad) = g.node_features.iter().find(|&&f| f >= self.config.vocab) {
            bail!(
                Data,
                "graph '{}' has feature id {bad} outside vocab {}",
                g.id,
                self.config.vocab
            );
        }
        let aug = add_virtual_node(g, self.config.virtual_id())?;
        let bias = if self.config.use_structure_bias {
            let mix = (self.config.bias_structure == StructureKind::S4).then_some((0.5, 0.5));
            Some(build_structure(&aug, self.config.bias_structure, mix, self.config.unreachable)?.matrix)
        } else {
            None
        };
        let structure = match self.peft.as_ref().and_then(Instrumentation::structure_request) {
            Some((kind, mix)) => Some(build_structure(&aug, kind, mix, self.config.unreachable)?.matrix),
            None => None,
        };
        Ok(GraphInput {
            id: g.id.clone(),
            ids: aug.node_features.clone(),
            structure,
            bias,
            keep: None,
            label: g.label,
        })
    }

    pub fn prepare_all(&self, graphs: &[Graph]) -> Result<Vec<GraphInput>> {
        graphs.iter().map(|g| self.prepare(g)).collect()
    }

    /// Puts every parameter on the tape. Trainable ones are tracked iff `track`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf_ref(&p.tensor, track && p.trainable))
            .collect()
    }

    /// Binds with trainable tensors taken from `trainable_values` (in
    /// trainable-id order) instead of the live values. Nothing is tracked.
    pub fn bind_snapshot<'a>(&'a self, tape: &mut Tape<'a>, trainable_values: &'a [Tensor]) -> Vec<Var> {
        let mut next = trainable_values.iter();
        self.params
            .iter()
            .map(|p| {
                let t = if p.trainable {
                    next.next().expect("snapshot covers every trainable parameter")
                } else {
                    &p.tensor
                };
                tape.leaf_ref(t, false)
            })
            .collect()
    }

    pub fn embed(&self, tape: &mut Tape<'_>, vars: &[Var], input: &GraphInput) -> Result<Var> {
        let rows = self.config.vocab + 2;
        if let Some(&bad) = input.ids.iter().find(|&&i| i >= rows) {
            bail!(Data, "graph '{}': embedding id {bad} out of range", input.id);
        }
        tape.gather_rows(vars[self.emb], &input.ids)
    }

    fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn mha<'a>(
        &self,
        tape: &mut Tape<'a>,
        vars: &[Var],
        layer: usize,
        x: Var,
        keep: Option<&[bool]>,
        bias: Option<Var>,
        structure: Option<Var>,
    ) -> Result<Var> {
        let s = &self.layers[layer];
        let mut q = Self::linear(tape, x, vars[s.wq], vars[s.bq])?;
        let k = Self::linear(tape, x, vars[s.wk], vars[s.bk])?;
        let mut v = Self::linear(tape, x, vars[s.wv], vars[s.bv])?;
        if let Some(inst) = &self.peft {
            if let Some(delta) = inst.lora_delta(tape, vars, layer, LoraTarget::Query, x, structure)? {
                q = tape.add(q, delta)?;
            }
            if let Some(delta) = inst.lora_delta(tape, vars, layer, LoraTarget::Value, x, structure)? {
                v = tape.add(v, delta)?;
            }
        }
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let mut logits = tape.scale(logits, scale);
            if let (Some(spatial), Some(bias)) = (s.spatial, bias) {
                let w = tape.slice_cols(vars[spatial], h, 1)?;
                let b = tape.mul(bias, w)?;
                logits = tape.add(logits, b)?;
            }
            let attn = tape.masked_softmax_rows(logits, keep)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        Self::linear(tape, cat, vars[s.wo], vars[s.bo])
    }

    fn hook(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        layer: usize,
        pos: Position,
        x: Var,
        structure: Option<Var>,
    ) -> Result<Var> {
        match &self.peft {
            Some(inst) => inst.apply(tape, vars, layer, pos, x, structure, self.config.ln_eps),
            None => Ok(x),
        }
    }

    /// One post-LN encoder layer with fine-tuning hooks.
    pub fn layer_forward(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        layer: usize,
        x: Var,
        keep: Option<&[bool]>,
        bias: Option<Var>,
        structure: Option<Var>,
    ) -> Result<Var> {
        let s = &self.layers[layer];
        let eps = self.config.ln_eps;
        let x = self.hook(tape, vars, layer, Position::PreMha, x, structure)?;
        let a = self.mha(tape, vars, layer, x, keep, bias, structure)?;
        let a = self.hook(tape, vars, layer, Position::PostMha, a, structure)?;
        let sum = tape.add(x, a)?;
        let x = tape.layer_norm(sum, vars[s.ln1.0], vars[s.ln1.1], eps)?;

        let x = self.hook(tape, vars, layer, Position::PreFfn, x, structure)?;
        let h = Self::linear(tape, x, vars[s.w1], vars[s.b1])?;
        let h = tape.relu(h);
        let h = self.hook(tape, vars, layer, Position::MidFfn, h, structure)?;
        let f = Self::linear(tape, h, vars[s.w2], vars[s.b2])?;
        let mut f = self.hook(tape, vars, layer, Position::PostFfn, f, structure)?;
        if let Some(inst) = &self.peft {
            if let Some(par) = inst.parallel(tape, vars, layer, x)? {
                f = tape.add(f, par)?;
            }
        }
        let sum = tape.add(x, f)?;
        tape.layer_norm(sum, vars[s.ln2.0], vars[s.ln2.1], eps)
    }

    /// Embedding followed by every encoder layer; returns the final hidden
    /// matrix (one row per node, virtual node first).
    pub fn encode<'a>(&self, tape: &mut Tape<'a>, vars: &[Var], input: &'a GraphInput) -> Result<Var> {
        let mut x = self.embed(tape, vars, input)?;
        let bias = input.bias.as_ref().map(|b| tape.constant(b));
        let structure = input.structure.as_ref().map(|s| tape.constant(s));
        let keep = input.keep.as_deref();
        for l in 0..self.layers.len() {
            x = self.layer_forward(tape, vars, l, x, keep, bias, structure)?;
        }
        Ok(x)
    }

    /// Virtual-node row of the final hidden matrix, as a `1 × d` matrix.
    pub fn readout(tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        tape.gather_rows(hidden, &[0])
    }

    /// Graph-level prediction: sigmoid probability or raw regression output.
    pub fn predict(&self, tape: &mut Tape<'_>, vars: &[Var], repr: Var, task: TaskKind) -> Result<Var> {
        if self.config.head != task.head() {
            bail!(
                Config,
                "model head {:?} cannot serve a {:?} task",
                self.config.head,
                task
            );
        }
        let y = Self::linear(tape, repr, vars[self.head.0], vars[self.head.1])?;
        Ok(match task {
            TaskKind::Classification => tape.sigmoid(y),
            TaskKind::Regression => y,
        })
    }

    /// Full graph forward to a single-element prediction.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, vars: &[Var], input: &'a GraphInput, task: TaskKind) -> Result<Var> {
        let hidden = self.encode(tape, vars, input)?;
        let repr = Self::readout(tape, hidden)?;
        self.predict(tape, vars, repr, task)
    }

    /// Predictions for many graphs without building gradients.
    pub fn predict_values(&self, inputs: &[GraphInput], task: TaskKind) -> Result<Vec<f64>> {
        inputs
            .iter()
            .map(|input| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, false);
                let y = self.forward(&mut tape, &vars, input, task)?;
                Ok(tape.value(y).item())
            })
            .collect()
    }

    /// Last-layer virtual-node representation for each input.
    pub fn graph_features(&self, inputs: &[GraphInput]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .map(|input| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, false);
                let hidden = self.encode(&mut tape, &vars, input)?;
                Ok(tape.value(hidden).row(0).to_vec())
            })
            .collect()
    }

    /// Per-node vocabulary logits for the masked-node pretext task.
    pub fn node_logits<'a>(&self, tape: &mut Tape<'a>, vars: &[Var], input: &'a GraphInput) -> Result<Var> {
        if self.config.head != HeadKind::MaskedNode {
            bail!(Config, "node logits need a masked_node head");
        }
        let hidden = self.encode(tape, vars, input)?;
        Self::linear(tape, hidden, vars[self.head.0], vars[self.head.1])
    }
}

fn is_backbone_role(name: &str) -> bool {
    const ROLES: [&str; 17] = [
        "attn.wq",
        "attn.bq",
        "attn.wk",
        "attn.bk",
        "attn.wv",
        "attn.bv",
        "attn.wo",
        "attn.bo",
        "attn.spatial",
        "ln1.gamma",
        "ln1.beta",
        "ffn.w1",
        "ffn.b1",
        "ffn.w2",
        "ffn.b2",
        "ln2.gamma",
        "ln2.beta",
    ];
    let role = name.splitn(3, '.').nth(2).unwrap_or("");
    ROLES.contains(&role)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            mask_rate: 0.15,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

/// Masks `round(rate · n)` real nodes (at least one when `rate > 0`).
/// Returns the corrupted input and per-row targets.
pub fn mask_nodes(model: &Model, input: &GraphInput, rate: f64, rng: &mut impl rand::Rng) -> (GraphInput, Vec<Option<usize>>) {
    let n = input.size() - 1;
    let mut count = (rate * n as f64).round() as usize;
    if rate > 0.0 {
        count = count.clamp(1, n);
    }
    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(rng);
    let mut masked = input.clone();
    let mut targets = vec![None; input.size()];
    for &i in &order[..count] {
        targets[i] = Some(input.ids[i]);
        masked.ids[i] = model.config.mask_id();
    }
    (masked, targets)
}

/// Trains the backbone to recover masked node features. Returns the mean
/// loss of every epoch.
pub fn pretrain_masked_nodes(model: &mut Model, graphs: &[Graph], config: &PretrainConfig) -> Result<Vec<f64>> {
    if model.config.head != HeadKind::MaskedNode {
        bail!(Config, "pretraining needs a masked_node head");
    }
    if model.config.vocab < 2 {
        bail!(Config, "masked-node pretraining needs vocab >= 2");
    }
    if graphs.is_empty() {
        bail!(Data, "pretraining corpus is empty");
    }
    if config.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let inputs = model.prepare_all(graphs)?;
    let ids = model.params.trainable_ids();
    let mut opt = {
        let tensors: Vec<&Tensor> = ids.iter().map(|&i| &model.params.get(i).tensor).collect();
        AdamW::new(config.optimizer, &tensors)
    };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = seeded_rng(derive_seed(config.seed, epoch as u64 + 1));
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let masked: Vec<(GraphInput, Vec<Option<usize>>)> = chunk
                .iter()
                .map(|&i| mask_nodes(model, &inputs[i], config.mask_rate, &mut rng))
                .collect();
            let grads = {
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, true);
                let mut losses = Vec::with_capacity(masked.len());
                for (input, targets) in &masked {
                    let logits = model.node_logits(&mut tape, &vars, input)?;
                    losses.push(tape.cross_entropy_rows(logits, targets)?);
                }
                let stacked = tape.stack(&losses)?;
                let loss = tape.mean(stacked);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    bail!(Training, "pretraining loss became {value} in epoch {epoch}");
                }
                total += value;
                batches += 1;
                let mut g = tape.backward(loss)?;
                ids.iter().map(|&i| g.take(vars[i])).collect::<Vec<_>>()
            };
            let names: Vec<String> = ids.iter().map(|&i| model.params.get(i).name.clone()).collect();
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            let mut tensors = model.params.tensors_mut(&ids);
            opt.update(&mut tensors, &grad_refs, &name_refs)?;
        }
        let mean = total / batches as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn config(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: 6,
            ..ModelConfig::default()
        }
    }

    fn sample_graph() -> Graph {
        Graph::new("g", 5, [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4)], vec![0, 3, 3, 1, 5], 1.0).unwrap()
    }

    /// Gives every zero-initialized parameter a nonzero value so tests see
    /// the bias and structure paths.
    fn perturbed(mut m: Model) -> Model {
        for i in 0..m.params.len() {
            let p = m.params.get_mut(i);
            let salt = i as f64;
            for (j, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v += 0.1 * ((salt * 7.0 + j as f64) * 0.37).sin();
            }
        }
        m
    }

    fn predict(m: &Model, input: &GraphInput) -> f64 {
        m.predict_values(std::slice::from_ref(input), TaskKind::Classification).unwrap()[0]
    }

    #[test]
    fn same_feature_same_embedding() {
        let m = Model::new(config(1)).unwrap();
        let input = m.prepare(&sample_graph()).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let e = m.embed(&mut tape, &vars, &input).unwrap();
        let t = tape.value(e);
        assert_eq!(t.shape(), &[6, 8]);
        assert_eq!(t.row(2), t.row(3));
    }

    #[test]
    fn bad_feature_id_names_the_graph() {
        let m = Model::new(config(1)).unwrap();
        let g = Graph::new("bad-graph", 2, [(0, 1)], vec![0, 6], 0.0).unwrap();
        let err = m.prepare(&g).unwrap_err();
        assert!(matches!(err, crate::error::LabError::Data(_)));
        assert!(err.to_string().contains("bad-graph"));
    }

    #[test]
    fn singleton_attention_is_value_projection() {
        let m = perturbed(Model::new(config(1)).unwrap());
        let x = Tensor::from_rows(&[vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.1, 0.0, 0.7]]);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let xv = tape.constant(&x);
        let one = Tensor::from_rows(&[vec![1.0]]);
        let bias = tape.constant(&one);
        let out = m.mha(&mut tape, &vars, 0, xv, None, Some(bias), None).unwrap();
        let s = &m.layers[0];
        let p = |i: usize| &m.params.get(i).tensor;
        let mut v = x.matmul(p(s.wv)).unwrap();
        for (a, b) in v.data_mut().iter_mut().zip(p(s.bv).data()) {
            *a += b;
        }
        let mut o = v.matmul(p(s.wo)).unwrap();
        for (a, b) in o.data_mut().iter_mut().zip(p(s.bo).data()) {
            *a += b;
        }
        assert!(tape.value(out).max_abs_diff(&o) < 1e-14);
    }

    #[test]
    fn zero_layers_read_out_the_virtual_embedding() {
        let m = Model::new(config(0)).unwrap();
        let input = m.prepare(&sample_graph()).unwrap();
        let feats = m.graph_features(&[input]).unwrap();
        let table = &m.params.by_name("emb.table").unwrap().tensor;
        assert_eq!(feats[0], table.row(m.config.virtual_id()));
    }

    #[test]
    fn zero_head_predicts_one_half_or_bias() {
        let mut m = Model::new(config(1)).unwrap();
        m.params.assign("head.weight", Tensor::zeros(&[8, 1])).unwrap();
        let input = m.prepare(&sample_graph()).unwrap();
        assert_eq!(predict(&m, &input), 0.5);
        let mut r = Model::new(ModelConfig {
            head: HeadKind::Regression,
            ..config(1)
        })
        .unwrap();
        r.params.assign("head.weight", Tensor::zeros(&[8, 1])).unwrap();
        r.params.assign("head.bias", Tensor::vector(vec![1.25])).unwrap();
        assert_eq!(r.predict_values(std::slice::from_ref(&input), TaskKind::Regression).unwrap(), vec![1.25]);
        assert!(matches!(
            r.predict_values(&[input], TaskKind::Classification),
            Err(crate::error::LabError::Config(_))
        ));
    }

    #[test]
    fn padding_does_not_change_the_output() {
        let spec = crate::peft::PeftSpec::new(crate::peft::Method::Gadapter, 2);
        let (m, _) = crate::peft::instrument(perturbed(Model::new(config(2)).unwrap()), &spec, 0).unwrap();
        let m = perturbed(m);
        let input = m.prepare(&sample_graph()).unwrap();
        let padded = input.padded(9, 0).unwrap();
        assert!((predict(&m, &input) - predict(&m, &padded)).abs() <= 1e-10);
        assert!(input.padded(3, 0).is_err());
    }

    #[test]
    fn relabeling_nodes_keeps_the_prediction() {
        let spec = crate::peft::PeftSpec::new(crate::peft::Method::AdapterS, 2);
        let (m, _) = crate::peft::instrument(Model::new(config(2)).unwrap(), &spec, 0).unwrap();
        let m = perturbed(m);
        let g = sample_graph();
        let perm = [3, 0, 4, 1, 2];
        let edges: Vec<(usize, usize)> = g.edges().map(|(a, b)| (perm[a], perm[b])).collect();
        let mut feats = vec![0; 5];
        for (i, &f) in g.node_features.iter().enumerate() {
            feats[perm[i]] = f;
        }
        let h = Graph::new("h", 5, edges, feats, 1.0).unwrap();
        let a = predict(&m, &m.prepare(&g).unwrap());
        let b = predict(&m, &m.prepare(&h).unwrap());
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn end_to_end_gradient_through_encoder() {
        let m = perturbed(Model::new(config(1)).unwrap());
        let input = m.prepare(&sample_graph()).unwrap();
        let ids: Vec<usize> = ["enc.0.attn.wq", "enc.0.attn.spatial", "enc.0.ffn.w1", "enc.0.ln2.gamma", "head.weight"]
            .iter()
            .map(|n| m.params.id(n).unwrap())
            .collect();
        let params: Vec<Tensor> = ids.iter().map(|&i| m.params.get(i).tensor.clone()).collect();
        let err = finite_difference_check(&params, 1e-6, |tape, v| {
            let mut vars = m.bind(tape, false);
            for (k, &id) in ids.iter().enumerate() {
                vars[id] = v[k];
            }
            m.forward(tape, &vars, &input, TaskKind::Classification)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = ModelConfig {
            head: HeadKind::MaskedNode,
            ..config(1)
        };
        let graphs = vec![sample_graph(), Graph::new("p", 4, [(0, 1), (1, 2), (2, 3)], vec![1, 2, 2, 1], 0.0).unwrap()];
        let pc = PretrainConfig {
            epochs: 3,
            batch_size: 1,
            ..PretrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(cfg.clone()).unwrap();
            let losses = pretrain_masked_nodes(&mut m, &graphs, &pc).unwrap();
            (losses, m.params.iter().map(|p| p.tensor.clone()).collect::<Vec<_>>())
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        assert_eq!(la.len(), 3);
        let mut wrong = Model::new(config(1)).unwrap();
        assert!(pretrain_masked_nodes(&mut wrong, &graphs, &pc).is_err());
    }

    #[test]
    fn masking_hits_real_nodes_only() {
        let m = Model::new(config(1)).unwrap();
        let input = m.prepare(&sample_graph()).unwrap();
        let mut rng = seeded_rng(4);
        let (masked, targets) = mask_nodes(&m, &input, 0.15, &mut rng);
        assert_eq!(targets[0], None);
        let hits: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(masked.ids[hits[0]], m.config.mask_id());
        assert_eq!(targets[hits[0]], Some(input.ids[hits[0]]));
    }
}
