//! Parameter-efficient fine-tuning methods.
//!
//! Each method is expressed as (a) extra parameters appended to the model's
//! [`ParamStore`], (b) hooks the encoder invokes at fixed positions inside
//! every layer, and (c) a [`FreezeMask`] naming the trainable parameters.
//!
//! The structure-aware block (`gadapter`) computes
//!
//! ```text
//! X'  = LN_pre(X)
//! X'' = LN_post(X' + σ(S · X' · W_down · W_up))
//! ```
//!
//! with σ applied after both projections. The classic adapter instead puts
//! σ between the projections: `X + σ(X · W_down) · W_up`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::graph::StructureKind;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::InitScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Adapter,
    AdapterS,
    Lora,
    LoraS,
    Bitfit,
    Hyperformer,
    Compacter,
    Mam,
    Gadapter,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Full,
        Method::Adapter,
        Method::AdapterS,
        Method::Lora,
        Method::LoraS,
        Method::Bitfit,
        Method::Hyperformer,
        Method::Compacter,
        Method::Mam,
        Method::Gadapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Adapter => "adapter",
            Method::AdapterS => "adapter_s",
            Method::Lora => "lora",
            Method::LoraS => "lora_s",
            Method::Bitfit => "bitfit",
            Method::Hyperformer => "hyperformer",
            Method::Compacter => "compacter",
            Method::Mam => "mam",
            Method::Gadapter => "gadapter",
        }
    }

    /// Methods that install hook blocks at an insertion position.
    fn uses_insertion(self) -> bool {
        matches!(
            self,
            Method::Adapter | Method::AdapterS | Method::Hyperformer | Method::Compacter | Method::Gadapter
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::LabError;

    fn from_str(s: &str) -> Result<Self> {
        match Method::ALL.iter().find(|m| m.name() == s) {
            Some(m) => Ok(*m),
            None => bail!(Config, "unknown method '{s}'"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    PreMha,
    PostMha,
    PreFfn,
    MidFfn,
    PostFfn,
    MhaAndFfn,
}

impl Insertion {
    pub const ALL: [Insertion; 6] = [
        Insertion::PreMha,
        Insertion::PostMha,
        Insertion::PreFfn,
        Insertion::MidFfn,
        Insertion::PostFfn,
        Insertion::MhaAndFfn,
    ];

    pub fn positions(self) -> &'static [Position] {
        match self {
            Insertion::PreMha => &[Position::PreMha],
            Insertion::PostMha => &[Position::PostMha],
            Insertion::PreFfn => &[Position::PreFfn],
            Insertion::MidFfn => &[Position::MidFfn],
            Insertion::PostFfn => &[Position::PostFfn],
            // two blocks per layer, after each sublayer
            Insertion::MhaAndFfn => &[Position::PostMha, Position::PostFfn],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Insertion::PreMha => "pre_mha",
            Insertion::PostMha => "post_mha",
            Insertion::PreFfn => "pre_ffn",
            Insertion::MidFfn => "mid_ffn",
            Insertion::PostFfn => "post_ffn",
            Insertion::MhaAndFfn => "mha_and_ffn",
        }
    }
}

/// Hook points inside one encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    PreMha,
    PostMha,
    PreFfn,
    MidFfn,
    PostFfn,
}

impl Position {
    fn name(self) -> &'static str {
        match self {
            Position::PreMha => "pre_mha",
            Position::PostMha => "post_mha",
            Position::PreFfn => "pre_ffn",
            Position::MidFfn => "mid_ffn",
            Position::PostFfn => "post_ffn",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_s: bool,
    pub no_pre_ln: bool,
    pub no_post_ln: bool,
    pub no_act: bool,
    pub no_breg: bool,
}

impl Ablations {
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_s, "no_s"),
            (self.no_pre_ln, "no_pre_ln"),
            (self.no_post_ln, "no_post_ln"),
            (self.no_act, "no_act"),
            (self.no_breg, "no_breg"),
        ] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftSpec {
    pub method: Method,
    /// Bottleneck size.
    pub r: usize,
    pub structure: StructureKind,
    /// `None` picks the method's default position.
    pub insertion: Option<Insertion>,
    pub lora_scale: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Hyperformer task-embedding size.
    pub task_dim: usize,
    /// Compacter Kronecker factor count.
    pub kron_factors: usize,
    pub ablations: Ablations,
    /// Init of up-projections; `None` picks the method default.
    pub up_init: Option<InitScheme>,
}

impl Default for PeftSpec {
    fn default() -> Self {
        PeftSpec {
            method: Method::Gadapter,
            r: 4,
            structure: StructureKind::S1,
            insertion: None,
            lora_scale: 1.0,
            alpha: 0.5,
            beta: 0.5,
            task_dim: 1,
            kron_factors: 2,
            ablations: Ablations::default(),
            up_init: None,
        }
    }
}

impl PeftSpec {
    pub fn new(method: Method, r: usize) -> Self {
        PeftSpec {
            method,
            r,
            ..PeftSpec::default()
        }
    }

    pub fn with_structure(mut self, kind: StructureKind) -> Self {
        self.structure = kind;
        self
    }

    pub fn with_insertion(mut self, insertion: Insertion) -> Self {
        self.insertion = Some(insertion);
        self
    }

    pub fn with_ablations(mut self, ablations: Ablations) -> Self {
        self.ablations = ablations;
        self
    }

    /// Insertion actually used, or `None` for methods without hook blocks.
    pub fn effective_insertion(&self) -> Option<Insertion> {
        if !self.method.uses_insertion() {
            return None;
        }
        Some(self.insertion.unwrap_or(match self.method {
            Method::Gadapter => Insertion::MidFfn,
            _ => Insertion::MhaAndFfn,
        }))
    }

    /// Structure kind actually consumed, or `None` for methods that never
    /// read a structure matrix.
    pub fn effective_structure(&self) -> Option<StructureKind> {
        match self.method {
            Method::Gadapter if !self.ablations.no_s => Some(self.structure),
            Method::AdapterS | Method::LoraS => Some(self.structure),
            _ => None,
        }
    }

    /// Whether `r` is meaningful for this method.
    pub fn uses_bottleneck(&self) -> bool {
        !matches!(self.method, Method::Full | Method::Bitfit)
    }

    pub fn up_init(&self) -> InitScheme {
        self.up_init.unwrap_or(match self.method {
            Method::Gadapter => InitScheme::XavierUniform,
            _ => InitScheme::Zeros,
        })
    }

    /// Short identifier used in file names and report rows.
    pub fn tag(&self) -> String {
        let mut tag = self.method.name().to_string();
        if let Some(s) = self.effective_structure() {
            tag.push_str(&format!("_{s}"));
        }
        if let Some(ins) = self.effective_insertion() {
            tag.push_str(&format!("_{}", ins.name()));
        }
        if self.uses_bottleneck() {
            tag.push_str(&format!("_r{}", self.r));
        }
        let abl = self.ablations.tag();
        if !abl.is_empty() {
            tag.push_str(&format!("_{abl}"));
        }
        tag
    }

    pub fn validate(&self, config: &crate::model::ModelConfig) -> Result<()> {
        let d = config.hidden;
        if self.uses_bottleneck() && (self.r == 0 || self.r > d) {
            bail!(Config, "bottleneck r={} must be in 1..={d}", self.r);
        }
        if matches!(self.method, Method::Lora | Method::LoraS | Method::Mam) && self.lora_scale < 1.0 {
            bail!(Config, "lora scale must be >= 1, got {}", self.lora_scale);
        }
        if self.method == Method::Compacter {
            let n = self.kron_factors;
            if n == 0 || d % n != 0 || self.r % n != 0 {
                bail!(
                    Config,
                    "compacter factor count {n} must divide hidden {d} and r {}",
                    self.r
                );
            }
        }
        if self.method == Method::Hyperformer && self.task_dim == 0 {
            bail!(Config, "hyperformer task_dim must be >= 1");
        }
        if let Some(ins) = self.effective_insertion() {
            if ins.positions().contains(&Position::MidFfn) && config.ffn_dim != d {
                bail!(
                    Config,
                    "mid_ffn insertion needs ffn_dim == hidden ({} != {d})",
                    config.ffn_dim
                );
            }
        }
        if self.method == Method::Gadapter && self.ablations.no_act && self.ablations.no_s {
            log::debug!("gadapter without S and activation reduces to a linear residual block");
        }
        Ok(())
    }
}

/// Names of the trainable parameters; everything else is frozen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: BTreeSet<String>,
}

impl FreezeMask {
    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Clone, Debug)]
pub(crate) enum Block {
    GAdapter {
        w_down: usize,
        w_up: usize,
        pre_ln: Option<(usize, usize)>,
        post_ln: Option<(usize, usize)>,
    },
    Adapter {
        w_down: usize,
        w_up: usize,
        structured: bool,
    },
    Hyper {
        gen_down: usize,
        gen_up: usize,
        gen_gamma: usize,
        gen_beta: usize,
    },
    Compacter {
        down: Vec<usize>,
        up: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Installed {
    layer: usize,
    position: Position,
    block: Block,
}

#[derive(Clone, Debug)]
pub(crate) struct LowRank {
    layer: usize,
    w_down: usize,
    w_up: usize,
}

#[derive(Clone, Debug)]
pub struct Instrumentation {
    pub spec: PeftSpec,
    hidden: usize,
    blocks: Vec<Installed>,
    lora_q: Vec<LowRank>,
    lora_v: Vec<LowRank>,
    parallel: Vec<LowRank>,
    task_embed: Option<usize>,
    kron_a: Vec<usize>,
}

/// Bound variables of one structure-aware block.
#[derive(Clone, Copy, Debug)]
pub struct GAdapterVars {
    pub w_down: Var,
    pub w_up: Var,
    pub pre_ln: Option<(Var, Var)>,
    pub post_ln: Option<(Var, Var)>,
}

fn check_structure(tape: &Tape<'_>, x: Var, s: Option<Var>) -> Result<()> {
    if let Some(s) = s {
        let rows = tape.value(x).rows();
        let (sr, sc) = tape.value(s).dims2()?;
        if sr != rows || sc != rows {
            bail!(Shape, "structure matrix is {sr}x{sc} but the input has {rows} rows");
        }
    }
    Ok(())
}

/// `S · X · W_down · W_up`, multiplied right-to-left by cost. `s = None`
/// stands for the identity.
fn graph_conv(tape: &mut Tape<'_>, x: Var, s: Option<Var>, w_down: Var, w_up: Var) -> Result<Var> {
    let low = tape.matmul(x, w_down)?;
    let low = match s {
        Some(s) => tape.matmul(s, low)?,
        None => low,
    };
    tape.matmul(low, w_up)
}

/// Structure-aware adapter block. Flags: `no_pre_ln`/`no_post_ln` require the
/// matching LayerNorm to be absent from `block`, `no_act` drops σ, and
/// `no_s` ignores `s` (identity structure).
pub fn gadapter_forward(
    tape: &mut Tape<'_>,
    x: Var,
    s: Option<Var>,
    block: &GAdapterVars,
    flags: &Ablations,
    eps: f64,
) -> Result<Var> {
    if flags.no_pre_ln != block.pre_ln.is_none() || flags.no_post_ln != block.post_ln.is_none() {
        bail!(Contract, "gadapter LayerNorm parameters disagree with the ablation flags");
    }
    let s = if flags.no_s { None } else { s };
    check_structure(tape, x, s)?;
    let normed = match block.pre_ln {
        Some((g, b)) => tape.layer_norm(x, g, b, eps)?,
        None => x,
    };
    let conv = graph_conv(tape, normed, s, block.w_down, block.w_up)?;
    let conv = if flags.no_act { conv } else { tape.relu(conv) };
    let sum = tape.add(normed, conv)?;
    match block.post_ln {
        Some((g, b)) => tape.layer_norm(sum, g, b, eps),
        None => Ok(sum),
    }
}

/// Classic bottleneck adapter, `X + σ(S·X·W_down)·W_up` (`S` omitted when
/// `s` is `None`).
pub fn adapter_forward(tape: &mut Tape<'_>, x: Var, w_down: Var, w_up: Var, s: Option<Var>) -> Result<Var> {
    check_structure(tape, x, s)?;
    let low = tape.matmul(x, w_down)?;
    let low = match s {
        Some(s) => tape.matmul(s, low)?,
        None => low,
    };
    let act = tape.relu(low);
    let up = tape.matmul(act, w_up)?;
    tape.add(x, up)
}

/// Low-rank update term `scale · (S·)X·W_down·W_up`.
pub fn lora_delta(tape: &mut Tape<'_>, x: Var, w_down: Var, w_up: Var, scale: f64, s: Option<Var>) -> Result<Var> {
    check_structure(tape, x, s)?;
    let conv = graph_conv(tape, x, s, w_down, w_up)?;
    Ok(tape.scale(conv, scale))
}

/// `X·W* + b* + scale · (S·)X·W_down·W_up`.
pub fn lora_forward(
    tape: &mut Tape<'_>,
    x: Var,
    w_star: Var,
    b_star: Var,
    w_down: Var,
    w_up: Var,
    scale: f64,
    s: Option<Var>,
) -> Result<Var> {
    let base = tape.matmul(x, w_star)?;
    let base = tape.add_bias(base, b_star)?;
    let delta = lora_delta(tape, x, w_down, w_up, scale, s)?;
    tape.add(base, delta)
}

/// `Σ_i A_i ⊗ B_i`.
pub fn compacter_weight(tape: &mut Tape<'_>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.is_empty() || a.len() != b.len() {
        bail!(
            Config,
            "compacter needs matching non-empty factor lists, got {} and {}",
            a.len(),
            b.len()
        );
    }
    let mut total = tape.kron(a[0], b[0])?;
    for (ai, bi) in a.iter().zip(b).skip(1) {
        let k = tape.kron(*ai, *bi)?;
        total = tape.add(total, k)?;
    }
    Ok(total)
}

/// Hypernetwork-generated adapter weights: `reshape(gen · task)`.
pub fn hyperformer_generate(
    tape: &mut Tape<'_>,
    task: Var,
    gen_down: Var,
    gen_up: Var,
    d: usize,
    r: usize,
) -> Result<(Var, Var)> {
    let down = tape.matmul(gen_down, task)?;
    let up = tape.matmul(gen_up, task)?;
    Ok((tape.reshape(down, &[d, r])?, tape.reshape(up, &[r, d])?))
}

/// `X + LN(σ(X·W_down)·W_up)` with generated LayerNorm affine parameters.
pub fn hyperformer_forward(
    tape: &mut Tape<'_>,
    x: Var,
    w_down: Var,
    w_up: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let low = tape.matmul(x, w_down)?;
    let act = tape.relu(low);
    let up = tape.matmul(act, w_up)?;
    let normed = tape.layer_norm(up, gamma, beta, eps)?;
    tape.add(x, normed)
}

fn is_bias_role(name: &str) -> bool {
    let role = name.rsplit('.').next().unwrap_or("");
    matches!(role, "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "gamma" | "beta")
}

/// Biases, LayerNorm affine parameters and the prediction head.
pub fn bitfit_mask(model: &Model) -> FreezeMask {
    let trainable = model
        .params
        .iter()
        .filter(|p| Model::is_head_name(&p.name) || (model.is_backbone_name(&p.name) && is_bias_role(&p.name)))
        .map(|p| p.name.clone())
        .collect();
    FreezeMask { trainable }
}

/// Fraction of scalars that are trainable.
pub fn trainable_ratio(model: &Model, mask: &FreezeMask) -> f64 {
    let total = model.params.total_scalars();
    let trainable: usize = model
        .params
        .iter()
        .filter(|p| mask.contains(&p.name))
        .map(|p| p.tensor.numel())
        .sum();
    trainable as f64 / total as f64
}

struct Builder<'p> {
    params: &'p mut ParamStore,
    seed: u64,
    added: Vec<String>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], scheme: InitScheme) -> Result<usize> {
        let id = self.params.init(&name, shape, scheme, self.seed)?;
        self.added.push(name);
        Ok(id)
    }
}

/// Installs the method's modules and returns the instrumented model with its
/// freeze mask applied. `seed` keys the initialization of new modules.
pub fn instrument(mut model: Model, spec: &PeftSpec, seed: u64) -> Result<(Model, FreezeMask)> {
    if model.peft.is_some() {
        bail!(Config, "model is already instrumented");
    }
    spec.validate(&model.config)?;
    let d = model.config.hidden;
    let r = spec.r;
    let layers = model.config.num_layers;
    let up_init = spec.up_init();
    let xavier = InitScheme::XavierUniform;

    let mut inst = Instrumentation {
        spec: spec.clone(),
        hidden: d,
        blocks: Vec::new(),
        lora_q: Vec::new(),
        lora_v: Vec::new(),
        parallel: Vec::new(),
        task_embed: None,
        kron_a: Vec::new(),
    };
    let mut b = Builder {
        params: &mut model.params,
        seed,
        added: Vec::new(),
    };

    match spec.method {
        Method::Full | Method::Bitfit => {}
        Method::Lora | Method::LoraS | Method::Mam => {
            for l in 0..layers {
                for (target, slot) in [("q", &mut inst.lora_q), ("v", &mut inst.lora_v)] {
                    let w_down = b.add(format!("enc.{l}.attn.lora_{target}.w_down"), &[d, r], xavier)?;
                    let w_up = b.add(format!("enc.{l}.attn.lora_{target}.w_up"), &[r, d], up_init)?;
                    slot.push(LowRank { layer: l, w_down, w_up });
                }
                if spec.method == Method::Mam {
                    let w_down = b.add(format!("enc.{l}.ffn.parallel.w_down"), &[d, r], xavier)?;
                    let w_up = b.add(format!("enc.{l}.ffn.parallel.w_up"), &[r, d], up_init)?;
                    inst.parallel.push(LowRank { layer: l, w_down, w_up });
                }
            }
        }
        Method::Adapter | Method::AdapterS | Method::Gadapter | Method::Hyperformer | Method::Compacter => {
            let insertion = spec.effective_insertion().expect("block methods have an insertion");
            if spec.method == Method::Hyperformer {
                inst.task_embed = Some(b.add("peft.hyper.task".into(), &[spec.task_dim, 1], InitScheme::Ones)?);
            }
            if spec.method == Method::Compacter {
                for i in 0..spec.kron_factors {
                    let n = spec.kron_factors;
                    inst.kron_a.push(b.add(format!("peft.compacter.a{i}"), &[n, n], xavier)?);
                }
            }
            for l in 0..layers {
                for &pos in insertion.positions() {
                    let prefix = format!("enc.{l}.{}.{}", pos.name(), spec.method.name());
                    let block = match spec.method {
                        Method::Gadapter => {
                            let abl = spec.ablations;
                            let pre_ln = if abl.no_pre_ln {
                                None
                            } else {
                                Some((
                                    b.add(format!("{prefix}.pre_ln.gamma"), &[d], InitScheme::Ones)?,
                                    b.add(format!("{prefix}.pre_ln.beta"), &[d], InitScheme::Zeros)?,
                                ))
                            };
                            let w_down = b.add(format!("{prefix}.w_down"), &[d, r], xavier)?;
                            let w_up = b.add(format!("{prefix}.w_up"), &[r, d], up_init)?;
                            let post_ln = if abl.no_post_ln {
                                None
                            } else {
                                Some((
                                    b.add(format!("{prefix}.post_ln.gamma"), &[d], InitScheme::Ones)?,
                                    b.add(format!("{prefix}.post_ln.beta"), &[d], InitScheme::Zeros)?,
                                ))
                            };
                            Block::GAdapter {
                                w_down,
                                w_up,
                                pre_ln,
                                post_ln,
                            }
                        }
                        Method::Adapter | Method::AdapterS => Block::Adapter {
                            w_down: b.add(format!("{prefix}.w_down"), &[d, r], xavier)?,
                            w_up: b.add(format!("{prefix}.w_up"), &[r, d], up_init)?,
                            structured: spec.method == Method::AdapterS,
                        },
                        Method::Hyperformer => {
                            let t = spec.task_dim;
                            Block::Hyper {
                                gen_down: b.add(format!("{prefix}.gen_down"), &[d * r, t], xavier)?,
                                gen_up: b.add(format!("{prefix}.gen_up"), &[r * d, t], up_init)?,
                                gen_gamma: b.add(format!("{prefix}.gen_gamma"), &[d, t], xavier)?,
                                gen_beta: b.add(format!("{prefix}.gen_beta"), &[d, t], InitScheme::Zeros)?,
                            }
                        }
                        Method::Compacter => {
                            let n = spec.kron_factors;
                            let mut down = Vec::with_capacity(n);
                            let mut up = Vec::with_capacity(n);
                            for i in 0..n {
                                down.push(b.add(format!("{prefix}.down.b{i}"), &[d / n, r / n], xavier)?);
                                up.push(b.add(format!("{prefix}.up.b{i}"), &[r / n, d / n], up_init)?);
                            }
                            Block::Compacter { down, up }
                        }
                        _ => unreachable!("non-block method"),
                    };
                    inst.blocks.push(Installed {
                        layer: l,
                        position: pos,
                        block,
                    });
                }
            }
        }
    }

    let added = std::mem::take(&mut b.added);
    let mask = match spec.method {
        Method::Full => FreezeMask {
            trainable: model.params.iter().map(|p| p.name.clone()).collect(),
        },
        Method::Bitfit => bitfit_mask(&model),
        _ => {
            let mut trainable: BTreeSet<String> = added.into_iter().collect();
            trainable.extend(
                model
                    .params
                    .iter()
                    .filter(|p| Model::is_head_name(&p.name))
                    .map(|p| p.name.clone()),
            );
            FreezeMask { trainable }
        }
    };
    model.params.set_trainable(&mask.trainable);
    model.peft = Some(inst);
    Ok((model, mask))
}

impl Instrumentation {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn lora_count(&self) -> usize {
        self.lora_q.len() + self.lora_v.len()
    }

    pub fn parallel_count(&self) -> usize {
        self.parallel.len()
    }

    /// The structure matrix the instrumented model needs per graph.
    pub fn structure_request(&self) -> Option<(StructureKind, Option<(f64, f64)>)> {
        let kind = self.spec.effective_structure()?;
        let mix = (kind == StructureKind::S4).then_some((self.spec.alpha, self.spec.beta));
        Some((kind, mix))
    }

    fn gadapter_vars(vars: &[Var], w_down: usize, w_up: usize, pre_ln: Option<(usize, usize)>, post_ln: Option<(usize, usize)>) -> GAdapterVars {
        GAdapterVars {
            w_down: vars[w_down],
            w_up: vars[w_up],
            pre_ln: pre_ln.map(|(g, b)| (vars[g], vars[b])),
            post_ln: post_ln.map(|(g, b)| (vars[g], vars[b])),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn apply(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        layer: usize,
        pos: Position,
        mut x: Var,
        structure: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        for inst in self.blocks.iter().filter(|b| b.layer == layer && b.position == pos) {
            x = match &inst.block {
                Block::GAdapter {
                    w_down,
                    w_up,
                    pre_ln,
                    post_ln,
                } => {
                    let bv = Self::gadapter_vars(vars, *w_down, *w_up, *pre_ln, *post_ln);
                    if structure.is_none() && !self.spec.ablations.no_s {
                        bail!(Contract, "gadapter needs a structure matrix");
                    }
                    gadapter_forward(tape, x, structure, &bv, &self.spec.ablations, eps)?
                }
                Block::Adapter {
                    w_down,
                    w_up,
                    structured,
                } => {
                    let s = if *structured {
                        let Some(s) = structure else {
                            bail!(Contract, "structured adapter needs a structure matrix");
                        };
                        Some(s)
                    } else {
                        None
                    };
                    adapter_forward(tape, x, vars[*w_down], vars[*w_up], s)?
                }
                Block::Hyper {
                    gen_down,
                    gen_up,
                    gen_gamma,
                    gen_beta,
                } => {
                    let task = vars[self.task_embed.expect("hyperformer task embedding")];
                    let (wd, wu) = hyperformer_generate(tape, task, vars[*gen_down], vars[*gen_up], self.hidden, self.spec.r)?;
                    let gamma = tape.matmul(vars[*gen_gamma], task)?;
                    let gamma = tape.reshape(gamma, &[self.hidden])?;
                    let beta = tape.matmul(vars[*gen_beta], task)?;
                    let beta = tape.reshape(beta, &[self.hidden])?;
                    hyperformer_forward(tape, x, wd, wu, gamma, beta, eps)?
                }
                Block::Compacter { down, up } => {
                    let a: Vec<Var> = self.kron_a.iter().map(|&i| vars[i]).collect();
                    let down: Vec<Var> = down.iter().map(|&i| vars[i]).collect();
                    let up: Vec<Var> = up.iter().map(|&i| vars[i]).collect();
                    let wd = compacter_weight(tape, &a, &down)?;
                    let wu = compacter_weight(tape, &a, &up)?;
                    adapter_forward(tape, x, wd, wu, None)?
                }
            };
        }
        Ok(x)
    }

    pub(crate) fn lora_delta(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        layer: usize,
        target: LoraTarget,
        x: Var,
        structure: Option<Var>,
    ) -> Result<Option<Var>> {
        let slots = match target {
            LoraTarget::Query => &self.lora_q,
            LoraTarget::Value => &self.lora_v,
        };
        let Some(slot) = slots.iter().find(|s| s.layer == layer) else {
            return Ok(None);
        };
        let s = if self.spec.method == Method::LoraS {
            let Some(s) = structure else {
                bail!(Contract, "lora_s needs a structure matrix");
            };
            Some(s)
        } else {
            None
        };
        let delta = lora_delta(tape, x, vars[slot.w_down], vars[slot.w_up], self.spec.lora_scale, s)?;
        Ok(Some(delta))
    }

    /// MAM's scaled parallel FFN adapter: `s · σ(X·W_down)·W_up`.
    pub(crate) fn parallel(&self, tape: &mut Tape<'_>, vars: &[Var], layer: usize, x: Var) -> Result<Option<Var>> {
        let Some(slot) = self.parallel.iter().find(|s| s.layer == layer) else {
            return Ok(None);
        };
        let low = tape.matmul(x, vars[slot.w_down])?;
        let act = tape.relu(low);
        let up = tape.matmul(act, vars[slot.w_up])?;
        Ok(Some(tape.scale(up, self.spec.lora_scale)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::graph::Graph;
    use crate::model::{ModelConfig, TaskKind};
    use crate::tensor::{init_params, Tensor};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        init_params(shape, InitScheme::XavierUniform, seed).map(|v| 2.0 * v + 0.05)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: 5,
            ..ModelConfig::default()
        }
    }

    fn cycle(n: usize) -> Graph {
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::new("c", n, edges, (0..n).map(|i| i % 5).collect(), 1.0).unwrap()
    }

    fn weighted_sum<'a>(tape: &mut Tape<'a>, out: Var, weights: &Tensor) -> Result<Var> {
        let w = tape.leaf(weights.clone(), false);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }

    #[test]
    fn gadapter_gradients() {
        let (m, d, r) = (5, 6, 3);
        let s = rand(&[m, m], 1);
        let readout = rand(&[m, d], 2);
        for ablations in [
            Ablations::default(),
            Ablations { no_s: true, ..Ablations::default() },
            Ablations { no_pre_ln: true, no_post_ln: true, ..Ablations::default() },
            Ablations { no_act: true, ..Ablations::default() },
        ] {
            let params = vec![
                rand(&[m, d], 3),
                rand(&[d, r], 4),
                rand(&[r, d], 5),
                rand(&[d], 6).map(|v| v + 1.0),
                rand(&[d], 7),
                rand(&[d], 8).map(|v| v + 1.0),
                rand(&[d], 9),
            ];
            let err = finite_difference_check(&params, 1e-6, |tape, v| {
                let sv = tape.leaf(s.clone(), false);
                let block = GAdapterVars {
                    w_down: v[1],
                    w_up: v[2],
                    pre_ln: (!ablations.no_pre_ln).then_some((v[3], v[4])),
                    post_ln: (!ablations.no_post_ln).then_some((v[5], v[6])),
                };
                let out = gadapter_forward(tape, v[0], Some(sv), &block, &ablations, 1e-5)?;
                weighted_sum(tape, out, &readout)
            })
            .unwrap();
            assert!(err < 1e-6, "{ablations:?}: {err}");
        }
    }

    #[test]
    fn adapter_and_lora_gradients() {
        let (m, d, r) = (4, 6, 2);
        let s = rand(&[m, m], 11);
        let readout = rand(&[m, d], 12);
        let params = vec![rand(&[m, d], 13), rand(&[d, r], 14), rand(&[r, d], 15), rand(&[d, d], 16), rand(&[d], 17)];
        for structured in [false, true] {
            let err = finite_difference_check(&params, 1e-6, |tape, v| {
                let sv = structured.then(|| tape.leaf(s.clone(), false));
                let out = adapter_forward(tape, v[0], v[1], v[2], sv)?;
                weighted_sum(tape, out, &readout)
            })
            .unwrap();
            assert!(err < 1e-6, "adapter {structured}: {err}");
            let err = finite_difference_check(&params, 1e-6, |tape, v| {
                let sv = structured.then(|| tape.leaf(s.clone(), false));
                let out = lora_forward(tape, v[0], v[3], v[4], v[1], v[2], 2.0, sv)?;
                weighted_sum(tape, out, &readout)
            })
            .unwrap();
            assert!(err < 1e-6, "lora {structured}: {err}");
        }
    }

    #[test]
    fn hyperformer_and_compacter_gradients() {
        let (m, d, r, t) = (3, 4, 2, 2);
        let readout = rand(&[m, d], 21);
        let params = vec![
            rand(&[m, d], 22),
            rand(&[t, 1], 23),
            rand(&[d * r, t], 24),
            rand(&[r * d, t], 25),
            rand(&[d, t], 26),
            rand(&[d, t], 27),
        ];
        let err = finite_difference_check(&params, 1e-6, |tape, v| {
            let (wd, wu) = hyperformer_generate(tape, v[1], v[2], v[3], d, r)?;
            let g = tape.matmul(v[4], v[1])?;
            let g = tape.reshape(g, &[d])?;
            let b = tape.matmul(v[5], v[1])?;
            let b = tape.reshape(b, &[d])?;
            let out = hyperformer_forward(tape, v[0], wd, wu, g, b, 1e-5)?;
            weighted_sum(tape, out, &readout)
        })
        .unwrap();
        assert!(err < 1e-6, "hyperformer: {err}");

        let n = 2;
        let params = vec![
            rand(&[m, d], 31),
            rand(&[n, n], 32),
            rand(&[n, n], 33),
            rand(&[d / n, r / n], 34),
            rand(&[d / n, r / n], 35),
            rand(&[r / n, d / n], 36),
            rand(&[r / n, d / n], 37),
        ];
        let err = finite_difference_check(&params, 1e-6, |tape, v| {
            let wd = compacter_weight(tape, &[v[1], v[2]], &[v[3], v[4]])?;
            let wu = compacter_weight(tape, &[v[1], v[2]], &[v[5], v[6]])?;
            let out = adapter_forward(tape, v[0], wd, wu, None)?;
            weighted_sum(tape, out, &readout)
        })
        .unwrap();
        assert!(err < 1e-6, "compacter: {err}");
    }

    #[test]
    fn identity_structure_matches_no_s() {
        let (m, d, r) = (5, 6, 3);
        let x = rand(&[m, d], 41);
        let (wd, wu) = (rand(&[d, r], 42), rand(&[r, d], 43));
        let eye = Tensor::eye(m);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let block = GAdapterVars {
            w_down: tape.constant(&wd),
            w_up: tape.constant(&wu),
            pre_ln: None,
            post_ln: None,
        };
        let flags = Ablations {
            no_pre_ln: true,
            no_post_ln: true,
            ..Ablations::default()
        };
        let sv = tape.constant(&eye);
        let with_eye = gadapter_forward(&mut tape, xv, Some(sv), &block, &flags, 1e-5).unwrap();
        let no_s = Ablations { no_s: true, ..flags };
        let without = gadapter_forward(&mut tape, xv, Some(sv), &block, &no_s, 1e-5).unwrap();
        assert!(tape.value(with_eye).max_abs_diff(tape.value(without)) <= 1e-12);
    }

    #[test]
    fn layer_norm_flags_must_match_block() {
        let x = rand(&[3, 4], 1);
        let w = rand(&[4, 2], 2);
        let u = rand(&[2, 4], 3);
        let mut tape = Tape::new();
        let block = GAdapterVars {
            w_down: tape.constant(&w),
            w_up: tape.constant(&u),
            pre_ln: None,
            post_ln: None,
        };
        let xv = tape.constant(&x);
        let err = gadapter_forward(&mut tape, xv, None, &block, &Ablations { no_s: true, ..Ablations::default() }, 1e-5);
        assert!(matches!(err, Err(crate::error::LabError::Contract(_))));
    }

    #[test]
    fn block_counts_follow_insertion() {
        let cfg = small_config();
        let l = cfg.num_layers;
        let count = |spec: PeftSpec| {
            let (m, _) = instrument(Model::new(cfg.clone()).unwrap(), &spec, 0).unwrap();
            let inst = m.instrumentation().unwrap().clone();
            (inst.block_count(), inst.lora_count(), inst.parallel_count())
        };
        assert_eq!(count(PeftSpec::new(Method::Gadapter, 2)), (l, 0, 0));
        assert_eq!(count(PeftSpec::new(Method::Adapter, 2)), (2 * l, 0, 0));
        assert_eq!(count(PeftSpec::new(Method::Hyperformer, 2)), (2 * l, 0, 0));
        assert_eq!(count(PeftSpec::new(Method::Compacter, 2)), (2 * l, 0, 0));
        assert_eq!(count(PeftSpec::new(Method::Lora, 2)), (0, 2 * l, 0));
        assert_eq!(count(PeftSpec::new(Method::Mam, 2)), (0, 2 * l, l));
        assert_eq!(count(PeftSpec::new(Method::Bitfit, 2)), (0, 0, 0));
        assert_eq!(
            count(PeftSpec::new(Method::Gadapter, 2).with_insertion(Insertion::MhaAndFfn)),
            (2 * l, 0, 0)
        );
    }

    #[test]
    fn gamma_grows_with_r() {
        let ratios: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&r| {
                let (m, mask) = instrument(Model::new(small_config()).unwrap(), &PeftSpec::new(Method::Gadapter, r), 0).unwrap();
                trainable_ratio(&m, &mask)
            })
            .collect();
        assert!(ratios.windows(2).all(|w| w[0] < w[1]), "{ratios:?}");
        assert!(ratios.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn bitfit_selects_biases_norms_and_head() {
        let cfg = small_config();
        let (m, mask) = instrument(Model::new(cfg.clone()).unwrap(), &PeftSpec::new(Method::Bitfit, 1), 0).unwrap();
        for name in &mask.trainable {
            if !Model::is_head_name(name) {
                let role = name.rsplit('.').next().unwrap();
                assert!(!role.starts_with('w') && role != "table" && role != "spatial", "{name}");
            }
        }
        let (d, ff, l) = (cfg.hidden, cfg.ffn_dim, cfg.num_layers);
        let expected = l * (4 * d + ff + d + 4 * d) + d + 1;
        assert_eq!(m.params.trainable_scalars(), expected);
    }

    #[test]
    fn names_are_stable() {
        let spec = PeftSpec::new(Method::Gadapter, 2);
        let (a, _) = instrument(Model::new(small_config()).unwrap(), &spec, 3).unwrap();
        let (b, _) = instrument(Model::new(small_config()).unwrap(), &spec, 3).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        for name in ["enc.0.mid_ffn.gadapter.w_down", "enc.1.mid_ffn.gadapter.post_ln.gamma"] {
            assert!(a.params.id(name).is_some(), "{name}");
        }
        let (lora, _) = instrument(Model::new(small_config()).unwrap(), &PeftSpec::new(Method::Lora, 2), 0).unwrap();
        assert!(lora.params.id("enc.1.attn.lora_v.w_up").is_some());
    }

    #[test]
    fn freeze_mask_covers_added_modules_and_head() {
        let (m, mask) = instrument(Model::new(small_config()).unwrap(), &PeftSpec::new(Method::Adapter, 2), 0).unwrap();
        for p in m.params.iter() {
            let added = p.name.contains(".adapter.");
            assert_eq!(p.trainable, added || Model::is_head_name(&p.name), "{}", p.name);
            assert_eq!(p.trainable, mask.contains(&p.name));
        }
    }

    #[test]
    fn zero_up_projection_leaves_backbone_output() {
        let cfg = small_config();
        let backbone = Model::new(cfg.clone()).unwrap();
        let g = cycle(6);
        let reference = backbone.predict_values(&[backbone.prepare(&g).unwrap()], TaskKind::Classification).unwrap()[0];
        for method in [Method::Adapter, Method::AdapterS, Method::Lora, Method::LoraS, Method::Mam, Method::Compacter, Method::Hyperformer] {
            let spec = PeftSpec {
                up_init: Some(InitScheme::Zeros),
                ..PeftSpec::new(method, 2)
            };
            let (m, _) = instrument(backbone.clone(), &spec, 5).unwrap();
            let y = m.predict_values(&[m.prepare(&g).unwrap()], TaskKind::Classification).unwrap()[0];
            assert_eq!(y, reference, "{method:?}");
        }
    }

    #[test]
    fn double_instrumentation_is_rejected() {
        let spec = PeftSpec::new(Method::Gadapter, 2);
        let (m, _) = instrument(Model::new(small_config()).unwrap(), &spec, 0).unwrap();
        assert!(instrument(m, &spec, 0).is_err());
    }

    #[test]
    fn mid_ffn_needs_square_ffn() {
        let cfg = ModelConfig {
            ffn_dim: 12,
            ..small_config()
        };
        assert!(PeftSpec::new(Method::Gadapter, 2).validate(&cfg).is_err());
        assert!(PeftSpec::new(Method::Adapter, 2).validate(&cfg).is_ok());
    }
}
