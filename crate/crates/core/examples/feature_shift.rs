//! Jensen–Shannon divergence between the graph representations of two
//! fine-tuned models on shared histogram bins.

use gadapter_lab::data::{gen_data, split, DatasetKind, GenConfig};
use gadapter_lab::diagnostics::{extract_features, feature_shift, js_divergence_base};
use gadapter_lab::experiment::fresh_model;
use gadapter_lab::model::{Model, ModelConfig, TaskKind};
use gadapter_lab::peft::{Method, PeftSpec};
use gadapter_lab::training::{fit, TrainConfig};

pub fn main() -> gadapter_lab::Result<()> {
    let config = ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        ffn_dim: 8,
        ..ModelConfig::default()
    };
    let backbone = Model::new(config.clone())?;
    let ds = gen_data(&GenConfig {
        kind: DatasetKind::TriangleClf,
        count: 120,
        seed: 5,
        ..GenConfig::default()
    })?;
    let [train, valid, test] = split(&ds, [0.8, 0.1, 0.1], 0)?;

    let mut features = Vec::new();
    for method in [Method::Full, Method::Gadapter, Method::Adapter] {
        let spec = PeftSpec::new(method, 2);
        let mut model = fresh_model(&backbone, &config, TaskKind::Classification, &spec, 0)?;
        let (tr, va, te) = (model.prepare_all(&train.graphs)?, model.prepare_all(&valid.graphs)?, model.prepare_all(&test.graphs)?);
        fit(&mut model, &tr, &va, TaskKind::Classification, &TrainConfig { epochs: 3, ..TrainConfig::default() })?;
        features.push((spec.tag(), extract_features(&model, &te)?));
    }
    let (full_tag, full) = &features[0];
    for (tag, other) in &features[1..] {
        let (js, hf, ho) = feature_shift(full, other, 100, 1e-8)?;
        let bits = js_divergence_base(&hf, &ho, 2.0)?;
        println!("JS({full_tag}, {tag}) = {js:.5} nats = {bits:.5} bits");
        let peak = ho.probs.iter().cloned().fold(0.0, f64::max);
        println!("  {} bins over [{:.3}, {:.3}], tallest bin {peak:.3}", ho.bins(), ho.edges[0], ho.edges[ho.bins()]);
    }
    Ok(())
}
