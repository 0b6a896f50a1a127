//! Every fine-tuning method on one task: trainable fraction, test AUC and
//! the gap to full fine-tuning.

use std::collections::BTreeMap;

use gadapter_lab::data::{gen_data, split, DatasetKind, GenConfig};
use gadapter_lab::diagnostics::{performance_gap, Score};
use gadapter_lab::experiment::fresh_model;
use gadapter_lab::model::{pretrain_masked_nodes, HeadKind, Model, ModelConfig, PretrainConfig, TaskKind};
use gadapter_lab::peft::{trainable_ratio, FreezeMask, Method, PeftSpec};
use gadapter_lab::training::{evaluate, fit, Metric, TrainConfig};

pub fn main() -> gadapter_lab::Result<()> {
    let config = ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        ffn_dim: 8,
        ..ModelConfig::default()
    };
    let corpus = gen_data(&GenConfig {
        kind: DatasetKind::DegreeCorpus,
        count: 80,
        seed: 1,
        ..GenConfig::default()
    })?;
    let mut backbone = Model::new(ModelConfig {
        head: HeadKind::MaskedNode,
        ..config.clone()
    })?;
    pretrain_masked_nodes(&mut backbone, &corpus.graphs, &PretrainConfig { epochs: 2, ..PretrainConfig::default() })?;
    let ds = gen_data(&GenConfig {
        kind: DatasetKind::TriangleClf,
        count: 150,
        seed: 4,
        ..GenConfig::default()
    })?;
    let [train, valid, test] = split(&ds, [0.8, 0.1, 0.1], 0)?;

    let mut scores = BTreeMap::new();
    println!("{:<28} {:>8} {:>8}", "method", "gamma %", "AUC");
    for method in Method::ALL {
        let spec = PeftSpec::new(method, 2);
        let mut model = fresh_model(&backbone, &config, TaskKind::Classification, &spec, 0)?;
        let mask = FreezeMask {
            trainable: model.params.trainable_names(),
        };
        let gamma = trainable_ratio(&model, &mask);
        let (tr, va, te) = (model.prepare_all(&train.graphs)?, model.prepare_all(&valid.graphs)?, model.prepare_all(&test.graphs)?);
        fit(&mut model, &tr, &va, TaskKind::Classification, &TrainConfig { epochs: 3, ..TrainConfig::default() })?;
        let auc = evaluate(&model, &te, TaskKind::Classification, Metric::Auc)?;
        println!("{:<28} {:>8.2} {:>8.4}", spec.tag(), 100.0 * gamma, auc);
        scores.insert(method, auc);
    }
    let single = |v: f64| BTreeMap::from([("triangle_clf".to_string(), Score { metric: Metric::Auc, value: v })]);
    let full = single(scores[&Method::Full]);
    for (method, auc) in &scores {
        println!("gap {:<12} {:+.4}", method.name(), performance_gap(&single(*auc), &full)?);
    }
    Ok(())
}
