//! Fine-tunes a structure-aware adapter on triangle detection over a
//! pretrained backbone and stores only the trainable delta.

use gadapter_lab::data::{gen_data, split, DatasetKind, GenConfig};
use gadapter_lab::diagnostics::{load_checkpoint, save_delta};
use gadapter_lab::experiment::fresh_model;
use gadapter_lab::model::{pretrain_masked_nodes, HeadKind, Model, ModelConfig, PretrainConfig, TaskKind};
use gadapter_lab::peft::{trainable_ratio, FreezeMask, Method, PeftSpec};
use gadapter_lab::training::{evaluate, fit, Metric, TrainConfig};

pub fn main() -> gadapter_lab::Result<()> {
    let config = ModelConfig {
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ffn_dim: 16,
        ..ModelConfig::default()
    };
    let corpus = gen_data(&GenConfig {
        kind: DatasetKind::DegreeCorpus,
        count: 120,
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
        count: 300,
        seed: 2,
        ..GenConfig::default()
    })?;
    let [train, valid, test] = split(&ds, [0.8, 0.1, 0.1], 0)?;

    let spec = PeftSpec::new(Method::Gadapter, 4);
    let mut model = fresh_model(&backbone, &config, TaskKind::Classification, &spec, 0)?;
    let mask = FreezeMask {
        trainable: model.params.trainable_names(),
    };
    println!("{}: {:.2}% of parameters trainable", spec.tag(), 100.0 * trainable_ratio(&model, &mask));

    let (tr, va, te) = (model.prepare_all(&train.graphs)?, model.prepare_all(&valid.graphs)?, model.prepare_all(&test.graphs)?);
    let report = fit(&mut model, &tr, &va, TaskKind::Classification, &TrainConfig { epochs: 6, ..TrainConfig::default() })?;
    for e in report.history() {
        println!("epoch {}: train loss {:.4}, valid AUC {:.4}", e.epoch, e.train_loss, e.eval_metric.unwrap_or(f64::NAN));
    }
    let auc = evaluate(&model, &te, TaskKind::Classification, Metric::Auc)?;
    println!("best epoch {:?}, test AUC {auc:.4}", report.best_epoch);

    let delta = save_delta(&model, &mask)?;
    let base = fresh_model(&backbone, &config, TaskKind::Classification, &spec, 0)?;
    let restored = load_checkpoint(&delta, &base)?;
    assert_eq!(evaluate(&restored, &te, TaskKind::Classification, Metric::Auc)?, auc);
    println!("delta checkpoint: {} bytes, reload reproduces the test AUC", delta.len());
    Ok(())
}
