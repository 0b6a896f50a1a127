//! The proximal-point objective: symmetric KL between Bernoulli outputs and
//! the effect of the mixing weight on a short fine-tuning run.

use gadapter_lab::autodiff::Tape;
use gadapter_lab::data::{gen_data, split, DatasetKind, GenConfig};
use gadapter_lab::model::{Model, ModelConfig, TaskKind};
use gadapter_lab::peft::{instrument, Method, PeftSpec};
use gadapter_lab::tensor::Tensor;
use gadapter_lab::training::{bregman_divergence, fit, symmetric_kl, total_loss, vanilla_loss, TrainConfig};

pub fn main() -> gadapter_lab::Result<()> {
    println!("symmetric KL(0.75, 0.25) = {:.12} (ln 3 = {:.12})", symmetric_kl(0.75, 0.25), 3f64.ln());
    for q in [0.5, 0.6, 0.9, 0.99] {
        println!("  symmetric KL(0.5, {q}) = {:.5}", symmetric_kl(0.5, q));
    }

    let preds = Tensor::vector(vec![0.8, 0.3, 0.6]);
    let mut tape = Tape::new();
    let p = tape.leaf_ref(&preds, true);
    let v = vanilla_loss(&mut tape, p, &[1.0, 0.0, 1.0], TaskKind::Classification)?;
    let b = bregman_divergence(&mut tape, p, &[0.7, 0.35, 0.4], TaskKind::Classification)?;
    let total = total_loss(&mut tape, v, b, 0.1)?;
    println!(
        "vanilla {:.5}, proximal {:.5}, total (mu = 0.1) {:.5}",
        tape.value(v).item(),
        tape.value(b).item(),
        tape.value(total).item()
    );

    let ds = gen_data(&GenConfig {
        kind: DatasetKind::TriangleClf,
        count: 120,
        seed: 9,
        ..GenConfig::default()
    })?;
    let [train, valid, _] = split(&ds, [0.8, 0.1, 0.1], 0)?;
    let config = ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        ffn_dim: 8,
        ..ModelConfig::default()
    };
    for mu in [0.0, 0.1, 0.5] {
        let (mut model, _) = instrument(Model::new(config.clone())?, &PeftSpec::new(Method::Gadapter, 2), 0)?;
        let (tr, va) = (model.prepare_all(&train.graphs)?, model.prepare_all(&valid.graphs)?);
        let report = fit(&mut model, &tr, &va, TaskKind::Classification, &TrainConfig { epochs: 3, mu, ..TrainConfig::default() })?;
        let losses: Vec<String> = report.history().iter().map(|e| format!("{:.4}", e.train_loss)).collect();
        println!("mu {mu}: train loss {} | best valid AUC {:.4}", losses.join(" "), report.best_metric.unwrap_or(f64::NAN));
    }
    Ok(())
}
