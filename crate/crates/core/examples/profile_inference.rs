//! Inference latency and storage for several methods on the default
//! backbone.

use gadapter_lab::data::{gen_data, DatasetKind, GenConfig};
use gadapter_lab::diagnostics::profile;
use gadapter_lab::model::{Model, ModelConfig, TaskKind};
use gadapter_lab::peft::{instrument, Method, PeftSpec};

pub fn main() -> gadapter_lab::Result<()> {
    let backbone = Model::new(ModelConfig {
        num_layers: 2,
        ..ModelConfig::default()
    })?;
    let graphs = gen_data(&GenConfig {
        kind: DatasetKind::TriangleClf,
        count: 16,
        seed: 0,
        ..GenConfig::default()
    })?
    .graphs;
    println!("{:<28} {:>10} {:>10} {:>10} {:>8}", "method", "ms/sample", "full B", "delta B", "gamma %");
    for method in [Method::Full, Method::Bitfit, Method::Lora, Method::Adapter, Method::Gadapter] {
        let (model, _) = instrument(backbone.clone(), &PeftSpec::new(method, 4), 0)?;
        let inputs = model.prepare_all(&graphs)?;
        let p = profile(&model, &inputs[..4], TaskKind::Classification, 100)?;
        println!(
            "{:<28} {:>10.4} {:>10} {:>10} {:>8.2}",
            PeftSpec::new(method, 4).tag(),
            p.ms_per_sample,
            p.checkpoint_bytes_full,
            p.checkpoint_bytes_delta,
            100.0 * p.gamma
        );
    }
    Ok(())
}
