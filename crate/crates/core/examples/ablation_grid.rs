//! The insertion-position and component-ablation grid around the default
//! structure-aware adapter, with trainable fractions.

use gadapter_lab::experiment::ablation_grid;
use gadapter_lab::model::{Model, ModelConfig};
use gadapter_lab::peft::{instrument, trainable_ratio, Method, PeftSpec};

pub fn main() -> gadapter_lab::Result<()> {
    let backbone = Model::new(ModelConfig::default())?;
    for (variant, spec) in ablation_grid(&PeftSpec::new(Method::Gadapter, 4)) {
        let (model, mask) = instrument(backbone.clone(), &spec, 0)?;
        let blocks = model.instrumentation().map_or(0, |i| i.block_count());
        println!(
            "{variant:<12} {:<40} blocks {blocks:>2}  gamma {:.3}%",
            spec.tag(),
            100.0 * trainable_ratio(&model, &mask)
        );
    }
    Ok(())
}
