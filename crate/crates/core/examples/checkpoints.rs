//! Full and delta checkpoints: sizes, parsing, reloading and the digest
//! check that ties a delta to its backbone.

use gadapter_lab::diagnostics::{checkpoint_size, load_checkpoint, parse_checkpoint, save_checkpoint, save_delta, CheckpointKind};
use gadapter_lab::model::{Model, ModelConfig};
use gadapter_lab::peft::{instrument, Method, PeftSpec};

pub fn main() -> gadapter_lab::Result<()> {
    let backbone = Model::new(ModelConfig::default())?;
    let (model, mask) = instrument(backbone.clone(), &PeftSpec::new(Method::Gadapter, 4), 0)?;

    let full = save_checkpoint(&model, CheckpointKind::Full)?;
    let delta = save_delta(&model, &mask)?;
    let expected = checkpoint_size(model.params.iter().filter(|p| p.trainable).map(|p| (p.name.as_str(), &p.tensor)));
    println!("full {} bytes, delta {} bytes ({:.2}%)", full.len(), delta.len(), 100.0 * delta.len() as f64 / full.len() as f64);
    assert_eq!(delta.len(), expected);

    let parsed = parse_checkpoint(&delta)?;
    println!("delta holds {} tensors, e.g.:", parsed.tensors.len());
    for (name, t) in parsed.tensors.iter().take(4) {
        println!("  {name} {:?}", t.shape());
    }

    let restored = load_checkpoint(&delta, &model)?;
    assert_eq!(save_checkpoint(&restored, CheckpointKind::Full)?, full);
    println!("save -> load -> save is byte-identical");

    let mut other = Model::new(ModelConfig { seed: 1, ..ModelConfig::default() })?;
    other = instrument(other, &PeftSpec::new(Method::Gadapter, 4), 0)?.0;
    match load_checkpoint(&delta, &other) {
        Err(e) => println!("loading onto a different backbone fails: {e}"),
        Ok(_) => unreachable!("digest must differ"),
    }
    Ok(())
}
