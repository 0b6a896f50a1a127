//! Masked-node pretraining of a small backbone, saved as a full checkpoint.

use gadapter_lab::data::{gen_data, DatasetKind, GenConfig};
use gadapter_lab::diagnostics::{save_checkpoint, CheckpointKind};
use gadapter_lab::model::{pretrain_masked_nodes, HeadKind, Model, ModelConfig, PretrainConfig};

pub fn main() -> gadapter_lab::Result<()> {
    let corpus = gen_data(&GenConfig {
        kind: DatasetKind::DegreeCorpus,
        count: 150,
        n_range: (6, 12),
        seed: 3,
        ..GenConfig::default()
    })?;
    let mut model = Model::new(ModelConfig {
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ffn_dim: 16,
        head: HeadKind::MaskedNode,
        ..ModelConfig::default()
    })?;
    let losses = pretrain_masked_nodes(
        &mut model,
        &corpus.graphs,
        &PretrainConfig {
            epochs: 4,
            ..PretrainConfig::default()
        },
    )?;
    for (epoch, loss) in losses.iter().enumerate() {
        println!("epoch {epoch}: masked-node loss {loss:.4}");
    }
    let bytes = save_checkpoint(&model, CheckpointKind::Full)?;
    let path = std::env::temp_dir().join("gadapter-lab-examples/backbone.ckpt");
    std::fs::create_dir_all(path.parent().expect("has parent")).expect("temp dir is writable");
    std::fs::write(&path, &bytes).expect("temp dir is writable");
    println!("{} parameters, {} bytes -> {}", model.params.total_scalars(), bytes.len(), path.display());
    Ok(())
}
