//! Synthetic structural datasets: generation, stratified splitting and the
//! JSON-lines format.

use gadapter_lab::data::{diameter, gen_data, has_triangle, split, Dataset, DatasetKind, GenConfig};

pub fn main() -> gadapter_lab::Result<()> {
    let dir = std::env::temp_dir().join("gadapter-lab-examples/generate_data");
    for kind in [DatasetKind::TriangleClf, DatasetKind::DiameterClf, DatasetKind::MeanpathReg] {
        let ds = gen_data(&GenConfig {
            kind,
            count: 120,
            seed: 7,
            ..GenConfig::default()
        })?;
        let labels = ds.labels();
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        println!("{kind}: {} graphs, mean label {mean:.3}", ds.len());
        let [train, valid, test] = split(&ds, [0.8, 0.1, 0.1], 0)?;
        println!("  split {} / {} / {}", train.len(), valid.len(), test.len());
        let path = dir.join(format!("{kind}.jsonl"));
        ds.write(&path)?;
        assert_eq!(Dataset::read(&path)?, ds);
    }
    let g = &gen_data(&GenConfig {
        kind: DatasetKind::TriangleClf,
        count: 2,
        seed: 1,
        ..GenConfig::default()
    })?
    .graphs[0];
    println!("first graph: {} nodes, triangle {}, diameter {:?}", g.num_nodes(), has_triangle(g), diameter(g));
    println!("files written to {}", dir.display());
    Ok(())
}
