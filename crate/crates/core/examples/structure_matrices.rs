//! The four structure matrices of a small graph with a virtual node.

use gadapter_lab::graph::{add_virtual_node, build_structure, Graph, StructureKind, Unreachable};
use gadapter_lab::tensor::Tensor;

fn show(name: &str, m: &Tensor) {
    println!("{name}:");
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:6.3}")).collect();
        println!("  {}", row.join(" "));
    }
}

pub fn main() -> gadapter_lab::Result<()> {
    // a triangle with a pendant node
    let g = Graph::new("toy", 4, [(0, 1), (1, 2), (2, 0), (2, 3)], vec![1, 1, 2, 3], 1.0)?;
    let gv = add_virtual_node(&g, 16)?;
    println!("{} nodes after adding the virtual node, {} edges", gv.num_nodes(), gv.num_edges());
    for (kind, mix) in [
        (StructureKind::S1, None),
        (StructureKind::S2, None),
        (StructureKind::S3, None),
        (StructureKind::S4, Some((0.5, 0.5))),
    ] {
        let s = build_structure(&gv, kind, mix, Unreachable::Zero)?;
        show(&kind.to_string(), &s.matrix);
    }
    Ok(())
}
