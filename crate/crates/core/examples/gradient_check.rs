//! Reverse-mode gradients on a small two-layer network, verified against
//! central finite differences.

use gadapter_lab::autodiff::{finite_difference_check, Tape};
use gadapter_lab::tensor::{init_params, InitScheme, Tensor};

pub fn main() -> gadapter_lab::Result<()> {
    let x = init_params(&[5, 4], InitScheme::XavierUniform, 1);
    let w1 = init_params(&[4, 6], InitScheme::XavierUniform, 2);
    let w2 = init_params(&[6, 3], InitScheme::XavierUniform, 3);
    let gamma = Tensor::ones(&[6]);
    let beta = Tensor::zeros(&[6]);

    let mut tape = Tape::new();
    let (xv, a, b) = (tape.constant(&x), tape.leaf_ref(&w1, true), tape.leaf_ref(&w2, true));
    let (g, bt) = (tape.leaf_ref(&gamma, true), tape.leaf_ref(&beta, true));
    let h = tape.matmul(xv, a)?;
    let h = tape.layer_norm(h, g, bt, 1e-5)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, b)?;
    let loss = tape.cross_entropy_rows(logits, &[Some(0), Some(2), None, Some(1), Some(1)])?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("|dL/dW1|_max {:.3e}", grads.get(a).map_or(0.0, |t| t.data().iter().fold(0.0, |m, v| v.abs().max(m))));

    let err = finite_difference_check(&[w1, w2, gamma, beta], 1e-6, |t, v| {
        let xv = t.constant(&x);
        let h = t.matmul(xv, v[0])?;
        let h = t.layer_norm(h, v[2], v[3], 1e-5)?;
        let h = t.relu(h);
        let logits = t.matmul(h, v[1])?;
        t.cross_entropy_rows(logits, &[Some(0), Some(2), None, Some(1), Some(1)])
    })?;
    println!("worst relative error vs finite differences: {err:.2e}");
    assert!(err < 1e-4);
    Ok(())
}
