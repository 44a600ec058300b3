//! Reverse-mode gradients on the tape, checked against central differences.

use dcsnet::tensor::{grad_check, GradCheckOptions, Tape, Tensor};

fn main() -> dcsnet::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?);
    let w = tape.leaf(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6])?);
    let b = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.1])?);
    let h = tape.dense(x, w, b)?;
    let h = tape.silu(h);
    let loss = tape.sum(h);
    println!("loss = {:.6}", tape.value(loss).item());
    let grads = tape.backward(loss)?;
    println!("dL/dw = {:?}", grads.get(w).data());

    let inputs = [
        Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.37).sin()),
        Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.91).cos()),
        Tensor::zeros(&[2]),
    ];
    let err = grad_check(
        |t, v| {
            let h = t.dense(v[0], v[1], v[2])?;
            let h = t.silu(h);
            Ok(t.sum(h))
        },
        &inputs,
        &GradCheckOptions { eps: 1e-6, max_coords: None, seed: 0 },
    )?;
    println!("max relative gradient error = {err:.2e}");
    Ok(())
}
