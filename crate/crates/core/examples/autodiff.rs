//! Builds a tiny graph on the tape, runs backward and compares the
//! gradient with central finite differences.

use densematch::tensor::{finite_difference_check, Tape, Tensor};

fn main() -> densematch::Result<()> {
    let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75])?;
    let w = Tensor::new([2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0])?;

    let mut tape = Tape::new();
    let xv = tape.leaf_ref(&x.clone().with_grad());
    let wv = tape.constant(w.clone());
    let r = tape.relu(xv);
    let y = tape.mul(r, wv)?;
    let loss = tape.sum(y);
    println!("loss = {}", tape.item(loss)?);
    let grads = tape.backward(loss)?;
    println!("d loss / dx = {:?}", grads.get(xv).unwrap());

    let err = finite_difference_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let r = t.relu(v);
            let y = t.mul(r, wv)?;
            Ok(t.sum(y))
        },
        &x,
        1e-3,
    )?;
    println!("finite-difference relative error {err:.2e}");
    Ok(())
}
