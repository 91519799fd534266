//! Reverse-mode gradients of a small softmax-regression loss, compared
//! against central finite differences.

use bmcl::methods::loss_erm;
use bmcl::tensor::{Tape, Tensor};
use bmcl::Result;

fn loss(w: &Tensor, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let xv = tape.constant(x.clone());
    let logits = tape.matmul(xv, wv)?;
    let h = tape.relu(logits);
    let l = loss_erm(&mut tape, h, labels)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), grads.get(wv)))
}

fn main() -> Result<()> {
    let x = Tensor::matrix(4, 3, vec![1.0, -2.0, 0.5, 0.3, 0.8, -1.2, -0.7, 0.1, 2.0, 1.5, 1.1, -0.4])?;
    let w = Tensor::matrix(3, 2, vec![0.2, -0.1, 0.4, 0.3, -0.5, 0.6])?;
    let labels = [0, 1, 1, 0];

    let (value, grad) = loss(&w, &x, &labels)?;
    println!("loss = {value:.6}");
    let h = 1e-5;
    for j in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[j] += h;
        let mut minus = w.clone();
        minus.data_mut()[j] -= h;
        let numeric = (loss(&plus, &x, &labels)?.0 - loss(&minus, &x, &labels)?.0) / (2.0 * h);
        println!("dL/dw[{j}]  tape {:+.8}  finite-diff {numeric:+.8}", grad.data()[j]);
    }
    Ok(())
}
