use crate::error::{Error, Result};
use crate::tensor::{avgpool_forward, Tensor};

/// Floor applied to `o` and `1 - o` before taking logs.
pub const EPS: f64 = 1e-7;

/// Mean binary cross-entropy over all output neurons and its gradient with
/// respect to the outputs, `(o - t) / (N·o·(1 - o))`.
pub fn cross_entropy_loss(output: &Tensor, label: &Tensor) -> Result<(f64, Tensor)> {
    if output.shape() != label.shape() {
        return Err(Error::shape(format!(
            "output {} and pooled label {} differ",
            output.shape(),
            label.shape()
        )));
    }
    let n = output.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(output.data().len());
    for (&o, &t) in output.data().iter().zip(label.data()) {
        let (p, q) = (o.max(EPS), (1.0 - o).max(EPS));
        loss -= t * p.ln() + (1.0 - t) * q.ln();
        grad.push((o - t) / (n * p * q));
    }
    Ok((loss / n, Tensor::from_vec(output.shape(), grad)?))
}

/// Two successive 2×2 average pools: the label grid of a stride-4 network.
pub fn pool_labels(mask: &Tensor) -> Result<Tensor> {
    if mask.height() % 4 != 0 || mask.width() % 4 != 0 {
        return Err(Error::Geometry(format!(
            "mask {} must have height and width divisible by 4",
            mask.shape()
        )));
    }
    avgpool_forward(&avgpool_forward(mask, 2, 2)?, 2, 2)
}
