//! Dense `f64` tensors, reverse-mode differentiation, AdamW with a
//! per-parameter freeze mask, and a cosine learning-rate schedule.

mod checkpoint;
mod fd;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, FORMAT_VERSION};
pub use fd::finite_difference_gradient;
pub use graph::{Graph, Var};
pub use optim::{adamw_step, cosine_lr, warmup_cosine_lr, AdamWConfig, OptimizerState};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;

/// Largest relative error between two gradient maps, using
/// `|a - b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ta) in a {
        let Some(tb) = b.get(name) else {
            return f64::INFINITY;
        };
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    worst
}
