//! Reverse-mode automatic differentiation over dense tensors, plus AdamW.

mod graph;
pub mod kernels;
mod optim;
mod scalar;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, clip_param_grads, cosine_lr, global_norm, AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};

/// Scalar KL divergence `Σ softmax(p)·(log_softmax(p) − log_softmax(q))`
/// between two logit vectors, recorded on the graph.
pub fn kl_from_logits<F: Scalar>(g: &mut Graph<F>, p_logits: Var, q_logits: Var) -> crate::Result<Var> {
    let rows = g.kl_rows(p_logits, q_logits)?;
    g.sum(rows)
}
