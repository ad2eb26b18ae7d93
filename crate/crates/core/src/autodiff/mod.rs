//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations eagerly as they are applied; `backward`
//! then walks the records in reverse once. Graphs are cheap to build, so the
//! usual pattern is one graph per loss evaluation.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::parallel;

/// Per-sample gradients: for each `i in 0..count`, a fresh graph holds
/// `params` as trainable leaves, `build` records the loss of sample `i`, and
/// the flattened gradient over all parameters (in order) is returned.
///
/// Each sample gets its own independent backward pass, so entry `i` equals a
/// plain `backward` of that sample's loss alone.
pub fn per_sample_gradients<F>(params: &[Tensor], count: usize, build: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var], usize) -> Result<Var> + Sync + Send,
{
    if count == 0 {
        return Err(Error::Empty("per-sample gradient batch"));
    }
    parallel::try_map(count, |i| {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars, i)?;
        Ok(g.backward(loss)?.flat(&vars))
    })
}
