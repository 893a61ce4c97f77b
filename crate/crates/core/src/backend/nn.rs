//! Parameter-initialization and layer helpers shared by the models.

use rand::Rng;

use super::{init_normal, Float, Graph, ParameterStore, Result, Tensor, Var};

/// Registers `{prefix}.w` `[d_in, d_out]` ~ N(0, std) and zero `{prefix}.b`.
pub fn init_linear<T: Float, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), init_normal(&[d_in, d_out], std, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))
}

/// Registers unit `{prefix}.g` and zero `{prefix}.b`.
pub fn init_layer_norm<T: Float>(store: &mut ParameterStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], T::one()))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

/// `x @ w + b` over the last axis.
pub fn linear<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, 1e-5)
}
