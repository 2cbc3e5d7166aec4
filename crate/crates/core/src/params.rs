//! Named parameter access shared by every learnable module.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// A module with named learnable tensors. `params` and `params_mut` list the
/// same names in the same order, and a bound module's `vars()` follows it.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Puts `t` on the graph as a tracked leaf or as a constant.
pub(crate) fn leaf<'g>(g: &'g Graph, t: &Tensor, trainable: bool) -> Var<'g> {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

/// `U(-bound, bound)` initialisation.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
