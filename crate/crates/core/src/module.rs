//! The stateful layer interface shared by every network component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, Var};
use crate::ctensor::CTensor;
use crate::error::Result;

/// Per-pass state: the tape parameters are registered on (if gradients are
/// wanted), the train/eval switch, and the RNG that dropout draws from.
pub struct Ctx {
    pub tape: Option<Tape>,
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(tape: Tape, rng: ChaCha8Rng) -> Self {
        Ctx { tape: Some(tape), training: true, rng }
    }

    /// Evaluation without gradients.
    pub fn eval() -> Self {
        Ctx { tape: None, training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn param(&self, p: &Parameter) -> Var {
        match &self.tape {
            Some(t) => t.param(p),
            None => Var::constant(p.value.clone()),
        }
    }
}

pub trait Module {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var>;

    /// Visits every learnable parameter with a stable, unique name.
    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Parameter)) {}

    /// Visits non-learnable state that must survive a checkpoint.
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut CTensor)) {}

    /// Output shape for an input shape, without running the layer.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
}

/// Named snapshot of every parameter.
pub fn named_parameters(m: &mut dyn Module) -> Vec<(String, CTensor)> {
    let mut out = Vec::new();
    m.visit_params(&mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

pub fn num_parameters(m: &mut dyn Module) -> usize {
    let mut n = 0;
    m.visit_params(&mut |_, p| n += p.value.numel());
    n
}
