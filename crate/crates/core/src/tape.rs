//! Reverse-mode autodiff tape.
//!
//! Operations append nodes in execution order, so the node list is already
//! topologically sorted. `backward` walks it in reverse, calling each node's
//! local backward rule, which reads the output gradient and accumulates into
//! the inputs. Repeated backward calls without `zero_grad` accumulate.
//!
//! A tape is single-threaded. Build one per training step; inference can use
//! [`Tape::inactive`], which runs the same forward code without recording.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct Node {
    pub output: Tensor,
    pub backward: Box<dyn Fn()>,
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    enabled: bool,
}

impl Tape {
    /// Recording tape for a forward pass that will be differentiated.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            enabled: true,
        }
    }

    /// Non-recording tape: forward values only, outputs never require grad.
    pub fn inactive() -> Self {
        Tape {
            nodes: Vec::new(),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Create an op output and, when tracking applies, register its backward
    /// rule. `make_backward` is only invoked if the output is tracked.
    pub(crate) fn emit<F, B>(
        &mut self,
        op: &'static str,
        inputs: &[&Tensor],
        values: Vec<f64>,
        shape: Vec<usize>,
        make_backward: F,
    ) -> Result<Tensor>
    where
        F: FnOnce(Tensor) -> B,
        B: Fn() + 'static,
    {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op,
                detail: format!("output contains {bad}"),
            });
        }
        let tracked = self.enabled && inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::build(values, shape, tracked)?;
        if tracked {
            let rule = make_backward(out.clone());
            self.nodes.push(Node {
                output: out.clone(),
                backward: Box::new(rule),
            });
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` tensor
    /// reachable from `loss` ends up with its gradient populated. Leaf
    /// gradients accumulate across repeated calls; intermediate gradients
    /// belong to the pass and are reset on entry.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, shape is {:?}",
                loss.shape()
            )));
        }
        let on_tape = self.nodes.iter().any(|n| n.output.same_storage(loss));
        if !on_tape {
            return Err(Error::contract(
                "backward: loss is not the output of any recorded operation".to_string(),
            ));
        }
        for node in &self.nodes {
            node.output.zero_grad();
        }
        loss.seed_grad(1.0);
        for node in self.nodes.iter().rev() {
            if node.output.grad().is_some() {
                (node.backward)();
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Governs stochastic layers. `Train` owns the dropout RNG so a step's
/// randomness is fully determined by the seed it was built from.
pub enum Mode {
    Eval,
    Train { rng: ChaCha8Rng },
}

impl Mode {
    pub fn train(seed: u64) -> Self {
        Mode::Train {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}
