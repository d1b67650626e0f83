use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Topologically ordered view of the graph reachable from a root tensor.
///
/// Every entry appears after all of the entries it was computed from, so a
/// reverse walk visits each op exactly once with its full output gradient.
pub struct GradTape<T: Element> {
    order: Vec<Tensor<T>>,
}

impl<T: Element> GradTape<T> {
    /// Collects every tensor that requires a gradient and is reachable from
    /// `root` through recorded ops.
    pub fn record(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        if !root.requires_grad() {
            return GradTape { order };
        }
        // iterative post-order DFS; the bool marks "children already pushed"
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        GradTape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.order
    }

    /// Op names in recording order; leaves show as `"leaf"`.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .map(|t| t.op_name().unwrap_or("leaf"))
            .collect()
    }

    /// Propagates `seed` (the gradient of the last entry) back through the
    /// tape, accumulating into leaves.
    pub fn replay(&self, seed: Vec<T>) {
        let Some(root) = self.order.last() else {
            return;
        };
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(root.id(), seed);
        for t in self.order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match t.node() {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let input_grads = (node.backward)(&g, t.data(), &node.inputs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}", node.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Backpropagates from a scalar loss. Gradients accumulate into every
    /// reachable leaf that requires one; call [`Tensor::zero_grad`] (or
    /// rebuild the leaves) between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that does not depend on any parameter".into(),
            ));
        }
        GradTape::record(self).replay(vec![T::one()]);
        Ok(())
    }
}
