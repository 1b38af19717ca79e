use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::{Scalar, Tensor, TensorId};

/// Result of a backward pass: gradient buffers keyed by tensor id. Only
/// leaves with `requires_grad` are retained; intermediate gradients are
/// discarded once consumed.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<TensorId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&t.id())
    }

    pub fn get_by_id(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// across fan-out; every `requires_grad` leaf reachable from `loss` receives
/// an entry in the returned map.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<Gradients<T>> {
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(format!(
            "backward() requires a scalar loss, shape is {:?}",
            loss.shape()
        )));
    }

    // A lone requires_grad leaf is its own graph: d loss / d loss = 1.
    if loss.is_leaf() {
        if loss.needs_grad() {
            let mut grads = HashMap::new();
            grads.insert(loss.id(), Tensor::scalar(T::one()));
            return Ok(Gradients { grads });
        }
        return Err(Error::DetachedGraph(
            "loss is not connected to any recorded operation".into(),
        ));
    }

    let order = topo_order(loss);

    let mut acc: HashMap<TensorId, Vec<T>> = HashMap::new();
    acc.insert(loss.id(), vec![T::one()]);

    let mut leaf_grads: HashMap<TensorId, Tensor<T>> = HashMap::new();

    for t in order.iter().rev() {
        let Some(grad) = acc.remove(&t.id()) else {
            continue; // branch not reached from the loss
        };
        match t.node() {
            Some(node) => {
                let input_grads = (node.backward)(&grad);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !input.needs_grad() {
                        continue;
                    }
                    debug_assert_eq!(g.len(), input.len());
                    match acc.get_mut(&input.id()) {
                        Some(slot) => {
                            for (s, v) in slot.iter_mut().zip(&g) {
                                *s = *s + *v;
                            }
                        }
                        None => {
                            acc.insert(input.id(), g);
                        }
                    }
                }
            }
            None => {
                if t.needs_grad() {
                    leaf_grads.insert(
                        t.id(),
                        Tensor::new_leaf(t.shape().to_vec(), grad, false),
                    );
                }
            }
        }
    }

    if leaf_grads.is_empty() {
        return Err(Error::DetachedGraph(
            "no requires_grad leaf is reachable from the loss".into(),
        ));
    }

    Ok(Gradients { grads: leaf_grads })
}

/// Post-order DFS over the recorded graph; output tensors appear after all
/// of their inputs. Iterative to keep deep chains off the call stack.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<TensorId> = HashSet::new();
    // (tensor, children_pushed)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];

    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for input in &node.inputs {
                if !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
