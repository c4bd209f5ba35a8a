use std::collections::{HashMap, HashSet};

use super::{round_to_precision, Tensor};
use crate::error::{Error, Result};

/// Recorded ops reachable from a root, in topological order: every node
/// appears after all of its inputs.
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    /// Collects the recorded graph below `root` by iterative post-order DFS.
    pub fn record(root: &Tensor) -> Self {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            let Some(node) = t.node() else {
                continue;
            };
            let inputs: Vec<Tensor> = node
                .inputs
                .iter()
                .filter(|i| i.node().is_some() && !visited.contains(&i.id()))
                .cloned()
                .collect();
            stack.push((t, true));
            for input in inputs.into_iter().rev() {
                stack.push((input, false));
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op names in recorded order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .filter_map(|t| t.node().map(|n| n.op))
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.order
    }
}

impl Tensor {
    /// Back-propagates from a scalar loss, adding gradients into every
    /// gradient-requiring leaf reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward called on a tensor that is not on the tape".into(),
            ));
        }
        if self.is_leaf() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }
        let tape = Tape::record(self);
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in tape.order.iter().rev() {
            let Some(upstream) = pending.remove(&t.id()) else {
                continue;
            };
            let node = t.node().expect("tape holds only recorded nodes");
            let input_grads = (node.backward)(&upstream);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(mut g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                round_to_precision(&mut g);
                if input.is_leaf() {
                    input.accumulate_grad(&g);
                } else {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                            round_to_precision(acc);
                        }
                        None => {
                            pending.insert(input.id(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(&[2, 3], vec![0.5; 6]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        let loss2 = x.mul(&x).unwrap().sum().unwrap();
        loss2.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_topological() {
        let x = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = x.gelu().unwrap();
        let b = a.matmul(&x).unwrap();
        let c = b.add(&a).unwrap().sum().unwrap();
        let tape = Tape::record(&c);
        let pos: HashMap<usize, usize> = tape
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect();
        assert_eq!(tape.len(), 4);
        for t in tape.tensors() {
            for input in &t.node().unwrap().inputs {
                if let Some(p) = pos.get(&input.id()) {
                    assert!(*p < pos[&t.id()]);
                }
            }
        }
    }

    #[test]
    fn shared_node_sums_both_consumers() {
        let x = Tensor::param(&[2], vec![3.0, -1.0]).unwrap();
        let h = x.scale(2.0).unwrap();
        let loss = h.mul(&h).unwrap().add(&h).unwrap().sum().unwrap();
        loss.backward().unwrap();
        // d/dx (4x^2 + 2x) = 8x + 2
        assert_eq!(x.grad().unwrap(), vec![26.0, -6.0]);
    }
}
