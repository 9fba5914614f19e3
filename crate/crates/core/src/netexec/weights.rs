use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Network, Real};
use crate::archspec::LayerKind;
use crate::{Error, Result};

/// Whether batch normalization uses batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Inference,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Inference => "inference",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeWeights<T> {
    /// `(c_out, c_in, 27)` for 3³ kernels, `(c_out, c_in)` for 1³ kernels.
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNormState<T>>,
}

/// Learnable state of a network, indexed like the graph's node list.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T> {
    pub mode: Mode,
    pub nodes: Vec<Option<NodeWeights<T>>>,
}

/// Gradients for every learnable tensor, shaped like [`WeightSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGrads<T> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub nodes: Vec<Option<NodeGrads<T>>>,
}

/// Per-channel batch mean and unbiased variance seen by each BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub nodes: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl<T: Real> WeightSet<T> {
    /// Checks that every tensor has the shape the network expects.
    pub fn check(&self, net: &Network) -> Result<()> {
        if self.nodes.len() != net.graph.nodes.len() {
            return Err(Error::Shape(format!(
                "weights cover {} nodes, graph has {}",
                self.nodes.len(),
                net.graph.nodes.len()
            )));
        }
        for (i, node) in net.graph.nodes.iter().enumerate() {
            let expected = net.param_shape(i);
            let ok = match (&self.nodes[i], expected) {
                (None, None) => true,
                (Some(w), Some((k, c, bn))) => {
                    w.kernel.len() == k
                        && w.bias.len() == c
                        && match (&w.bn, bn) {
                            (None, false) => true,
                            (Some(s), true) => {
                                [&s.gamma, &s.beta, &s.running_mean, &s.running_var].iter().all(|v| v.len() == c)
                                    && s.running_var.iter().all(|&v| v >= T::zero())
                            }
                            _ => false,
                        }
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("weights for node {:?} do not match the graph", node.name)));
            }
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Learnable tensors in canonical order: per node kernel, bias, gamma, beta.
    pub fn learnable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for w in self.nodes.iter().flatten() {
            out.push(w.kernel.as_slice());
            out.push(w.bias.as_slice());
            if let Some(bn) = &w.bn {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for w in self.nodes.iter_mut().flatten() {
            out.push(&mut w.kernel);
            out.push(&mut w.bias);
            if let Some(bn) = &mut w.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    /// Named tensors (learnable and running statistics) for serialization.
    pub fn named_tensors(&self, net: &Network) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (node, w) in net.graph.nodes.iter().zip(&self.nodes) {
            let Some(w) = w else { continue };
            out.push((format!("{}.kernel", node.name), w.kernel.as_slice()));
            out.push((format!("{}.bias", node.name), w.bias.as_slice()));
            if let Some(bn) = &w.bn {
                out.push((format!("{}.bn_gamma", node.name), bn.gamma.as_slice()));
                out.push((format!("{}.bn_beta", node.name), bn.beta.as_slice()));
                out.push((format!("{}.bn_running_mean", node.name), bn.running_mean.as_slice()));
                out.push((format!("{}.bn_running_var", node.name), bn.running_var.as_slice()));
            }
        }
        out
    }

    /// Exponential running-statistics update: `r = m * r + (1 - m) * batch`.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        for (w, s) in self.nodes.iter_mut().zip(&stats.nodes) {
            let (Some(w), Some((mean, var))) = (w, s) else { continue };
            let Some(bn) = &mut w.bn else { continue };
            for c in 0..mean.len() {
                bn.running_mean[c] = T::of(momentum * bn.running_mean[c].f64() + (1.0 - momentum) * mean[c]);
                bn.running_var[c] = T::of(momentum * bn.running_var[c].f64() + (1.0 - momentum) * var[c]);
            }
        }
    }
}

impl<T: Real> Gradients<T> {
    pub fn learnable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for g in self.nodes.iter().flatten() {
            out.push(g.kernel.as_slice());
            out.push(g.bias.as_slice());
            if !g.gamma.is_empty() {
                out.push(g.gamma.as_slice());
                out.push(g.beta.as_slice());
            }
        }
        out
    }
}

/// He-style initialization: kernels ~ N(0, 2 / fan_in), zero biases,
/// identity batch normalization. Prediction layers use N(0, 1 / (4 fan_in)).
pub fn init_weights<T: Real>(net: &Network, seed: u64) -> WeightSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..net.graph.nodes.len())
        .map(|i| {
            let (klen, c_out, bn) = net.param_shape(i)?;
            let fan_in = klen as f64 / c_out as f64;
            let gain = if bn { 2.0 } else { 0.25 };
            let dist = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            let kernel = (0..klen).map(|_| T::of(dist.sample(&mut rng))).collect();
            let bn = bn.then(|| BatchNormState {
                gamma: vec![T::one(); c_out],
                beta: vec![T::zero(); c_out],
                running_mean: vec![T::zero(); c_out],
                running_var: vec![T::one(); c_out],
            });
            Some(NodeWeights {
                kernel,
                bias: vec![T::zero(); c_out],
                bn,
            })
        })
        .collect();
    WeightSet {
        mode: Mode::Train,
        nodes,
    }
}

impl Network {
    /// `(kernel length, output channels, has batch norm)` for conv-like nodes.
    pub(crate) fn param_shape(&self, i: usize) -> Option<(usize, usize, bool)> {
        let kind = self.graph.nodes[i].kind;
        let c_out = self.topo.channels[i];
        let c_in = self.topo.inputs[i].first().map(|&j| self.topo.channels[j])?;
        match kind {
            LayerKind::Conv3 | LayerKind::Upsample2 => Some((27 * c_in * c_out, c_out, true)),
            LayerKind::Predict1 => Some((c_in * c_out, c_out, false)),
            _ => None,
        }
    }
}
