//! Declarative network graphs built from a small block vocabulary.
//!
//! Every layer kind has fixed geometry:
//!
//! | kind        | operation                                              |
//! |-------------|--------------------------------------------------------|
//! | `conv3`     | 3³ convolution, stride 1, zero "same" padding, ReLU, BN |
//! | `pool2`     | 2³ max-pool, stride 2                                   |
//! | `upsample2` | ×2 voxel repetition followed by a `conv3` block         |
//! | `predict1`  | 1³ convolution producing class scores                   |
//! | `sum`       | element-wise sum of equally shaped inputs               |
//! | `concat`    | channel concatenation                                   |
//! | `softmax`   | marks the network output (class scores)                 |
//!
//! Graphs serialize to JSON; see [`ArchitectureGraph`].

mod analyze;
mod build;

pub use analyze::{
    count_parameters, estimate_activation_memory, receptive_field, NodeField, ReceptiveFieldTrace,
};
pub use build::{build_architecture, filters_at_level, single_resolution_variant, ArchKind};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv3,
    Pool2,
    Upsample2,
    Predict1,
    Sum,
    Concat,
    Softmax,
}

impl LayerKind {
    /// Whether the layer owns a convolution kernel.
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv3 | LayerKind::Upsample2 | LayerKind::Predict1)
    }

    /// Whether the layer ends in ReLU + batch normalization.
    pub fn has_batch_norm(self) -> bool {
        matches!(self, LayerKind::Conv3 | LayerKind::Upsample2)
    }

    pub fn is_merge(self) -> bool {
        matches!(self, LayerKind::Sum | LayerKind::Concat)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv3 => "conv3",
            LayerKind::Pool2 => "pool2",
            LayerKind::Upsample2 => "upsample2",
            LayerKind::Predict1 => "predict1",
            LayerKind::Sum => "sum",
            LayerKind::Concat => "concat",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels of conv-like layers. `None` means "one per class".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, out_channels: Option<usize>) -> Self {
        Self {
            name: name.into(),
            kind,
            out_channels,
        }
    }
}

/// A named node whose receptive field is of interest (skip taps, path ends).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub label: String,
    pub node: String,
}

/// Directed acyclic layer graph.
///
/// Edges are `(from, to)` node names. The order of edges into a merge node
/// is the operand order: concatenation stacks channels in that order, and
/// the first operand is the main path when an ablation strips the merge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureGraph {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<ArchKind>,
    #[serde(default)]
    pub single_resolution: bool,
    pub nodes: Vec<LayerSpec>,
    pub edges: Vec<(String, String)>,
    pub output: String,
    #[serde(default)]
    pub taps: Vec<Tap>,
}

/// Structural facts derived from a validated graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    /// Node indices in a topological order (ties broken by declaration order).
    pub order: Vec<usize>,
    /// Operand node indices per node, in edge order.
    pub inputs: Vec<Vec<usize>>,
    /// Consumers per node.
    pub outputs: Vec<Vec<usize>>,
    pub input: usize,
    pub output: usize,
    /// Downsampling level: number of pools minus number of upsamplings.
    pub level: Vec<u32>,
    pub channels: Vec<usize>,
    pub max_level: u32,
}

impl ArchitectureGraph {
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)
            .map_err(|e| Error::Structure(format!("cannot parse architecture document: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Checks all structural invariants with the default channel setup.
    pub fn validate(&self) -> Result<Topology> {
        self.topology(crate::IN_CHANNELS, crate::NUM_CLASSES)
    }

    /// Validates the graph and resolves levels and channel counts.
    pub fn topology(&self, in_channels: usize, num_classes: usize) -> Result<Topology> {
        let n = self.nodes.len();
        let mut index = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if index.insert(node.name.as_str(), i).is_some() {
                return Err(Error::Structure(format!("duplicate node name {:?}", node.name)));
            }
            if node.out_channels == Some(0) {
                return Err(Error::Structure(format!("node {:?} has zero channels", node.name)));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Structure(format!("edge references unknown node {name:?}")))
        };
        let mut inputs = vec![Vec::new(); n];
        let mut outputs = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            let (a, b) = (lookup(from)?, lookup(to)?);
            inputs[b].push(a);
            outputs[a].push(b);
        }

        let sources: Vec<usize> = (0..n).filter(|&i| self.nodes[i].kind == LayerKind::Input).collect();
        let [input] = sources[..] else {
            return Err(Error::Structure(format!("expected one input node, found {}", sources.len())));
        };
        let output = lookup(&self.output)?;
        if !outputs[output].is_empty() {
            return Err(Error::Structure("output node must not feed other nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let arity = inputs[i].len();
            let ok = match node.kind {
                LayerKind::Input => arity == 0,
                LayerKind::Sum | LayerKind::Concat => arity >= 2,
                _ => arity == 1,
            };
            if !ok {
                return Err(Error::Structure(format!(
                    "node {:?} ({}) has {arity} inputs",
                    node.name,
                    node.kind.as_str()
                )));
            }
            if i != output && outputs[i].is_empty() {
                return Err(Error::Structure(format!("node {:?} is a dead end", node.name)));
            }
        }

        // Kahn's algorithm; the queue is seeded in declaration order.
        let mut indegree: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &j in &outputs[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Structure("graph contains a cycle".into()));
        }

        let mut level = vec![0u32; n];
        let mut channels = vec![0usize; n];
        for &i in &order {
            let node = &self.nodes[i];
            let ins = &inputs[i];
            let conv_out = node.out_channels.unwrap_or(num_classes);
            match node.kind {
                LayerKind::Input => channels[i] = in_channels,
                LayerKind::Conv3 | LayerKind::Predict1 => {
                    level[i] = level[ins[0]];
                    channels[i] = conv_out;
                }
                LayerKind::Pool2 => {
                    level[i] = level[ins[0]] + 1;
                    channels[i] = channels[ins[0]];
                }
                LayerKind::Upsample2 => {
                    level[i] = level[ins[0]].checked_sub(1).ok_or_else(|| {
                        Error::Structure(format!("{:?} upsamples above input resolution", node.name))
                    })?;
                    channels[i] = conv_out;
                }
                LayerKind::Softmax => {
                    level[i] = level[ins[0]];
                    channels[i] = channels[ins[0]];
                }
                LayerKind::Sum | LayerKind::Concat => {
                    let l0 = level[ins[0]];
                    if ins.iter().any(|&j| level[j] != l0) {
                        return Err(Error::Structure(format!(
                            "merge {:?} joins inputs at different resolutions",
                            node.name
                        )));
                    }
                    level[i] = l0;
                    if node.kind == LayerKind::Sum {
                        let c0 = channels[ins[0]];
                        if ins.iter().any(|&j| channels[j] != c0) {
                            return Err(Error::Structure(format!(
                                "sum {:?} joins inputs with different channel counts",
                                node.name
                            )));
                        }
                        channels[i] = c0;
                    } else {
                        channels[i] = ins.iter().map(|&j| channels[j]).sum();
                    }
                }
            }
        }
        if level[output] != 0 {
            return Err(Error::Structure(format!(
                "output is at downsampling level {}, not full resolution",
                level[output]
            )));
        }
        for tap in &self.taps {
            lookup(&tap.node)?;
        }
        let max_level = level.iter().copied().max().unwrap_or(0);
        Ok(Topology {
            order,
            inputs,
            outputs,
            input,
            output,
            level,
            channels,
            max_level,
        })
    }

    /// Removes nodes that cannot reach the output, and taps pointing at them.
    pub(crate) fn prune(&mut self) {
        let n = self.nodes.len();
        let mut keep = vec![false; n];
        let Some(out) = self.node_index(&self.output) else { return };
        let mut stack = vec![out];
        keep[out] = true;
        while let Some(i) = stack.pop() {
            let name = &self.nodes[i].name;
            for (from, to) in &self.edges {
                if to == name {
                    let j = self.node_index(from).expect("edge to known node");
                    if !keep[j] {
                        keep[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let alive: std::collections::BTreeSet<String> = self
            .nodes
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(n, _)| n.name.clone())
            .collect();
        self.nodes.retain(|n| alive.contains(&n.name));
        self.edges.retain(|(a, b)| alive.contains(a) && alive.contains(b));
        self.taps.retain(|t| alive.contains(&t.node));
    }
}
