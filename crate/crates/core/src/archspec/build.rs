use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ArchitectureGraph, LayerKind, LayerSpec, Tap};
use crate::{Error, Result};

/// The three multi-resolution network families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// VGG-style FCN summing class predictions from three depths.
    Net1,
    /// U-Net: contracting path concatenated into an expanding path.
    Net2,
    /// Two pathways over the same input, one shallow and one pooled.
    Net3,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::Net1, ArchKind::Net2, ArchKind::Net3];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Net1 => "net1",
            ArchKind::Net2 => "net2",
            ArchKind::Net3 => "net3",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net1" => Ok(ArchKind::Net1),
            "net2" => Ok(ArchKind::Net2),
            "net3" => Ok(ArchKind::Net3),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Filters at a downsampling level: `base * 2^level`, capped at `8 * base`.
///
/// All three families share this schedule, so layers at the same resolution
/// have the same width everywhere.
pub fn filters_at_level(base: usize, level: u32) -> usize {
    (base << level.min(3)).min(8 * base)
}

struct Builder {
    nodes: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
    taps: Vec<Tap>,
}

impl Builder {
    fn new() -> Self {
        Self {
            nodes: vec![LayerSpec::new("input", LayerKind::Input, None)],
            edges: Vec::new(),
            taps: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, kind: LayerKind, ch: Option<usize>, from: &[&str]) -> String {
        let name = name.into();
        for f in from {
            self.edges.push((f.to_string(), name.clone()));
        }
        self.nodes.push(LayerSpec::new(name.clone(), kind, ch));
        name
    }

    /// Appends `count` conv3 layers after `from`; returns the last name.
    fn convs(&mut self, prefix: &str, count: usize, ch: usize, from: &str) -> String {
        let mut last = from.to_string();
        for i in 1..=count {
            last = self.add(format!("{prefix}_conv{i}"), LayerKind::Conv3, Some(ch), &[&last]);
        }
        last
    }

    fn tap(&mut self, label: &str, node: &str) {
        self.taps.push(Tap {
            label: label.into(),
            node: node.into(),
        });
    }

    fn finish(mut self, kind: ArchKind, last: &str) -> ArchitectureGraph {
        let score = self.add("score", LayerKind::Predict1, None, &[last]);
        let out = self.add("softmax", LayerKind::Softmax, None, &[&score]);
        ArchitectureGraph {
            name: kind.as_str().to_string(),
            family: Some(kind),
            single_resolution: false,
            nodes: self.nodes,
            edges: self.edges,
            output: out,
            taps: self.taps,
        }
    }
}

pub fn build_architecture(kind: ArchKind, filter_base: usize) -> Result<ArchitectureGraph> {
    if filter_base == 0 {
        return Err(Error::Config("filter_base must be at least 1".into()));
    }
    let f = |level| filters_at_level(filter_base, level);
    let g = match kind {
        ArchKind::Net1 => build_net1(f),
        ArchKind::Net2 => build_net2(f),
        ArchKind::Net3 => build_net3(f),
    };
    g.validate()?;
    Ok(g)
}

fn build_net1(f: impl Fn(u32) -> usize) -> ArchitectureGraph {
    let mut b = Builder::new();
    let mut last = "input".to_string();
    let mut block_out = Vec::new();
    for (i, &count) in [2usize, 2, 3, 3, 3].iter().enumerate() {
        let convs = b.convs(&format!("block{}", i + 1), count, f(i as u32), &last);
        block_out.push(convs.clone());
        last = b.add(format!("pool{}", i + 1), LayerKind::Pool2, None, &[&convs]);
    }
    b.tap("pred_fine", &block_out[2]);
    b.tap("pred_mid", &block_out[3]);
    b.tap("pred_coarse", &last);

    // Class scores at levels 5, 3 and 2, brought to level 2 and summed.
    let mut coarse = b.add("pred5", LayerKind::Predict1, None, &[&last]);
    for step in ["a", "b", "c"] {
        coarse = b.add(format!("pred5_up{step}"), LayerKind::Upsample2, None, &[&coarse]);
    }
    let mid = b.add("pred4", LayerKind::Predict1, None, &[&block_out[3]]);
    let mid = b.add("pred4_up", LayerKind::Upsample2, None, &[&mid]);
    let fine = b.add("pred3", LayerKind::Predict1, None, &[&block_out[2]]);
    let fused = b.add("fuse", LayerKind::Sum, None, &[&coarse, &mid, &fine]);

    let up1 = b.add("up1", LayerKind::Upsample2, Some(f(1)), &[&fused]);
    let up0 = b.add("up0", LayerKind::Upsample2, Some(f(0)), &[&up1]);
    b.finish(ArchKind::Net1, &up0)
}

fn build_net2(f: impl Fn(u32) -> usize) -> ArchitectureGraph {
    let mut b = Builder::new();
    let mut last = "input".to_string();
    let mut skips = Vec::new();
    for level in 0..4u32 {
        let convs = b.convs(&format!("enc{level}"), 2, f(level), &last);
        b.tap(&format!("skip{level}"), &convs);
        skips.push(convs.clone());
        last = b.add(format!("pool{level}"), LayerKind::Pool2, None, &[&convs]);
    }
    last = b.convs("bottleneck", 2, f(4), &last);
    b.tap("bottleneck", &last);
    for level in (0..4u32).rev() {
        let up = b.add(format!("up{level}"), LayerKind::Upsample2, Some(f(level)), &[&last]);
        let cat = b.add(
            format!("cat{level}"),
            LayerKind::Concat,
            None,
            &[&up, &skips[level as usize]],
        );
        last = b.convs(&format!("dec{level}"), 2, f(level), &cat);
    }
    b.finish(ArchKind::Net2, &last)
}

fn build_net3(f: impl Fn(u32) -> usize) -> ArchitectureGraph {
    let mut b = Builder::new();
    let short = b.convs("short", 8, f(0), "input");
    b.tap("short_path", &short);

    let mut last = "input".to_string();
    for (level, &count) in [1usize, 2, 2, 4].iter().enumerate() {
        let convs = b.convs(&format!("long{level}"), count, f(level as u32), &last);
        last = b.add(format!("long_pool{level}"), LayerKind::Pool2, None, &[&convs]);
    }
    for level in (0..4u32).rev() {
        last = b.add(format!("long_up{level}"), LayerKind::Upsample2, Some(f(level)), &[&last]);
    }
    b.tap("long_path", &last);
    let cat = b.add("paths", LayerKind::Concat, None, &[&short, &last]);
    b.finish(ArchKind::Net3, &cat)
}

/// Strips the multi-resolution fusion from a built network.
///
/// Every merge node is bypassed in favour of its first operand (the main
/// path), then everything that no longer reaches the output is dropped:
/// net1 loses its finer prediction taps, net2 keeps both paths but loses the
/// skip concatenations, and net3 keeps only the shallow path.
pub fn single_resolution_variant(graph: &ArchitectureGraph, kind: ArchKind) -> Result<ArchitectureGraph> {
    match graph.family {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Config(format!(
                "graph {:?} is not a {kind} build (family {other:?})",
                graph.name
            )))
        }
    }
    let mut g = graph.clone();
    let merges: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| n.kind.is_merge())
        .map(|n| n.name.clone())
        .collect();
    for merge in merges {
        let main = g
            .edges
            .iter()
            .find(|(_, to)| *to == merge)
            .map(|(from, _)| from.clone())
            .ok_or_else(|| Error::Structure(format!("merge {merge:?} has no inputs")))?;
        g.edges.retain(|(_, to)| *to != merge);
        for edge in g.edges.iter_mut() {
            if edge.0 == merge {
                edge.0 = main.clone();
            }
        }
        g.nodes.retain(|n| n.name != merge);
    }
    g.prune();
    g.name = format!("{}_single", kind.as_str());
    g.single_resolution = true;
    g.validate()?;
    Ok(g)
}
