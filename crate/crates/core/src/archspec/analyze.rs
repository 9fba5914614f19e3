use serde::Serialize;

use super::{ArchitectureGraph, LayerKind};
use crate::volume::Dims;
use crate::{Error, Result};

/// Receptive field and jump of one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeField {
    pub name: String,
    pub kind: LayerKind,
    pub channels: usize,
    pub level: u32,
    pub rf: u64,
    pub jump: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReceptiveFieldTrace {
    /// One entry per node, in topological order.
    pub nodes: Vec<NodeField>,
    /// `(label, node, rf)` for every tap declared by the graph.
    pub taps: Vec<(String, String, u64)>,
    pub output_rf: u64,
    pub output_jump: u64,
}

impl ReceptiveFieldTrace {
    pub fn node(&self, name: &str) -> Option<&NodeField> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn tap(&self, label: &str) -> Option<u64> {
        self.taps.iter().find(|t| t.0 == label).map(|t| t.2)
    }
}

/// Propagates `(rf, jump)` from the input through every node.
///
/// Starting at `(1, 1)`: a 3³ convolution adds `2·jump`; a 2³ pool adds
/// `jump` and doubles it; an upsampling halves the jump and its trailing
/// convolution adds `2·jump`. Every other node takes the largest field among
/// its operands.
pub fn receptive_field(graph: &ArchitectureGraph) -> Result<ReceptiveFieldTrace> {
    let topo = graph.validate()?;
    let n = graph.nodes.len();
    let mut rf = vec![1u64; n];
    let mut jump = vec![1u64; n];
    for &i in &topo.order {
        let node = &graph.nodes[i];
        let ins = &topo.inputs[i];
        if node.kind == LayerKind::Input {
            continue;
        }
        let (r, j) = (
            ins.iter().map(|&k| rf[k]).max().unwrap_or(1),
            jump[ins[0]],
        );
        (rf[i], jump[i]) = match node.kind {
            LayerKind::Conv3 => (r + 2 * j, j),
            LayerKind::Pool2 => (r + j, 2 * j),
            LayerKind::Upsample2 => {
                if j < 2 {
                    return Err(Error::Structure(format!(
                        "{:?} upsamples at jump {j}",
                        node.name
                    )));
                }
                let j = j / 2;
                (r + 2 * j, j)
            }
            _ => (r, j),
        };
    }
    let nodes = topo
        .order
        .iter()
        .map(|&i| NodeField {
            name: graph.nodes[i].name.clone(),
            kind: graph.nodes[i].kind,
            channels: topo.channels[i],
            level: topo.level[i],
            rf: rf[i],
            jump: jump[i],
        })
        .collect();
    let taps = graph
        .taps
        .iter()
        .map(|t| {
            let i = graph.node_index(&t.node).expect("validated tap");
            (t.label.clone(), t.node.clone(), rf[i])
        })
        .collect();
    Ok(ReceptiveFieldTrace {
        nodes,
        taps,
        output_rf: rf[topo.output],
        output_jump: jump[topo.output],
    })
}

/// Learnable parameters: kernels and biases of every convolution plus the
/// scale and shift of every batch normalization.
pub fn count_parameters(graph: &ArchitectureGraph, in_channels: usize, num_classes: usize) -> Result<u64> {
    let topo = graph.topology(in_channels, num_classes)?;
    let mut total = 0u64;
    for (i, node) in graph.nodes.iter().enumerate() {
        let c_out = topo.channels[i] as u64;
        let c_in = topo.inputs[i].first().map(|&j| topo.channels[j] as u64).unwrap_or(0);
        total += match node.kind {
            LayerKind::Conv3 | LayerKind::Upsample2 => 27 * c_in * c_out + c_out + 2 * c_out,
            LayerKind::Predict1 => c_in * c_out + c_out,
            _ => 0,
        };
    }
    Ok(total)
}

/// Bytes held by node outputs during one forward pass of a single input.
///
/// The input tensor itself is not counted.
pub fn estimate_activation_memory(graph: &ArchitectureGraph, input_size: Dims, bytes_per_value: u64) -> Result<u64> {
    let topo = graph.validate()?;
    let period = 1usize << topo.max_level;
    if input_size.iter().any(|&s| s == 0 || s % period != 0) {
        return Err(Error::Shape(format!(
            "input size {input_size:?} is not divisible by {period}"
        )));
    }
    let mut total = 0u64;
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.kind == LayerKind::Input {
            continue;
        }
        let voxels: u64 = input_size.iter().map(|&s| (s >> topo.level[i]) as u64).product();
        total += topo.channels[i] as u64 * voxels * bytes_per_value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::super::{build_architecture, single_resolution_variant, ArchKind, LayerKind as K};
    use super::*;
    use crate::archspec::tests::chain;

    /// Traces a chain through a real graph, closing it with upsamplings so
    /// the output is back at full resolution.
    fn rf_chain(kinds: &[K]) -> Vec<u64> {
        let level: i64 = kinds
            .iter()
            .map(|k| match k {
                K::Pool2 => 1,
                K::Upsample2 => -1,
                _ => 0,
            })
            .sum();
        let mut layers = kinds.to_vec();
        layers.extend(std::iter::repeat_n(K::Upsample2, level.max(0) as usize));
        let g = chain(&layers.iter().map(|&k| (k, Some(4))).collect::<Vec<_>>());
        let t = receptive_field(&g).unwrap();
        t.nodes[1..=kinds.len()].iter().map(|n| n.rf).collect()
    }

    /// Applies the recurrence to a plain layer list, independent of graphs.
    fn hand_rf(layers: &[K]) -> Vec<u64> {
        let (mut rf, mut j) = (1u64, 1u64);
        layers
            .iter()
            .map(|k| {
                match k {
                    K::Conv3 => rf += 2 * j,
                    K::Pool2 => {
                        rf += j;
                        j *= 2;
                    }
                    K::Upsample2 => {
                        j /= 2;
                        rf += 2 * j;
                    }
                    _ => {}
                }
                rf
            })
            .collect()
    }

    #[test]
    fn single_and_stacked_convs() {
        assert_eq!(rf_chain(&[K::Conv3]), vec![3]);
        assert_eq!(*rf_chain(&[K::Conv3; 8]).last().unwrap(), 17);
    }

    #[test]
    fn contracting_chain_matches_unet_taps() {
        let mut layers = Vec::new();
        for _ in 0..4 {
            layers.extend([K::Conv3, K::Conv3, K::Pool2]);
        }
        layers.extend([K::Conv3, K::Conv3]);
        let rf = rf_chain(&layers);
        let exits: Vec<u64> = [1, 4, 7, 10, 13].iter().map(|&i| rf[i]).collect();
        assert_eq!(exits, vec![5, 14, 32, 68, 140]);
        assert_eq!(rf, hand_rf(&layers));
    }

    #[test]
    fn vgg_chain_and_two_path_long_chain() {
        let mut vgg = Vec::new();
        for c in [2, 2, 3, 3, 3] {
            vgg.extend(std::iter::repeat_n(K::Conv3, c));
            vgg.push(K::Pool2);
        }
        let rf = hand_rf(&vgg);
        assert_eq!((rf[8], rf[12], rf[17]), (40, 92, 212));

        let mut long = Vec::new();
        for c in [1, 2, 2, 4] {
            long.extend(std::iter::repeat_n(K::Conv3, c));
            long.push(K::Pool2);
        }
        long.extend([K::Upsample2; 4]);
        assert_eq!(*hand_rf(&long).last().unwrap(), 136);
        assert_eq!(rf_chain(&long), hand_rf(&long));
    }

    #[test]
    fn built_architectures_report_expected_fields() {
        let t = receptive_field(&build_architecture(ArchKind::Net1, 8).unwrap()).unwrap();
        assert_eq!(
            (t.tap("pred_fine"), t.tap("pred_mid"), t.tap("pred_coarse")),
            (Some(40), Some(92), Some(212))
        );
        let t = receptive_field(&build_architecture(ArchKind::Net2, 8).unwrap()).unwrap();
        let skips: Vec<u64> = (0..4).map(|l| t.tap(&format!("skip{l}")).unwrap()).collect();
        assert_eq!(skips, vec![5, 14, 32, 68]);
        assert_eq!(t.tap("bottleneck"), Some(140));
        let t = receptive_field(&build_architecture(ArchKind::Net3, 8).unwrap()).unwrap();
        assert_eq!((t.tap("short_path"), t.tap("long_path")), (Some(17), Some(136)));
        assert_eq!(t.output_rf, 136);
    }

    #[test]
    fn outputs_are_full_resolution() {
        for kind in ArchKind::ALL {
            let g = build_architecture(kind, 4).unwrap();
            let v = single_resolution_variant(&g, kind).unwrap();
            for graph in [g, v] {
                let t = receptive_field(&graph).unwrap();
                assert_eq!(t.output_jump, 1, "{}", graph.name);
                assert!(t.nodes.iter().all(|n| n.jump.is_power_of_two() && n.rf >= 1));
            }
        }
        let v = single_resolution_variant(&build_architecture(ArchKind::Net3, 8).unwrap(), ArchKind::Net3).unwrap();
        assert_eq!(receptive_field(&v).unwrap().output_rf, 17);
    }

    #[test]
    fn parameter_closed_forms() {
        let g = chain(&[(K::Conv3, Some(8))]);
        assert_eq!(count_parameters(&g, 4, 5).unwrap(), 888);
        let g = chain(&[(K::Predict1, None)]);
        assert_eq!(count_parameters(&g, 8, 5).unwrap(), 45);
    }

    #[test]
    fn parameter_ordering_follows_network_capacity() {
        let count = |k| count_parameters(&build_architecture(k, 8).unwrap(), 4, 5).unwrap();
        let (n1, n2, n3) = (count(ArchKind::Net1), count(ArchKind::Net2), count(ArchKind::Net3));
        assert!(n3 < n1 && n1 < n2, "{n3} {n1} {n2}");
    }

    #[test]
    fn memory_closed_forms() {
        let g = chain(&[(K::Conv3, Some(8))]);
        assert_eq!(estimate_activation_memory(&g, [16; 3], 4).unwrap(), 131072);
        let g = chain(&[(K::Softmax, None)]);
        assert_eq!(estimate_activation_memory(&g, [16; 3], 4).unwrap(), 4 * 16 * 16 * 16 * 4);
        let g = build_architecture(ArchKind::Net2, 8).unwrap();
        assert!(estimate_activation_memory(&g, [24; 3], 4).is_err());
    }

    #[test]
    fn two_path_net_needs_most_activation_memory() {
        let mem = |k| estimate_activation_memory(&build_architecture(k, 8).unwrap(), [64; 3], 4).unwrap();
        assert!(mem(ArchKind::Net3) > mem(ArchKind::Net1));
    }

    proptest::proptest! {
        #[test]
        fn ablation_never_adds_parameters(base in 1usize..24) {
            for kind in ArchKind::ALL {
                let g = build_architecture(kind, base).unwrap();
                let v = single_resolution_variant(&g, kind).unwrap();
                proptest::prop_assert!(count_parameters(&v, 4, 5).unwrap() <= count_parameters(&g, 4, 5).unwrap());
            }
        }

        #[test]
        fn graph_trace_matches_recurrence_on_random_chains(kinds in proptest::collection::vec(0u8..2, 1..12)) {
            let mut layers: Vec<K> = kinds.iter().map(|&k| if k == 0 { K::Conv3 } else { K::Pool2 }).collect();
            let rf = hand_rf(&layers);
            proptest::prop_assert!(rf.windows(2).all(|w| w[0] <= w[1]));
            let pools = layers.iter().filter(|&&k| k == K::Pool2).count();
            layers.extend(std::iter::repeat_n(K::Upsample2, pools));
            let g = chain(&layers.iter().map(|&k| (k, Some(2))).collect::<Vec<_>>());
            let t = receptive_field(&g).unwrap();
            let traced: Vec<u64> = t.nodes[1..].iter().map(|n| n.rf).collect();
            proptest::prop_assert_eq!(traced, hand_rf(&layers));
            proptest::prop_assert_eq!(t.output_jump, 1);
        }
    }
}
