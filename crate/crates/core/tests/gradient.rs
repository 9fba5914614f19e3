mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let r = common::gradient_check(1e-3, 1e-4);
    eprintln!("checked {}, worst rel {:e}", r.checked, r.worst);
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    assert!(r.checked >= 50);
}

#[test]
fn tiny_graph_covers_every_layer_kind() {
    use volseg::archspec::LayerKind::*;
    let g = common::tiny_graph();
    for kind in [Conv3, Pool2, Upsample2, Sum, Concat, Predict1, Softmax] {
        assert!(g.nodes.iter().any(|n| n.kind == kind), "{kind:?}");
    }
}
