#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use volseg::archspec::{ArchitectureGraph, LayerKind, LayerSpec};
use volseg::metrics::RegionReport;
use volseg::netexec::{init_weights, Network, Tensor, WeightSet};
use volseg::volume::{Dims, LabelVolume};

/// Upper-tail p-value of Pearson's statistic for `observed` against
/// `expected` counts.
pub fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let df = (observed.len() - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

pub fn random_labels(rng: &mut ChaCha8Rng, dims: Dims) -> LabelVolume {
    // Mix of sparse and dense maps so empty regions also occur.
    let density = rng.random_range(0.0..1.0f64).powi(3);
    let n: usize = dims.iter().product();
    let labels = (0..n)
        .map(|_| if rng.random_bool(density) { rng.random_range(1..5) } else { 0 })
        .collect();
    LabelVolume::new(dims, 5, labels).unwrap()
}

pub fn label_pair(seed: u64, dims: Dims) -> (LabelVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_labels(&mut rng, dims), random_labels(&mut rng, dims))
}

const REGIONS: [&[u8]; 3] = [&[1, 2, 3, 4], &[1, 3, 4], &[4]];

/// Counts every report entry voxel by voxel and compares the ratios as
/// exact integer fractions. Returns the first mismatch.
pub fn check_report(report: &RegionReport, pred: &LabelVolume, truth: &LabelVolume) -> Result<(), String> {
    let same_ratio = |got: f64, num: u64, den: u64| got == num as f64 / den as f64;
    let opt_ratio = |got: Option<f64>, num: u64, den: u64| match got {
        None => den == 0,
        Some(v) => den != 0 && same_ratio(v, num, den),
    };
    for (k, members) in REGIONS.iter().enumerate() {
        let (mut p, mut t, mut o) = (0u64, 0u64, 0u64);
        for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
            let (ia, ib) = (members.contains(&a), members.contains(&b));
            p += ia as u64;
            t += ib as u64;
            o += (ia && ib) as u64;
        }
        let r = &report.regions[k];
        if r.region.labels != members.to_vec() {
            return Err(format!("region {k} has labels {:?}", r.region.labels));
        }
        if (r.counts.predicted, r.counts.truth, r.counts.overlap) != (p, t, o) {
            return Err(format!("region {k}: counts {:?} vs ({p},{t},{o})", r.counts));
        }
        let dice_ok = if p + t == 0 { r.dice == 1.0 } else { same_ratio(r.dice, 2 * o, p + t) };
        if !dice_ok || !opt_ratio(r.precision, o, p) || !opt_ratio(r.recall, o, t) {
            return Err(format!("region {k}: ratios {:?}", r));
        }
    }
    for c in 0..5u8 {
        let (mut p, mut t, mut o) = (0u64, 0u64, 0u64);
        for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
            p += (a == c) as u64;
            t += (b == c) as u64;
            o += (a == c && b == c) as u64;
        }
        let m = &report.classes[c as usize];
        if m.class != c || (m.counts.predicted, m.counts.truth, m.counts.overlap) != (p, t, o) {
            return Err(format!("class {c}: {:?} vs ({p},{t},{o})", m.counts));
        }
        if !opt_ratio(m.precision, o, p) || !opt_ratio(m.recall, o, t) {
            return Err(format!("class {c}: ratios {m:?}"));
        }
    }
    let correct = pred.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count() as u64;
    let total = pred.voxels() as u64;
    if report.correct != correct || report.total != total || !same_ratio(report.accuracy, correct, total) {
        return Err(format!("accuracy {}/{} vs {correct}/{total}", report.correct, report.total));
    }
    Ok(())
}

/// 6-connected components of `labels == class`, by recursive-free flood fill.
pub fn flood_components(labels: &LabelVolume, class: u8) -> usize {
    let d = labels.dims();
    let idx = |x: usize, y: usize, z: usize| x + d[0] * (y + d[1] * z);
    let mut seen = vec![false; labels.voxels()];
    let mut count = 0;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if seen[idx(x, y, z)] || labels.get(x, y, z) != class {
                    continue;
                }
                count += 1;
                let mut stack = vec![(x, y, z)];
                seen[idx(x, y, z)] = true;
                while let Some((x, y, z)) = stack.pop() {
                    let mut visit = |x: usize, y: usize, z: usize| {
                        if !seen[idx(x, y, z)] && labels.get(x, y, z) == class {
                            seen[idx(x, y, z)] = true;
                            stack.push((x, y, z));
                        }
                    };
                    if x > 0 { visit(x - 1, y, z) }
                    if y > 0 { visit(x, y - 1, z) }
                    if z > 0 { visit(x, y, z - 1) }
                    if x + 1 < d[0] { visit(x + 1, y, z) }
                    if y + 1 < d[1] { visit(x, y + 1, z) }
                    if z + 1 < d[2] { visit(x, y, z + 1) }
                }
            }
        }
    }
    count
}

/// conv3, pool2, upsample2, sum, concat, predict1 and softmax on an 8³ input.
pub fn tiny_graph() -> ArchitectureGraph {
    let node = |n: &str, k, c| LayerSpec::new(n, k, c);
    let edge = |a: &str, b: &str| (a.to_string(), b.to_string());
    ArchitectureGraph {
        name: "tiny".into(),
        family: None,
        single_resolution: false,
        nodes: vec![
            node("in", LayerKind::Input, None),
            node("c1", LayerKind::Conv3, Some(3)),
            node("p", LayerKind::Pool2, None),
            node("c2", LayerKind::Conv3, Some(3)),
            node("u", LayerKind::Upsample2, Some(3)),
            node("s", LayerKind::Sum, None),
            node("cat", LayerKind::Concat, None),
            node("pr", LayerKind::Predict1, None),
            node("out", LayerKind::Softmax, None),
        ],
        edges: vec![
            edge("in", "c1"),
            edge("c1", "p"),
            edge("p", "c2"),
            edge("c2", "u"),
            edge("c1", "s"),
            edge("u", "s"),
            edge("s", "cat"),
            edge("c1", "cat"),
            edge("cat", "pr"),
            edge("pr", "out"),
        ],
        output: "out".into(),
        taps: vec![],
    }
}

fn loss(net: &Network, w: &WeightSet<f64>, x: &Tensor<f64>, labels: &[u8]) -> (f64, Vec<u8>) {
    let (logits, cache) = net.forward_cached(w, x).unwrap();
    let (l, _) = volseg::netexec::softmax_cross_entropy(&logits, labels, None).unwrap();
    (l, cache.activation_pattern())
}

pub struct GradientCheck {
    pub checked: usize,
    pub worst: f64,
    /// `(tensor, coordinate, analytic, numeric)` beyond the tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

/// Central differences with step `h` on random weight coordinates of
/// [`tiny_graph`]. Coordinates whose perturbation flips a ReLU or pooling
/// decision are skipped.
pub fn gradient_check(h: f64, tolerance: f64) -> GradientCheck {
    let net = Network::new(&tiny_graph()).unwrap();
    let mut w = init_weights::<f64>(&net, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [8, 8, 8];
    let x = Tensor::from_vec(1, 4, dims, (0..4 * 512).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<u8> = (0..512).map(|_| rng.random_range(0..5)).collect();
    // Move BN affine parameters off their identity initialization.
    for t in w.learnable_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let res = net.loss_and_grad(&w, &x, &labels, None).unwrap();
    let grads: Vec<Vec<f64>> = res.grads.learnable().iter().map(|g| g.to_vec()).collect();
    let (_, pattern) = loss(&net, &w, &x, &labels);
    let mut out = GradientCheck {
        checked: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for t in 0..grads.len() {
        for _ in 0..12 {
            let k = rng.random_range(0..grads[t].len());
            let orig = w.learnable_mut()[t][k];
            w.learnable_mut()[t][k] = orig + h;
            let (lp, pp) = loss(&net, &w, &x, &labels);
            w.learnable_mut()[t][k] = orig - h;
            let (lm, pm) = loss(&net, &w, &x, &labels);
            w.learnable_mut()[t][k] = orig;
            if pp != pattern || pm != pattern {
                continue;
            }
            let num = (lp - lm) / (2.0 * h);
            let ana = grads[t][k];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            out.worst = out.worst.max(rel);
            if rel >= tolerance {
                out.failures.push((t, k, ana, num));
            }
            out.checked += 1;
        }
    }
    out
}
