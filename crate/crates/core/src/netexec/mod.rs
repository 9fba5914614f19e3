//! CPU execution of architecture graphs: forward pass, softmax
//! cross-entropy, and backpropagation into every learnable tensor.
//!
//! The engine is generic over the float type: training runs in `f32`,
//! gradient checks in `f64`.

mod checkpoint;
pub mod ops;
mod tensor;
mod weights;

pub use checkpoint::{graph_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use tensor::Tensor;
pub use weights::{
    init_weights, BatchNormState, BatchStats, Gradients, Mode, NodeGrads, NodeWeights, WeightSet,
};

use crate::archspec::{ArchitectureGraph, LayerKind, Topology};
use crate::{Error, Result};

/// Floating-point element type of tensors and weights.
pub trait Real:
    num_traits::Float + Default + Send + Sync + std::fmt::Debug + std::ops::AddAssign + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
    }
}

/// A validated graph ready for execution.
#[derive(Clone, Debug)]
pub struct Network {
    pub graph: ArchitectureGraph,
    pub topo: Topology,
}

enum Aux<T> {
    None,
    /// Post-ReLU activation entering batch norm, and the statistics used.
    ConvBn {
        relu: Tensor<T>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Pool(Vec<u8>),
}

/// Intermediate values retained for backpropagation.
pub struct ForwardCache<T> {
    values: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
    pub batch_stats: BatchStats,
    mode: Mode,
}

impl<T: Real> ForwardCache<T> {
    /// ReLU on/off masks and pool winners, flattened. Two forward passes
    /// with equal patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for a in &self.aux {
            match a {
                Aux::ConvBn { relu, .. } => out.extend(relu.data.iter().map(|&v| (v > T::zero()) as u8)),
                Aux::Pool(arg) => out.extend_from_slice(arg),
                Aux::None => {}
            }
        }
        out
    }
}

/// Result of [`Network::loss_and_grad`].
pub struct LossAndGrad<T> {
    pub loss: f64,
    pub grads: Gradients<T>,
    pub batch_stats: BatchStats,
    pub logits: Tensor<T>,
}

impl Network {
    pub fn new(graph: &ArchitectureGraph) -> Result<Self> {
        let topo = graph.validate()?;
        Ok(Self {
            graph: graph.clone(),
            topo,
        })
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_period(&self) -> usize {
        1 << self.topo.max_level
    }

    pub fn in_channels(&self) -> usize {
        self.topo.channels[self.topo.input]
    }

    pub fn num_classes(&self) -> usize {
        self.topo.channels[self.topo.output]
    }

    fn check_input<T: Real>(&self, w: &WeightSet<T>, x: &Tensor<T>) -> Result<()> {
        w.check(self)?;
        if x.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                x.c,
                self.in_channels()
            )));
        }
        let p = self.size_period();
        if x.dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(Error::Shape(format!(
                "input extent {:?} is not divisible by {p}",
                x.dims
            )));
        }
        Ok(())
    }

    /// Class scores for `input`; intermediate values are released early.
    pub fn forward<T: Real>(&self, w: &WeightSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(w, input)?;
        Ok(self.run(w, input, false).0)
    }

    /// Forward pass keeping everything backpropagation needs.
    pub fn forward_cached<T: Real>(&self, w: &WeightSet<T>, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(w, input)?;
        let (out, cache) = self.run(w, input, true);
        Ok((out, cache.expect("cache requested")))
    }

    fn run<T: Real>(&self, w: &WeightSet<T>, input: &Tensor<T>, keep: bool) -> (Tensor<T>, Option<ForwardCache<T>>) {
        let n = self.graph.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut aux: Vec<Aux<T>> = (0..n).map(|_| Aux::None).collect();
        let mut stats = BatchStats { nodes: vec![None; n] };
        let mut uses: Vec<usize> = self.topo.outputs.iter().map(Vec::len).collect();
        let batch_mode = w.mode == Mode::Train;

        for &i in &self.topo.order {
            let node = &self.graph.nodes[i];
            let ins = &self.topo.inputs[i];
            let arg = |k: usize| values[ins[k]].as_ref().expect("operand computed");
            let out = match node.kind {
                LayerKind::Input => input.clone(),
                LayerKind::Conv3 | LayerKind::Upsample2 => {
                    let p = w.nodes[i].as_ref().expect("conv weights");
                    let bn = p.bn.as_ref().expect("conv3 has batch norm");
                    let c = self.topo.channels[i];
                    let mut y = if node.kind == LayerKind::Upsample2 {
                        ops::conv3_forward(&ops::repeat2(arg(0)), &p.kernel, &p.bias, c)
                    } else {
                        ops::conv3_forward(arg(0), &p.kernel, &p.bias, c)
                    };
                    ops::relu_inplace(&mut y);
                    let (mean, inv_std) = if batch_mode {
                        let (mean, var) = ops::channel_stats(&y);
                        let count = (y.n * y.plane()) as f64;
                        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + ops::BN_EPS).sqrt()).collect();
                        let unbiased = var.iter().map(|v| v * count / (count - 1.0).max(1.0)).collect();
                        stats.nodes[i] = Some((mean.clone(), unbiased));
                        (mean, inv)
                    } else {
                        (
                            bn.running_mean.iter().map(|m| m.f64()).collect(),
                            bn.running_var.iter().map(|v| 1.0 / (v.f64() + ops::BN_EPS).sqrt()).collect(),
                        )
                    };
                    if keep {
                        let relu = y.clone();
                        ops::affine_normalize_inplace(&mut y, &mean, &inv_std, &bn.gamma, &bn.beta);
                        aux[i] = Aux::ConvBn { relu, mean, inv_std };
                    } else {
                        ops::affine_normalize_inplace(&mut y, &mean, &inv_std, &bn.gamma, &bn.beta);
                    }
                    y
                }
                LayerKind::Predict1 => {
                    let p = w.nodes[i].as_ref().expect("predict weights");
                    ops::conv1_forward(arg(0), &p.kernel, &p.bias, self.topo.channels[i])
                }
                LayerKind::Pool2 => {
                    let (y, a) = ops::pool2_forward(arg(0));
                    if keep {
                        aux[i] = Aux::Pool(a);
                    }
                    y
                }
                LayerKind::Sum => {
                    let mut y = arg(0).clone();
                    for k in 1..ins.len() {
                        y.add_assign(arg(k));
                    }
                    y
                }
                LayerKind::Concat => {
                    let parts: Vec<&Tensor<T>> = (0..ins.len()).map(arg).collect();
                    concat_channels(&parts)
                }
                LayerKind::Softmax => arg(0).clone(),
            };
            values[i] = Some(out);
            if !keep {
                for &j in ins {
                    uses[j] -= 1;
                    if uses[j] == 0 {
                        values[j] = None;
                    }
                }
            }
        }
        let out = values[self.topo.output].take().expect("output computed");
        let cache = keep.then_some(ForwardCache {
            values,
            aux,
            batch_stats: stats,
            mode: w.mode,
        });
        (out, cache)
    }

    /// Backpropagates `dlogits` through the cached forward pass.
    pub fn backward<T: Real>(&self, w: &WeightSet<T>, cache: &ForwardCache<T>, dlogits: Tensor<T>) -> Gradients<T> {
        let n = self.graph.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<NodeGrads<T>>> = (0..n).map(|_| None).collect();
        grads[self.topo.output] = Some(dlogits);
        let batch_mode = cache.mode == Mode::Train;
        let value = |j: usize| cache.values[j].as_ref().expect("cached value");
        let wants_grad = |j: usize| self.graph.nodes[j].kind != LayerKind::Input;

        for &i in self.topo.order.iter().rev() {
            let node = &self.graph.nodes[i];
            let ins = &self.topo.inputs[i];
            let Some(g) = grads[i].take() else {
                // No gradient reached this node; parameters get zeros.
                if let Some((k, c, bn)) = self.param_shape(i) {
                    let z = if bn { vec![T::zero(); c] } else { Vec::new() };
                    out[i] = Some(NodeGrads {
                        kernel: vec![T::zero(); k],
                        bias: vec![T::zero(); c],
                        gamma: z.clone(),
                        beta: z,
                    });
                }
                continue;
            };
            let mut pass: Vec<(usize, Tensor<T>)> = Vec::new();
            match node.kind {
                LayerKind::Input => {}
                LayerKind::Softmax => pass.push((ins[0], g)),
                LayerKind::Predict1 => {
                    let p = w.nodes[i].as_ref().expect("predict weights");
                    let x = value(ins[0]);
                    let (gk, gb) = ops::conv1_backward_params(x, &g);
                    if wants_grad(ins[0]) {
                        pass.push((ins[0], ops::conv1_backward_input(&g, &p.kernel, x.c)));
                    }
                    out[i] = Some(NodeGrads {
                        kernel: gk,
                        bias: gb,
                        gamma: Vec::new(),
                        beta: Vec::new(),
                    });
                }
                LayerKind::Conv3 | LayerKind::Upsample2 => {
                    let p = w.nodes[i].as_ref().expect("conv weights");
                    let bn = p.bn.as_ref().expect("batch norm");
                    let Aux::ConvBn { relu, mean, inv_std } = &cache.aux[i] else {
                        unreachable!("conv node without cache")
                    };
                    let (mut dx, dgamma, dbeta) = ops::batch_norm_backward(&g, relu, mean, inv_std, &bn.gamma, batch_mode);
                    ops::relu_backward_inplace(&mut dx, relu);
                    let upsample = node.kind == LayerKind::Upsample2;
                    let repeated;
                    let x = if upsample {
                        repeated = ops::repeat2(value(ins[0]));
                        &repeated
                    } else {
                        value(ins[0])
                    };
                    let (gk, gb) = ops::conv3_backward_params(x, &dx);
                    if wants_grad(ins[0]) {
                        let gi = ops::conv3_backward_input(&dx, &p.kernel, x.c);
                        pass.push((ins[0], if upsample { ops::repeat2_backward(&gi) } else { gi }));
                    }
                    out[i] = Some(NodeGrads {
                        kernel: gk,
                        bias: gb,
                        gamma: dgamma,
                        beta: dbeta,
                    });
                }
                LayerKind::Pool2 => {
                    let Aux::Pool(arg) = &cache.aux[i] else { unreachable!("pool without cache") };
                    if wants_grad(ins[0]) {
                        pass.push((ins[0], ops::pool2_backward(&g, arg, value(ins[0]).dims)));
                    }
                }
                LayerKind::Sum => {
                    for &j in ins {
                        pass.push((j, g.clone()));
                    }
                }
                LayerKind::Concat => {
                    let mut offset = 0;
                    for &j in ins {
                        let c = self.topo.channels[j];
                        pass.push((j, slice_channels(&g, offset, c)));
                        offset += c;
                    }
                }
            }
            for (j, gj) in pass {
                if !wants_grad(j) {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gj),
                    slot => *slot = Some(gj),
                }
            }
        }
        Gradients { nodes: out }
    }

    /// Mean (optionally class-weighted) voxelwise cross-entropy of the
    /// network's prediction for `input`, with gradients for every weight.
    pub fn loss_and_grad<T: Real>(
        &self,
        w: &WeightSet<T>,
        input: &Tensor<T>,
        labels: &[u8],
        class_weights: Option<&[f64]>,
    ) -> Result<LossAndGrad<T>> {
        let (logits, cache) = self.forward_cached(w, input)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, class_weights)?;
        let grads = self.backward(w, &cache, dlogits);
        Ok(LossAndGrad {
            loss,
            grads,
            batch_stats: cache.batch_stats,
            logits,
        })
    }
}

fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let c: usize = parts.iter().map(|p| p.c).sum();
    let (n, dims) = (parts[0].n, parts[0].dims);
    let mut out = Tensor::zeros(n, c, dims);
    for b in 0..n {
        let mut offset = 0;
        for p in parts {
            for k in 0..p.c {
                out.channel_mut(b, offset + k).copy_from_slice(p.channel(b, k));
            }
            offset += p.c;
        }
    }
    out
}

fn slice_channels<T: Real>(g: &Tensor<T>, offset: usize, c: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(g.n, c, g.dims);
    for b in 0..g.n {
        for k in 0..c {
            out.channel_mut(b, k).copy_from_slice(g.channel(b, offset + k));
        }
    }
    out
}

/// Per-voxel softmax over the channel axis.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(logits.n, logits.c, logits.dims);
    let p = logits.plane();
    let mut z = vec![0.0f64; logits.c];
    for n in 0..logits.n {
        for v in 0..p {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = logits.channel(n, c)[v].f64();
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|&zc| (zc - m).exp()).sum();
            for (c, &zc) in z.iter().enumerate() {
                out.channel_mut(n, c)[v] = T::of((zc - m).exp() / s);
            }
        }
    }
    out
}

/// Mean over voxels of `-w[t] * log softmax(z)[t]`, and its gradient with
/// respect to the logits. Missing class weights count as 1.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Tensor<T>)> {
    let p = logits.plane();
    let classes = logits.c;
    if labels.len() != logits.n * p {
        return Err(Error::Shape(format!(
            "{} labels for {} voxels",
            labels.len(),
            logits.n * p
        )));
    }
    if let Some(cw) = class_weights {
        if cw.len() != classes || cw.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "class weights must be {classes} positive values, got {cw:?}"
            )));
        }
    }
    let count = (logits.n * p) as f64;
    let mut grad = Tensor::zeros(logits.n, classes, logits.dims);
    let mut total = 0.0f64;
    let mut z = vec![0.0f64; classes];
    for n in 0..logits.n {
        for v in 0..p {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = logits.channel(n, c)[v].f64();
                if !zc.is_finite() {
                    return Err(Error::Invariant(format!("non-finite logit {zc} at voxel {v}")));
                }
            }
            let t = labels[n * p + v] as usize;
            if t >= classes {
                return Err(Error::Invariant(format!("label {t} outside 0..{classes}")));
            }
            let wt = class_weights.map_or(1.0, |cw| cw[t]);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|&zc| (zc - m).exp()).sum();
            total += -wt * (z[t] - m - s.ln());
            for (c, &zc) in z.iter().enumerate() {
                let prob = (zc - m).exp() / s;
                let d = prob - if c == t { 1.0 } else { 0.0 };
                grad.channel_mut(n, c)[v] = T::of(wt * d / count);
            }
        }
    }
    Ok((total / count, grad))
}
