//! `VSEGCKPT1` checkpoint files.
//!
//! ```text
//! magic=VSEGCKPT1
//! graph_hash=<sha256 of the embedded graph document>
//! step=120
//! epoch=3
//! mode=train
//! dtype=f32
//! byte_order=little
//! graph_bytes=2817
//! tensors=enc0_conv1.kernel:864,enc0_conv1.bias:8,...
//! extra=adam.m:...,adam.v:...
//! meta.optimizer=adaptive_moments
//! ```
//!
//! The header ends with `\n\0`; the payload holds the graph document
//! followed by every tensor in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BatchNormState, Mode, Network, NodeWeights, Real, WeightSet};
use crate::archspec::ArchitectureGraph;
use crate::volume::io::{field, split_header, TERMINATOR};
use crate::{Error, Result};

const MAGIC: &str = "VSEGCKPT1";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub graph: ArchitectureGraph,
    pub weights: WeightSet<T>,
    pub step: u64,
    pub epoch: u64,
    /// Additional named tensors, e.g. optimizer moments.
    pub extra: Vec<(String, Vec<T>)>,
    /// Free-form single-line values, stored as `meta.<key>` header lines.
    pub meta: BTreeMap<String, String>,
}

/// Hex SHA-256 of the graph's JSON document.
pub fn graph_hash(graph: &ArchitectureGraph) -> String {
    let digest = Sha256::digest(graph.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains([',', ':', '\n', '=']) {
        return Err(Error::Format(format!("invalid tensor name {name:?}")));
    }
    Ok(())
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = Network::new(&self.graph)?;
        self.weights.check(&net)?;
        let named = self.weights.named_tensors(&net);
        let list = |items: &mut dyn Iterator<Item = (&str, usize)>| -> Result<String> {
            let mut parts = Vec::new();
            for (name, len) in items {
                check_name(name)?;
                parts.push(format!("{name}:{len}"));
            }
            Ok(parts.join(","))
        };
        let tensors = list(&mut named.iter().map(|(n, t)| (n.as_str(), t.len())))?;
        let extra = list(&mut self.extra.iter().map(|(n, t)| (n.as_str(), t.len())))?;
        let json = self.graph.to_json();
        let mut header = format!(
            "magic={MAGIC}\ngraph_hash={}\nstep={}\nepoch={}\nmode={}\ndtype={}\nbyte_order=little\ngraph_bytes={}\ntensors={tensors}\nextra={extra}",
            graph_hash(&self.graph),
            self.step,
            self.epoch,
            self.weights.mode.as_str(),
            T::DTYPE,
            json.len(),
        );
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("invalid metadata entry {k:?}")));
            }
            header.push_str(&format!("\nmeta.{k}={v}"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(TERMINATOR);
        out.extend_from_slice(json.as_bytes());
        for (_, t) in &named {
            t.iter().for_each(|v| v.write_le(&mut out));
        }
        for (_, t) in &self.extra {
            t.iter().for_each(|v| v.write_le(&mut out));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = split_header(bytes, MAGIC)?;
        let dtype = field(&h, "dtype")?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {dtype}, expected {}", T::DTYPE)));
        }
        if field(&h, "byte_order")? != "little" {
            return Err(Error::Format("only little-endian checkpoints are supported".into()));
        }
        let num = |key: &str| -> Result<u64> {
            field(&h, key)?
                .parse()
                .map_err(|_| Error::Format(format!("cannot parse {key}")))
        };
        let graph_bytes = num("graph_bytes")? as usize;
        if payload.len() < graph_bytes {
            return Err(Error::SizeMismatch("checkpoint truncated inside graph document".into()));
        }
        let json = std::str::from_utf8(&payload[..graph_bytes])
            .map_err(|_| Error::Format("graph document is not UTF-8".into()))?;
        let graph = ArchitectureGraph::from_json(json)?;
        let hash = field(&h, "graph_hash")?;
        if hash != graph_hash(&graph) {
            return Err(Error::Format("graph hash does not match the embedded graph".into()));
        }
        let mode = match field(&h, "mode")? {
            "train" => Mode::Train,
            "inference" => Mode::Inference,
            m => return Err(Error::Format(format!("unknown mode {m:?}"))),
        };

        let parse_list = |key: &str| -> Result<Vec<(String, usize)>> {
            let s = field(&h, key)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|item| {
                    let (name, len) = item
                        .rsplit_once(':')
                        .ok_or_else(|| Error::Format(format!("bad tensor entry {item:?}")))?;
                    let len = len
                        .parse()
                        .map_err(|_| Error::Format(format!("bad tensor length in {item:?}")))?;
                    Ok((name.to_string(), len))
                })
                .collect()
        };
        let tensors = parse_list("tensors")?;
        let extra_list = parse_list("extra")?;
        let total: usize = tensors.iter().chain(&extra_list).map(|(_, l)| l).sum();
        let body = &payload[graph_bytes..];
        if body.len() != total * T::BYTES {
            return Err(Error::SizeMismatch(format!(
                "header declares {total} values ({} bytes), payload has {} bytes",
                total * T::BYTES,
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(T::BYTES).map(T::read_le);
        let mut named: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for (name, len) in &tensors {
            named.insert(name.clone(), chunks.by_ref().take(*len).collect());
        }
        let extra = extra_list
            .iter()
            .map(|(name, len)| (name.clone(), chunks.by_ref().take(*len).collect()))
            .collect();

        let net = Network::new(&graph)?;
        let mut take = |key: String| {
            named
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key:?}")))
        };
        let mut nodes = Vec::with_capacity(graph.nodes.len());
        for (i, node) in graph.nodes.iter().enumerate() {
            let Some((_, _, has_bn)) = net.param_shape(i) else {
                nodes.push(None);
                continue;
            };
            let n = &node.name;
            let bn = if has_bn {
                Some(BatchNormState {
                    gamma: take(format!("{n}.bn_gamma"))?,
                    beta: take(format!("{n}.bn_beta"))?,
                    running_mean: take(format!("{n}.bn_running_mean"))?,
                    running_var: take(format!("{n}.bn_running_var"))?,
                })
            } else {
                None
            };
            nodes.push(Some(NodeWeights {
                kernel: take(format!("{n}.kernel"))?,
                bias: take(format!("{n}.bias"))?,
                bn,
            }));
        }
        if let Some(name) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name:?}")));
        }
        let weights = WeightSet { mode, nodes };
        weights.check(&net)?;
        let meta = h
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            graph,
            weights,
            step: num("step")?,
            epoch: num("epoch")?,
            extra,
            meta,
        })
    }
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{build_architecture, ArchKind};
    use crate::netexec::init_weights;

    fn sample() -> Checkpoint<f32> {
        let graph = build_architecture(ArchKind::Net2, 2).unwrap();
        let net = Network::new(&graph).unwrap();
        let mut weights = init_weights::<f32>(&net, 4);
        // Non-trivial running statistics.
        for w in weights.nodes.iter_mut().flatten() {
            if let Some(bn) = &mut w.bn {
                bn.running_var.iter_mut().for_each(|v| *v = 0.37);
                bn.running_mean.iter_mut().for_each(|v| *v = -1.5e-7);
            }
        }
        Checkpoint {
            graph,
            weights: weights.with_mode(Mode::Inference),
            step: 17,
            epoch: 3,
            extra: vec![("adam.m".into(), vec![1.0, f32::MIN_POSITIVE, -0.0])],
            meta: BTreeMap::from([("losses".to_string(), "2.5,1.25e-3".to_string())]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.step, 17);
        assert_eq!(back.weights.mode, Mode::Inference);
        assert_eq!(back.extra[0].1[2].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("graph_hash=").unwrap() + "graph_hash=".len();
        let mut bad = bytes.clone();
        bad[pos] = if bad[pos] == b'0' { b'1' } else { b'0' };
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap(), ck);
    }
}
