//! Browser demo: architecture analysis, phantom slices and sampler
//! statistics, exported through `wasm-bindgen`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use volseg::archspec::{
    build_architecture, count_parameters, estimate_activation_memory, receptive_field, single_resolution_variant,
    ArchKind,
};
use volseg::phantom::{generate_phantom, MODALITY_NAMES};
use volseg::sampling::{realized_training_distribution, SamplerConfig, Strategy};
use volseg::volume::{class_histogram, LabelVolume, MultiModalVolume};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct NodeRow {
    name: String,
    kind: &'static str,
    level: u32,
    channels: usize,
    rf: u64,
}

#[derive(Serialize)]
struct Analysis {
    name: String,
    parameters: u64,
    output_rf: u64,
    activation_bytes: u64,
    taps: Vec<(String, String, u64)>,
    nodes: Vec<NodeRow>,
}

/// Receptive fields, parameter count and activation memory of a built-in
/// architecture, as JSON.
pub fn analyze_json(arch: &str, single_res: bool, filter_base: usize, input_size: usize) -> Result<String, String> {
    let kind: ArchKind = arch.parse().map_err(|e: volseg::Error| e.to_string())?;
    let g = build_architecture(kind, filter_base).map_err(|e| e.to_string())?;
    let g = if single_res { single_resolution_variant(&g, kind).map_err(|e| e.to_string())? } else { g };
    let trace = receptive_field(&g).map_err(|e| e.to_string())?;
    let analysis = Analysis {
        parameters: count_parameters(&g, volseg::IN_CHANNELS, volseg::NUM_CLASSES).map_err(|e| e.to_string())?,
        activation_bytes: estimate_activation_memory(&g, [input_size; 3], 4).map_err(|e| e.to_string())?,
        output_rf: trace.output_rf,
        taps: trace.taps.clone(),
        nodes: trace
            .nodes
            .iter()
            .map(|n| NodeRow {
                name: n.name.clone(),
                kind: n.kind.as_str(),
                level: n.level,
                channels: n.channels,
                rf: n.rf,
            })
            .collect(),
        name: g.name,
    };
    serde_json::to_string(&analysis).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn analyze(arch: &str, single_res: bool, filter_base: usize, input_size: usize) -> Result<String, JsError> {
    analyze_json(arch, single_res, filter_base, input_size).map_err(js_err)
}

const LABEL_COLORS: [[u8; 3]; 5] = [[0, 0, 0], [220, 60, 60], [60, 200, 80], [240, 200, 40], [60, 120, 240]];

/// A generated phantom kept in memory for slicing and sampling.
#[wasm_bindgen]
pub struct Phantom {
    image: MultiModalVolume,
    labels: LabelVolume,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, tumor_fraction: f64, noise: f64) -> Result<Phantom, JsError> {
        let (image, labels) = generate_phantom(seed, [size; 3], tumor_fraction, noise).map_err(js_err)?;
        Ok(Self { image, labels })
    }

    pub fn size(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn modalities(&self) -> String {
        MODALITY_NAMES.join(",")
    }

    /// Realized fraction of tumor voxels.
    pub fn tumor_fraction(&self) -> f64 {
        class_histogram(&self.labels).foreground_fraction()
    }

    /// RGBA pixels of axial slice `z`: grey intensities of `modality`,
    /// blended with label colors when `overlay` is set.
    pub fn slice_rgba(&self, modality: usize, z: usize, overlay: bool) -> Result<Vec<u8>, JsError> {
        let [nx, ny, nz] = self.image.dims();
        if modality >= self.image.num_modalities() || z >= nz {
            return Err(JsError::new("slice out of range"));
        }
        let mut out = Vec::with_capacity(nx * ny * 4);
        for y in 0..ny {
            for x in 0..nx {
                let grey = (self.image.get(modality, x, y, z) / 2.2 * 255.0).clamp(0.0, 255.0);
                let l = self.labels.get(x, y, z) as usize;
                let rgb = if overlay && l > 0 {
                    LABEL_COLORS[l].map(|c| (0.45 * grey + 0.55 * c as f32) as u8)
                } else {
                    [grey as u8; 3]
                };
                out.extend_from_slice(&rgb);
                out.push(255);
            }
        }
        Ok(out)
    }

    /// Class fractions seen by training patches under `strategy`, as a JSON
    /// object with the true fractions for comparison.
    pub fn sample_distribution(
        &self,
        strategy: &str,
        foreground_probability: f64,
        patch: usize,
        n_patches: usize,
        seed: u64,
    ) -> Result<String, JsError> {
        sample_distribution_json(&self.labels, strategy, foreground_probability, patch, n_patches, seed)
            .map_err(js_err)
    }
}

#[derive(Serialize)]
struct Distribution {
    truth: Vec<f64>,
    sampled: Vec<f64>,
}

pub fn sample_distribution_json(
    labels: &LabelVolume,
    strategy: &str,
    foreground_probability: f64,
    patch: usize,
    n_patches: usize,
    seed: u64,
) -> Result<String, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: volseg::Error| e.to_string())?;
    let cfg = SamplerConfig {
        patch_size: [patch; 3],
        foreground_probability,
        strategy,
        seed,
    };
    let hist = realized_training_distribution(&[labels], &cfg, n_patches).map_err(|e| e.to_string())?;
    let d = Distribution {
        truth: class_histogram(labels).fractions(),
        sampled: hist.fractions(),
    };
    serde_json::to_string(&d).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analysis_reports_taps() {
        let json = analyze_json("net3", false, 8, 64).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["taps"][0][2], 17);
        assert_eq!(v["taps"][1][2], 136);
        assert!(analyze_json("net7", false, 8, 64).is_err());
    }

    #[test]
    fn balanced_sampling_shifts_distribution() {
        let (_, labels) = generate_phantom(1, [32; 3], 0.05, 0.1).unwrap();
        let json = sample_distribution_json(&labels, "fg_bg_balanced", 0.5, 9, 200, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let bg = |k: &str| v[k][0].as_f64().unwrap();
        assert!(bg("sampled") < bg("truth"));
    }
}
