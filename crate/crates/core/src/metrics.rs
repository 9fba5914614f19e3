//! Region overlap metrics and validation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::volume::LabelVolume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Whole,
    Core,
    Enhancing,
}

/// A named union of tumor labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: Region,
    pub labels: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: Region) -> Self {
        let labels = match name {
            Region::Whole => vec![1, 2, 3, 4],
            Region::Core => vec![1, 3, 4],
            Region::Enhancing => vec![4],
        };
        Self { name, labels }
    }

    pub fn all() -> [RegionSpec; 3] {
        [Region::Whole, Region::Core, Region::Enhancing].map(Self::new)
    }

    pub fn title(&self) -> &'static str {
        match self.name {
            Region::Whole => "whole",
            Region::Core => "core",
            Region::Enhancing => "enhancing",
        }
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }
}

pub fn binarize_region(labels: &LabelVolume, region: &RegionSpec) -> Vec<bool> {
    labels.labels().iter().map(|&l| region.contains(l)).collect()
}

/// Voxel counts behind the overlap metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub predicted: u64,
    pub truth: u64,
    pub overlap: u64,
}

impl OverlapCounts {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "masks differ in size: {} vs {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            c.predicted += p as u64;
            c.truth += t as u64;
            c.overlap += (p && t) as u64;
        }
        Ok(c)
    }

    /// `2|P∧T| / (|P| + |T|)`, and 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        let den = self.predicted + self.truth;
        if den == 0 {
            1.0
        } else {
            (2 * self.overlap) as f64 / den as f64
        }
    }

    /// `|P∧T| / |P|`; undefined for an empty prediction.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.overlap as f64 / self.predicted as f64)
    }

    /// `|P∧T| / |T|`; undefined for an empty truth.
    pub fn recall(&self) -> Option<f64> {
        (self.truth > 0).then(|| self.overlap as f64 / self.truth as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn overlap_metrics(pred: &[bool], truth: &[bool]) -> Result<Overlap> {
    let c = OverlapCounts::from_masks(pred, truth)?;
    Ok(Overlap {
        dice: c.dice(),
        precision: c.precision(),
        recall: c.recall(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: RegionSpec,
    pub counts: OverlapCounts,
    pub dice: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// One-vs-rest metrics of a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub counts: OverlapCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub regions: Vec<RegionMetrics>,
    pub classes: Vec<ClassMetrics>,
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
}

pub fn region_report(pred: &LabelVolume, truth: &LabelVolume) -> Result<RegionReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} differ in extent",
            pred.dims(),
            truth.dims()
        )));
    }
    let classes = pred.num_classes().max(truth.num_classes()) as usize;
    // Joint histogram: one pass over the voxels.
    let mut joint = vec![0u64; classes * classes];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        joint[p as usize * classes + t as usize] += 1;
    }
    let count = |pin: &dyn Fn(u8) -> bool, tin: &dyn Fn(u8) -> bool| {
        let mut c = OverlapCounts::default();
        for p in 0..classes {
            for t in 0..classes {
                let n = joint[p * classes + t];
                let (pp, tt) = (pin(p as u8), tin(t as u8));
                c.predicted += n * pp as u64;
                c.truth += n * tt as u64;
                c.overlap += n * (pp && tt) as u64;
            }
        }
        c
    };
    let regions = RegionSpec::all()
        .into_iter()
        .map(|region| {
            let counts = count(&|l| region.contains(l), &|l| region.contains(l));
            RegionMetrics {
                counts,
                dice: counts.dice(),
                precision: counts.precision(),
                recall: counts.recall(),
                region,
            }
        })
        .collect();
    let class_metrics = (0..classes as u8)
        .map(|k| {
            let counts = count(&|l| l == k, &|l| l == k);
            ClassMetrics {
                class: k,
                counts,
                precision: counts.precision(),
                recall: counts.recall(),
            }
        })
        .collect();
    let correct: u64 = (0..classes).map(|k| joint[k * classes + k]).sum();
    let total = pred.voxels() as u64;
    Ok(RegionReport {
        regions,
        classes: class_metrics,
        correct,
        total,
        accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
    })
}

const CLASS_NAMES: [&str; 5] = ["0-else", "1-nec", "2-edm", "3-nenh", "4-enh"];

fn class_name(k: u8) -> String {
    CLASS_NAMES
        .get(k as usize)
        .map_or_else(|| format!("{k}"), |s| s.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl RegionReport {
    pub fn region(&self, name: Region) -> &RegionMetrics {
        self.regions
            .iter()
            .find(|r| r.region.name == name)
            .expect("all regions are reported")
    }

    /// Columns: `section,name,dice,precision,recall,accuracy,predicted,truth,overlap`.
    /// Undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,name,dice,precision,recall,accuracy,predicted,truth,overlap\n");
        for r in &self.regions {
            let c = r.counts;
            let _ = writeln!(
                s,
                "region,{},{:.6},{},{},,{},{},{}",
                r.region.title(),
                r.dice,
                fmt_opt(r.precision),
                fmt_opt(r.recall),
                c.predicted,
                c.truth,
                c.overlap
            );
        }
        for k in &self.classes {
            let c = k.counts;
            let _ = writeln!(
                s,
                "class,{},,{},{},,{},{},{}",
                class_name(k.class),
                fmt_opt(k.precision),
                fmt_opt(k.recall),
                c.predicted,
                c.truth,
                c.overlap
            );
        }
        let _ = writeln!(
            s,
            "overall,accuracy,,,,{:.6},{},{},{}",
            self.accuracy, self.total, self.total, self.correct
        );
        s
    }

    /// Aligned text with a region block and a per-class block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>10}{:>11}{:>10}", "region", "dice", "precision", "recall");
        for r in &self.regions {
            let _ = writeln!(
                s,
                "{:<12}{:>10.4}{:>11}{:>10}",
                r.region.title(),
                r.dice,
                r.precision.map_or("NA".into(), |v| format!("{v:.4}")),
                r.recall.map_or("NA".into(), |v| format!("{v:.4}")),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12}{:>10}{:>11}{:>10}", "class", "", "precision", "recall");
        for k in &self.classes {
            let _ = writeln!(
                s,
                "{:<12}{:>10}{:>11}{:>10}",
                class_name(k.class),
                "",
                k.precision.map_or("NA".into(), |v| format!("{v:.4}")),
                k.recall.map_or("NA".into(), |v| format!("{v:.4}")),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "accuracy {:.4} ({} of {} voxels)", self.accuracy, self.correct, self.total);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(labels: Vec<u8>) -> LabelVolume {
        let n = labels.len();
        LabelVolume::new([n, 1, 1], 5, labels).unwrap()
    }

    #[test]
    fn core_excludes_edema() {
        let edema = vol(vec![2; 8]);
        assert!(binarize_region(&edema, &RegionSpec::new(Region::Core)).iter().all(|&b| !b));
        assert!(binarize_region(&edema, &RegionSpec::new(Region::Whole)).iter().all(|&b| b));
    }

    #[test]
    fn counted_example() {
        let p = [true, true, true, true, false, false, false, false, false];
        let t = [true, true, true, false, true, true, true, false, false];
        let m = overlap_metrics(&p, &t).unwrap();
        assert_eq!((m.dice, m.precision, m.recall), (0.6, Some(0.75), Some(0.5)));
    }

    #[test]
    fn empty_conventions() {
        let m = overlap_metrics(&[false; 3], &[false; 3]).unwrap();
        assert_eq!((m.dice, m.precision, m.recall), (1.0, None, None));
        let m = overlap_metrics(&[true, false], &[false, true]).unwrap();
        assert_eq!((m.dice, m.precision, m.recall), (0.0, Some(0.0), Some(0.0)));
        assert!(overlap_metrics(&[true], &[true, false]).is_err());
    }

    #[test]
    fn perfect_and_background_predictions() {
        let truth = vol(vec![0, 0, 0, 1, 2, 3, 4, 0]);
        let r = region_report(&truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.regions.iter().all(|m| m.dice == 1.0 && m.precision == Some(1.0) && m.recall == Some(1.0)));
        let bg = vol(vec![0; 8]);
        let r = region_report(&bg, &truth).unwrap();
        assert!(r.regions.iter().all(|m| m.recall == Some(0.0) && m.precision.is_none()));
        assert_eq!(r.accuracy, 0.5);
        assert!(r.to_csv().contains("region,whole,0.000000,NA,0.000000"));
    }
}
