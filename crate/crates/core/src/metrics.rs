//! Confusion-matrix metrics, full-resolution evaluation, and the
//! pixel-to-center distance analysis comparing adaptive and global centers.

use std::fmt::Write as _;

use rand::Rng;

use crate::dataset::{confusable_pair, Scene};
use crate::error::{Error, Result};
use crate::head::{predict, MaskSource};
use crate::labels::LabelMap;
use crate::model::{Centers, Model};
use crate::seeds;
use crate::similarity::SimilarityMap;
use crate::tensor::{self, Tensor};

/// `K × K` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::contract("confusion counts must be K × K"));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per labeled pixel at `[gt, pred]`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::contract(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        if pred.classes() != self.classes || gt.classes() != self.classes {
            return Err(Error::contract("class count differs from the confusion matrix"));
        }
        for i in 0..gt.pixels() {
            if let (Some(y), Some(p)) = (gt.class_at(i), pred.class_at(i)) {
                self.counts[y * self.classes + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract("cannot merge matrices of different size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` for classes absent from ground truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.classes;
        let support: u64 = (0..k).map(|p| self.get(class, p)).sum();
        if support == 0 {
            return None;
        }
        let tp = self.get(class, class);
        let fp: u64 = (0..k).filter(|&g| g != class).map(|g| self.get(g, class)).sum();
        Some(tp as f64 / (support + fp) as f64)
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::contract("mIoU of an empty confusion matrix"));
        }
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::contract("accuracy of an empty confusion matrix"));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `class,iou` rows (empty IoU for absent classes), then `miou,acc`.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("class,iou\n");
        for c in 0..self.classes {
            match self.iou(c) {
                Some(v) => writeln!(s, "{c},{v}"),
                None => writeln!(s, "{c},"),
            }
            .expect("string write");
        }
        writeln!(s, "miou,acc\n{},{}", self.miou()?, self.pixel_accuracy()?).expect("string write");
        Ok(s)
    }
}

/// Bilinear resize of `K × (h·w)` maps to `K × (H·W)` with half-pixel
/// centers and edge clamping.
pub fn upsample_bilinear(maps: &Tensor, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [k, n] = maps.dims2()?;
    if n != h * w || h == 0 || w == 0 {
        return Err(Error::contract(format!("{n} pixels do not fill {h}x{w}")));
    }
    let taps = |dst: usize, from: usize, to: usize| {
        let src = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(from - 1);
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, src - i0 as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|r| taps(r, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|c| taps(c, w, out_w)).collect();
    let d = maps.data();
    let mut out = Vec::with_capacity(k * out_h * out_w);
    for ch in 0..k {
        let m = &d[ch * n..(ch + 1) * n];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = m[r0 * w + c0] * (1.0 - fc) + m[r0 * w + c1] * fc;
                let bottom = m[r1 * w + c0] * (1.0 - fc) + m[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::new(&[k, out_h * out_w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Predicted,
    /// Ground truth replaces the predicted mask when building centers.
    GroundTruth,
}

/// Full-resolution prediction for one scene.
pub fn segment(model: &Model, centers: Centers, scene: &Scene, mode: MaskMode) -> Result<LabelMap> {
    let source = match mode {
        MaskMode::Predicted => MaskSource::Predicted,
        MaskMode::GroundTruth => {
            if centers != Centers::Adaptive || model.ccs.is_none() {
                return Err(Error::Config("ground-truth masks apply only to adaptive-center models".into()));
            }
            MaskSource::GroundTruth(&scene.labels)
        }
    };
    let (probs, fh, fw) = model.probabilities(&scene.image, centers, source)?;
    let (h, w) = (scene.height(), scene.width());
    let full = upsample_bilinear(&probs, fh, fw, h, w)?;
    predict(&SimilarityMap::absolute(full)?, h, w)
}

pub fn evaluate(model: &Model, centers: Centers, scenes: &[Scene], mode: MaskMode) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(model.classes());
    for scene in scenes {
        conf.accumulate(&segment(model, centers, scene, mode)?, &scene.labels)?;
    }
    Ok(conf)
}

// -------------------------------------------------------------- distances

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CenterKind {
    Adaptive,
    Global,
}

impl CenterKind {
    pub fn name(self) -> &'static str {
        match self {
            CenterKind::Adaptive => "adaptive",
            CenterKind::Global => "global",
        }
    }
}

/// Intra: pixel to its own class center. Inter: pixel of a confusable
/// class to the other confusable class's center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DistanceSplit {
    Intra,
    Inter,
}

impl DistanceSplit {
    pub fn name(self) -> &'static str {
        match self {
            DistanceSplit::Intra => "intra",
            DistanceSplit::Inter => "inter",
        }
    }
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceGroup {
    pub class: usize,
    pub kind: CenterKind,
    pub split: DistanceSplit,
    pub values: Vec<f64>,
}

impl DistanceGroup {
    pub fn median(&self) -> Option<f64> {
        median(&self.values)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Nearest-rank percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    pub classes: usize,
    pub groups: Vec<DistanceGroup>,
    pub warnings: Vec<String>,
}

/// Per-pixel `-log softmax` distances (`K × N`) for scores `centers · F`.
fn distances(centers: &Tensor, features: &Tensor) -> Result<Tensor> {
    Ok(tensor::log_softmax(&centers.matmul(features)?, 0)?.map(|v| (-v).max(0.0)))
}

impl DistanceReport {
    /// Samples each labeled pixel with probability `sample_ratio` and
    /// measures its distance to the adaptive centers of its own scene and
    /// to the global centers. Pixels take the value of the feature cell
    /// that covers them.
    pub fn compute(model: &Model, scenes: &[Scene], sample_ratio: f64, seed: u64) -> Result<Self> {
        if !(sample_ratio > 0.0 && sample_ratio <= 1.0) {
            return Err(Error::contract("sample ratio must lie in (0, 1]"));
        }
        let ccs = model
            .ccs
            .as_ref()
            .ok_or_else(|| Error::Config("distance analysis needs a model with a CCS head".into()))?;
        let k = model.classes();
        let (pa, pb) = confusable_pair(k);
        let stride = model.stride();
        let mut groups = Vec::new();
        for split in [DistanceSplit::Intra, DistanceSplit::Inter] {
            for class in 0..k {
                if split == DistanceSplit::Inter && class != pa && class != pb {
                    continue;
                }
                for kind in [CenterKind::Adaptive, CenterKind::Global] {
                    groups.push(DistanceGroup {
                        class,
                        kind,
                        split,
                        values: Vec::new(),
                    });
                }
            }
        }
        let slot = |class: usize, kind: CenterKind, split: DistanceSplit| {
            groups
                .iter()
                .position(|g| g.class == class && g.kind == kind && g.split == split)
        };
        let slots: Vec<Vec<[Option<usize>; 2]>> = [DistanceSplit::Intra, DistanceSplit::Inter]
            .iter()
            .map(|&s| {
                (0..k)
                    .map(|c| [slot(c, CenterKind::Adaptive, s), slot(c, CenterKind::Global, s)])
                    .collect()
            })
            .collect();

        for (j, scene) in scenes.iter().enumerate() {
            let (features, _, fw) = model.features(&scene.image)?;
            let fh = scene.height() / stride;
            let adaptive = ccs.forward(&features, MaskSource::Predicted, (fh, fw))?;
            let d = [
                distances(adaptive.centers.values(), &features)?,
                distances(model.global.weight(), &features)?,
            ];
            let n = fh * fw;
            let mut rng = seeds::substream(seed, seeds::SAMPLE, j as u64);
            for r in 0..scene.height() {
                for c in 0..scene.width() {
                    let Some(y) = scene.labels.get(r, c) else { continue };
                    if sample_ratio < 1.0 && !rng.gen_bool(sample_ratio) {
                        continue;
                    }
                    let cell = (r / stride) * fw + c / stride;
                    let partner = if y == pa { Some(pb) } else if y == pb { Some(pa) } else { None };
                    for (kind, dk) in d.iter().enumerate() {
                        let v = dk.data();
                        if let Some(g) = slots[0][y][kind] {
                            groups[g].values.push(v[y * n + cell]);
                        }
                        if let (Some(p), Some(g)) = (partner, slots[1][y][kind]) {
                            groups[g].values.push(v[p * n + cell]);
                        }
                    }
                }
            }
        }
        let warnings = groups
            .iter()
            .filter(|g| g.values.is_empty() && g.kind == CenterKind::Adaptive)
            .map(|g| format!("class {} has no sampled pixels ({})", g.class, g.split.name()))
            .collect();
        groups.retain(|g| !g.values.is_empty());
        Ok(Self {
            classes: k,
            groups,
            warnings,
        })
    }

    pub fn group(&self, class: usize, kind: CenterKind, split: DistanceSplit) -> Option<&DistanceGroup> {
        self.groups
            .iter()
            .find(|g| g.class == class && g.kind == kind && g.split == split)
    }

    /// Upper histogram edge for a split: the 99th percentile of all its
    /// distances, or 1 when that is zero.
    pub fn upper_edge(&self, split: DistanceSplit) -> f64 {
        let all: Vec<f64> = self
            .groups
            .iter()
            .filter(|g| g.split == split)
            .flat_map(|g| g.values.iter().copied())
            .collect();
        match percentile(&all, 99.0) {
            Some(p) if p > 0.0 => p,
            _ => 1.0,
        }
    }

    /// Counts per bin; values past the upper edge land in the last bin.
    pub fn histogram(&self, group: &DistanceGroup) -> Vec<u64> {
        let hi = self.upper_edge(group.split);
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &v in &group.values {
            let b = ((v / hi) * HISTOGRAM_BINS as f64).floor() as usize;
            counts[b.min(HISTOGRAM_BINS - 1)] += 1;
        }
        counts
    }

    /// `class,center_kind,bin_lo,bin_hi,count` for one split.
    pub fn histogram_csv(&self, split: DistanceSplit) -> String {
        let hi = self.upper_edge(split);
        let width = hi / HISTOGRAM_BINS as f64;
        let mut s = String::from("class,center_kind,bin_lo,bin_hi,count\n");
        for g in self.groups.iter().filter(|g| g.split == split) {
            for (b, count) in self.histogram(g).into_iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{count}",
                    g.class,
                    g.kind.name(),
                    b as f64 * width,
                    (b + 1) as f64 * width
                );
            }
        }
        s
    }

    /// `class,split,center_kind,median,count`, then warnings as `#` lines.
    pub fn medians_csv(&self) -> String {
        let mut s = String::from("class,split,center_kind,median,count\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                g.class,
                g.split.name(),
                g.kind.name(),
                g.median().expect("non-empty"),
                g.values.len()
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s
    }

    /// Raw samples: `class,split,center_kind,distance`.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("class,split,center_kind,distance\n");
        for g in &self.groups {
            for v in &g.values {
                let _ = writeln!(s, "{},{},{},{v}", g.class, g.split.name(), g.kind.name());
            }
        }
        s
    }
}
