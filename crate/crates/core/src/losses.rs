//! Training objectives.
//!
//! The intra-class distance loss sums, over labeled pixels, the distance
//! `-log softmax_K(s_i)[y_i]` between each pixel and its own class center.
//! With global classifier weights as centers this is exactly summed
//! cross-entropy; with per-scene adaptive centers it is the scene-level
//! variant. The inter-class loss sums `exp(-D)` over distinct center pairs,
//! which under the softmax-cosine distance is the off-diagonal mass of the
//! row-softmaxed cosine matrix.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::similarity::{self, AbsoluteScores, CenterDistance};
use crate::tensor::Tensor;

/// Denominator guard of the Dice loss.
pub const DICE_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the inter-class loss.
    pub alpha: f64,
    /// Weight of the mask loss.
    pub beta: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            aux: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("aux_weight", self.aux)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Scalar loss components of one scene (or a batch mean of them).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub intra: f64,
    pub inter: f64,
    pub dice: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(intra: f64, inter: f64, dice: f64, aux: f64, w: &LossWeights) -> Self {
        Self {
            intra,
            inter,
            dice,
            aux,
            total: total_loss(intra, inter, dice, aux, w),
        }
    }

    /// Componentwise mean, with `total` recomputed from the means.
    pub fn mean(items: &[LossBreakdown], w: &LossWeights) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(avg(|b| b.intra), avg(|b| b.inter), avg(|b| b.dice), avg(|b| b.aux), w)
    }
}

pub fn cd_loss(intra: f64, inter: f64, alpha: f64) -> f64 {
    intra + alpha * inter
}

/// `intra + α·inter + β·dice + w_aux·aux`.
pub fn total_loss(intra: f64, inter: f64, dice: f64, aux: f64, w: &LossWeights) -> f64 {
    cd_loss(intra, inter, w.alpha) + w.beta * dice + w.aux * aux
}

fn check_labels(scores: Var<'_>, labels: &LabelMap) -> Result<()> {
    let shape = scores.shape();
    if shape != [labels.classes(), labels.pixels()] {
        return Err(Error::contract(format!(
            "scores {shape:?} do not match {} classes × {} pixels",
            labels.classes(),
            labels.pixels()
        )));
    }
    if labels.labeled_count() == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok(())
}

/// `Σ_i -log softmax(s_i)[y_i]` over labeled pixels.
fn summed_nll<'g>(scores: Var<'g>, labels: &LabelMap) -> Result<Var<'g>> {
    check_labels(scores, labels)?;
    let g = scores.graph();
    let y = g.constant(labels.one_hot());
    Ok(scores.log_softmax(0)?.mul(y)?.sum()?.neg())
}

/// Cross-entropy averaged over labeled pixels.
pub fn ce_loss<'g>(scores: AbsoluteScores<'g>, labels: &LabelMap) -> Result<Var<'g>> {
    let n = labels.labeled_count();
    Ok(summed_nll(scores.var(), labels)?.scale(1.0 / n.max(1) as f64))
}

/// Summed intra-class distance for precomputed P-C scores.
pub fn intra_loss<'g>(scores: AbsoluteScores<'g>, labels: &LabelMap) -> Result<Var<'g>> {
    summed_nll(scores.var(), labels)
}

/// Intra-class distance to per-scene adaptive centers (`K × D`).
pub fn intra_loss_scene<'g>(features: Var<'g>, centers: Var<'g>, labels: &LabelMap) -> Result<Var<'g>> {
    intra_loss(similarity::pc_similarity(features, centers)?, labels)
}

/// Intra-class distance to the global classifier weights (`K × D`).
pub fn intra_loss_dataset<'g>(features: Var<'g>, weights: Var<'g>, labels: &LabelMap) -> Result<Var<'g>> {
    intra_loss(similarity::pc_similarity(features, weights)?, labels)
}

/// `Σ_p Σ_{q≠p} exp(-D(c_p, c_q))` over the rows of a `K × D` center set.
pub fn inter_loss<'g>(centers: Var<'g>, distance: CenterDistance) -> Result<Var<'g>> {
    let k = centers.shape()[0];
    let cos = similarity::cc_similarity(centers)?;
    let off_diagonal = centers
        .graph()
        .constant(Tensor::from_fn(&[k, k], |i| if i / k == i % k { 0.0 } else { 1.0 }));
    let affinity = match distance {
        // exp(-D) = softmax, taken through log-softmax.
        CenterDistance::SoftmaxCosine => cos.log_softmax(1)?.exp(),
        CenterDistance::RawCosine => cos,
    };
    affinity.mul(off_diagonal)?.sum()
}

pub fn inter_loss_scene<'g>(centers: Var<'g>, distance: CenterDistance) -> Result<Var<'g>> {
    inter_loss(centers, distance)
}

pub fn inter_loss_dataset<'g>(weights: Var<'g>, distance: CenterDistance) -> Result<Var<'g>> {
    inter_loss(weights, distance)
}

/// `1 - 2Σ m·y / (Σ‖m‖² + Σ‖y‖² + ε)` on an activated `K × N` mask.
/// Ignored pixels are zeroed out of the mask first.
pub fn dice_loss<'g>(mask: Var<'g>, labels: &LabelMap) -> Result<Var<'g>> {
    let shape = mask.shape();
    if shape != [labels.classes(), labels.pixels()] {
        return Err(Error::contract(format!(
            "mask {shape:?} does not match {} classes × {} pixels",
            labels.classes(),
            labels.pixels()
        )));
    }
    let g = mask.graph();
    let y = labels.one_hot();
    let y_sq: f64 = y.data().iter().map(|v| v * v).sum();
    let m = mask.mul(g.constant(labels.valid_mask()))?;
    let overlap = m.mul(g.constant(y))?.sum()?;
    let denom = m.mul(m)?.sum()?.add_scalar(y_sq + DICE_EPS);
    Ok(overlap.scale(2.0).div(denom)?.neg().add_scalar(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use std::f64::consts::E;

    fn labels(k: usize, idx: &[u32]) -> LabelMap {
        LabelMap::new(1, idx.len(), k, idx.to_vec()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let g = Graph::new();
        let s = AbsoluteScores(g.constant(Tensor::full(&[5, 3], 0.4)));
        let l = ce_loss(s, &labels(5, &[0, 4, 2])).unwrap().item().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let s = AbsoluteScores(g.constant(Tensor::new(&[2, 1], vec![500.0, 0.0]).unwrap()));
        assert!(ce_loss(s, &labels(2, &[0])).unwrap().item().unwrap() < 1e-12);

        let s = AbsoluteScores(g.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap()));
        let l = ce_loss(s, &labels(2, &[0])).unwrap().item().unwrap();
        assert!((l - (-(E / (E + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn empty_supervision() {
        let g = Graph::new();
        let s = AbsoluteScores(g.constant(Tensor::zeros(&[2, 2])));
        let l = labels(2, &[LabelMap::IGNORE, LabelMap::IGNORE]);
        assert!(matches!(ce_loss(s, &l), Err(Error::EmptySupervision)));
        assert!(matches!(intra_loss(s, &l), Err(Error::EmptySupervision)));
    }

    #[test]
    fn dice_examples() {
        let g = Graph::new();
        let l = labels(2, &[0, 1, 1, 0]);
        let n = 4.0;
        let perfect = dice_loss(g.constant(l.one_hot()), &l).unwrap().item().unwrap();
        assert!((perfect - DICE_EPS / (2.0 * n + DICE_EPS)).abs() < 1e-15);

        let disjoint = l.one_hot().map(|v| 1.0 - v);
        assert_eq!(dice_loss(g.constant(disjoint), &l).unwrap().item().unwrap(), 1.0);

        let half = dice_loss(g.constant(Tensor::full(&[2, 4], 0.5)), &l).unwrap().item().unwrap();
        assert!((half - (1.0 - n / (1.5 * n + DICE_EPS))).abs() < 1e-15);
        assert!((half - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn dice_ignores_unlabeled_columns() {
        let g = Graph::new();
        let l = labels(2, &[0, LabelMap::IGNORE]);
        let m = Tensor::new(&[2, 2], vec![1.0, 0.9, 0.0, 0.9]).unwrap();
        let d = dice_loss(g.constant(m), &l).unwrap().item().unwrap();
        assert!((d - DICE_EPS / (2.0 + DICE_EPS)).abs() < 1e-15);
    }

    #[test]
    fn intra_examples() {
        let g = Graph::new();
        let centers = g.constant(Tensor::eye(2));
        let f = g.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let l = intra_loss_scene(f, centers, &labels(2, &[0])).unwrap().item().unwrap();
        assert!((l - (-(E / (E + 1.0)).ln())).abs() < 1e-12);

        let one = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
        let f = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(intra_loss_scene(f, one, &labels(1, &[0, 0, 0])).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn intra_is_summed_ce() {
        let g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[3, 4], |i| ((i * 5) % 7) as f64 * 0.3 - 1.0));
        let c = g.constant(Tensor::from_fn(&[2, 3], |i| ((i * 3) % 4) as f64 * 0.2 - 0.3));
        let l = labels(2, &[0, 1, 1, 0]);
        let intra = intra_loss_scene(f, c, &l).unwrap().item().unwrap();
        let ce = ce_loss(similarity::pc_similarity(f, c).unwrap(), &l).unwrap().item().unwrap();
        assert!((intra - 4.0 * ce).abs() < 1e-12);
        let dataset = intra_loss_dataset(f, c, &l).unwrap().item().unwrap();
        assert_eq!(dataset, intra);
    }

    #[test]
    fn inter_examples() {
        let g = Graph::new();
        let one = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(inter_loss_scene(one, CenterDistance::SoftmaxCosine).unwrap().item().unwrap(), 0.0);

        let same = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap());
        let v = inter_loss_scene(same, CenterDistance::SoftmaxCosine).unwrap().item().unwrap();
        assert!((v - 2.0).abs() < 1e-9);

        let ortho = g.constant(Tensor::eye(2));
        let v = inter_loss_scene(ortho, CenterDistance::SoftmaxCosine).unwrap().item().unwrap();
        assert!((v - 2.0 / (E + 1.0)).abs() < 1e-9);

        let same4 = g.constant(Tensor::full(&[4, 3], 0.7));
        let v = inter_loss_dataset(same4, CenterDistance::SoftmaxCosine).unwrap().item().unwrap();
        assert!((v - 3.0).abs() < 1e-9);

        let raw = inter_loss(ortho, CenterDistance::RawCosine).unwrap().item().unwrap();
        assert_eq!(raw, 0.0);
    }

    #[test]
    fn cd_and_total_arithmetic() {
        assert_eq!(cd_loss(1.3, 5.0, 0.0), 1.3);
        assert_eq!(cd_loss(1.0, 2.0, 0.5), 2.0);
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.aux), (0.5, 1.0, 0.4));
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 2.0, 0.5, 1.0, &w) - 2.9).abs() < 1e-12);
        let b = LossBreakdown::new(1.0, 2.0, 0.5, 1.0, &w);
        assert!((b.total - (b.intra + w.alpha * b.inter + w.beta * b.dice + w.aux * b.aux)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            alpha: -0.1,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
