//! The class-center similarity head.
//!
//! For each scene the head predicts a `K × N` soft mask, pools pixel
//! features under each mask row into a coarse class center, refines the
//! centers with a shared affine channel map, and classifies every pixel by
//! its inner product with the resulting adaptive centers:
//!
//! ```text
//! features ─► mask head ─► sigmoid ─► row-normalise ─┐
//!     │                                               ▼
//!     └──────────────────────────────────────► M̂ ⊗ Fᵀ ─► affine ─► C
//!                                                                  │
//!                         softmax_K (C ⊗ F) ◄──────────────────────┘
//! ```
//!
//! [`MaskSource::GroundTruth`] swaps the predicted mask for a one-hot mask
//! built from the labels, which bounds how well the head could do with a
//! perfect mask.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::params::{leaf, uniform, Parameters};
use crate::similarity::{self, AbsoluteScores, RelativeScores, SimilarityMap};
use crate::tensor::Tensor;

/// Added to each mask row sum before normalising.
pub const EPS_AGG: f64 = 1e-6;

/// Scale of the noise added to the identity when initialising the affine
/// center refinement.
const ADAPT_INIT_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    logits: Tensor,
    activated: Tensor,
}

impl MaskMap {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        logits.dims2()?;
        let g = Graph::new();
        let activated = g.constant(logits.clone()).sigmoid().value();
        Ok(Self { logits, activated })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// `K × N`, every entry in `[0, 1]`.
    pub fn activated(&self) -> &Tensor {
        &self.activated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterProvenance {
    Global,
    Adaptive,
    GtDerived,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterSet {
    values: Tensor,
    provenance: CenterProvenance,
}

impl CenterSet {
    pub fn new(values: Tensor, provenance: CenterProvenance) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values, provenance })
    }

    /// `K × D`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn provenance(&self) -> CenterProvenance {
        self.provenance
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct CcsOutput {
    pub prediction: SimilarityMap,
    pub absolute: SimilarityMap,
    pub centers: CenterSet,
    pub mask: MaskMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskSource<'a> {
    Predicted,
    /// One-hot mask resampled from labels; only meaningful at evaluation.
    GroundTruth(&'a LabelMap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcsHead {
    mask_weight: Tensor,
    mask_bias: Tensor,
    adapt_weight: Tensor,
    adapt_bias: Tensor,
    normalize_mask: bool,
}

impl CcsHead {
    pub fn new(classes: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / channels as f64).sqrt();
        let noise = uniform(rng, &[channels, channels], ADAPT_INIT_NOISE);
        let adapt_weight = Tensor::new(
            &[channels, channels],
            Tensor::eye(channels)
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .expect("square");
        Self {
            mask_weight: uniform(rng, &[classes, channels], bound),
            mask_bias: Tensor::zeros(&[classes, 1]),
            adapt_weight,
            adapt_bias: Tensor::zeros(&[1, channels]),
            normalize_mask: true,
        }
    }

    /// Head with explicit mask and refinement parameters. `adapt_weight` is
    /// applied on the right: `C = coarse · A + b`.
    pub fn from_parts(
        mask_weight: Tensor,
        mask_bias: Tensor,
        adapt_weight: Tensor,
        adapt_bias: Tensor,
    ) -> Result<Self> {
        let [k, d] = mask_weight.dims2()?;
        if mask_bias.shape() != [k, 1]
            || adapt_weight.shape() != [d, d]
            || adapt_bias.shape() != [1, d]
        {
            return Err(Error::contract("ccs head parameter shapes disagree"));
        }
        Ok(Self {
            mask_weight,
            mask_bias,
            adapt_weight,
            adapt_bias,
            normalize_mask: true,
        })
    }

    /// Sets every mask bias so the initial activation is `prior`.
    pub fn with_mask_prior(mut self, prior: f64) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::contract("mask prior must lie in (0, 1)"));
        }
        let logit = (prior / (1.0 - prior)).ln();
        self.mask_bias = Tensor::full(self.mask_bias.shape(), logit);
        Ok(self)
    }

    pub fn with_mask_normalization(mut self, on: bool) -> Self {
        self.normalize_mask = on;
        self
    }

    pub fn classes(&self) -> usize {
        self.mask_weight.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.mask_weight.shape()[1]
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundCcsHead<'g> {
        BoundCcsHead {
            mask_weight: leaf(g, &self.mask_weight, trainable),
            mask_bias: leaf(g, &self.mask_bias, trainable),
            adapt_weight: leaf(g, &self.adapt_weight, trainable),
            adapt_bias: leaf(g, &self.adapt_bias, trainable),
            normalize_mask: self.normalize_mask,
        }
    }

    pub fn mask_head(&self, features: &Tensor) -> Result<MaskMap> {
        let g = Graph::new();
        let logits = self.bind(&g, false).mask_logits(g.constant(features.clone()))?;
        MaskMap::from_logits(logits.value())
    }

    pub fn adapt_centers(&self, coarse: &Tensor) -> Result<CenterSet> {
        let g = Graph::new();
        let c = self.bind(&g, false).adapt(g.constant(coarse.clone()))?;
        CenterSet::new(c.value(), CenterProvenance::Adaptive)
    }

    /// Detached forward pass over a `D × N` feature map on an
    /// `height × width` grid.
    pub fn forward(&self, features: &Tensor, mask: MaskSource<'_>, grid: (usize, usize)) -> Result<CcsOutput> {
        let g = Graph::new();
        let out = self
            .bind(&g, false)
            .forward(g.constant(features.clone()), mask, grid)?;
        let provenance = match mask {
            MaskSource::Predicted => CenterProvenance::Adaptive,
            MaskSource::GroundTruth(_) => CenterProvenance::GtDerived,
        };
        Ok(CcsOutput {
            prediction: out.prediction.to_map()?,
            absolute: out.scores.to_map()?,
            centers: CenterSet::new(out.centers.value(), provenance)?,
            mask: MaskMap {
                logits: out.mask_logits.value(),
                activated: out.mask.value(),
            },
        })
    }
}

impl Parameters for CcsHead {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("ccs.mask.weight".into(), &self.mask_weight),
            ("ccs.mask.bias".into(), &self.mask_bias),
            ("ccs.adapt.weight".into(), &self.adapt_weight),
            ("ccs.adapt.bias".into(), &self.adapt_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("ccs.mask.weight".into(), &mut self.mask_weight),
            ("ccs.mask.bias".into(), &mut self.mask_bias),
            ("ccs.adapt.weight".into(), &mut self.adapt_weight),
            ("ccs.adapt.bias".into(), &mut self.adapt_bias),
        ]
    }
}

pub struct BoundCcsHead<'g> {
    mask_weight: Var<'g>,
    mask_bias: Var<'g>,
    adapt_weight: Var<'g>,
    adapt_bias: Var<'g>,
    normalize_mask: bool,
}

/// Graph-level outputs of [`BoundCcsHead::forward`].
pub struct CcsVars<'g> {
    pub mask_logits: Var<'g>,
    /// Activated mask actually used for pooling.
    pub mask: Var<'g>,
    pub coarse: Var<'g>,
    pub centers: Var<'g>,
    pub scores: AbsoluteScores<'g>,
    pub prediction: RelativeScores<'g>,
}

impl<'g> BoundCcsHead<'g> {
    /// Head over caller-owned variables, in [`BoundCcsHead::vars`] order.
    pub fn from_vars(vars: [Var<'g>; 4], normalize_mask: bool) -> Result<Self> {
        let [mask_weight, mask_bias, adapt_weight, adapt_bias] = vars;
        let (ms, ds) = (mask_weight.shape(), adapt_weight.shape());
        if ms.len() != 2
            || mask_bias.shape() != [ms[0], 1]
            || ds != [ms[1], ms[1]]
            || adapt_bias.shape() != [1, ms[1]]
        {
            return Err(Error::contract("ccs head parameter shapes disagree"));
        }
        Ok(Self {
            mask_weight,
            mask_bias,
            adapt_weight,
            adapt_bias,
            normalize_mask,
        })
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        vec![self.mask_weight, self.mask_bias, self.adapt_weight, self.adapt_bias]
    }

    /// `K × N` logits of a learned 1×1 map `D → K`.
    pub fn mask_logits(&self, features: Var<'g>) -> Result<Var<'g>> {
        self.mask_weight.matmul(features)?.add(self.mask_bias)
    }

    /// Shared affine refinement of coarse centers.
    pub fn adapt(&self, coarse: Var<'g>) -> Result<Var<'g>> {
        coarse.matmul(self.adapt_weight)?.add(self.adapt_bias)
    }

    pub fn forward(
        &self,
        features: Var<'g>,
        mask: MaskSource<'_>,
        grid: (usize, usize),
    ) -> Result<CcsVars<'g>> {
        let mask_logits = self.mask_logits(features)?;
        let activated = match mask {
            MaskSource::Predicted => mask_logits.sigmoid(),
            MaskSource::GroundTruth(labels) => {
                let gt = gt_mask(labels, grid.0, grid.1)?;
                if gt.activated.shape() != mask_logits.shape().as_slice() {
                    return Err(Error::contract("ground-truth mask does not match the feature grid"));
                }
                features.graph().constant(gt.activated)
            }
        };
        let coarse = aggregate_coarse_centers(activated, features, self.normalize_mask)?;
        let centers = self.adapt(coarse)?;
        let scores = similarity::pc_similarity(features, centers)?;
        let prediction = scores.relative()?;
        Ok(CcsVars {
            mask_logits,
            mask: activated,
            coarse,
            centers,
            scores,
            prediction,
        })
    }
}

/// `K × D` coarse centers `M̂ ⊗ Fᵀ`. With `normalize`, each mask row is
/// divided by its sum (plus [`EPS_AGG`]) so every center is a weighted mean
/// of pixel features.
pub fn aggregate_coarse_centers<'g>(mask: Var<'g>, features: Var<'g>, normalize: bool) -> Result<Var<'g>> {
    let (ms, fs) = (mask.shape(), features.shape());
    if ms.len() != 2 || fs.len() != 2 || ms[1] != fs[1] {
        return Err(Error::contract(format!(
            "mask {ms:?} and features {fs:?} disagree on pixel count"
        )));
    }
    let weights = if normalize {
        mask.div(mask.sum_axis(1)?.add_scalar(EPS_AGG))?
    } else {
        mask
    };
    weights.matmul(features.t()?)
}

/// One-hot mask from labels, nearest-resampled to the feature grid. Ignored
/// pixels get an all-zero column.
pub fn gt_mask(labels: &LabelMap, height: usize, width: usize) -> Result<MaskMap> {
    let small = labels.resize_nearest(height, width)?;
    let activated = small.one_hot();
    let logits = activated.map(|v| if v > 0.5 { f64::INFINITY } else { f64::NEG_INFINITY });
    Ok(MaskMap { logits, activated })
}

/// Per-pixel argmax over classes, lowest class index on ties.
pub fn predict(map: &SimilarityMap, height: usize, width: usize) -> Result<LabelMap> {
    let [k, n] = map.values().dims2()?;
    if n != height * width {
        return Err(Error::contract(format!("{n} pixels do not fill {height}x{width}")));
    }
    let v = map.values().data();
    let indices = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..k {
                if v[j * n + i] > v[best * n + i] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(height, width, k, indices)
}
