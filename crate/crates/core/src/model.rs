//! The full network: backbone, global classifier, auxiliary classifier and
//! an optional CCS head, plus detached inference helpers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, BoundBackbone, BoundGlobalHead, Features, GlobalHead};
use crate::error::{Error, Result};
use crate::head::{BoundCcsHead, CcsHead, CcsVars, MaskSource};
use crate::params::Parameters;
use crate::similarity::AbsoluteScores;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub backbone: BackboneConfig,
    /// Instantiate the CCS head.
    pub ccs: bool,
    pub normalize_mask: bool,
    /// Initial mask activation.
    pub mask_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            backbone: BackboneConfig::default(),
            ccs: true,
            normalize_mask: true,
            mask_prior: 0.5,
        }
    }
}

/// Which centers produce the segmentation scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Centers {
    Global,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub backbone: Backbone,
    /// Bias-free classifier whose rows are the global class centers.
    pub global: GlobalHead,
    pub aux: GlobalHead,
    pub ccs: Option<CcsHead>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let (k, d) = (config.classes, config.backbone.out_channels());
        let global = GlobalHead::new("global", k, d, rng).with_bias(false);
        let aux = GlobalHead::new("aux", k, config.backbone.aux_channels(), rng);
        let ccs = match config.ccs {
            true => Some(
                CcsHead::new(k, d, rng)
                    .with_mask_normalization(config.normalize_mask)
                    .with_mask_prior(config.mask_prior)?,
            ),
            false => None,
        };
        Ok(Self {
            config,
            backbone,
            global,
            aux,
            ccs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.stride
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundModel<'g> {
        BoundModel {
            backbone: self.backbone.bind(g, trainable),
            global: self.global.bind(g, trainable),
            aux: self.aux.bind(g, trainable),
            ccs: self.ccs.as_ref().map(|h| h.bind(g, trainable)),
        }
    }

    /// Detached `D × N` features of a `3 × H × W` image and the feature grid.
    pub fn features(&self, image: &Tensor) -> Result<(Tensor, usize, usize)> {
        let g = Graph::new();
        let f = self.backbone.bind(&g, false).extract(g.constant(image.clone()))?;
        Ok((f.features.value(), f.height, f.width))
    }

    /// Class probabilities (`K × N`) on the feature grid.
    pub fn probabilities(&self, image: &Tensor, centers: Centers, mask: MaskSource<'_>) -> Result<(Tensor, usize, usize)> {
        let g = Graph::new();
        let out = self.bind(&g, false).forward(g.constant(image.clone()), mask, false)?;
        let scores = out.scores(centers)?;
        Ok((scores.var().softmax(0)?.value(), out.features.height, out.features.width))
    }
}

impl Parameters for Model {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.params();
        out.extend(self.global.params());
        out.extend(self.aux.params());
        if let Some(h) = &self.ccs {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.params_mut();
        out.extend(self.global.params_mut());
        out.extend(self.aux.params_mut());
        if let Some(h) = &mut self.ccs {
            out.extend(h.params_mut());
        }
        out
    }
}

pub struct BoundModel<'g> {
    pub backbone: BoundBackbone<'g>,
    pub global: BoundGlobalHead<'g>,
    pub aux: BoundGlobalHead<'g>,
    pub ccs: Option<BoundCcsHead<'g>>,
}

pub struct ModelVars<'g> {
    pub features: Features<'g>,
    pub global: AbsoluteScores<'g>,
    pub aux: AbsoluteScores<'g>,
    pub ccs: Option<CcsVars<'g>>,
}

impl<'g> ModelVars<'g> {
    pub fn scores(&self, centers: Centers) -> Result<AbsoluteScores<'g>> {
        match centers {
            Centers::Global => Ok(self.global),
            Centers::Adaptive => self
                .ccs
                .as_ref()
                .map(|c| c.scores)
                .ok_or_else(|| Error::Config("adaptive centers need the CCS head".into())),
        }
    }
}

impl<'g> BoundModel<'g> {
    /// Leaves in [`Parameters`] order.
    pub fn vars(&self) -> Vec<Var<'g>> {
        let mut out = self.backbone.vars();
        out.extend(self.global.vars());
        out.extend(self.aux.vars());
        if let Some(h) = &self.ccs {
            out.extend(h.vars());
        }
        out
    }

    /// With `detach_global`, the global classifier sees features cut from the
    /// graph, so its loss trains only its own weights.
    pub fn forward(&self, image: Var<'g>, mask: MaskSource<'_>, detach_global: bool) -> Result<ModelVars<'g>> {
        let features = self.backbone.extract(image)?;
        let f = features.features;
        let global = self.global.forward(if detach_global { f.detach() } else { f })?;
        let aux = self.aux.forward(features.aux)?;
        let ccs = match &self.ccs {
            Some(h) => Some(h.forward(f, mask, (features.height, features.width))?),
            None => None,
        };
        Ok(ModelVars {
            features,
            global,
            aux,
            ccs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vars_follow_param_order() {
        let model = Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Graph::new();
        let vars = model.bind(&g, true).vars();
        let params = model.params();
        assert_eq!(vars.len(), params.len());
        for (v, (_, t)) in vars.iter().zip(&params) {
            assert_eq!(&v.value(), *t);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 5) as f64 / 5.0);
        for centers in [Centers::Global, Centers::Adaptive] {
            let (p, h, w) = model.probabilities(&img, centers, MaskSource::Predicted).unwrap();
            assert_eq!((p.shape(), h, w), (&[6, 4][..], 2, 2));
            for i in 0..4 {
                let s: f64 = (0..6).map(|k| p.at(&[k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_without_head_is_rejected() {
        let cfg = ModelConfig {
            ccs: false,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::zeros(&[3, 4, 4]);
        assert!(model.probabilities(&img, Centers::Adaptive, MaskSource::Predicted).is_err());
    }
}
