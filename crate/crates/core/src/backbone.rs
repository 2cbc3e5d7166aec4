//! Small convolutional feature extractor and the global-center classifier.
//!
//! The extractor is a stack of 3×3 convolutions with ReLU between them and a
//! single mean-pooling stage after the first layer. The last layer is
//! linear; its output is the `D × N` feature map every head consumes. The
//! layer before it is exposed as the auxiliary tap.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{leaf, uniform, Parameters};
use crate::similarity::AbsoluteScores;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of each 3×3 layer; the last one is `D`.
    pub widths: Vec<usize>,
    /// Downsampling factor of the pooling stage.
    pub stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32, 32],
            stride: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(
                "backbone needs at least two non-empty layers".into(),
            ));
        }
        if self.stride == 0 {
            return Err(Error::Config("backbone stride must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn aux_channels(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    /// Closed-form parameter count: `Σ cin·9·cout + cout`.
    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for &cout in &self.widths {
            total += cin * 9 * cout + cout;
            cin = cout;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Backbone {
    /// Fan-in scaled uniform kernels, zero biases.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let (mut kernels, mut biases) = (Vec::new(), Vec::new());
        for &cout in &config.widths {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            kernels.push(uniform(rng, &[cout, cin, 3, 3], bound));
            biases.push(Tensor::zeros(&[cout, 1, 1]));
            cin = cout;
        }
        Ok(Self {
            config,
            kernels,
            biases,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundBackbone<'g> {
        BoundBackbone {
            kernels: self.kernels.iter().map(|t| leaf(g, t, trainable)).collect(),
            biases: self.biases.iter().map(|t| leaf(g, t, trainable)).collect(),
            stride: self.config.stride,
        }
    }
}

impl Parameters for Backbone {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            out.push((format!("backbone.conv{i}.weight"), k));
            out.push((format!("backbone.conv{i}.bias"), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.kernels.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("backbone.conv{i}.weight"), k));
            out.push((format!("backbone.conv{i}.bias"), b));
        }
        out
    }
}

pub struct BoundBackbone<'g> {
    kernels: Vec<Var<'g>>,
    biases: Vec<Var<'g>>,
    stride: usize,
}

pub struct Features<'g> {
    /// `D × N` final features.
    pub features: Var<'g>,
    /// `C × N` features from the penultimate layer.
    pub aux: Var<'g>,
    pub height: usize,
    pub width: usize,
}

impl<'g> BoundBackbone<'g> {
    pub fn vars(&self) -> Vec<Var<'g>> {
        self.kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(&k, &b)| [k, b])
            .collect()
    }

    /// Runs the extractor on a `3 × H × W` image.
    pub fn extract(&self, image: Var<'g>) -> Result<Features<'g>> {
        let shape = image.shape();
        let &[_, h, w] = shape.as_slice() else {
            return Err(Error::contract(format!("image must be C×H×W, got {shape:?}")));
        };
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::contract(format!(
                "image {h}x{w} is not divisible by stride {}",
                self.stride
            )));
        }
        let last = self.kernels.len() - 1;
        let mut x = image;
        let mut aux = None;
        for (i, (&k, &b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            x = x.conv2d(k, 1, 1)?.add(b)?;
            if i < last {
                x = x.relu();
            }
            if i == 0 && self.stride > 1 {
                x = x.avg_pool(self.stride)?;
            }
            if i + 1 == last {
                aux = Some(x);
            }
        }
        let (fh, fw) = (h / self.stride, w / self.stride);
        let flat = |v: Var<'g>| {
            let c = v.shape()[0];
            v.reshape(&[c, fh * fw])
        };
        Ok(Features {
            features: flat(x)?,
            aux: flat(aux.expect("at least two layers"))?,
            height: fh,
            width: fw,
        })
    }
}

/// Linear classifier over pixel features: `s_ij = w_j · f_i + b_j`. Its
/// weight rows are the global class centers.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalHead {
    name: String,
    weight: Tensor,
    bias: Tensor,
    use_bias: bool,
}

impl GlobalHead {
    pub fn new(name: &str, classes: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / channels as f64).sqrt();
        Self {
            name: name.to_string(),
            weight: uniform(rng, &[classes, channels], bound),
            bias: Tensor::zeros(&[classes, 1]),
            use_bias: true,
        }
    }

    pub fn from_weights(name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let [k, _] = weight.dims2()?;
        let use_bias = bias.is_some();
        let bias = bias.unwrap_or_else(|| Tensor::zeros(&[k, 1]));
        if bias.shape() != [k, 1] {
            return Err(Error::contract(format!("bias must be {k}x1")));
        }
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            use_bias,
        })
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    /// Global class centers `W^c` (`K × D`).
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundGlobalHead<'g> {
        BoundGlobalHead {
            weight: leaf(g, &self.weight, trainable),
            bias: leaf(g, &self.bias, trainable),
            use_bias: self.use_bias,
        }
    }

    /// Detached scores for a `D × N` feature tensor.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let f = g.constant(features.clone());
        Ok(self.bind(&g, false).forward(f)?.var().value())
    }
}

impl Parameters for GlobalHead {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

pub struct BoundGlobalHead<'g> {
    weight: Var<'g>,
    bias: Var<'g>,
    use_bias: bool,
}

impl<'g> BoundGlobalHead<'g> {
    pub fn vars(&self) -> Vec<Var<'g>> {
        vec![self.weight, self.bias]
    }

    pub fn weight(&self) -> Var<'g> {
        self.weight
    }

    pub fn forward(&self, features: Var<'g>) -> Result<AbsoluteScores<'g>> {
        let s = crate::similarity::pc_similarity(features, self.weight)?;
        if self.use_bias {
            Ok(AbsoluteScores(s.var().add(self.bias)?))
        } else {
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_and_param_count() {
        let cfg = BackboneConfig::default();
        let bb = Backbone::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(bb.param_count(), cfg.param_count());
        assert_eq!(cfg.param_count(), (3 * 9 * 16 + 16) + (16 * 9 * 32 + 32) + 2 * (32 * 9 * 32 + 32));
        let g = Graph::new();
        let img = g.constant(Tensor::full(&[3, 16, 8], 0.3));
        let out = bb.bind(&g, false).extract(img).unwrap();
        assert_eq!(out.features.shape(), vec![32, 4 * 2]);
        assert_eq!(out.aux.shape(), vec![32, 8]);
    }

    #[test]
    fn indivisible_image_rejected() {
        let bb = Backbone::new(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = Graph::new();
        let img = g.constant(Tensor::zeros(&[3, 10, 8]));
        assert!(matches!(bb.bind(&g, false).extract(img), Err(Error::Contract(_))));
    }

    #[test]
    fn extraction_is_deterministic() {
        let make = || Backbone::new(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let image = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 17) as f64 / 17.0);
        let run = |bb: &Backbone| {
            let g = Graph::new();
            let x = g.constant(image.clone());
            bb.bind(&g, false).extract(x).unwrap().features.value()
        };
        assert_eq!(run(&make()), run(&make()));
    }

    #[test]
    fn head_hand_example() {
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, -1.0]]).unwrap();
        let head = GlobalHead::from_weights("h", w, Some(Tensor::new(&[2, 1], vec![0.5, 0.0]).unwrap())).unwrap();
        let f = Tensor::from_rows(&[&[1.0, 0.0], &[3.0, 1.0]]).unwrap();
        // pixel 0 = (1,3), pixel 1 = (0,1)
        let s = head.scores(&f).unwrap();
        assert_eq!(s.data(), &[7.5, 2.5, -3.0, -1.0]);
        let s = head.clone().with_bias(false).scores(&f).unwrap();
        assert_eq!(s.data(), &[7.0, 2.0, -3.0, -1.0]);
    }
}
