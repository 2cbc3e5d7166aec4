//! Central finite-difference checks for the autodiff graph.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::backbone::BackboneConfig;
use crate::dataset::Scene;
use crate::error::Result;
use crate::head::{BoundCcsHead, MaskSource};
use crate::labels::LabelMap;
use crate::losses::{self, LossWeights};
use crate::params::Parameters;
use crate::seeds;
use crate::similarity::{AbsoluteScores, CenterDistance};
use crate::tensor::Tensor;
use crate::trainer::{scene_pass, TrainConfig};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error used throughout: `|ad - fd| / max(1, |fd|)`.
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares autodiff and central-difference gradients of a scalar function
/// of one tensor. Returns the largest relative error over all elements.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_all(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps)
}

/// Like [`grad_check`] but perturbs every element of every input.
pub fn grad_check_all<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars)?.item()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..probe[t].numel() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Acceptance tolerance on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Seeds per case in [`run_suite`].
pub const SUITE_SEEDS: u64 = 10;

/// Worst relative error of one suite case over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type Case = fn(u64) -> Result<f64>;

const CASES: [(&str, Case); 9] = [
    ("ce", case_ce),
    ("dice", case_dice),
    ("intra-dataset", case_intra_dataset),
    ("intra-scene", case_intra_scene),
    ("inter-dataset", case_inter_dataset),
    ("inter-scene", case_inter_scene),
    ("total", case_total),
    ("head-through-loss", case_head),
    ("model-end-to-end", case_model),
];

/// Names of the suite cases in run order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Every loss and the full head-through-loss composition on `seeds`
/// random instances each, at [`DEFAULT_EPS`].
pub fn run_suite(seeds: u64) -> Result<Vec<CaseReport>> {
    CASES
        .iter()
        .map(|&(name, case)| {
            let mut max_error = 0.0f64;
            for seed in 0..seeds {
                max_error = max_error.max(case(seed)?);
            }
            Ok(CaseReport { name, max_error })
        })
        .collect()
}

const K: usize = 4;
const D: usize = 3;
const N: usize = 6;

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Random labels over `classes` with every class present and the last
/// pixel ignored, so ignore handling is exercised too.
fn labels(rng: &mut impl Rng, classes: usize, pixels: usize) -> LabelMap {
    let mut idx: Vec<u32> = (0..pixels).map(|i| if i < classes { i as u32 } else { rng.gen_range(0..classes as u32) }).collect();
    for i in (1..classes.min(pixels)).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    if pixels > classes {
        idx[pixels - 1] = LabelMap::IGNORE;
    }
    LabelMap::new(1, pixels, classes, idx).expect("valid labels")
}

fn rng(seed: u64, case: u64) -> rand_chacha::ChaCha8Rng {
    seeds::substream(seed, "gradcheck", case)
}

fn case_ce(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 0);
    let (x, y) = (normal(&mut r, &[K, N]), labels(&mut r, K, N));
    grad_check(|_, s| losses::ce_loss(AbsoluteScores(s), &y), &x, DEFAULT_EPS)
}

fn case_dice(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 1);
    let inputs = [normal(&mut r, &[D, N]), normal(&mut r, &[K, D]), normal(&mut r, &[K, 1])];
    let y = labels(&mut r, K, N);
    grad_check_all(
        |_, v| losses::dice_loss(v[1].matmul(v[0])?.add(v[2])?.sigmoid(), &y),
        &inputs,
        DEFAULT_EPS,
    )
}

fn case_intra_dataset(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 2);
    let inputs = [normal(&mut r, &[D, N]), normal(&mut r, &[K, D])];
    let y = labels(&mut r, K, N);
    grad_check_all(|_, v| losses::intra_loss_dataset(v[0], v[1], &y), &inputs, DEFAULT_EPS)
}

fn case_intra_scene(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 3);
    let inputs = [normal(&mut r, &[D, N]), normal(&mut r, &[K, D])];
    let y = labels(&mut r, K, N);
    grad_check_all(|_, v| losses::intra_loss_scene(v[0], v[1], &y), &inputs, DEFAULT_EPS)
}

fn inter_case(seed: u64, case: u64, f: for<'g> fn(Var<'g>, CenterDistance) -> Result<Var<'g>>) -> Result<f64> {
    let x = normal(&mut rng(seed, case), &[K, D]);
    let mut worst = 0.0f64;
    for d in [CenterDistance::SoftmaxCosine, CenterDistance::RawCosine] {
        worst = worst.max(grad_check(|_, c| f(c, d), &x, DEFAULT_EPS)?);
    }
    Ok(worst)
}

fn case_inter_dataset(seed: u64) -> Result<f64> {
    inter_case(seed, 4, losses::inter_loss_dataset)
}

fn case_inter_scene(seed: u64) -> Result<f64> {
    inter_case(seed, 5, losses::inter_loss_scene)
}

fn weighted<'g>(intra: Var<'g>, inter: Var<'g>, dice: Var<'g>, aux: Var<'g>) -> Result<Var<'g>> {
    let w = LossWeights::default();
    intra.add(inter.scale(w.alpha))?.add(dice.scale(w.beta))?.add(aux.scale(w.aux))
}

/// Weighted sum of all four terms over free features, centers, mask logits
/// and auxiliary scores.
fn case_total(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 6);
    let inputs = [
        normal(&mut r, &[D, N]),
        normal(&mut r, &[K, D]),
        normal(&mut r, &[K, N]),
        normal(&mut r, &[K, N]),
    ];
    let y = labels(&mut r, K, N);
    grad_check_all(
        |_, v| {
            weighted(
                losses::intra_loss_scene(v[0], v[1], &y)?,
                losses::inter_loss_scene(v[1], CenterDistance::SoftmaxCosine)?,
                losses::dice_loss(v[2].sigmoid(), &y)?,
                losses::ce_loss(AbsoluteScores(v[3]), &y)?,
            )
        },
        &inputs,
        DEFAULT_EPS,
    )
}

/// Features and every head parameter through mask, aggregation, refinement
/// and the weighted loss.
fn case_head(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 7);
    let inputs = [
        normal(&mut r, &[D, N]),
        normal(&mut r, &[K, D]),
        normal(&mut r, &[K, 1]),
        Tensor::from_fn(&[D, D], |i| f64::from(u8::from(i % (D + 1) == 0)) + 0.1 * r.sample::<f64, _>(StandardNormal)),
        normal(&mut r, &[1, D]),
        normal(&mut r, &[K, N]),
    ];
    let y = labels(&mut r, K, N);
    grad_check_all(
        |_, v| {
            let head = BoundCcsHead::from_vars([v[1], v[2], v[3], v[4]], true)?;
            let out = head.forward(v[0], MaskSource::Predicted, (1, N))?;
            weighted(
                losses::intra_loss(out.scores, &y)?,
                losses::inter_loss_scene(out.centers, CenterDistance::SoftmaxCosine)?,
                losses::dice_loss(out.mask, &y)?,
                losses::ce_loss(AbsoluteScores(v[5]), &y)?,
            )
        },
        &inputs,
        DEFAULT_EPS,
    )
}

/// The training objective of a small full model on a 2-class 4×4 scene,
/// differentiated by the trainer and compared against perturbed parameters.
/// The probe on detached features is a separate objective for the global
/// weights only, so those are checked against the full objective and every
/// other parameter against the logged total.
fn case_model(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 8);
    let mut config = TrainConfig::preset("ccsnet")?;
    config.classes = 2;
    config.backbone = BackboneConfig {
        in_channels: 3,
        widths: vec![4, 4],
        stride: 2,
    };
    config.seed = seed;
    let mut model = crate::model::Model::new(config.model_config(), &mut r)?;
    let image = Tensor::from_fn(&[3, 4, 4], |_| r.gen::<f64>());
    let scene = Scene::new(image, LabelMap::new(4, 4, 2, (0..16).map(|i| u32::from(i % 4 >= 2)).collect())?)?;
    let pass = scene_pass(&model, &config, &scene)?;

    let mut worst = 0.0f64;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.iter().enumerate() {
        let probe_only = name.starts_with("global.");
        for i in 0..pass.grads[p].numel() {
            let orig = model.params()[p].1.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                model.params_mut()[p].1.data_mut()[i] = x;
                let pass = scene_pass(&model, &config, &scene)?;
                Ok(if probe_only { pass.objective } else { pass.losses.total })
            };
            let (plus, minus) = (eval(orig + DEFAULT_EPS)?, eval(orig - DEFAULT_EPS)?);
            model.params_mut()[p].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
            worst = worst.max(relative_error(pass.grads[p].data()[i], numeric));
        }
    }
    Ok(worst)
}
