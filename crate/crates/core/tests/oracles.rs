//! Library results against independent brute-force reimplementations.

use ccs_core::autodiff::Graph;
use ccs_core::dataset::GeneratorConfig;
use ccs_core::head::{aggregate_coarse_centers, CcsHead, MaskSource, EPS_AGG};
use ccs_core::labels::LabelMap;
use ccs_core::losses::{inter_loss, intra_loss_dataset};
use ccs_core::metrics::ConfusionMatrix;
use ccs_core::model::{Model, ModelConfig};
use ccs_core::similarity::{pc_similarity_map, CenterDistance, EPS_NORM};
use ccs_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn random_labels(rng: &mut impl Rng, k: usize, n: usize) -> LabelMap {
    LabelMap::new(1, n, k, (0..n).map(|_| rng.gen_range(0..k as u32)).collect()).unwrap()
}

/// `(r, c)` of a row-major `rows × cols` slice.
fn at(v: &[f64], cols: usize, r: usize, c: usize) -> f64 {
    v[r * cols + c]
}

#[test]
fn pc_similarity_matches_explicit_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..25 {
        let (k, d, n) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..9));
        let (f, c) = (random(&mut rng, &[d, n]), random(&mut rng, &[k, d]));
        let s = pc_similarity_map(&f, &c).unwrap();
        for q in 0..k {
            for i in 0..n {
                let mut expect = 0.0;
                for ch in 0..d {
                    expect += at(c.data(), d, q, ch) * at(f.data(), n, ch, i);
                }
                assert!((s.values().at(&[q, i]) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn aggregation_matches_weighted_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..25 {
        let (k, d, n) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..10));
        let f = random(&mut rng, &[d, n]);
        let m = Tensor::from_fn(&[k, n], |_| rng.gen::<f64>());
        for normalize in [false, true] {
            let g = Graph::new();
            let c = aggregate_coarse_centers(g.constant(m.clone()), g.constant(f.clone()), normalize)
                .unwrap()
                .value();
            for q in 0..k {
                let mass: f64 = m.row(q).iter().sum();
                let denom = if normalize { mass + EPS_AGG } else { 1.0 };
                for ch in 0..d {
                    let sum: f64 = (0..n).map(|i| at(m.data(), n, q, i) * at(f.data(), n, ch, i)).sum();
                    assert!((c.at(&[q, ch]) - sum / denom).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn one_hot_mask_with_identity_refinement_gives_class_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, d, h, w) = (3, 4, 3, 4);
    let n = h * w;
    let f = random(&mut rng, &[d, n]);
    let labels = LabelMap::new(h, w, k, (0..n as u32).map(|i| i % k as u32).collect()).unwrap();
    let head = CcsHead::from_parts(
        random(&mut rng, &[k, d]),
        Tensor::zeros(&[k, 1]),
        Tensor::eye(d),
        Tensor::zeros(&[1, d]),
    )
    .unwrap();
    let out = head.forward(&f, MaskSource::GroundTruth(&labels), (h, w)).unwrap();
    for q in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| labels.class_at(i) == Some(q)).collect();
        for ch in 0..d {
            let sum: f64 = members.iter().map(|&i| at(f.data(), n, ch, i)).sum();
            let got = out.centers.values().at(&[q, ch]);
            assert!((got - sum / (members.len() as f64 + EPS_AGG)).abs() < 1e-12);
            let mean = sum / members.len() as f64;
            assert!((got - mean).abs() <= 1e-6 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn dataset_intra_loss_is_summed_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (k, d, n) = (rng.gen_range(2..6), rng.gen_range(1..6), rng.gen_range(1..12));
        let (f, wc) = (random(&mut rng, &[d, n]), random(&mut rng, &[k, d]));
        let labels = random_labels(&mut rng, k, n);
        let g = Graph::new();
        let got = intra_loss_dataset(g.constant(f.clone()), g.constant(wc.clone()), &labels)
            .unwrap()
            .item()
            .unwrap();
        let mut expect = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..k)
                .map(|q| (0..d).map(|ch| at(wc.data(), d, q, ch) * at(f.data(), n, ch, i)).sum())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
            expect += lse - logits[labels.class_at(i).unwrap()];
        }
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }
}

/// Cosine here is the absolute one, `|a·b| / (‖a‖‖b‖ + ε)`.
fn off_diagonal_softmax_mass(c: &Tensor) -> f64 {
    let [k, d] = [c.shape()[0], c.shape()[1]];
    let norm = |q: usize| c.row(q).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut total = 0.0;
    for a in 0..k {
        let cos: Vec<f64> = (0..k)
            .map(|b| {
                let dot: f64 = (0..d).map(|ch| c.row(a)[ch] * c.row(b)[ch]).sum();
                dot.abs() / (norm(a) * norm(b) + EPS_NORM)
            })
            .collect();
        let z: f64 = cos.iter().map(|v| v.exp()).sum();
        total += (0..k).filter(|&b| b != a).map(|b| cos[b].exp() / z).sum::<f64>();
    }
    total
}

#[test]
fn inter_loss_is_off_diagonal_softmax_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..25 {
        let (k, d) = (rng.gen_range(2..7), rng.gen_range(2..6));
        let c = random(&mut rng, &[k, d]);
        let g = Graph::new();
        let got = inter_loss(g.constant(c.clone()), CenterDistance::SoftmaxCosine).unwrap().item().unwrap();
        assert!((got - off_diagonal_softmax_mass(&c)).abs() < 1e-12);
    }
}

#[test]
fn inter_loss_hand_values() {
    let g = Graph::new();
    let same = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap());
    assert!((inter_loss(same, CenterDistance::SoftmaxCosine).unwrap().item().unwrap() - 2.0).abs() < 1e-9);
    let ortho = g.constant(Tensor::eye(2));
    let expect = 2.0 / (std::f64::consts::E + 1.0);
    assert!((inter_loss(ortho, CenterDistance::SoftmaxCosine).unwrap().item().unwrap() - expect).abs() < 1e-9);
}

#[test]
fn confusion_and_miou_match_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (k, h, w) = (rng.gen_range(2..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let n = h * w;
        let gt_idx: Vec<u32> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { LabelMap::IGNORE } else { rng.gen_range(0..k as u32) })
            .collect();
        if gt_idx.iter().all(|&v| v == LabelMap::IGNORE) {
            continue;
        }
        let pred_idx: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
        let gt = LabelMap::new(h, w, k, gt_idx.clone()).unwrap();
        let pred = LabelMap::new(h, w, k, pred_idx.clone()).unwrap();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &gt).unwrap();

        let pairs: Vec<(usize, usize)> = gt_idx
            .iter()
            .zip(&pred_idx)
            .filter(|(g, _)| **g != LabelMap::IGNORE)
            .map(|(&g, &p)| (g as usize, p as usize))
            .collect();
        for a in 0..k {
            for b in 0..k {
                assert_eq!(cm.get(a, b), pairs.iter().filter(|&&p| p == (a, b)).count() as u64);
            }
        }
        let mut ious = Vec::new();
        for c in 0..k {
            let tp = pairs.iter().filter(|&&(g, p)| g == c && p == c).count();
            let in_gt = pairs.iter().filter(|&&(g, _)| g == c).count();
            let in_pred = pairs.iter().filter(|&&(_, p)| p == c).count();
            let iou = (in_gt > 0).then(|| tp as f64 / (in_gt + in_pred - tp) as f64);
            assert_eq!(cm.iou(c), iou);
            ious.extend(iou);
        }
        assert_eq!(cm.miou().unwrap(), ious.iter().sum::<f64>() / ious.len() as f64);
        let correct = pairs.iter().filter(|(g, p)| g == p).count();
        assert_eq!(cm.pixel_accuracy().unwrap(), correct as f64 / pairs.len() as f64);
    }
}

#[test]
fn adaptive_centers_follow_the_scene() {
    let model = Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let gen = GeneratorConfig::default();
    let (a, b) = (gen.generate(11).unwrap(), gen.generate(12).unwrap());
    assert_ne!(a.style, b.style);
    let centers = |s: &ccs_core::dataset::Scene| {
        let (f, h, w) = model.features(&s.image).unwrap();
        let head = model.ccs.as_ref().unwrap();
        head.forward(&f, MaskSource::Predicted, (h, w)).unwrap().centers.values().clone()
    };
    assert!(centers(&a).max_abs_diff(&centers(&b)) > 1e-6);
}
