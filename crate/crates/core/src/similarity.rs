//! Pixel-to-center and center-to-center similarity.
//!
//! Pixel-to-center (P-C) scores use the inner product; center-to-center
//! (C-C) scores use the absolute cosine. A softmax over the class axis turns
//! absolute scores into relative ones, and the distance between a pixel (or
//! center) and class `q` is `-log` of that relative score.
//!
//! Layout conventions: features are `D × N` (channels by pixels), centers
//! are `K × D`, so P-C maps are `K × N`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Guard added to the norm product of the cosine similarity.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Absolute,
    Relative,
}

/// A detached `K × N` similarity map tagged with its kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    values: Tensor,
    kind: SimilarityKind,
}

impl SimilarityMap {
    pub fn absolute(values: Tensor) -> Result<Self> {
        values.dims2()?;
        Ok(Self {
            values,
            kind: SimilarityKind::Absolute,
        })
    }

    /// Wraps `values` as a relative map; every column must be a
    /// probability vector.
    pub fn relative(values: Tensor) -> Result<Self> {
        let [k, n] = values.dims2()?;
        for i in 0..n {
            let col = (0..k).map(|j| values.data()[j * n + i]);
            let mut total = 0.0;
            for v in col {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::contract(format!("relative similarity {v} outside [0,1]")));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("column {i} sums to {total}, not 1")));
            }
        }
        Ok(Self {
            values,
            kind: SimilarityKind::Relative,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Softmax over classes; a relative map is returned unchanged.
    pub fn to_relative(&self) -> Result<Self> {
        match self.kind {
            SimilarityKind::Relative => Ok(self.clone()),
            SimilarityKind::Absolute => Ok(Self {
                values: tensor::softmax(&self.values, 0)?,
                kind: SimilarityKind::Relative,
            }),
        }
    }
}

/// Absolute P-C scores on the graph (`K × N`). Only this type is accepted by
/// the distance losses.
#[derive(Clone, Copy, Debug)]
pub struct AbsoluteScores<'g>(pub Var<'g>);

/// Relative P-C scores on the graph: per-pixel softmax of [`AbsoluteScores`].
#[derive(Clone, Copy, Debug)]
pub struct RelativeScores<'g>(pub Var<'g>);

impl<'g> AbsoluteScores<'g> {
    pub fn var(self) -> Var<'g> {
        self.0
    }

    pub fn relative(self) -> Result<RelativeScores<'g>> {
        Ok(RelativeScores(self.0.softmax(0)?))
    }

    pub fn to_map(self) -> Result<SimilarityMap> {
        SimilarityMap::absolute(self.0.value())
    }
}

impl<'g> RelativeScores<'g> {
    pub fn var(self) -> Var<'g> {
        self.0
    }

    pub fn to_map(self) -> Result<SimilarityMap> {
        SimilarityMap::relative(self.0.value())
    }
}

/// How the C-C distance turns cosine similarity into a distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterDistance {
    /// `-log softmax` over each row of the cosine matrix.
    #[default]
    SoftmaxCosine,
    /// `-log cos` directly, so `exp(-D)` is the raw cosine.
    RawCosine,
}

pub fn inner_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_extents(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// `|a·b| / (‖a‖‖b‖ + EPS_NORM)`, in `[0, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot = inner_similarity(a, b)?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(dot.abs() / (na * nb + EPS_NORM))
}

fn check_extents(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "embedding extents differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `-log softmax(similarities)[target]`, computed in log space.
pub fn distance(similarities: &[f64], target: usize) -> Result<f64> {
    if target >= similarities.len() {
        return Err(Error::contract(format!(
            "class {target} out of range for {} similarities",
            similarities.len()
        )));
    }
    let max = similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + similarities.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok((lse - similarities[target]).max(0.0))
}

/// `values[j, i] = c_j · f_i`, i.e. `C ⊗ F`.
pub fn pc_similarity<'g>(features: Var<'g>, centers: Var<'g>) -> Result<AbsoluteScores<'g>> {
    let (fs, cs) = (features.shape(), centers.shape());
    if fs.len() != 2 || cs.len() != 2 || fs[0] != cs[1] {
        return Err(Error::contract(format!(
            "features {fs:?} and centers {cs:?} disagree on channels"
        )));
    }
    Ok(AbsoluteScores(centers.matmul(features)?))
}

/// Detached P-C similarity map.
pub fn pc_similarity_map(features: &Tensor, centers: &Tensor) -> Result<SimilarityMap> {
    let [d, _] = features.dims2()?;
    let [_, dc] = centers.dims2()?;
    if d != dc {
        return Err(Error::contract(format!(
            "features have {d} channels, centers {dc}"
        )));
    }
    SimilarityMap::absolute(centers.matmul(features)?)
}

/// `K × K` absolute cosine similarity between center rows.
pub fn cc_similarity<'g>(centers: Var<'g>) -> Result<Var<'g>> {
    let gram = centers.matmul(centers.t()?)?;
    let norms = centers.mul(centers)?.sum_axis(1)?.sqrt()?;
    let denom = norms.matmul(norms.t()?)?.add_scalar(EPS_NORM);
    gram.abs().div(denom)
}

/// Detached C-C cosine matrix.
pub fn cc_similarity_matrix(centers: &Tensor) -> Result<Tensor> {
    let [k, _] = centers.dims2()?;
    let mut out = vec![0.0; k * k];
    for p in 0..k {
        for q in 0..k {
            out[p * k + q] = cosine_similarity(centers.row(p), centers.row(q))?;
        }
    }
    Tensor::new(&[k, k], out)
}

/// Per-pixel softmax over classes.
pub fn relative_similarity(map: &SimilarityMap) -> Result<SimilarityMap> {
    map.to_relative()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn inner_examples() {
        assert_eq!(inner_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(inner_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0);
        assert_eq!(inner_similarity(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(inner_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        assert!(close(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8));
        assert!(close(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 1.0));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn pc_map_examples() {
        let f = Tensor::eye(3);
        let c = Tensor::eye(3);
        assert_eq!(pc_similarity_map(&f, &c).unwrap().values(), &Tensor::eye(3));

        let f = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let c = Tensor::eye(2);
        assert_eq!(pc_similarity_map(&f, &c).unwrap().values().data(), &[1.0, 0.0]);

        let f = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap();
        let base = pc_similarity_map(&f, &c).unwrap();
        let scaled = pc_similarity_map(&f.map(|v| 3.0 * v), &c).unwrap();
        for (a, b) in base.values().data().iter().zip(scaled.values().data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        assert!(pc_similarity_map(&f, &Tensor::eye(3)).is_err());
    }

    #[test]
    fn cc_matrix_examples() {
        assert!(cc_similarity_matrix(&Tensor::eye(3)).unwrap().max_abs_diff(&Tensor::eye(3)) < 1e-11);
        let same = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        let m = cc_similarity_matrix(&same).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let m = cc_similarity_matrix(&Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap()).unwrap();
        assert!((m.at(&[0, 1]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn graph_cc_matches_detached() {
        let c = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[0.3, 0.1, 2.0], &[-1.0, 1.0, 1.0]]).unwrap();
        let g = Graph::new();
        let on_graph = cc_similarity(g.constant(c.clone())).unwrap().value();
        assert!(on_graph.max_abs_diff(&cc_similarity_matrix(&c).unwrap()) < 1e-12);
    }

    #[test]
    fn relative_examples() {
        let m = SimilarityMap::absolute(Tensor::full(&[4, 2], 1.7)).unwrap();
        let r = relative_similarity(&m).unwrap();
        assert_eq!(r.kind(), SimilarityKind::Relative);
        assert!(r.values().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let m = SimilarityMap::absolute(Tensor::new(&[2, 1], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        let r = relative_similarity(&m).unwrap();
        assert!((r.values().data()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relative_constructor_validates_columns() {
        assert!(SimilarityMap::relative(Tensor::full(&[2, 3], 0.4)).is_err());
        assert!(SimilarityMap::relative(Tensor::full(&[2, 3], 0.5)).is_ok());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[3.2], 0).unwrap(), 0.0);
        assert!((distance(&[0.1; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let lo = distance(&[0.5, 1.0, -0.2], 0).unwrap();
        let hi = distance(&[0.9, 1.0, -0.2], 0).unwrap();
        assert!(hi < lo);
        assert!(distance(&[0.0, 1.0], 2).is_err());
    }
}
