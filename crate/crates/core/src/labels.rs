use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel ground-truth classes on an `height × width` grid, row-major.
/// Pixels may be marked ignored; they drop out of every loss and metric.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    indices: Vec<u32>,
}

impl LabelMap {
    pub const IGNORE: u32 = u32::MAX;

    pub fn new(height: usize, width: usize, classes: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::contract(format!(
                "{} labels for a {height}x{width} map",
                indices.len()
            )));
        }
        if let Some(&bad) = indices
            .iter()
            .find(|&&i| i != Self::IGNORE && i as usize >= classes)
        {
            return Err(Error::contract(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            indices,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, class: u32) -> Result<Self> {
        Self::new(height, width, classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Class at pixel `i`, or `None` when ignored.
    pub fn class_at(&self, i: usize) -> Option<usize> {
        match self.indices[i] {
            Self::IGNORE => None,
            c => Some(c as usize),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.class_at(row * self.width + col)
    }

    pub fn labeled_count(&self) -> usize {
        self.indices.iter().filter(|&&i| i != Self::IGNORE).count()
    }

    /// `K × N` one-hot view; ignored columns are all zero.
    pub fn one_hot(&self) -> Tensor {
        let n = self.pixels();
        let mut data = vec![0.0; self.classes * n];
        for (i, c) in self.indices.iter().enumerate() {
            if *c != Self::IGNORE {
                data[*c as usize * n + i] = 1.0;
            }
        }
        Tensor::new(&[self.classes, n], data).expect("one-hot extents")
    }

    /// `1 × N` indicator of labeled pixels.
    pub fn valid_mask(&self) -> Tensor {
        let data = self
            .indices
            .iter()
            .map(|&c| if c == Self::IGNORE { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(&[1, self.pixels()], data).expect("mask extents")
    }

    /// Nearest-neighbour resampling to `height × width`, sampling each
    /// target pixel at its center: `src = floor((dst + 0.5) * scale)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(Error::contract(format!(
                "cannot resample {}x{} labels to {height}x{width}",
                self.height, self.width
            )));
        }
        let src = |dst: usize, from: usize, to: usize| ((2 * dst + 1) * from) / (2 * to);
        let mut indices = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = src(r, self.height, height);
            for c in 0..width {
                indices.push(self.indices[sr * self.width + src(c, self.width, width)]);
            }
        }
        Self::new(height, width, self.classes, indices)
    }

    /// Distinct classes present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for c in self.indices.iter().filter(|&&c| c != Self::IGNORE) {
            seen[*c as usize] = true;
        }
        (0..self.classes).filter(|&c| seen[c]).collect()
    }
}
