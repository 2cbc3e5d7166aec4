//! Synthetic segmentation scenes, their netpbm storage, manifests and
//! training-time augmentation.
//!
//! Every scene draws a per-scene style (a global color shift and gain plus
//! per-class jitter), so one class looks different from scene to scene. The
//! last two classes form a confusable pair whose colors are pulled toward
//! their midpoint by `0.85 · hardness` inside each scene.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::seeds;
use crate::tensor::Tensor;

type Rgb = [f64; 3];

const PALETTE: [Rgb; 6] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.35, 0.80],
    [0.95, 0.55, 0.75],
];
const PAIR: [Rgb; 2] = [[0.25, 0.60, 0.60], [0.60, 0.65, 0.25]];
const SHIFT_RANGE: (f64, f64) = (-0.15, 0.2);
const GAIN_RANGE: (f64, f64) = (0.8, 1.15);
const JITTER: f64 = 0.06;
const CONVERGENCE: f64 = 0.85;
const OTHER_CLASS_PROB: f64 = 0.8;

/// Classes whose appearance converges within a scene.
pub fn confusable_pair(classes: usize) -> (usize, usize) {
    (classes - 2, classes - 1)
}

/// Scene-independent color of class `c`.
pub fn base_color(c: usize, classes: usize) -> Rgb {
    let (a, b) = confusable_pair(classes);
    if c == a {
        PAIR[0]
    } else if c == b {
        PAIR[1]
    } else if c < PALETTE.len() {
        PALETTE[c]
    } else {
        let h = (c as f64 * 0.618_033_988_75).fract() * std::f64::consts::TAU;
        let third = std::f64::consts::TAU / 3.0;
        [0.5 + 0.4 * h.sin(), 0.5 + 0.4 * (h + third).sin(), 0.5 + 0.4 * (h + 2.0 * third).sin()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneStyle {
    pub shift: Rgb,
    pub gain: f64,
    pub hardness: f64,
    /// Final noiseless color of every class in this scene.
    pub colors: Vec<Rgb>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    /// Known for generated scenes, absent for scenes read from disk.
    pub style: Option<SceneStyle>,
}

impl Scene {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        if image.shape() != [3, labels.height(), labels.width()] {
            return Err(Error::contract(format!(
                "image {:?} does not match {}x{} labels",
                image.shape(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self {
            image,
            labels,
            style: None,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub hardness: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            height: 64,
            width: 64,
            hardness: 0.8,
            noise: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    Stripes { period: usize, vertical: bool },
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::contract("scene generator needs 2..=256 classes"));
        }
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(Error::contract("hardness must lie in [0, 1]"));
        }
        if self.height == 0 || self.width == 0 || !(self.noise >= 0.0) {
            return Err(Error::contract("scene size must be positive and noise non-negative"));
        }
        Ok(())
    }

    pub fn style(&self, rng: &mut impl Rng) -> SceneStyle {
        let shift = [(); 3].map(|_| rng.gen_range(SHIFT_RANGE.0..SHIFT_RANGE.1));
        let gain = rng.gen_range(GAIN_RANGE.0..GAIN_RANGE.1);
        let mut colors: Vec<Rgb> = (0..self.classes)
            .map(|c| {
                let base = base_color(c, self.classes);
                [0, 1, 2].map(|ch| gain * base[ch] + shift[ch] + rng.gen_range(-JITTER..JITTER))
            })
            .collect();
        let (a, b) = confusable_pair(self.classes);
        let lambda = CONVERGENCE * self.hardness;
        for ch in 0..3 {
            let mid = 0.5 * (colors[a][ch] + colors[b][ch]);
            colors[a][ch] += lambda * (mid - colors[a][ch]);
            colors[b][ch] += lambda * (mid - colors[b][ch]);
        }
        for c in &mut colors {
            *c = c.map(|v| v.clamp(0.0, 1.0));
        }
        SceneStyle {
            shift,
            gain,
            hardness: self.hardness,
            colors,
        }
    }

    /// Deterministic scene for `seed`.
    pub fn generate(&self, seed: u64) -> Result<Scene> {
        self.validate()?;
        let mut rng = seeds::substream(seed, seeds::DATA, 0);
        let style = self.style(&mut rng);
        let (h, w, k) = (self.height, self.width, self.classes);
        let (pa, pb) = confusable_pair(k);

        let mut others = Vec::new();
        for c in 1..k {
            if (c != pa && c != pb && rng.gen_bool(OTHER_CLASS_PROB)) || c == pa || c == pb {
                for _ in 0..rng.gen_range(1..=2) {
                    others.push(c);
                }
            }
        }
        others.shuffle(&mut rng);
        // The pair goes on top so it is always visible.
        let (mut order, pair): (Vec<usize>, Vec<usize>) = others.into_iter().partition(|&c| c != pa && c != pb);
        order.extend(pair);

        let scale = h.min(w) as f64 / 64.0;
        let extent = |rng: &mut dyn rand::RngCore| ((rng.gen_range(12.0..=28.0) * scale).round() as usize).max(2);
        let mut indices = vec![0u32; h * w];
        for c in order {
            let (sh, sw) = (extent(&mut rng), extent(&mut rng));
            let top = rng.gen_range(0..h + sh / 2) as isize - (sh / 2) as isize;
            let left = rng.gen_range(0..w + sw / 2) as isize - (sw / 2) as isize;
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Rect,
                1 => Shape::Ellipse,
                _ => Shape::Stripes {
                    period: rng.gen_range(4..=6),
                    vertical: rng.gen_bool(0.5),
                },
            };
            paint(&mut indices, h, w, c as u32, top, left, sh, sw, shape);
        }

        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::contract(e.to_string()))?;
        let mut data = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for (i, &c) in indices.iter().enumerate() {
                let v = style.colors[c as usize][ch] + noise.sample(&mut rng);
                data[ch * h * w + i] = v.clamp(0.0, 1.0);
            }
        }
        Ok(Scene {
            image: Tensor::new(&[3, h, w], data)?,
            labels: LabelMap::new(h, w, k, indices)?,
            style: Some(style),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn paint(indices: &mut [u32], h: usize, w: usize, class: u32, top: isize, left: isize, sh: usize, sw: usize, shape: Shape) {
    let (cr, cc) = (top as f64 + sh as f64 / 2.0, left as f64 + sw as f64 / 2.0);
    let (rr, rc) = (sh as f64 / 2.0, sw as f64 / 2.0);
    for r in top.max(0)..(top + sh as isize).min(h as isize) {
        for c in left.max(0)..(left + sw as isize).min(w as isize) {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let dy = (r as f64 + 0.5 - cr) / rr;
                    let dx = (c as f64 + 0.5 - cc) / rc;
                    dy * dy + dx * dx <= 1.0
                }
                Shape::Stripes { period, vertical } => {
                    let offset = if vertical { c - left } else { r - top } as usize;
                    offset % period < period / 2
                }
            };
            if inside {
                indices[r as usize * w + c as usize] = class;
            }
        }
    }
}

/// Default-noise scene; see [`GeneratorConfig::generate`].
pub fn generate_scene(seed: u64, classes: usize, height: usize, width: usize, hardness: f64) -> Result<Scene> {
    GeneratorConfig {
        classes,
        height,
        width,
        hardness,
        ..GeneratorConfig::default()
    }
    .generate(seed)
}

// ---------------------------------------------------------------- netpbm

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(pos - 1, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        payload: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let end = header.payload + need;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", bytes.len() - header.payload),
        ));
    }
    Ok(&bytes[header.payload..end])
}

/// Binary P6 with maxval 255; values are rounded to the nearest level.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.dims3()?;
    if c != 3 {
        return Err(Error::contract(format!("P6 needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6")?;
    let raw = payload(bytes, &header, 3)?;
    let n = header.width * header.height;
    let scale = header.maxval as f64;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            if px[ch] as usize > header.maxval {
                return Err(Error::format(header.payload + 3 * i + ch, "sample exceeds maxval"));
            }
            data[ch * n + i] = px[ch] as f64 / scale;
        }
    }
    Tensor::new(&[3, header.height, header.width], data)
}

/// Binary P5 with one class index per pixel and maxval `K - 1`.
pub fn encode_pgm_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let k = labels.classes();
    if !(2..=256).contains(&k) {
        return Err(Error::contract(format!("P5 labels need 2..=256 classes, got {k}")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", labels.width(), labels.height(), k - 1).into_bytes();
    for &c in labels.indices() {
        if c == LabelMap::IGNORE {
            return Err(Error::contract("ignored pixels cannot be stored in P5"));
        }
        out.push(c as u8);
    }
    Ok(out)
}

pub fn decode_pgm_labels(bytes: &[u8], classes: usize) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    if header.maxval >= classes {
        return Err(Error::format(
            header.payload - 1,
            format!("maxval {} admits class indices ≥ {classes}", header.maxval),
        ));
    }
    let raw = payload(bytes, &header, 1)?;
    if let Some(i) = raw.iter().position(|&c| c as usize >= classes) {
        return Err(Error::format(header.payload + i, format!("class index {} ≥ {classes}", raw[i])));
    }
    LabelMap::new(header.height, header.width, classes, raw.iter().map(|&c| c as u32).collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Adds the file name to format errors raised while decoding `path`.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_scene(scene: &Scene, image_path: &Path, label_path: &Path) -> Result<()> {
    write_bytes(image_path, &encode_ppm(&scene.image)?)?;
    write_bytes(label_path, &encode_pgm_labels(&scene.labels)?)
}

pub fn read_scene(image_path: &Path, label_path: &Path, classes: usize) -> Result<Scene> {
    let image = in_file(image_path, decode_ppm(&read_bytes(image_path)?))?;
    let labels = in_file(label_path, decode_pgm_labels(&read_bytes(label_path)?, classes))?;
    Scene::new(image, labels)
}

// -------------------------------------------------------------- manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub seed: u64,
}

/// Ordered scene list. Paths are stored as written and resolved against
/// `root`, the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.seed)
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image)
    }

    pub fn label_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].labels)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}", r.image.display(), r.labels.display(), r.seed);
        }
        out
    }

    pub fn parse(text: &str, split: Split, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.trim().is_empty() {
                let fields: Vec<&str> = body.split('\t').collect();
                let [image, labels, seed] = fields[..] else {
                    return Err(Error::format(offset, "expected image<TAB>labels<TAB>seed"));
                };
                let seed = seed
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(offset, format!("bad seed {seed:?}")))?;
                if records.iter().any(|r: &ManifestRecord| r.seed == seed) {
                    return Err(Error::format(offset, format!("duplicate seed {seed}")));
                }
                records.push(ManifestRecord {
                    image: image.into(),
                    labels: labels.into(),
                    seed,
                });
            }
            offset += line.len();
        }
        Ok(Self {
            split,
            root: root.to_path_buf(),
            records,
        })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let m = in_file(path, Self::parse(&text, split, root))?;
        for i in 0..m.len() {
            for p in [m.image_path(i), m.label_path(i)] {
                if !p.is_file() {
                    return Err(Error::io(
                        &p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }

    pub fn read_scenes(&self, classes: usize) -> Result<Vec<Scene>> {
        (0..self.len())
            .map(|i| read_scene(&self.image_path(i), &self.label_path(i), classes))
            .collect()
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seeds::substream(seed, seeds::DATA, index as u64).gen()
}

/// Writes `train/` and `val/` scenes plus `train.tsv` and `val.tsv` under
/// `dir`. Train scenes take indices `0..n_train`, val the ones after.
pub fn generate_dataset(
    dir: &Path,
    config: &GeneratorConfig,
    seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<(Manifest, Manifest)> {
    config.validate()?;
    let mut used = std::collections::HashSet::new();
    let mut make = |split: Split, range: std::ops::Range<usize>| -> Result<Manifest> {
        let mut records = Vec::new();
        for (j, index) in range.enumerate() {
            let s = scene_seed(seed, index);
            if !used.insert(s) {
                return Err(Error::contract(format!("scene seed collision at index {index}")));
            }
            let stem = format!("{}/scene_{j:04}", split.name());
            let record = ManifestRecord {
                image: format!("{stem}.ppm").into(),
                labels: format!("{stem}.pgm").into(),
                seed: s,
            };
            write_scene(&config.generate(s)?, &dir.join(&record.image), &dir.join(&record.labels))?;
            records.push(record);
        }
        let m = Manifest {
            split,
            root: dir.to_path_buf(),
            records,
        };
        m.save(&dir.join(format!("{}.tsv", split.name())))?;
        Ok(m)
    };
    let train = make(Split::Train, 0..n_train)?;
    let val = make(Split::Val, n_train..n_train + n_val)?;
    Ok((train, val))
}

// ---------------------------------------------------------- augmentation

pub fn flip_horizontal(scene: &Scene) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (row, col) = (i / w, i % w);
        scene.image.data()[row * w + (w - 1 - col)]
    });
    let indices = (0..h * w)
        .map(|i| scene.labels.indices()[(i / w) * w + (w - 1 - i % w)])
        .collect();
    Scene {
        image,
        labels: LabelMap::new(h, w, scene.classes(), indices).expect("same extents"),
        style: scene.style.clone(),
    }
}

pub fn crop(scene: &Scene, top: usize, left: usize, height: usize, width: usize) -> Result<Scene> {
    let (h, w) = (scene.height(), scene.width());
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::contract(format!(
            "crop {height}x{width} at ({top},{left}) exceeds {h}x{w}"
        )));
    }
    let image = Tensor::from_fn(&[3, height, width], |i| {
        let (ch, rest) = (i / (height * width), i % (height * width));
        let (r, c) = (rest / width, rest % width);
        scene.image.data()[ch * h * w + (top + r) * w + left + c]
    });
    let indices = (0..height * width)
        .map(|i| scene.labels.indices()[(top + i / width) * w + left + i % width])
        .collect();
    Ok(Scene {
        image,
        labels: LabelMap::new(height, width, scene.classes(), indices)?,
        style: scene.style.clone(),
    })
}

/// Horizontal flip with probability 0.5, then a uniform random crop to
/// `size` (no crop when `None`).
pub fn augment(scene: &Scene, size: Option<(usize, usize)>, rng: &mut impl Rng) -> Result<Scene> {
    let flipped = if rng.gen_bool(0.5) {
        flip_horizontal(scene)
    } else {
        scene.clone()
    };
    let Some((ch, cw)) = size else {
        return Ok(flipped);
    };
    if ch > scene.height() || cw > scene.width() {
        return Err(Error::contract("crop size exceeds scene size"));
    }
    let top = rng.gen_range(0..=scene.height() - ch);
    let left = rng.gen_range(0..=scene.width() - cw);
    crop(&flipped, top, left, ch, cw)
}
