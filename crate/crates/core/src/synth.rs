//! Deterministic synthetic segmentation corpora in several imaging regimes.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 4] = b"SGSD";
pub const SAMPLE_VERSION: u32 = 1;
const MAX_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    Speckle,
    SaltPepper,
}

/// Intensity transfer `bias + gain·r^gamma` followed by a noise model, on top
/// of a two-level scene with a sinusoidal texture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityConfig {
    pub id: usize,
    pub name: &'static str,
    pub gamma: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise: NoiseKind,
    pub noise_strength: f64,
    /// Texture cycles across the image width.
    pub texture_freq: f64,
    pub background: f64,
}

/// The four default regimes. Gains differ in sign so some regimes render the
/// foreground dark on a bright background.
pub fn default_modalities() -> Vec<ModalityConfig> {
    vec![
        ModalityConfig {
            id: 0,
            name: "ct",
            gamma: 1.0,
            gain: 0.8,
            bias: 0.1,
            noise: NoiseKind::Gaussian,
            noise_strength: 0.04,
            texture_freq: 0.0,
            background: 0.2,
        },
        ModalityConfig {
            id: 1,
            name: "mr_t1",
            gamma: 0.6,
            gain: 0.6,
            bias: 0.3,
            noise: NoiseKind::Speckle,
            noise_strength: 0.1,
            texture_freq: 3.0,
            background: 0.3,
        },
        ModalityConfig {
            id: 2,
            name: "mr_t2",
            gamma: 1.8,
            gain: -0.8,
            bias: 0.9,
            noise: NoiseKind::Gaussian,
            noise_strength: 0.08,
            texture_freq: 7.0,
            background: 0.25,
        },
        ModalityConfig {
            id: 3,
            name: "xray",
            gamma: 1.2,
            gain: -0.5,
            bias: 0.6,
            noise: NoiseKind::SaltPepper,
            noise_strength: 0.04,
            texture_freq: 1.5,
            background: 0.35,
        },
    ]
}

/// Shape family; doubles as the class id.
pub const CLASS_NAMES: [&str; 3] = ["ellipse", "rectangle", "polygon"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Label map `[H·W]`: 0 background, `class + 1` inside a shape.
    pub labels: Vec<u8>,
    pub size: usize,
    pub modality: usize,
    pub class_id: usize,
    pub seed: u64,
}

impl SegmentationSample {
    pub fn binary_mask(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| (l != 0) as u8).collect()
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, theta: f64 },
    Rect { cx: f64, cy: f64, hx: f64, hy: f64, theta: f64 },
    Polygon { cx: f64, cy: f64, radii: [f64; 8], n: usize, phase: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, theta } => {
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hx, hy, theta } => {
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (dx * c + dy * s).abs() <= hx && (-dx * s + dy * c).abs() <= hy
            }
            Shape::Polygon { cx, cy, radii, n, phase } => {
                // star-shaped polygon; the boundary on a ray is taken at the
                // same angular fraction along the chord between its vertices
                let (dx, dy) = (x - cx, y - cy);
                let r = dx.hypot(dy);
                let step = std::f64::consts::TAU / n as f64;
                let a = (dy.atan2(dx) - phase).rem_euclid(std::f64::consts::TAU);
                let i = ((a / step) as usize).min(n - 1);
                let j = (i + 1) % n;
                let t = (a - i as f64 * step) / step;
                let (ai, aj) = (i as f64 * step, j as f64 * step);
                let (pi, pj) = (
                    (radii[i] * ai.cos(), radii[i] * ai.sin()),
                    (radii[j] * aj.cos(), radii[j] * aj.sin()),
                );
                let ex = pi.0 + t * (pj.0 - pi.0);
                let ey = pi.1 + t * (pj.1 - pi.1);
                r <= ex.hypot(ey)
            }
        }
    }
}

fn random_shape(class_id: usize, size: f64, rng: &mut ChaCha8Rng) -> Shape {
    let r = size * rng.random_range(0.14..0.24);
    let margin = r + 1.0;
    let cx = rng.random_range(margin..size - margin);
    let cy = rng.random_range(margin..size - margin);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    match class_id % 3 {
        0 => Shape::Ellipse { cx, cy, rx: r, ry: r * rng.random_range(0.6..1.0), theta },
        1 => Shape::Rect { cx, cy, hx: r * 0.9, hy: r * rng.random_range(0.5..0.9), theta },
        _ => {
            let n = rng.random_range(5..=8);
            let mut radii = [0.0; 8];
            for v in radii.iter_mut().take(n) {
                *v = r * rng.random_range(0.7..1.0);
            }
            Shape::Polygon { cx, cy, radii, n, phase: rng.random_range(0.0..std::f64::consts::TAU) }
        }
    }
}

/// Renders one sample. All randomness comes from `seed`.
pub fn generate_sample(modality: &ModalityConfig, class_id: usize, size: usize, multiclass: bool, seed: u64) -> Result<SegmentationSample> {
    let mut rng = keyed_rng(seed, 0, 0);
    let n = size * size;
    let min_fg = (n / 100).max(4);
    let mut labels = vec![0u8; n];
    let mut ok = false;
    for _ in 0..MAX_RETRIES {
        labels.iter_mut().for_each(|l| *l = 0);
        let count = match rng.random_range(0..10) {
            0..=4 => 1,
            5..=7 => 2,
            _ => 3,
        };
        for k in 0..count {
            let class = if multiclass { k % CLASS_NAMES.len() } else { class_id };
            let shape = random_shape(class, size as f64, &mut rng);
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        labels[y * size + x] = class as u8 + 1;
                    }
                }
            }
        }
        let fg = labels.iter().filter(|&&l| l != 0).count();
        if fg >= min_fg && fg < n {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Corpus(format!("degenerate shapes for seed {seed} after {MAX_RETRIES} tries")));
    }

    let m = modality;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let mut img = Vec::with_capacity(n);
    for y in 0..size {
        for x in 0..size {
            let fg = labels[y * size + x] != 0;
            let base = if fg { 0.75 } else { m.background };
            let u = (x as f64 * ca + y as f64 * sa) / size as f64;
            let tex = 0.08 * (std::f64::consts::TAU * m.texture_freq * u + phase).sin();
            let r = (base + tex).clamp(0.0, 1.0);
            let mut v = m.bias + m.gain * r.powf(m.gamma);
            let z: f64 = StandardNormal.sample(&mut rng);
            v = match m.noise {
                NoiseKind::Gaussian => v + m.noise_strength * z,
                NoiseKind::Speckle => v * (1.0 + m.noise_strength * z),
                NoiseKind::SaltPepper => {
                    let u: f64 = rng.random();
                    if u < m.noise_strength / 2.0 {
                        0.0
                    } else if u < m.noise_strength {
                        1.0
                    } else {
                        v
                    }
                }
            };
            img.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(SegmentationSample {
        image: Tensor::new([1, size, size], img)?,
        labels,
        size,
        modality: m.id,
        class_id,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Point,
    Box,
    Mask,
    None,
}

impl PromptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(PromptKind::Point),
            "box" => Ok(PromptKind::Box),
            "mask" => Ok(PromptKind::Mask),
            "none" => Ok(PromptKind::None),
            _ => Err(Error::InvalidArgument(format!("unknown prompt kind `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Point => "point",
            PromptKind::Box => "box",
            PromptKind::Mask => "mask",
            PromptKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub kind: PromptKind,
    /// Pixel `(x, y)` on the foreground.
    pub point: Option<(usize, usize)>,
    /// `(x0, y0, x1, y1)` in pixel coordinates, inclusive.
    pub bbox: Option<[f64; 4]>,
    /// Foreground max-pooled onto the feature grid, `[g·g]`.
    pub lowres_mask: Vec<u8>,
}

/// Max-pools a binary `size × size` mask onto a `grid × grid` map.
pub fn downsample_mask(mask: &[u8], size: usize, grid: usize) -> Vec<u8> {
    let s = size / grid;
    let mut out = vec![0u8; grid * grid];
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] != 0 {
                out[(y / s) * grid + x / s] = 1;
            }
        }
    }
    out
}

/// Tight foreground box `(x0, y0, x1, y1)`, inclusive.
pub fn tight_bbox(mask: &[u8], size: usize) -> Option<[usize; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] != 0 {
                b = Some(match b {
                    None => [x, y, x, y],
                    Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
                });
            }
        }
    }
    b
}

/// Draws a prompt of `kind`. Boxes grow by a uniform `[0, max_jitter]`
/// fraction of their extent on each side.
pub fn sample_prompt<R: Rng>(sample: &SegmentationSample, kind: PromptKind, grid: usize, max_jitter: f64, rng: &mut R) -> PromptSet {
    let mask = sample.binary_mask();
    let size = sample.size;
    let mut set = PromptSet { kind, point: None, bbox: None, lowres_mask: Vec::new() };
    match kind {
        PromptKind::None => {}
        PromptKind::Point => {
            let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0).collect();
            let i = fg[rng.random_range(0..fg.len())];
            set.point = Some((i % size, i / size));
        }
        PromptKind::Box => {
            let [x0, y0, x1, y1] = tight_bbox(&mask, size).expect("nonempty foreground");
            let (w, h) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
            let mut j = || if max_jitter > 0.0 { rng.random_range(0.0..=max_jitter) } else { 0.0 };
            let hi = (size - 1) as f64;
            set.bbox = Some([
                (x0 as f64 - j() * w).max(0.0),
                (y0 as f64 - j() * h).max(0.0),
                (x1 as f64 + j() * w).min(hi),
                (y1 as f64 + j() * h).min(hi),
            ]);
        }
        PromptKind::Mask => set.lowres_mask = downsample_mask(&mask, size, grid),
    }
    set
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub train: bool,
    pub modality: usize,
    pub class_id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub modalities: usize,
    pub samples_per_modality: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub multiclass: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            modalities: 4,
            samples_per_modality: 500,
            split_ratio: 0.9,
            seed: 7,
            image_size: 64,
            num_classes: 3,
            multiclass: false,
        }
    }
}

/// Lists every sample of the corpus with its split; pure function of `spec`.
pub fn build_manifest(spec: &CorpusSpec) -> Result<Vec<ManifestEntry>> {
    if !(spec.split_ratio > 0.0 && spec.split_ratio < 1.0) {
        return Err(Error::Corpus(format!("split ratio {} outside (0, 1)", spec.split_ratio)));
    }
    if spec.modalities == 0 || spec.modalities > default_modalities().len() {
        return Err(Error::Corpus(format!("between 1 and {} modalities are available", default_modalities().len())));
    }
    if spec.num_classes == 0 || spec.num_classes > CLASS_NAMES.len() {
        return Err(Error::Corpus(format!("between 1 and {} classes are available", CLASS_NAMES.len())));
    }
    let n = spec.samples_per_modality;
    let n_train = (n as f64 * spec.split_ratio).round() as usize;
    let mut out = Vec::with_capacity(spec.modalities * n);
    for m in 0..spec.modalities {
        for i in 0..n {
            let id = (m * n + i) as u64;
            let mut r = keyed_rng(spec.seed, id, 0);
            out.push(ManifestEntry {
                id,
                train: i < n_train,
                modality: m,
                class_id: i % spec.num_classes,
                seed: r.random(),
            });
        }
    }
    Ok(out)
}

pub fn render_entry(spec: &CorpusSpec, e: &ManifestEntry) -> Result<SegmentationSample> {
    let mods = default_modalities();
    generate_sample(&mods[e.modality], e.class_id, spec.image_size, spec.multiclass, e.seed)
}

/// An in-memory corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub entries: Vec<ManifestEntry>,
    pub samples: Vec<SegmentationSample>,
}

impl Corpus {
    pub fn generate(spec: CorpusSpec) -> Result<Self> {
        let entries = build_manifest(&spec)?;
        let samples = entries.iter().map(|e| render_entry(&spec, e)).collect::<Result<_>>()?;
        Ok(Self { spec, entries, samples })
    }

    pub fn split(&self, train: bool) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].train == train).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("id,split,modality,class,seed\n");
        for (e, s) in self.entries.iter().zip(&self.samples) {
            let split = if e.train { "train" } else { "test" };
            writeln!(manifest, "{},{},{},{},{}", e.id, split, e.modality, e.class_id, e.seed).expect("string write");
            let path = sample_path(dir, e);
            fs::create_dir_all(path.parent().expect("sample dir"))?;
            write_sample(&path, s)?;
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
        let sp = &self.spec;
        let cfg = format!(
            "modalities={}\nsamples={}\nsplit_ratio={}\nseed={}\nimage_size={}\nnum_classes={}\nmulticlass={}\n",
            sp.modalities, sp.samples_per_modality, sp.split_ratio, sp.seed, sp.image_size, sp.num_classes, sp.multiclass
        );
        fs::write(dir.join("corpus.cfg"), cfg)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let spec = read_spec(dir)?;
        let entries = read_manifest(&dir.join("manifest.csv"))?;
        let mods = default_modalities();
        let mut samples = Vec::with_capacity(entries.len());
        for e in &entries {
            let mut s = read_sample(&sample_path(dir, e))?;
            s.modality = mods
                .get(e.modality)
                .map(|m| m.id)
                .ok_or_else(|| Error::Corpus(format!("unknown modality {}", e.modality)))?;
            s.class_id = e.class_id;
            s.seed = e.seed;
            samples.push(s);
        }
        Ok(Self { spec, entries, samples })
    }
}

fn sample_path(dir: &Path, e: &ManifestEntry) -> PathBuf {
    let split = if e.train { "train" } else { "test" };
    dir.join(split).join(default_modalities()[e.modality].name).join(format!("{}.bin", e.id))
}

fn read_spec(dir: &Path) -> Result<CorpusSpec> {
    let text = fs::read_to_string(dir.join("corpus.cfg"))
        .map_err(|e| Error::Corpus(format!("{}: {e}", dir.join("corpus.cfg").display())))?;
    let mut spec = CorpusSpec::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Corpus(format!("bad corpus.cfg line `{line}`")))?;
        let bad = |_| Error::Corpus(format!("bad value for {k}: `{v}`"));
        match k.trim() {
            "modalities" => spec.modalities = v.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "samples" => spec.samples_per_modality = v.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "split_ratio" => spec.split_ratio = v.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "seed" => spec.seed = v.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "image_size" => spec.image_size = v.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "num_classes" => spec.num_classes = v.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "multiclass" => spec.multiclass = v.trim().parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
            other => return Err(Error::Corpus(format!("unknown corpus.cfg key `{other}`"))),
        }
    }
    Ok(spec)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Corpus(format!("manifest line {}: `{line}`", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            id: f[0].parse().map_err(|_| bad())?,
            train: match f[1] {
                "train" => true,
                "test" => false,
                _ => return Err(bad()),
            },
            modality: f[2].parse().map_err(|_| bad())?,
            class_id: f[3].parse().map_err(|_| bad())?,
            seed: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Binary sample file: 16-byte header, f32 LE image, u8 label map.
pub fn write_sample(path: &Path, s: &SegmentationSample) -> Result<()> {
    let c = s.image.shape()[0];
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(SAMPLE_MAGIC)?;
    f.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    for v in [s.size as u16, s.size as u16, c as u16, 0u16] {
        f.write_all(&v.to_le_bytes())?;
    }
    for &v in s.image.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.write_all(&s.labels)?;
    f.flush()?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<SegmentationSample> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let bad = |why: &str| Error::Corpus(format!("{}: {why}", path.display()));
    if buf.len() < 16 || &buf[0..4] != SAMPLE_MAGIC {
        return Err(bad("not a sample file"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != SAMPLE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]) as usize;
    let (h, w, c) = (u16_at(8), u16_at(10), u16_at(12));
    if h != w {
        return Err(bad("non-square images are not supported"));
    }
    let n = h * w;
    if buf.len() != 16 + 4 * c * n + n {
        return Err(bad("truncated payload"));
    }
    let img = buf[16..16 + 4 * c * n]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(SegmentationSample {
        image: Tensor::new([c, h, w], img)?,
        labels: buf[16 + 4 * c * n..].to_vec(),
        size: h,
        modality: 0,
        class_id: 0,
        seed: 0,
    })
}
