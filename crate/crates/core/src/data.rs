//! Synthetic lesion images with ground-truth masks, dataset persistence and
//! nested training-fraction subsets.
//!
//! A dataset directory holds a `manifest`, `images/*.png` (8-bit RGB) and
//! `masks/*.png` (1-bit gray). Images live in memory as planar `(3, H, W)`
//! `f32` in `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_FILE: &str = "manifest";
pub const MANIFEST_FORMAT: &str = "medtex-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const ALLOWED_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];
pub const CHANNELS: usize = 3;
/// Generated images must be divisible by this (the explainer's depth).
pub const SIZE_MULTIPLE: usize = 32;
/// Largest accepted side when decoding external images.
const MAX_DECODE_SIDE: u32 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u64,
    /// 0 = normal, 1 = abnormal.
    pub label: u8,
    /// Planar `(3, H, W)`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major `(H, W)`; absent for imported data without masks.
    pub lesion_mask: Option<Vec<bool>>,
}

impl SyntheticSample {
    pub fn lesion_pixels(&self) -> usize {
        self.lesion_mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }
}

/// Knobs of the procedural generator. Areas are fractions of `H * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub lesion_area: (f64, f64),
    pub max_lesions: usize,
    pub min_semi_axis: f64,
    /// Additive RGB shift inside lesions, scaled by the image gain.
    pub lesion_shift: [f64; 3],
    /// Amplitude of per-pixel speckle inside lesions.
    pub lesion_speckle: f64,
    pub background_texture: f64,
    pub sensor_noise: f64,
    /// Pale optic-disc-like bump present in every image.
    pub optic_disc: bool,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            lesion_area: (0.005, 0.15),
            max_lesions: 3,
            min_semi_axis: 2.0,
            lesion_shift: [0.16, 0.24, 0.06],
            lesion_speckle: 0.12,
            background_texture: 0.06,
            sensor_noise: 0.01,
            optic_disc: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub label: u8,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub mask: Option<String>,
    /// Hex sha256 of the file bytes; `None` skips verification.
    pub image_sha256: Option<String>,
    pub mask_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub fraction: f64,
    pub seed: u64,
    pub size: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SyntheticSample>,
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::InvalidArgument(format!(
            "image size must be a positive multiple of {SIZE_MULTIPLE}, got {size}"
        )));
    }
    Ok(())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !ALLOWED_FRACTIONS.contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be one of 0.25, 0.5, 1.0, got {fraction}"
        )));
    }
    Ok(())
}

/// One elliptical blob: center, semi-axes and rotation, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Pixel centers `(x + 0.5, y + 0.5)` inside the ellipse.
    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        let (s, c) = self.angle.sin_cos();
        let mut out = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - self.cx;
                let dy = y as f64 + 0.5 - self.cy;
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                out[y * size + x] = u * u + v * v <= 1.0;
            }
        }
        out
    }
}

/// Place 1..=max_lesions ellipses whose union covers an area inside the
/// configured range. Returns the blobs and their union.
fn place_lesions(rng: &mut impl Rng, size: usize, params: &GeneratorParams) -> (Vec<Ellipse>, Vec<bool>) {
    let hw = (size * size) as f64;
    let (lo, hi) = (params.lesion_area.0 * hw, params.lesion_area.1 * hw);
    let half = size as f64 / 2.0;
    loop {
        let count = rng.random_range(1..=params.max_lesions.max(1));
        let target = rng.random_range(lo..hi);
        let weights: Vec<f64> = (0..count).map(|_| rng.random_range(0.5..1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut blobs = Vec::with_capacity(count);
        for w in &weights {
            let area = target * w / wsum;
            let aspect = rng.random_range(1.0..2.0);
            let b = (area / (std::f64::consts::PI * aspect)).sqrt().max(params.min_semi_axis);
            let a = (aspect * b).max(params.min_semi_axis);
            // Keep blobs inside the circular field of view and the frame.
            let reach = half * 0.72 - a;
            if reach <= 0.0 {
                break;
            }
            let r = reach * rng.random::<f64>().sqrt();
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            blobs.push(Ellipse {
                cx: half + r * t.cos(),
                cy: half + r * t.sin(),
                a,
                b,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            });
        }
        if blobs.len() != count {
            continue;
        }
        let mut mask = vec![false; size * size];
        for e in &blobs {
            for (m, inside) in mask.iter_mut().zip(e.rasterize(size)) {
                *m |= inside;
            }
        }
        let area = mask.iter().filter(|&&v| v).count() as f64;
        if area >= lo && area <= hi {
            return (blobs, mask);
        }
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Render one sample. Depends only on `(seed, split, sample_id, label)`.
pub fn generate_sample(
    seed: u64,
    split: Split,
    sample_id: u64,
    label: u8,
    size: usize,
    params: &GeneratorParams,
) -> Result<SyntheticSample> {
    check_size(size)?;
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {label}")));
    }
    let mut rng = rng::stream(seed, &format!("sample/{split}/{sample_id}/{label}"));
    let n = size as f64;
    let gain = rng.random_range(0.85..1.1);
    let base = [
        0.70 * gain + rng.random_range(-0.04..0.04),
        0.34 * gain + rng.random_range(-0.04..0.04),
        0.18 * gain + rng.random_range(-0.03..0.03),
    ];
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0) * params.background_texture,
            ]
        })
        .collect();
    let disc = {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(0.3..0.5) * n / 2.0;
        (n / 2.0 + r * t.cos(), n / 2.0 + r * t.sin(), rng.random_range(0.06..0.09) * n)
    };

    let plane = size * size;
    let mut img = vec![0.0f64; CHANNELS * plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / n, py / n);
            let tex: f64 = waves
                .iter()
                .map(|w| w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + w[2]).cos())
                .sum();
            let rr = ((px - n / 2.0).powi(2) + (py - n / 2.0).powi(2)).sqrt() / (n / 2.0);
            let field = ((0.97 - rr) / 0.08).clamp(0.0, 1.0);
            let bump = if params.optic_disc {
                let d2 = (px - disc.0).powi(2) + (py - disc.1).powi(2);
                (-d2 / (2.0 * disc.2 * disc.2)).exp()
            } else {
                0.0
            };
            let disc_rgb = [0.22, 0.22, 0.12];
            for c in 0..CHANNELS {
                let val = (base[c] * (1.0 + tex) + disc_rgb[c] * bump) * field + 0.02 * (1.0 - field);
                img[c * plane + y * size + x] = val;
            }
        }
    }

    let lesion_mask = if label == 1 {
        let (_, mask) = place_lesions(&mut rng, size, params);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..CHANNELS {
                let speckle = params.lesion_speckle * rng.random_range(-1.0..1.0);
                img[c * plane + i] += params.lesion_shift[c] * gain + speckle;
            }
        }
        mask
    } else {
        vec![false; plane]
    };
    let image = img
        .into_iter()
        .map(|v| quantize(v + params.sensor_noise * rng.random_range(-1.0..1.0)))
        .collect();
    Ok(SyntheticSample {
        sample_id,
        label,
        image,
        lesion_mask: Some(lesion_mask),
    })
}

fn image_file(id: u64) -> String {
    format!("images/{id:06}.png")
}

fn mask_file(id: u64) -> String {
    format!("masks/{id:06}.png")
}

/// Ids `0..n_normal` are normal, the following `n_abnormal` abnormal.
pub fn generate_dataset(
    split: Split,
    n_normal: usize,
    n_abnormal: usize,
    size: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<Dataset> {
    check_size(size)?;
    if n_normal == 0 || n_abnormal == 0 {
        return Err(Error::InvalidArgument("class counts must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(n_normal + n_abnormal);
    let mut entries = Vec::with_capacity(n_normal + n_abnormal);
    for i in 0..(n_normal + n_abnormal) {
        let id = i as u64;
        let label = u8::from(i >= n_normal);
        samples.push(generate_sample(seed, split, id, label, size, params)?);
        entries.push(ManifestEntry {
            sample_id: id,
            label,
            image: image_file(id),
            mask: Some(mask_file(id)),
            image_sha256: None,
            mask_sha256: None,
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            split,
            fraction: 1.0,
            seed,
            size,
            n_normal,
            n_abnormal,
            entries,
        },
        samples,
    })
}

/// Stratified subset keeping `floor(fraction * count)` ids of each class.
/// Each class is ranked by a seeded hash of the id, so smaller fractions
/// select prefixes of larger ones.
pub fn subset_fraction(manifest: &DatasetManifest, fraction: f64) -> Result<DatasetManifest> {
    check_fraction(fraction)?;
    if fraction == manifest.fraction {
        return Ok(manifest.clone());
    }
    if manifest.fraction != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "subsets are taken from the full manifest, this one has fraction {}",
            manifest.fraction
        )));
    }
    let mut keep = std::collections::HashSet::new();
    let mut counts = [0usize; 2];
    for label in 0..=1u8 {
        let mut ids: Vec<(u64, u64)> = manifest
            .entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| (rng::derive_seed(manifest.seed, &format!("subset/{}", e.sample_id)), e.sample_id))
            .collect();
        ids.sort_unstable();
        let take = (fraction * ids.len() as f64).floor() as usize;
        counts[label as usize] = take;
        keep.extend(ids.into_iter().take(take).map(|(_, id)| id));
    }
    Ok(DatasetManifest {
        fraction,
        n_normal: counts[0],
        n_abnormal: counts[1],
        entries: manifest
            .entries
            .iter()
            .filter(|e| keep.contains(&e.sample_id))
            .cloned()
            .collect(),
        ..manifest.clone()
    })
}

impl Dataset {
    pub fn size(&self) -> usize {
        self.manifest.size
    }

    pub fn subset(&self, fraction: f64) -> Result<Dataset> {
        let manifest = subset_fraction(&self.manifest, fraction)?;
        let ids: std::collections::HashSet<u64> = manifest.entries.iter().map(|e| e.sample_id).collect();
        let samples = self
            .samples
            .iter()
            .filter(|s| ids.contains(&s.sample_id))
            .cloned()
            .collect();
        Ok(Dataset { manifest, samples })
    }

    /// Label-free view used for distillation.
    pub fn images(&self) -> ImageSet {
        ImageSet {
            size: self.manifest.size,
            ids: self.samples.iter().map(|s| s.sample_id).collect(),
            images: self.samples.iter().map(|s| s.image.clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    /// Stack the samples at `indices` into an `(n, 3, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let refs: Vec<&[f32]> = indices.iter().map(|&i| self.samples[i].image.as_slice()).collect();
        Tensor::stack(item_shape(self.manifest.size), &refs).expect("uniform image size")
    }
}

fn item_shape(size: usize) -> Shape {
    Shape::new(1, CHANNELS, size, size)
}

/// Images without labels or masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    size: usize,
    ids: Vec<u64>,
    images: Vec<Vec<f32>>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn image(&self, index: usize) -> &[f32] {
        &self.images[index]
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let refs: Vec<&[f32]> = indices.iter().map(|&i| self.images[i].as_slice()).collect();
        Tensor::stack(item_shape(self.size), &refs).expect("uniform image size")
    }
}

// ---------------------------------------------------------------- manifest

fn fmt_hash(h: &Option<String>) -> &str {
    h.as_deref().unwrap_or("-")
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format = {MANIFEST_FORMAT}\nversion = {MANIFEST_VERSION}\nsplit = {}\nfraction = {}\nseed = {}\nsize = {}\nn_normal = {}\nn_abnormal = {}\n---\n",
            self.split, self.fraction, self.seed, self.size, self.n_normal, self.n_abnormal
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.sample_id,
                e.label,
                e.image,
                e.mask.as_deref().unwrap_or("-"),
                fmt_hash(&e.image_sha256),
                fmt_hash(&e.mask_sha256),
            ));
        }
        s
    }

    /// Parse the textual form. `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::format(path, format!("line {}: {msg}", line + 1));
        let mut header = std::collections::HashMap::new();
        let mut lines = text.lines().enumerate();
        let mut saw_separator = false;
        for (i, line) in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "---" {
                saw_separator = true;
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i, format!("expected `key = value`, got `{line}`")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
        if !saw_separator {
            return Err(Error::format(path, "missing `---` separator after the header"));
        }
        let get = |key: &str| -> Result<&String> {
            header
                .get(key)
                .ok_or_else(|| Error::format(path, format!("missing header key `{key}`")))
        };
        fn num<V: FromStr>(path: &Path, key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::format(path, format!("header key `{key}`: cannot parse `{v}`")))
        }
        if get("format")? != MANIFEST_FORMAT {
            return Err(Error::format(path, format!("not a {MANIFEST_FORMAT} manifest")));
        }
        let version: u32 = num(path, "version", get("version")?)?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {version}, expected {MANIFEST_VERSION}"),
            ));
        }
        let split: Split = get("split")?
            .parse()
            .map_err(|e: Error| Error::format(path, e.to_string()))?;
        let fraction: f64 = num(path, "fraction", get("fraction")?)?;
        check_fraction(fraction).map_err(|e| Error::format(path, e.to_string()))?;
        let seed: u64 = num(path, "seed", get("seed")?)?;
        let size: usize = num(path, "size", get("size")?)?;
        if size == 0 || size > MAX_DECODE_SIDE as usize {
            return Err(Error::format(path, format!("invalid image size {size}")));
        }
        let n_normal: usize = num(path, "n_normal", get("n_normal")?)?;
        let n_abnormal: usize = num(path, "n_abnormal", get("n_abnormal")?)?;

        let opt = |s: &str| (s != "-").then(|| s.to_string());
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(i, format!("expected 6 tab-separated fields, got {}", f.len())));
            }
            let sample_id: u64 = f[0].parse().map_err(|_| bad(i, format!("bad sample id `{}`", f[0])))?;
            let label: u8 = match f[1] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(i, format!("label must be 0 or 1, got `{other}`"))),
            };
            if !seen.insert(sample_id) {
                return Err(bad(i, format!("duplicate sample id {sample_id}")));
            }
            for p in [f[2], f[3]] {
                if p.is_empty() || p.starts_with('/') || p.split('/').any(|c| c == "..") {
                    return Err(bad(i, format!("file path `{p}` must be relative to the dataset")));
                }
            }
            entries.push(ManifestEntry {
                sample_id,
                label,
                image: f[2].to_string(),
                mask: opt(f[3]),
                image_sha256: opt(f[4]),
                mask_sha256: opt(f[5]),
            });
        }
        let counted = [0u8, 1].map(|l| entries.iter().filter(|e| e.label == l).count());
        if counted != [n_normal, n_abnormal] {
            return Err(Error::format(
                path,
                format!(
                    "header declares {n_normal} normal / {n_abnormal} abnormal samples, index lists {} / {}",
                    counted[0], counted[1]
                ),
            ));
        }
        Ok(DatasetManifest {
            split,
            fraction,
            seed,
            size,
            n_normal,
            n_abnormal,
            entries,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    DatasetManifest::parse(&text, &path)
}

// --------------------------------------------------------------------- png

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encode planar `(3, H, W)` values in `[0, 1]` as 8-bit RGB.
pub fn encode_rgb_png(image: &[f32], size: usize) -> Result<Vec<u8>> {
    let plane = size * size;
    let mut px = Vec::with_capacity(CHANNELS * plane);
    for i in 0..plane {
        for c in 0..CHANNELS {
            px.push((image[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode_png(&px, size, size, png::ColorType::Rgb, png::BitDepth::Eight)
}

pub fn encode_mask_png(mask: &[bool], size: usize) -> Result<Vec<u8>> {
    let row_bytes = size.div_ceil(8);
    let mut px = vec![0u8; row_bytes * size];
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                px[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode_png(&px, size, size, png::ColorType::Grayscale, png::BitDepth::One)
}

pub(crate) fn encode_png(
    data: &[u8],
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.set_compression(png::Compression::Balanced);
    let png_err = |e: png::EncodingError| Error::InvalidArgument(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

/// Decoded 8-bit pixels, interleaved, with the channel count.
struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let (w, h) = {
        let info = reader.info();
        (info.width, info.height)
    };
    if w == 0 || h == 0 || w > MAX_DECODE_SIDE || h > MAX_DECODE_SIDE {
        return Err(format!("unsupported dimensions {w}x{h}"));
    }
    let len = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; len];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("palette was not expanded".into()),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(info.line_size).take(height) {
        pixels.extend_from_slice(&row[..width * channels]);
    }
    Ok(Decoded {
        width,
        height,
        channels,
        pixels,
    })
}

/// Decode any 8-bit-expandable PNG into planar RGB `[0, 1]`. Gray images are
/// replicated across channels and alpha is dropped.
pub fn decode_rgb_png(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    let d = decode_png(bytes)?;
    let plane = d.width * d.height;
    let mut out = vec![0.0f32; CHANNELS * plane];
    for i in 0..plane {
        let p = &d.pixels[i * d.channels..(i + 1) * d.channels];
        for c in 0..CHANNELS {
            let v = if d.channels >= 3 { p[c] } else { p[0] };
            out[c * plane + i] = v as f32 / 255.0;
        }
    }
    Ok((d.width, d.height, out))
}

/// Decode a mask PNG; any nonzero gray level counts as lesion.
pub fn decode_mask_png(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<bool>), String> {
    let d = decode_png(bytes)?;
    let mask = d.pixels.chunks(d.channels).map(|p| p[0] != 0).collect();
    Ok((d.width, d.height, mask))
}

// ------------------------------------------------------------- save / load

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write the dataset and return the manifest with file hashes filled in.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let size = dataset.manifest.size;
    let mut manifest = dataset.manifest.clone();
    for (entry, sample) in manifest.entries.iter_mut().zip(&dataset.samples) {
        let img = encode_rgb_png(&sample.image, size)?;
        write_file(&dir.join(&entry.image), &img)?;
        entry.image_sha256 = Some(sha256_hex(&img));
        match (&entry.mask, &sample.lesion_mask) {
            (Some(rel), Some(mask)) => {
                let bytes = encode_mask_png(mask, size)?;
                write_file(&dir.join(rel), &bytes)?;
                entry.mask_sha256 = Some(sha256_hex(&bytes));
            }
            _ => {
                entry.mask = None;
                entry.mask_sha256 = None;
            }
        }
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, hash: &Option<String>, sample_id: u64) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::Sample {
        sample_id,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    if let Some(expected) = hash {
        let got = sha256_hex(&bytes);
        if !got.eq_ignore_ascii_case(expected) {
            return Err(Error::Sample {
                sample_id,
                msg: format!("checksum mismatch for {rel}: manifest {expected}, file {got}"),
            });
        }
    }
    Ok(bytes)
}

fn load_image(dir: &Path, entry: &ManifestEntry, size: usize) -> Result<Vec<f32>> {
    let id = entry.sample_id;
    let bytes = read_checked(dir, &entry.image, &entry.image_sha256, id)?;
    let (w, h, img) = decode_rgb_png(&bytes).map_err(|msg| Error::Sample {
        sample_id: id,
        msg: format!("{}: {msg}", entry.image),
    })?;
    if w != size || h != size {
        return Err(Error::Sample {
            sample_id: id,
            msg: format!("{}: image is {w}x{h}, manifest size is {size}", entry.image),
        });
    }
    Ok(img)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let size = manifest.size;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let id = entry.sample_id;
        let image = load_image(dir, entry, size)?;
        let lesion_mask = match &entry.mask {
            Some(rel) => {
                let bytes = read_checked(dir, rel, &entry.mask_sha256, id)?;
                let (w, h, mask) = decode_mask_png(&bytes).map_err(|msg| Error::Sample {
                    sample_id: id,
                    msg: format!("{rel}: {msg}"),
                })?;
                if w != size || h != size {
                    return Err(Error::Sample {
                        sample_id: id,
                        msg: format!("{rel}: mask is {w}x{h}, manifest size is {size}"),
                    });
                }
                if mask.iter().any(|&m| m) != (entry.label == 1) {
                    return Err(Error::Sample {
                        sample_id: id,
                        msg: format!("label {} disagrees with mask {rel}", entry.label),
                    });
                }
                Some(mask)
            }
            None => None,
        };
        samples.push(SyntheticSample {
            sample_id: id,
            label: entry.label,
            image,
            lesion_mask,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Manifest file holding the `fraction` subset of a full manifest.
pub fn subset_manifest_file(fraction: f64) -> String {
    if fraction == 1.0 {
        MANIFEST_FILE.to_string()
    } else {
        format!("{MANIFEST_FILE}.{fraction}")
    }
}

/// Write the nested fraction subsets of `manifest` next to it so that
/// later consumers can select a subset without reading labels.
pub fn write_subset_manifests(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    for f in ALLOWED_FRACTIONS.into_iter().filter(|&f| f < 1.0) {
        let sub = subset_fraction(manifest, f)?;
        write_file(&dir.join(subset_manifest_file(f)), sub.to_text().as_bytes())?;
    }
    Ok(())
}

/// Parse only what an images-only consumer needs: the header's format,
/// version and size, and each entry's id, image path and image hash. Label
/// and mask columns are skipped without being interpreted.
pub fn parse_image_index(text: &str, path: &Path) -> Result<(usize, Vec<ManifestEntry>)> {
    let mut size = None;
    let mut format_ok = false;
    let mut version_ok = false;
    let mut lines = text.lines().enumerate();
    for (_, line) in lines.by_ref() {
        let line = line.trim();
        if line == "---" {
            break;
        }
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "format" => format_ok = v.trim() == MANIFEST_FORMAT,
                "version" => version_ok = v.trim() == MANIFEST_VERSION.to_string(),
                "size" => size = v.trim().parse::<usize>().ok(),
                _ => {}
            }
        }
    }
    if !format_ok || !version_ok {
        return Err(Error::format(path, format!("not a version {MANIFEST_VERSION} {MANIFEST_FORMAT} manifest")));
    }
    let size = size
        .filter(|&s| s > 0 && s <= MAX_DECODE_SIDE as usize)
        .ok_or_else(|| Error::format(path, "missing or invalid `size`"))?;
    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::format(path, format!("line {}: expected 6 tab-separated fields", i + 1)));
        }
        let sample_id = f[0]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad sample id", i + 1)))?;
        if f[2].is_empty() || f[2].starts_with('/') || f[2].split('/').any(|c| c == "..") {
            return Err(Error::format(path, format!("line {}: image path must be relative", i + 1)));
        }
        entries.push(ManifestEntry {
            sample_id,
            label: 0,
            image: f[2].to_string(),
            mask: None,
            image_sha256: (f[4] != "-").then(|| f[4].to_string()),
            mask_sha256: None,
        });
    }
    Ok((size, entries))
}

/// Load only the images listed in `manifest_name` inside `dir`. Labels and
/// masks are never read.
pub fn load_images_from(dir: &Path, manifest_name: &str) -> Result<ImageSet> {
    let path = dir.join(manifest_name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (size, entries) = parse_image_index(&text, &path)?;
    let mut ids = Vec::with_capacity(entries.len());
    let mut images = Vec::with_capacity(entries.len());
    for entry in &entries {
        ids.push(entry.sample_id);
        images.push(load_image(dir, entry, size)?);
    }
    Ok(ImageSet { size, ids, images })
}

/// Images of the full manifest of `dir`.
pub fn load_images(dir: &Path) -> Result<ImageSet> {
    load_images_from(dir, MANIFEST_FILE)
}
