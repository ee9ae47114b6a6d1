//! Fidelity of a distilled student against its teacher, localization of
//! selection scores against lesion masks, and heatmap export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{Mode, ParameterizedModel};
use crate::data::{encode_png, ImageSet, CHANNELS};
use crate::error::{Error, Result};
use crate::explainer::{topk_indices, SelectionMap};
use crate::rng;
use crate::train::StudentPipeline;

/// Abnormal class; precision, recall and F1 refer to it.
pub const POSITIVE_CLASS: usize = 1;
/// Independent draws averaged by the random baseline.
pub const BASELINE_REPEATS: usize = 20;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouVariant {
    /// `|A ∩ B| / |A ∪ B|`.
    #[default]
    Standard,
    /// Twice the standard value; a perfect match scores 2.
    #[serde(rename = "paper_eq13")]
    Doubled,
}

impl fmt::Display for IouVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouVariant::Standard => "standard",
            IouVariant::Doubled => "paper_eq13",
        })
    }
}

impl FromStr for IouVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(IouVariant::Standard),
            "paper_eq13" => Ok(IouVariant::Doubled),
            _ => Err(Error::InvalidArgument(format!(
                "unknown IoU variant `{s}` (expected standard or paper_eq13)"
            ))),
        }
    }
}

/// How a selected `(c, h, w)` entry set becomes a pixel set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    /// A pixel is selected if any of its channels is.
    #[default]
    Any,
    /// A pixel is selected only if all of its channels are.
    All,
}

impl FromStr for ChannelReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(ChannelReduction::Any),
            "all" => Ok(ChannelReduction::All),
            _ => Err(Error::InvalidArgument(format!("unknown channel reduction `{s}`"))),
        }
    }
}

// ----------------------------------------------------------------- post-hoc

#[derive(Clone, Debug, PartialEq)]
pub struct PostHocReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_samples: usize,
    pub positive_class: usize,
}

impl PostHocReport {
    pub fn to_kv(&self, prefix: &str) -> String {
        format!(
            "{prefix}accuracy = {}\n{prefix}precision = {}\n{prefix}recall = {}\n{prefix}f1 = {}\n{prefix}n_samples = {}\n{prefix}positive_class = {}\n",
            self.accuracy, self.precision, self.recall, self.f1, self.n_samples, self.positive_class
        )
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Confusion-matrix metrics of `predicted` against `reference`.
pub fn classification_report(predicted: &[usize], reference: &[usize], positive_class: usize) -> Result<PostHocReport> {
    if predicted.is_empty() || predicted.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "need equally many predictions and references, got {} and {}",
            predicted.len(),
            reference.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &r) in predicted.iter().zip(reference) {
        correct += usize::from(p == r);
        match (p == positive_class, r == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PostHocReport {
        accuracy: ratio(correct, predicted.len()),
        precision,
        recall,
        f1,
        n_samples: predicted.len(),
        positive_class,
    })
}

/// Argmax predictions of a classifier over an image set.
pub fn predict_classes(images: &ImageSet, mut predict: impl FnMut(&crate::tensor::Tensor<f32>) -> Result<crate::tensor::Tensor<f32>>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let probs = predict(&images.batch(chunk))?;
        for r in 0..chunk.len() {
            out.push(argmax(probs.sample(r)));
        }
    }
    Ok(out)
}

pub fn teacher_predictions(teacher: &ParameterizedModel<f32>, images: &ImageSet) -> Result<Vec<usize>> {
    predict_classes(images, |x| Ok(teacher.forward(x, Mode::Eval)?.output().clone()))
}

/// Student pipeline scored against the teacher's argmax labels.
pub fn posthoc_metrics(pipeline: &StudentPipeline, teacher: &ParameterizedModel<f32>, test: &ImageSet) -> Result<PostHocReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let reference = teacher_predictions(teacher, test)?;
    let predicted = predict_classes(test, |x| pipeline.predict(x))?;
    classification_report(&predicted, &reference, POSITIVE_CLASS)
}

// ---------------------------------------------------------------------- IoU

/// Importance scores over `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Scores {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * height * width || values.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "scores",
                expected: format!("{channels}x{height}x{width}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Scores {
            channels,
            height,
            width,
            values,
        })
    }
}

impl From<&SelectionMap<f32>> for Scores {
    fn from(m: &SelectionMap<f32>) -> Self {
        let (c, h, w) = m.shape();
        Scores {
            channels: c,
            height: h,
            width: w,
            values: m.values().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouOutcome {
    pub value: f64,
    /// Selection and lesion were both empty; `value` is then 0.
    pub empty_union: bool,
}

fn iou_from_sets(selected: &[bool], mask: &[bool], variant: IouVariant) -> IouOutcome {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&s, &m) in selected.iter().zip(mask) {
        inter += usize::from(s && m);
        union += usize::from(s || m);
    }
    if union == 0 {
        return IouOutcome {
            value: 0.0,
            empty_union: true,
        };
    }
    let standard = inter as f64 / union as f64;
    IouOutcome {
        value: match variant {
            IouVariant::Standard => standard,
            IouVariant::Doubled => 2.0 * standard,
        },
        empty_union: false,
    }
}

/// Pixels covered by the `k` highest-scoring entries.
pub fn selected_pixels(scores: &Scores, k: usize, reduction: ChannelReduction) -> Result<Vec<bool>> {
    let plane = scores.height * scores.width;
    let mut hits = vec![0usize; plane];
    for i in topk_indices(&scores.values, k)? {
        hits[i % plane] += 1;
    }
    Ok(hits
        .into_iter()
        .map(|h| match reduction {
            ChannelReduction::Any => h > 0,
            ChannelReduction::All => h == scores.channels,
        })
        .collect())
}

fn check_mask(scores: &Scores, mask: &[bool]) -> Result<()> {
    if mask.len() != scores.height * scores.width {
        return Err(Error::ShapeMismatch {
            context: "lesion mask",
            expected: format!("{}x{}", scores.height, scores.width),
            got: format!("{} pixels", mask.len()),
        });
    }
    Ok(())
}

/// IoU between the top-`k` selection and the lesion mask.
pub fn iou_topk(
    scores: &Scores,
    mask: &[bool],
    k: usize,
    variant: IouVariant,
    reduction: ChannelReduction,
) -> Result<IouOutcome> {
    check_mask(scores, mask)?;
    Ok(iou_from_sets(&selected_pixels(scores, k, reduction)?, mask, variant))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub variant: IouVariant,
    pub k_grid: Vec<usize>,
    /// Mean IoU per grid entry.
    pub per_k: Vec<f64>,
    /// Mean IoU with `K` equal to each image's lesion size.
    pub lesion_size: f64,
    pub n_images: usize,
}

impl IouReport {
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = format!(
            "{prefix}iou_variant = {}\n{prefix}iou_images = {}\n{prefix}iou_lesion_size = {}\n",
            self.variant, self.n_images, self.lesion_size
        );
        for (k, v) in self.k_grid.iter().zip(&self.per_k) {
            s.push_str(&format!("{prefix}iou_top{k} = {v}\n"));
        }
        s
    }
}

/// `k * (H/8) * (W/8)` for `k = 1..=6`.
pub fn default_k_grid(height: usize, width: usize) -> Vec<usize> {
    (1..=6).map(|k| k * (height / 8) * (width / 8)).collect()
}

fn masked_pairs<'a>(scores: &'a [Scores], masks: &[&'a [bool]]) -> Result<Vec<(&'a Scores, &'a [bool])>> {
    if scores.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score maps for {} masks",
            scores.len(),
            masks.len()
        )));
    }
    let pairs: Vec<_> = scores
        .iter()
        .zip(masks.iter().copied())
        .filter(|(_, m)| m.iter().any(|&b| b))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no images with a non-empty lesion mask".into()));
    }
    for (s, m) in &pairs {
        check_mask(s, m)?;
    }
    Ok(pairs)
}

fn lesion_size(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Mean IoU per `K` over images with non-empty masks, plus the
/// lesion-size IoU.
pub fn iou_curve(
    scores: &[Scores],
    masks: &[&[bool]],
    k_grid: &[usize],
    variant: IouVariant,
    reduction: ChannelReduction,
) -> Result<IouReport> {
    let pairs = masked_pairs(scores, masks)?;
    let n = pairs.len() as f64;
    let mut per_k = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let mut sum = 0.0;
        for (s, m) in &pairs {
            sum += iou_topk(s, m, k, variant, reduction)?.value;
        }
        per_k.push(sum / n);
    }
    Ok(IouReport {
        variant,
        k_grid: k_grid.to_vec(),
        per_k,
        lesion_size: iou_at_lesion_size(scores, masks, variant, reduction)?,
        n_images: pairs.len(),
    })
}

/// Mean IoU with each image's `K` set to its lesion pixel count.
pub fn iou_at_lesion_size(
    scores: &[Scores],
    masks: &[&[bool]],
    variant: IouVariant,
    reduction: ChannelReduction,
) -> Result<f64> {
    let pairs = masked_pairs(scores, masks)?;
    let mut sum = 0.0;
    for (s, m) in &pairs {
        sum += iou_topk(s, m, lesion_size(m), variant, reduction)?.value;
    }
    Ok(sum / pairs.len() as f64)
}

fn random_pixels(seed: u64, image: usize, repeat: usize, plane: usize, k: usize) -> Vec<bool> {
    let mut r = rng::stream(seed, &format!("baseline/{image}/{repeat}/{k}"));
    let mut sel = vec![false; plane];
    for i in rand::seq::index::sample(&mut r, plane, k.min(plane)) {
        sel[i] = true;
    }
    sel
}

/// IoU of uniformly random pixel selections, averaged over
/// [`BASELINE_REPEATS`] draws per image.
pub fn random_selection_baseline(masks: &[&[bool]], k_grid: &[usize], seed: u64, variant: IouVariant) -> Result<IouReport> {
    let masks: Vec<&[bool]> = masks.iter().copied().filter(|m| m.iter().any(|&b| b)).collect();
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no images with a non-empty lesion mask".into()));
    }
    let mean_over = |k_of: &dyn Fn(&[bool]) -> usize| -> f64 {
        let mut sum = 0.0;
        for (i, m) in masks.iter().enumerate() {
            let k = k_of(m);
            for r in 0..BASELINE_REPEATS {
                sum += iou_from_sets(&random_pixels(seed, i, r, m.len(), k), m, variant).value;
            }
        }
        sum / (masks.len() * BASELINE_REPEATS) as f64
    };
    let per_k = k_grid.iter().map(|&k| mean_over(&|_| k)).collect();
    Ok(IouReport {
        variant,
        k_grid: k_grid.to_vec(),
        per_k,
        lesion_size: mean_over(&lesion_size),
        n_images: masks.len(),
    })
}

// ------------------------------------------------------------------ heatmap

/// Fixed blue-cyan-yellow-red ramp for `t` in `[0, 1]`.
pub fn color_ramp(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 4] = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let t = t.clamp(0.0, 1.0) * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f32;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `{stem}_heatmap.png` (channel-max scores as gray) and
/// `{stem}_overlay.png` (scores blended onto the image) into `dir`.
pub fn export_heatmap(selection: &SelectionMap<f32>, image: &[f32], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let (c, h, w) = selection.shape();
    if c != CHANNELS || image.len() != c * h * w {
        return Err(Error::ShapeMismatch {
            context: "export_heatmap",
            expected: format!("{CHANNELS}x{h}x{w} image"),
            got: format!("{} values for {c} channels", image.len()),
        });
    }
    let heat = selection.channel_max();
    let gray: Vec<u8> = heat.iter().map(|&v| to_u8(v)).collect();
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for (i, &t) in heat.iter().enumerate() {
        let color = color_ramp(t);
        let a = 0.5 * t;
        for ch in 0..CHANNELS {
            rgb.push(to_u8((1.0 - a) * image[ch * plane + i] + a * color[ch]));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let heat_path = dir.join(format!("{stem}_heatmap.png"));
    let overlay_path = dir.join(format!("{stem}_overlay.png"));
    let heat_png = encode_png(&gray, w, h, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    let overlay_png = encode_png(&rgb, w, h, png::ColorType::Rgb, png::BitDepth::Eight)?;
    fs::write(&heat_path, heat_png).map_err(|e| Error::io(&heat_path, e))?;
    fs::write(&overlay_path, overlay_png).map_err(|e| Error::io(&overlay_path, e))?;
    Ok((heat_path, overlay_path))
}

/// Line-oriented table with one row per named IoU report.
pub fn iou_table(rows: &[(&str, &IouReport)]) -> String {
    let Some((_, first)) = rows.first() else { return String::new() };
    let mut s = format!("{:<16}{:>12}", "source", "lesion_size");
    for k in &first.k_grid {
        s.push_str(&format!("{:>10}", format!("top{k}")));
    }
    s.push('\n');
    for (name, r) in rows {
        s.push_str(&format!("{name:<16}{:>12.4}", r.lesion_size));
        for v in &r.per_k {
            s.push_str(&format!("{v:>10.4}"));
        }
        s.push('\n');
    }
    s
}
