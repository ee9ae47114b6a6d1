//! Teacher pretraining and joint explainer + student distillation.
//!
//! Both loops share the same schedule: epochs of seeded shuffled batches,
//! an optional step cap, and an optional plateau stop on the epoch-mean
//! loss. All trainable state lives in one struct that round-trips through
//! a checkpoint, so an interrupted run resumes bit-exactly.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{
    build_explainer, build_mu_between, build_student, build_teacher, forward_with_taps, ArchConfig,
    ExplainerWidths, Family, Mode, ParameterizedModel, Seeds, STUDENT_WIDTHS, TAP_TAGS, TEACHER_WIDTHS,
};
use crate::data::{Dataset, ImageSet, CHANNELS};
use crate::error::{Error, Result};
use crate::explainer::{compose_selection, simplify_batch, simplify_batch_backward, SelectionMap};
use crate::losses::{
    clamp_prob, gaussian_nll, output_distill_grad_logits, output_distill_loss, DistillLossTerms, VarianceParams,
    DEFAULT_EPSILON, DEFAULT_LAMBDA,
};
use crate::rng;
use crate::tensor::{Shape, Tensor};

pub use checkpoint::{CheckpointFile, CheckpointHeader, CheckpointKind, NamedTensor};
pub use optim::{Adam, AdamHyper, EarlyStop};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Output and intermediate losses, explainer in front of the student.
    #[default]
    MedTex,
    /// Output loss only, explainer in front of the student.
    MedEx,
    /// Output loss only, student on raw images.
    StudentOnly,
}

impl DistillMode {
    pub const ALL: [DistillMode; 3] = [DistillMode::MedTex, DistillMode::MedEx, DistillMode::StudentOnly];

    pub fn uses_explainer(self) -> bool {
        self != DistillMode::StudentOnly
    }

    pub fn uses_intermediate(self) -> bool {
        self == DistillMode::MedTex
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMode::MedTex => "med_tex",
            DistillMode::MedEx => "med_ex",
            DistillMode::StudentOnly => "student_only",
        })
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "med_tex" => Ok(DistillMode::MedTex),
            "med_ex" => Ok(DistillMode::MedEx),
            "student_only" => Ok(DistillMode::StudentOnly),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (expected med_tex, med_ex or student_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Upper bound on epochs.
    pub epochs: u64,
    /// Upper bound on optimizer steps; 0 means no bound.
    pub max_steps: u64,
    pub seed: u64,
    pub mode: DistillMode,
    /// Variance floor of the intermediate likelihood.
    pub epsilon: f64,
    pub image_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub early_stop: bool,
    pub patience: u64,
    pub min_delta: f64,
    pub teacher_widths: [usize; 4],
    pub student_widths: [usize; 4],
    /// Explainer widths are the reference widths divided by this.
    pub explainer_divisor: usize,
    /// When false the adapters stay at their initialization.
    pub optimize_mu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            lambda: DEFAULT_LAMBDA,
            epochs: 30,
            max_steps: 0,
            seed: 0,
            mode: DistillMode::MedTex,
            epsilon: DEFAULT_EPSILON,
            image_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            early_stop: true,
            patience: 10,
            min_delta: 1e-4,
            teacher_widths: TEACHER_WIDTHS,
            student_widths: STUDENT_WIDTHS,
            explainer_divisor: 8,
            optimize_mu: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("either epochs or max_steps must be positive".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}", i64::MAX));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam moments must lie in [0, 1) and adam_epsilon be positive".into());
        }
        if self.explainer_divisor == 0 {
            return bad("explainer_divisor must be at least 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn explainer_widths(&self) -> ExplainerWidths {
        ExplainerWidths::scaled(self.explainer_divisor)
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.image_size, self.image_size)
    }
}

/// Position in the epoch/batch schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub epoch_loss_sum: f64,
    pub early_stop: EarlyStop,
    pub finished: bool,
}

/// Sample order of one epoch, seeded by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("shuffle/{epoch}")));
    order
}

struct Schedule {
    cached: Option<(u64, Vec<usize>)>,
}

impl Schedule {
    fn new() -> Self {
        Schedule { cached: None }
    }

    fn next_batch(&mut self, p: &Progress, cfg: &TrainConfig, n: usize) -> Vec<usize> {
        if self.cached.as_ref().map(|c| c.0) != Some(p.epoch) {
            self.cached = Some((p.epoch, epoch_order(cfg.seed, p.epoch, n)));
        }
        let order = &self.cached.as_ref().expect("cached order").1;
        let start = p.batch_in_epoch as usize * cfg.batch_size;
        order[start..(start + cfg.batch_size).min(n)].to_vec()
    }
}

impl Progress {
    /// Account for a finished step with loss `loss`.
    fn advance(&mut self, loss: f64, cfg: &TrainConfig, n: usize) {
        let batches = n.div_ceil(cfg.batch_size) as u64;
        self.step += 1;
        self.batch_in_epoch += 1;
        self.epoch_loss_sum += loss;
        if self.batch_in_epoch == batches {
            let mean = self.epoch_loss_sum / batches as f64;
            self.epoch += 1;
            self.batch_in_epoch = 0;
            self.epoch_loss_sum = 0.0;
            let plateau = self.early_stop.observe(mean, cfg.patience, cfg.min_delta);
            if (cfg.early_stop && plateau) || (cfg.epochs > 0 && self.epoch >= cfg.epochs) {
                self.finished = true;
            }
        }
        if cfg.max_steps > 0 && self.step >= cfg.max_steps {
            self.finished = true;
        }
    }
}

// ----------------------------------------------------------------- metrics

/// `step l_output l_i1 l_i2 l_i3 l_i4 total`, tab separated, `n/a` for
/// absent intermediate terms.
pub fn format_metrics_line(step: u64, terms: &DistillLossTerms) -> String {
    let li = match &terms.l_intermediate {
        Some(v) => v.map(|x| x.to_string()),
        None => std::array::from_fn(|_| "n/a".to_string()),
    };
    format!(
        "{step}\t{}\t{}\t{}\t{}\t{}\t{}",
        terms.l_output, li[0], li[1], li[2], li[3], terms.total
    )
}

/// Inverse of [`format_metrics_line`]; `lambda` is not stored in the line.
pub fn parse_metrics_line(line: &str) -> Result<(u64, DistillLossTerms)> {
    let bad = || Error::InvalidArgument(format!("malformed metrics line `{line}`"));
    let f: Vec<&str> = line.trim_end().split('\t').collect();
    if f.len() != 7 {
        return Err(bad());
    }
    let step = f[0].parse().map_err(|_| bad())?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let l_output = num(f[1])?;
    let l_intermediate = if f[2..6].iter().all(|s| *s == "n/a") {
        None
    } else {
        let mut v = [0.0; 4];
        for (d, s) in v.iter_mut().zip(&f[2..6]) {
            *d = num(s)?;
        }
        Some(v)
    };
    let total = num(f[6])?;
    Ok((
        step,
        DistillLossTerms {
            l_output,
            l_intermediate,
            lambda: f64::NAN,
            total,
        },
    ))
}

/// Per-step loss record, mirrored to a file when a path is given.
#[derive(Debug)]
pub struct MetricsLog {
    file: Option<(PathBuf, File)>,
    offset: u64,
    pub history: Vec<(u64, DistillLossTerms)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            file: None,
            offset: 0,
            history: Vec::new(),
        }
    }

    /// Start a fresh file.
    pub fn create(path: &Path) -> Result<Self> {
        Self::resume(path, 0)
    }

    /// Continue a file, dropping anything written after `offset` bytes.
    pub fn resume(path: &Path, offset: u64) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(offset == 0)
            .write(true)
            .read(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len < offset {
            return Err(Error::format(
                path,
                format!("metrics file has {len} bytes, checkpoint expects at least {offset}"),
            ));
        }
        file.set_len(offset).map_err(|e| Error::io(path, e))?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            file: Some((path.to_path_buf(), file)),
            offset,
            history: Vec::new(),
        })
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn record(&mut self, step: u64, terms: &DistillLossTerms) -> Result<()> {
        let line = format_metrics_line(step, terms) + "\n";
        if let Some((path, file)) = &mut self.file {
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        self.offset += line.len() as u64;
        self.history.push((step, terms.clone()));
        Ok(())
    }
}

fn check_finite(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

// ---------------------------------------------------------- model <-> file

/// Hex sha256 over parameter names and bit patterns.
pub fn params_hash(model: &ParameterizedModel<f32>) -> String {
    let mut h = Sha256::new();
    for p in model.params().iter().chain(model.buffers()) {
        h.update(p.name.as_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn push_model(tensors: &mut Vec<NamedTensor>, model: &ParameterizedModel<f32>) {
    let name = &model.spec().name;
    for p in model.params() {
        tensors.push(NamedTensor {
            name: format!("{name}/{}", p.name),
            data: p.data.clone(),
        });
    }
    for b in model.buffers() {
        tensors.push(NamedTensor {
            name: format!("{name}/buffer/{}", b.name),
            data: b.data.clone(),
        });
    }
}

fn push_adam(tensors: &mut Vec<NamedTensor>, adam: &Adam) {
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        tensors.push(NamedTensor {
            name: format!("adam/m/{i}"),
            data: m.clone(),
        });
        tensors.push(NamedTensor {
            name: format!("adam/v/{i}"),
            data: v.clone(),
        });
    }
}

fn fill(path_label: &str, dst: &mut [f32], src: Option<&[f32]>) -> Result<()> {
    match src {
        Some(s) if s.len() == dst.len() => {
            dst.copy_from_slice(s);
            Ok(())
        }
        Some(s) => Err(Error::Format {
            path: PathBuf::from(path_label),
            msg: format!("tensor has {} values, model expects {}", s.len(), dst.len()),
        }),
        None => Err(Error::Format {
            path: PathBuf::from(path_label),
            msg: "tensor missing from checkpoint".into(),
        }),
    }
}

fn restore_model(file: &CheckpointFile, config: &ArchConfig) -> Result<ParameterizedModel<f32>> {
    let mut model = ParameterizedModel::new(config.build_spec()?, 0)?;
    let name = config.name.clone();
    for p in model.params_mut() {
        let key = format!("{name}/{}", p.name);
        fill(&key, &mut p.data, file.tensor(&key))?;
    }
    for b in model.buffers_mut() {
        let key = format!("{name}/buffer/{}", b.name);
        fill(&key, &mut b.data, file.tensor(&key))?;
    }
    Ok(model)
}

fn restore_adam(file: &CheckpointFile, sizes: &[usize]) -> Result<Adam> {
    let h = &file.header;
    let mut adam = Adam::new(h.optimizer, sizes);
    adam.t = h.optimizer_steps;
    for i in 0..sizes.len() {
        fill(&format!("adam/m/{i}"), &mut adam.m[i], file.tensor(&format!("adam/m/{i}")))?;
        fill(&format!("adam/v/{i}"), &mut adam.v[i], file.tensor(&format!("adam/v/{i}")))?;
    }
    Ok(adam)
}

fn find_arch<'a>(file: &'a CheckpointFile, family: Family, expected: &ArchConfig) -> Result<&'a ArchConfig> {
    match file.header.arch.iter().find(|a| a.family == family) {
        Some(a) => Ok(a),
        None => {
            let found = file.header.arch.first().cloned().unwrap_or_else(|| ArchConfig {
                name: "<none>".into(),
                family,
                input_shape: [0; 3],
                widths: Vec::new(),
                num_classes: 0,
            });
            Err(Error::ArchMismatch {
                expected: expected.name.clone(),
                found: found.name.clone(),
                diff: expected.diff(&found),
            })
        }
    }
}

fn progress_from(h: &CheckpointHeader) -> Progress {
    Progress {
        step: h.step,
        epoch: h.epoch,
        batch_in_epoch: h.batch_in_epoch,
        epoch_loss_sum: h.epoch_loss_sum,
        early_stop: h.early_stop,
        finished: h.finished,
    }
}

fn header_for(
    kind: CheckpointKind,
    progress: &Progress,
    metrics_offset: u64,
    teacher_sha256: String,
    adam: &Adam,
    config: &TrainConfig,
    arch: Vec<ArchConfig>,
) -> CheckpointHeader {
    CheckpointHeader {
        kind,
        step: progress.step,
        epoch: progress.epoch,
        batch_in_epoch: progress.batch_in_epoch,
        epoch_loss_sum: progress.epoch_loss_sum,
        metrics_offset,
        finished: progress.finished,
        teacher_sha256,
        optimizer: adam.hyper,
        optimizer_steps: adam.t,
        early_stop: progress.early_stop,
        config: config.clone(),
        arch,
    }
}

/// Teacher config that `config` would build; used to report mismatches.
pub fn teacher_config(config: &TrainConfig) -> Result<ArchConfig> {
    Ok(build_teacher::<f32>(config.input_shape(), NUM_CLASSES, config.teacher_widths, 0)?
        .spec()
        .config())
}

/// Load the frozen teacher of a teacher checkpoint. A checkpoint of any
/// other model fails with an architecture mismatch.
pub fn load_teacher(path: &Path) -> Result<ParameterizedModel<f32>> {
    let file = CheckpointFile::load(path)?;
    let expected = teacher_config(&file.header.config)?;
    let found = find_arch(&file, Family::Teacher, &expected)?;
    if file.header.kind != CheckpointKind::Teacher {
        return Err(Error::ArchMismatch {
            expected: expected.name.clone(),
            found: found.name.clone(),
            diff: expected.diff(found),
        });
    }
    let mut model = restore_model(&file, found)?;
    model.trainable = false;
    Ok(model)
}

/// Like [`load_teacher`], additionally requiring an exact architecture.
pub fn load_teacher_as(path: &Path, expected: &ArchConfig) -> Result<ParameterizedModel<f32>> {
    let model = load_teacher(path)?;
    let found = model.spec().config();
    if &found != expected {
        return Err(Error::ArchMismatch {
            expected: expected.name.clone(),
            found: found.name.clone(),
            diff: expected.diff(&found),
        });
    }
    Ok(model)
}

// ------------------------------------------------------------- pretraining

/// Supervised cross-entropy training of the teacher on labeled data.
pub struct TeacherTrainer<'a> {
    data: &'a Dataset,
    labels: Vec<usize>,
    pub config: TrainConfig,
    pub model: ParameterizedModel<f32>,
    pub adam: Adam,
    pub progress: Progress,
    pub log: MetricsLog,
    schedule: Schedule,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig, log: MetricsLog) -> Result<Self> {
        config.validate()?;
        check_image_size(data.size(), &config)?;
        let model = build_teacher(config.input_shape(), NUM_CLASSES, config.teacher_widths, config.seed)?;
        let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        Ok(TeacherTrainer {
            labels: data.labels(),
            data,
            adam: Adam::new(config.adam(), &sizes),
            config,
            model,
            progress: Progress::default(),
            log,
            schedule: Schedule::new(),
        })
    }

    pub fn resume(data: &'a Dataset, file: &CheckpointFile, log: MetricsLog) -> Result<Self> {
        let config = file.header.config.clone();
        let expected = teacher_config(&config)?;
        let arch = find_arch(file, Family::Teacher, &expected)?;
        let model = restore_model(file, arch)?;
        let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        check_image_size(data.size(), &config)?;
        Ok(TeacherTrainer {
            labels: data.labels(),
            data,
            adam: restore_adam(file, &sizes)?,
            config,
            model,
            progress: progress_from(&file.header),
            log,
            schedule: Schedule::new(),
        })
    }

    /// One optimizer step; `None` once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<f64>> {
        if self.progress.finished {
            return Ok(None);
        }
        let n = self.labels.len();
        let idx = self.schedule.next_batch(&self.progress, &self.config, n);
        let x = self.data.batch(&idx);
        let trace = self.model.forward(&x, Mode::Train)?;
        let probs = trace.output();
        let inv_n = 1.0 / idx.len() as f32;
        let mut grad = probs.clone();
        let mut loss = 0.0f64;
        for (row, &i) in idx.iter().enumerate() {
            let y = self.labels[i];
            loss -= clamp_prob(probs.sample(row)[y] as f64).ln();
            let g = grad.sample_mut(row);
            g[y] -= 1.0;
            g.iter_mut().for_each(|v| *v *= inv_n);
        }
        loss /= idx.len() as f64;
        let step = self.progress.step + 1;
        check_finite(step, loss)?;
        let seeds = Seeds {
            output: Some(grad),
            output_is_logits: true,
            ..Seeds::default()
        };
        let (_, grads) = self.model.backward(&trace, seeds, false)?;
        let params = self.model.params_mut().iter_mut().map(|p| p.data.as_mut_slice()).collect();
        self.adam.step(params, &grads);
        self.model.update_running_stats(&trace);
        self.log.record(step, &DistillLossTerms::new(loss, None, 0.0))?;
        self.progress.advance(loss, &self.config, n);
        Ok(Some(loss))
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn checkpoint(&self) -> CheckpointFile {
        let mut tensors = Vec::new();
        push_model(&mut tensors, &self.model);
        push_adam(&mut tensors, &self.adam);
        CheckpointFile {
            header: header_for(
                CheckpointKind::Teacher,
                &self.progress,
                self.log.offset(),
                String::new(),
                &self.adam,
                &self.config,
                vec![self.model.spec().config()],
            ),
            tensors,
        }
    }

    pub fn into_model(self) -> ParameterizedModel<f32> {
        let mut m = self.model;
        m.trainable = false;
        m
    }
}

/// Train a teacher to completion and return it frozen.
pub fn pretrain_teacher(train: &Dataset, config: &TrainConfig) -> Result<ParameterizedModel<f32>> {
    let mut t = TeacherTrainer::new(train, config.clone(), MetricsLog::in_memory())?;
    t.run()?;
    Ok(t.into_model())
}

fn check_image_size(size: usize, config: &TrainConfig) -> Result<()> {
    if size != config.image_size {
        return Err(Error::InvalidArgument(format!(
            "dataset images are {size}x{size}, config image_size is {}",
            config.image_size
        )));
    }
    Ok(())
}

// ------------------------------------------------------------ distillation

/// Teacher outputs on the unmasked training images, computed once.
struct TeacherTargets {
    probs: Vec<Vec<f32>>,
    /// `taps[layer][image]`; empty without intermediate distillation.
    taps: Vec<Vec<Vec<f32>>>,
    tap_shapes: Vec<Shape>,
}

const TARGET_BATCH: usize = 16;

impl TeacherTargets {
    fn compute(teacher: &ParameterizedModel<f32>, images: &ImageSet, with_taps: bool) -> Result<Self> {
        let n = images.len();
        let mut probs = Vec::with_capacity(n);
        let mut taps: Vec<Vec<Vec<f32>>> = if with_taps { (0..4).map(|_| Vec::with_capacity(n)).collect() } else { Vec::new() };
        let mut tap_shapes = Vec::new();
        for start in (0..n).step_by(TARGET_BATCH) {
            let idx: Vec<usize> = (start..(start + TARGET_BATCH).min(n)).collect();
            let out = forward_with_taps(teacher, &images.batch(&idx))?;
            for r in 0..idx.len() {
                probs.push(out.probs.sample(r).to_vec());
            }
            if with_taps {
                tap_shapes.clear();
                for (layer, tag) in TAP_TAGS.iter().enumerate() {
                    let t = out.tap(tag).expect("classifier tap");
                    tap_shapes.push(t.shape().with_batch(1));
                    for r in 0..idx.len() {
                        taps[layer].push(t.sample(r).to_vec());
                    }
                }
            }
        }
        Ok(TeacherTargets { probs, taps, tap_shapes })
    }

    fn probs(&self, idx: &[usize]) -> Tensor<f32> {
        let rows: Vec<&[f32]> = idx.iter().map(|&i| self.probs[i].as_slice()).collect();
        Tensor::stack(Shape::new(1, NUM_CLASSES, 1, 1), &rows).expect("probability rows")
    }

    fn tap(&self, layer: usize, idx: &[usize]) -> Tensor<f32> {
        let rows: Vec<&[f32]> = idx.iter().map(|&i| self.taps[layer][i].as_slice()).collect();
        Tensor::stack(self.tap_shapes[layer], &rows).expect("tap rows")
    }
}

/// Trainable state of a distillation run.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub config: TrainConfig,
    pub student: ParameterizedModel<f32>,
    pub explainer: Option<ParameterizedModel<f32>>,
    pub mus: Vec<ParameterizedModel<f32>>,
    pub alpha: VarianceParams<f32>,
    pub adam: Adam,
    pub progress: Progress,
    pub teacher_sha256: String,
}

impl DistillState {
    pub fn new(teacher: &ParameterizedModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mode = config.mode;
        let input = config.input_shape();
        let teacher_cfg = teacher.spec().config();
        if teacher_cfg.family != Family::Teacher {
            let expected = teacher_config(&config)?;
            return Err(Error::ArchMismatch {
                expected: expected.name.clone(),
                found: teacher_cfg.name.clone(),
                diff: expected.diff(&teacher_cfg),
            });
        }
        if teacher_cfg.input_shape != [input.0, input.1, input.2] {
            return Err(Error::InvalidArgument(format!(
                "teacher expects input {:?}, config image_size is {}",
                teacher_cfg.input_shape, config.image_size
            )));
        }
        let teacher_widths: [usize; 4] = teacher.spec().widths.as_slice().try_into().map_err(|_| {
            Error::InvalidArgument("teacher must have four blocks".into())
        })?;
        let student = build_student(input, NUM_CLASSES, config.student_widths, config.seed)?;
        let explainer = if mode.uses_explainer() {
            Some(build_explainer(input, config.explainer_widths(), config.seed)?)
        } else {
            None
        };
        let mus = if mode.uses_intermediate() {
            (1..=4)
                .map(|i| build_mu_between(i, config.student_widths, teacher_widths, config.seed))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let alpha_channels: Vec<usize> = if mode.uses_intermediate() { teacher_widths.to_vec() } else { Vec::new() };
        let alpha = VarianceParams::new(&alpha_channels, config.epsilon);
        let mut state = DistillState {
            adam: Adam::new(config.adam(), &[]),
            config,
            student,
            explainer,
            mus,
            alpha,
            progress: Progress::default(),
            teacher_sha256: params_hash(teacher),
        };
        state.adam = Adam::new(state.config.adam(), &state.slot_sizes());
        Ok(state)
    }

    fn optimized_mus(&self) -> bool {
        self.config.optimize_mu
    }

    /// Sizes of the optimizer slots in update order: student, explainer,
    /// adapters (when optimized), variance parameters.
    fn slot_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.student.params().iter().map(|p| p.data.len()).collect();
        if let Some(e) = &self.explainer {
            sizes.extend(e.params().iter().map(|p| p.data.len()));
        }
        if self.optimized_mus() {
            for mu in &self.mus {
                sizes.extend(mu.params().iter().map(|p| p.data.len()));
            }
        }
        sizes.extend(self.alpha.alpha.iter().map(Vec::len));
        sizes
    }

    fn slots_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = self.student.params_mut().iter_mut().map(|p| p.data.as_mut_slice()).collect();
        if let Some(e) = &mut self.explainer {
            out.extend(e.params_mut().iter_mut().map(|p| p.data.as_mut_slice()));
        }
        if self.config.optimize_mu {
            for mu in &mut self.mus {
                out.extend(mu.params_mut().iter_mut().map(|p| p.data.as_mut_slice()));
            }
        }
        out.extend(self.alpha.alpha.iter_mut().map(|a| a.as_mut_slice()));
        out
    }

    fn arch_configs(&self) -> Vec<ArchConfig> {
        let mut v = vec![self.student.spec().config()];
        if let Some(e) = &self.explainer {
            v.push(e.spec().config());
        }
        v.extend(self.mus.iter().map(|m| m.spec().config()));
        v
    }

    pub fn checkpoint(&self, metrics_offset: u64) -> CheckpointFile {
        let mut tensors = Vec::new();
        push_model(&mut tensors, &self.student);
        if let Some(e) = &self.explainer {
            push_model(&mut tensors, e);
        }
        for mu in &self.mus {
            push_model(&mut tensors, mu);
        }
        for (i, a) in self.alpha.alpha.iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("alpha/{}", i + 1),
                data: a.clone(),
            });
        }
        push_adam(&mut tensors, &self.adam);
        CheckpointFile {
            header: header_for(
                CheckpointKind::Distill,
                &self.progress,
                metrics_offset,
                self.teacher_sha256.clone(),
                &self.adam,
                &self.config,
                self.arch_configs(),
            ),
            tensors,
        }
    }

    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self> {
        let h = &file.header;
        let config = h.config.clone();
        let expected_student = build_student::<f32>(config.input_shape(), NUM_CLASSES, config.student_widths, 0)?
            .spec()
            .config();
        let student_arch = find_arch(file, Family::Student, &expected_student)?;
        if h.kind != CheckpointKind::Distill {
            return Err(Error::ArchMismatch {
                expected: expected_student.name.clone(),
                found: student_arch.name.clone(),
                diff: expected_student.diff(student_arch),
            });
        }
        let student = restore_model(file, student_arch)?;
        let explainer = match h.arch.iter().find(|a| a.family == Family::Explainer) {
            Some(a) => Some(restore_model(file, a)?),
            None => None,
        };
        if explainer.is_some() != config.mode.uses_explainer() {
            return Err(Error::format(
                "checkpoint",
                format!("mode {} does not match the stored models", config.mode),
            ));
        }
        let mus = h
            .arch
            .iter()
            .filter(|a| a.family == Family::Mu)
            .map(|a| restore_model(file, a))
            .collect::<Result<Vec<_>>>()?;
        let mut alpha = VarianceParams::new(&[], config.epsilon);
        for (i, mu) in mus.iter().enumerate() {
            let c = mu.spec().widths[2];
            let mut a = vec![0.0; c];
            let key = format!("alpha/{}", i + 1);
            fill(&key, &mut a, file.tensor(&key))?;
            alpha.alpha.push(a);
        }
        let mut state = DistillState {
            adam: Adam::new(h.optimizer, &[]),
            config,
            student,
            explainer,
            mus,
            alpha,
            progress: progress_from(h),
            teacher_sha256: h.teacher_sha256.clone(),
        };
        state.adam = restore_adam(file, &state.slot_sizes())?;
        Ok(state)
    }

    pub fn pipeline(&self) -> StudentPipeline {
        StudentPipeline {
            student: self.student.clone(),
            explainer: self.explainer.clone(),
        }
    }
}

/// What an observer sees after each distillation step.
pub struct StepEvent<'e> {
    pub step: u64,
    pub terms: &'e DistillLossTerms,
    pub batch: &'e [usize],
    /// `(spatial (N,1,H,W), channel (N,C,1,1), composed scores (N,C,H,W))`
    /// of this step's batch, absent without an explainer.
    pub selection: Option<(&'e Tensor<f32>, &'e Tensor<f32>, &'e Tensor<f32>)>,
}

impl StepEvent<'_> {
    /// Per-sample selection maps rebuilt from the emitted factors.
    pub fn selection_maps(&self) -> Result<Vec<SelectionMap<f32>>> {
        let Some((spatial, channel, _)) = self.selection else {
            return Ok(Vec::new());
        };
        let s = spatial.shape();
        (0..s.n)
            .map(|n| compose_selection(spatial.sample(n), s.h, s.w, channel.sample(n)))
            .collect()
    }
}

/// Drives a [`DistillState`] over a label-free image set.
pub struct Distiller<'a> {
    images: &'a ImageSet,
    targets: TeacherTargets,
    pub state: DistillState,
    pub log: MetricsLog,
    schedule: Schedule,
}

impl<'a> Distiller<'a> {
    pub fn new(teacher: &ParameterizedModel<f32>, images: &'a ImageSet, config: TrainConfig, log: MetricsLog) -> Result<Self> {
        let state = DistillState::new(teacher, config)?;
        Self::resume(teacher, images, state, log)
    }

    /// Continue from restored state; the teacher must be the one the run
    /// started with.
    pub fn resume(teacher: &ParameterizedModel<f32>, images: &'a ImageSet, state: DistillState, log: MetricsLog) -> Result<Self> {
        if params_hash(teacher) != state.teacher_sha256 {
            return Err(Error::InvalidArgument(
                "teacher parameters differ from the ones this run was started with".into(),
            ));
        }
        if images.is_empty() {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        check_image_size(images.size(), &state.config)?;
        let targets = TeacherTargets::compute(teacher, images, state.config.mode.uses_intermediate())?;
        Ok(Distiller {
            images,
            targets,
            state,
            log,
            schedule: Schedule::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.state.progress.finished
    }

    /// One optimizer step; `None` once the schedule is exhausted.
    pub fn step(&mut self, observer: Option<&mut dyn FnMut(&StepEvent<'_>)>) -> Result<Option<DistillLossTerms>> {
        if self.state.progress.finished {
            return Ok(None);
        }
        let n = self.images.len();
        let idx = self.schedule.next_batch(&self.state.progress, &self.state.config, n);
        let step = self.state.progress.step + 1;
        let st = &mut self.state;
        let cfg = &st.config;
        let x = self.images.batch(&idx);

        // Explainer and masking.
        let etrace = match &st.explainer {
            Some(e) => Some(e.forward(&x, Mode::Train)?),
            None => None,
        };
        let (x_student, selection) = match &etrace {
            Some(t) => {
                let (masked, theta) = simplify_batch(&x, t.output(), t.head_output(0))?;
                (masked, Some(theta))
            }
            None => (x.clone(), None),
        };

        // Student and output loss.
        let strace = st.student.forward(&x_student, Mode::Train)?;
        let p = self.targets.probs(&idx);
        if strace.output().data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        let l_output = output_distill_loss(&p, strace.output())?;
        let grad_logits = output_distill_grad_logits(&p, strace.output());

        // Intermediate losses through the adapters.
        let mut tap_seeds = Vec::new();
        let mut mu_grads = Vec::new();
        let mut alpha_grads = Vec::new();
        let l_intermediate = if cfg.mode.uses_intermediate() {
            let lambda = cfg.lambda as f32;
            let mut li = [0.0; 4];
            for (layer, tag) in TAP_TAGS.iter().enumerate() {
                let s_tap = st.student.tap(&strace, tag).expect("student tap");
                let mu = &st.mus[layer];
                let mtrace = mu.forward(s_tap, Mode::Train)?;
                let t_tap = self.targets.tap(layer, &idx);
                let nll = gaussian_nll(&t_tap, mtrace.output(), &st.alpha.alpha[layer], cfg.epsilon)?;
                li[layer] = nll.value;
                let seed = nll.grad_mean.map(|g| g * lambda);
                let seeds = Seeds {
                    output: Some(seed),
                    ..Seeds::default()
                };
                let (d_tap, g) = mu.backward(&mtrace, seeds, true)?;
                tap_seeds.push((tag.to_string(), d_tap.expect("adapter input gradient")));
                mu_grads.push(g);
                alpha_grads.push(nll.grad_alpha.iter().map(|&g| g * lambda).collect::<Vec<f32>>());
            }
            Some(li)
        } else {
            None
        };
        let terms = DistillLossTerms::new(l_output, l_intermediate, cfg.lambda);
        check_finite(step, terms.total)?;

        let seeds = Seeds {
            output: Some(grad_logits),
            output_is_logits: true,
            taps: tap_seeds,
            ..Seeds::default()
        };
        let (dx, student_grads) = st.student.backward(&strace, seeds, etrace.is_some())?;
        let mut grads = student_grads;
        if let (Some(e), Some(t)) = (&st.explainer, &etrace) {
            let (g_spatial, g_channel) =
                simplify_batch_backward(&x, t.output(), t.head_output(0), &dx.expect("input gradient"));
            let seeds = Seeds {
                output: Some(g_spatial),
                heads: vec![Some(g_channel)],
                ..Seeds::default()
            };
            let (_, eg) = e.backward(t, seeds, false)?;
            grads.extend(eg);
        }
        if cfg.optimize_mu {
            for g in mu_grads {
                grads.extend(g);
            }
        }
        grads.extend(alpha_grads);

        if let Some(obs) = observer {
            let sel = match (&etrace, &selection) {
                (Some(t), Some(theta)) => Some((t.output(), t.head_output(0), theta)),
                _ => None,
            };
            obs(&StepEvent {
                step,
                terms: &terms,
                batch: &idx,
                selection: sel,
            });
        }

        let mut adam = std::mem::replace(&mut st.adam, Adam::new(AdamHyper::default(), &[]));
        adam.step(st.slots_mut(), &grads);
        st.adam = adam;
        if let (Some(e), Some(t)) = (&mut st.explainer, &etrace) {
            e.update_running_stats(t);
        }
        self.log.record(step, &terms)?;
        let total = terms.total;
        self.state.progress.advance(total, &self.state.config, n);
        Ok(Some(terms))
    }

    pub fn run(&mut self, mut observer: Option<&mut dyn FnMut(&StepEvent<'_>)>) -> Result<()> {
        loop {
            let obs = observer.as_mut().map(|o| &mut **o as &mut dyn FnMut(&StepEvent<'_>));
            if self.step(obs)?.is_none() {
                return Ok(());
            }
        }
    }

    pub fn checkpoint(&self) -> CheckpointFile {
        self.state.checkpoint(self.log.offset())
    }
}

/// Train to completion and return the final state.
pub fn distill(teacher: &ParameterizedModel<f32>, images: &ImageSet, config: &TrainConfig) -> Result<DistillState> {
    let mut d = Distiller::new(teacher, images, config.clone(), MetricsLog::in_memory())?;
    d.run(None)?;
    Ok(d.state)
}

/// `(spatial, channel, composed)` selection tensors of a batch.
pub type SelectionTensors = (Tensor<f32>, Tensor<f32>, Tensor<f32>);

/// Inference path of a distilled run: optional explainer, then student.
#[derive(Clone, Debug)]
pub struct StudentPipeline {
    pub student: ParameterizedModel<f32>,
    pub explainer: Option<ParameterizedModel<f32>>,
}

impl StudentPipeline {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(DistillState::from_checkpoint(&CheckpointFile::load(path)?)?.pipeline())
    }

    /// Selection scores `(N, C, H, W)` for a batch, if an explainer exists.
    pub fn selection(&self, x: &Tensor<f32>) -> Result<Option<SelectionTensors>> {
        let Some(e) = &self.explainer else { return Ok(None) };
        let t = e.forward(x, Mode::Eval)?;
        let (_, theta) = simplify_batch(x, t.output(), t.head_output(0))?;
        Ok(Some((t.output().clone(), t.head_output(0).clone(), theta)))
    }

    /// Per-sample selection maps of a batch.
    pub fn selection_maps(&self, x: &Tensor<f32>) -> Result<Option<Vec<SelectionMap<f32>>>> {
        let Some((spatial, channel, _)) = self.selection(x)? else { return Ok(None) };
        let s = spatial.shape();
        (0..s.n)
            .map(|n| compose_selection(spatial.sample(n), s.h, s.w, channel.sample(n)))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Class probabilities of the student on the (masked) batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let input = match self.selection(x)? {
            Some((_, _, theta)) => {
                let mut m = x.clone();
                for (v, t) in m.data_mut().iter_mut().zip(theta.data()) {
                    *v *= t;
                }
                m
            }
            None => x.clone(),
        };
        Ok(self.student.forward(&input, Mode::Eval)?.output().clone())
    }
}
