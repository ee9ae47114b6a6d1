//! Command-line pipeline: generate data, pretrain the teacher, distill,
//! evaluate and export heatmaps.
//!
//! Settings resolve as flags over the `--config` file over `MEDTEX_SEED`
//! (seed only) over built-in defaults; every command writes the resolved
//! settings to `config.toml` in its output directory.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_dataset, load_dataset, Dataset, load_images_from, read_manifest, save_dataset, subset_manifest_file,
    subset_fraction, write_subset_manifests, GeneratorParams, Split, ALLOWED_FRACTIONS,
};
use crate::error::Error;
use crate::eval::{
    classification_report, default_k_grid, export_heatmap, iou_curve, iou_table, posthoc_metrics,
    random_selection_baseline, teacher_predictions, ChannelReduction, IouReport, IouVariant, Scores,
    POSITIVE_CLASS,
};
use crate::train::{
    load_teacher, parse_metrics_line, CheckpointFile, DistillMode, DistillState, Distiller, MetricsLog,
    StudentPipeline, TeacherTrainer, TrainConfig,
};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "MEDTEX_SEED";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const DISTILL_CHECKPOINT: &str = "distill.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.kv";
pub const TRAIN_MANIFEST_COPY: &str = "train_manifest";

// ------------------------------------------------------------------ config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Test split counts.
    pub test_n_normal: usize,
    pub test_n_abnormal: usize,
    pub size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_normal: 300,
            n_abnormal: 300,
            test_n_normal: 100,
            test_n_abnormal: 100,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_variant: IouVariant,
    pub channel_reduction: ChannelReduction,
    /// Heatmaps written by `explain`.
    pub heatmaps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iou_variant: IouVariant::Standard,
            channel_reduction: ChannelReduction::Any,
            heatmaps: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    /// Training-set fraction used by `distill`.
    pub fraction: f64,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            fraction: 1.0,
            data: DataSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Parse a config file. Returns the config and whether it set `seed`.
    pub fn parse(text: &str, path: &Path) -> Result<(Self, bool), Error> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        let has_seed = table.contains_key("seed");
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                    cfg.format_version
                ),
            ));
        }
        Ok((cfg, has_seed))
    }
}

// ------------------------------------------------------------------- flags

#[derive(Debug, Parser)]
#[command(name = "medtex", version, about = "Distill an image classifier into a small student with a pixel-level explainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Settings file (`key = value` with sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_normal: Option<usize>,
        #[arg(long)]
        n_abnormal: Option<usize>,
        /// Test split counts; default to the train counts' config values.
        #[arg(long)]
        test_n_normal: Option<usize>,
        #[arg(long)]
        test_n_abnormal: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the teacher on labeled training data.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset root with `train/` and `test/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Train student (and explainer) against a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        mode: Option<DistillMode>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Post-hoc and localization reports for distilled checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Distillation checkpoint; repeat to compare runs.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        iou_variant: Option<IouVariant>,
    },
    /// Export selection heatmaps for abnormal test images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images.
        #[arg(long)]
        count: Option<usize>,
    },
}

// ------------------------------------------------------------------ errors

/// Module and operation in which a command failed.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub operation: &'static str,
    pub source: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}: {}", self.module, self.operation, self.source)
    }
}

impl CliError {
    /// 1 for divergence and other runtime failures, 2 for invalid
    /// arguments, 3 for malformed files.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            Error::InvalidArgument(_) => 2,
            e if e.is_file_format() => 3,
            _ => 1,
        }
    }
}

trait Context<T> {
    fn ctx(self, module: &'static str, operation: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, Error> {
    fn ctx(self, module: &'static str, operation: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError {
            module,
            operation,
            source,
        })
    }
}

// ---------------------------------------------------------------- commands

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let (mut cfg, file_seed) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e)).ctx("cli", "read_config")?;
            RunConfig::parse(&text, path).ctx("cli", "read_config")?
        }
        None => (RunConfig::default(), false),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    } else if !file_seed {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))
                .ctx("cli", "resolve_seed")?;
        }
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn persist_config(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml()).ctx("cli", "write_config")
}

fn check_fraction(f: f64) -> Result<(), CliError> {
    if ALLOWED_FRACTIONS.contains(&f) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("--fraction must be one of 0.25, 0.5, 1.0, got {f}"))).ctx("cli", "resolve_fraction")
    }
}

fn cmd_gen_data(
    common: &Common,
    n_normal: Option<usize>,
    n_abnormal: Option<usize>,
    test_n_normal: Option<usize>,
    test_n_abnormal: Option<usize>,
    size: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    let d = &mut cfg.data;
    if let Some(v) = n_normal {
        d.n_normal = v;
        d.test_n_normal = test_n_normal.unwrap_or(v);
    }
    if let Some(v) = n_abnormal {
        d.n_abnormal = v;
        d.test_n_abnormal = test_n_abnormal.unwrap_or(v);
    }
    if let Some(v) = test_n_normal {
        d.test_n_normal = v;
    }
    if let Some(v) = test_n_abnormal {
        d.test_n_abnormal = v;
    }
    if let Some(v) = size {
        d.size = v;
    }
    let params = GeneratorParams::default();
    for (split, nn, na) in [
        (Split::Train, d.n_normal, d.n_abnormal),
        (Split::Test, d.test_n_normal, d.test_n_abnormal),
    ] {
        let ds = generate_dataset(split, nn, na, d.size, cfg.seed, &params).ctx("data", "generate_dataset")?;
        let dir = common.out.join(split.to_string());
        let manifest = save_dataset(&ds, &dir).ctx("data", "save_dataset")?;
        write_subset_manifests(&dir, &manifest).ctx("data", "subset_fraction")?;
    }
    persist_config(&common.out, &cfg)?;
    println!("wrote dataset to {}", common.out.display());
    Ok(())
}

/// Data section describing loaded splits rather than generator defaults.
fn describe(train: &Dataset, test: &Dataset) -> DataSection {
    let abnormal = |d: &Dataset| d.samples.iter().filter(|s| s.label == 1).count();
    DataSection {
        n_normal: train.samples.len() - abnormal(train),
        n_abnormal: abnormal(train),
        test_n_normal: test.samples.len() - abnormal(test),
        test_n_abnormal: abnormal(test),
        size: train.size(),
    }
}

fn cmd_pretrain(common: &Common, data: &Path, epochs: Option<u64>, resume: bool) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let train = load_dataset(&data.join("train")).ctx("data", "load_dataset")?;
    let test = load_dataset(&data.join("test")).ctx("data", "load_dataset")?;
    cfg.train.image_size = train.size();
    cfg.data = describe(&train, &test);
    cfg.train.validate().ctx("train", "pretrain_teacher")?;
    persist_config(&common.out, &cfg)?;
    let ckpt_path = common.out.join(TEACHER_CHECKPOINT);
    let metrics = common.out.join(METRICS_FILE);
    let mut trainer = if resume && ckpt_path.exists() {
        let file = CheckpointFile::load(&ckpt_path).ctx("train", "load_checkpoint")?;
        let log = MetricsLog::resume(&metrics, file.header.metrics_offset).ctx("train", "load_checkpoint")?;
        TeacherTrainer::resume(&train, &file, log).ctx("train", "load_checkpoint")?
    } else {
        let log = MetricsLog::create(&metrics).ctx("train", "pretrain_teacher")?;
        TeacherTrainer::new(&train, cfg.train.clone(), log).ctx("train", "pretrain_teacher")?
    };
    let mut epoch = trainer.progress.epoch;
    while trainer.step().ctx("train", "pretrain_teacher")?.is_some() {
        if trainer.progress.epoch != epoch {
            epoch = trainer.progress.epoch;
            trainer.checkpoint().save(&ckpt_path).ctx("train", "save_checkpoint")?;
        }
    }
    trainer.checkpoint().save(&ckpt_path).ctx("train", "save_checkpoint")?;
    let teacher = trainer.into_model();
    let preds = teacher_predictions(&teacher, &test.images()).ctx("eval", "teacher_predictions")?;
    let report = classification_report(&preds, &test.labels(), POSITIVE_CLASS).ctx("eval", "classification_report")?;
    let text = format!(
        "teacher test metrics against ground-truth labels\n{}",
        report.to_kv("teacher_")
    );
    write_text(&common.out.join(REPORT_FILE), &text).ctx("cli", "write_report")?;
    write_text(&common.out.join(SUMMARY_FILE), &report.to_kv("teacher_")).ctx("cli", "write_report")?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    common: &Common,
    data: &Path,
    teacher_path: &Path,
    mode: Option<DistillMode>,
    fraction: Option<f64>,
    epochs: Option<u64>,
    resume: bool,
) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(f) = fraction {
        cfg.fraction = f;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    check_fraction(cfg.fraction)?;
    let teacher = load_teacher(teacher_path).ctx("train", "load_checkpoint")?;
    let train_dir = data.join("train");
    let manifest_name = subset_manifest_file(cfg.fraction);
    if !train_dir.join(&manifest_name).exists() {
        // Imported datasets may lack precomputed subsets.
        let full = read_manifest(&train_dir).ctx("data", "read_manifest")?;
        let sub = subset_fraction(&full, cfg.fraction).ctx("data", "subset_fraction")?;
        write_text(&train_dir.join(&manifest_name), &sub.to_text()).ctx("data", "subset_fraction")?;
    }
    let images = load_images_from(&train_dir, &manifest_name).ctx("data", "load_images")?;
    cfg.train.image_size = images.size();
    cfg.train.validate().ctx("train", "distill")?;
    persist_config(&common.out, &cfg)?;
    fs::copy(train_dir.join(&manifest_name), common.out.join(TRAIN_MANIFEST_COPY))
        .map_err(|e| Error::io(train_dir.join(&manifest_name), e))
        .ctx("cli", "write_manifest")?;

    let ckpt_path = common.out.join(DISTILL_CHECKPOINT);
    let metrics = common.out.join(METRICS_FILE);
    let mut distiller = if resume && ckpt_path.exists() {
        let file = CheckpointFile::load(&ckpt_path).ctx("train", "load_checkpoint")?;
        let state = DistillState::from_checkpoint(&file).ctx("train", "load_checkpoint")?;
        let log = MetricsLog::resume(&metrics, file.header.metrics_offset).ctx("train", "load_checkpoint")?;
        Distiller::resume(&teacher, &images, state, log).ctx("train", "distill")?
    } else {
        let log = MetricsLog::create(&metrics).ctx("train", "distill")?;
        Distiller::new(&teacher, &images, cfg.train.clone(), log).ctx("train", "distill")?
    };
    let mut epoch = distiller.state.progress.epoch;
    while distiller.step(None).ctx("train", "distill")?.is_some() {
        if distiller.state.progress.epoch != epoch {
            epoch = distiller.state.progress.epoch;
            distiller.checkpoint().save(&ckpt_path).ctx("train", "save_checkpoint")?;
        }
    }
    distiller.checkpoint().save(&ckpt_path).ctx("train", "save_checkpoint")?;
    println!(
        "distilled {} on {} images for {} steps; checkpoint {}",
        cfg.train.mode,
        images.len(),
        distiller.state.progress.step,
        ckpt_path.display()
    );
    Ok(())
}

/// Last line of the metrics file written next to a checkpoint.
fn final_terms(checkpoint: &Path) -> Option<String> {
    let path = checkpoint.parent()?.join(METRICS_FILE);
    let text = fs::read_to_string(path).ok()?;
    let (_, t) = parse_metrics_line(text.lines().last()?).ok()?;
    let li = match t.l_intermediate {
        Some(v) => v.map(|x| x.to_string()).join(", "),
        None => "n/a".into(),
    };
    Some(format!("final_l_output = {}\nfinal_l_intermediate = {li}\nfinal_total = {}\n", t.l_output, t.total))
}

fn selection_scores(pipeline: &StudentPipeline, images: &[&[f32]], size: usize) -> Result<Vec<Scores>, Error> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let x = crate::tensor::Tensor::stack(crate::tensor::Shape::new(1, 3, size, size), chunk)?;
        for m in pipeline.selection_maps(&x)?.unwrap_or_default() {
            out.push(Scores::from(&m));
        }
    }
    Ok(out)
}

fn cmd_eval(common: &Common, data: &Path, teacher_path: &Path, checkpoints: &[PathBuf], variant: Option<IouVariant>) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(v) = variant {
        cfg.eval.iou_variant = v;
    }
    persist_config(&common.out, &cfg)?;
    let teacher = load_teacher(teacher_path).ctx("train", "load_checkpoint")?;
    let test = load_dataset(&data.join("test")).ctx("data", "load_dataset")?;
    let images = test.images();
    let size = test.size();
    let abnormal: Vec<_> = test.samples.iter().filter(|s| s.label == 1 && s.lesion_pixels() > 0).collect();
    let masks: Vec<&[bool]> = abnormal.iter().filter_map(|s| s.lesion_mask.as_deref()).collect();
    let abnormal_images: Vec<&[f32]> = abnormal.iter().map(|s| s.image.as_slice()).collect();
    let k_grid = default_k_grid(size, size);

    let mut report = String::new();
    let mut summary = String::new();
    let mut iou_rows: Vec<(String, IouReport)> = Vec::new();
    for path in checkpoints {
        let file = CheckpointFile::load(path).ctx("train", "load_checkpoint")?;
        let state = DistillState::from_checkpoint(&file).ctx("train", "load_checkpoint")?;
        let mode = state.config.mode;
        let pipeline = state.pipeline();
        let post = posthoc_metrics(&pipeline, &teacher, &images).ctx("eval", "posthoc_metrics")?;
        let prefix = format!("{mode}.");
        report.push_str(&format!("== {mode} ({})\n", path.display()));
        report.push_str(&post.to_kv(""));
        summary.push_str(&post.to_kv(&prefix));
        match final_terms(path) {
            Some(t) => {
                report.push_str(&t);
                summary.push_str(&t.lines().map(|l| format!("{prefix}{l}\n")).collect::<String>());
            }
            None => report.push_str("final_l_intermediate = n/a\n"),
        }
        if pipeline.explainer.is_some() && !masks.is_empty() {
            let scores = selection_scores(&pipeline, &abnormal_images, size).ctx("eval", "iou_curve")?;
            let iou = iou_curve(&scores, &masks, &k_grid, cfg.eval.iou_variant, cfg.eval.channel_reduction)
                .ctx("eval", "iou_curve")?;
            summary.push_str(&iou.to_kv(&prefix));
            iou_rows.push((mode.to_string(), iou));
        } else {
            report.push_str("iou = n/a (no explainer)\n");
        }
        report.push('\n');
    }
    if !masks.is_empty() {
        let base = random_selection_baseline(&masks, &k_grid, cfg.seed, cfg.eval.iou_variant)
            .ctx("eval", "random_selection_baseline")?;
        summary.push_str(&base.to_kv("random."));
        iou_rows.push(("random".into(), base));
        let rows: Vec<(&str, &IouReport)> = iou_rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
        report.push_str(&format!("mean IoU ({} variant) over {} masked test images\n", cfg.eval.iou_variant, masks.len()));
        report.push_str(&iou_table(&rows));
    }
    write_text(&common.out.join(REPORT_FILE), &report).ctx("cli", "write_report")?;
    write_text(&common.out.join(SUMMARY_FILE), &summary).ctx("cli", "write_report")?;
    print!("{report}");
    Ok(())
}

fn cmd_explain(common: &Common, data: &Path, checkpoint: &Path, count: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(c) = count {
        cfg.eval.heatmaps = c;
    }
    persist_config(&common.out, &cfg)?;
    let pipeline = StudentPipeline::load(checkpoint).ctx("train", "load_checkpoint")?;
    if pipeline.explainer.is_none() {
        return Err(Error::InvalidArgument("checkpoint has no explainer (student_only mode)".into())).ctx("eval", "export_heatmap");
    }
    let test = load_dataset(&data.join("test")).ctx("data", "load_dataset")?;
    let size = test.size();
    let mut written = 0;
    for s in test.samples.iter().filter(|s| s.label == 1).take(cfg.eval.heatmaps) {
        let x = crate::tensor::Tensor::from_vec(crate::tensor::Shape::new(1, 3, size, size), s.image.clone())
            .ctx("eval", "export_heatmap")?;
        let maps = pipeline.selection_maps(&x).ctx("eval", "export_heatmap")?.unwrap_or_default();
        export_heatmap(&maps[0], &s.image, &common.out, &format!("{:06}", s.sample_id)).ctx("eval", "export_heatmap")?;
        written += 1;
    }
    println!("wrote {written} heatmap pairs to {}", common.out.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData {
            common,
            n_normal,
            n_abnormal,
            test_n_normal,
            test_n_abnormal,
            size,
        } => cmd_gen_data(common, *n_normal, *n_abnormal, *test_n_normal, *test_n_abnormal, *size),
        Command::Pretrain {
            common,
            data,
            epochs,
            resume,
        } => cmd_pretrain(common, data, *epochs, *resume),
        Command::Distill {
            common,
            data,
            teacher,
            mode,
            fraction,
            epochs,
            resume,
        } => cmd_distill(common, data, teacher, *mode, *fraction, *epochs, *resume),
        Command::Eval {
            common,
            data,
            teacher,
            checkpoints,
            iou_variant,
        } => cmd_eval(common, data, teacher, checkpoints, *iou_variant),
        Command::Explain {
            common,
            data,
            checkpoint,
            count,
        } => cmd_explain(common, data, checkpoint, *count),
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
