use medtex::data::{generate_dataset, Dataset, GeneratorParams, Split};
use medtex::train::*;
use medtex::Error;

const SIZE: usize = 32;

fn config(mode: DistillMode) -> TrainConfig {
    TrainConfig {
        image_size: SIZE,
        batch_size: 4,
        epochs: 3,
        teacher_widths: [8, 16, 32, 64],
        explainer_divisor: 16,
        mode,
        seed: 11,
        early_stop: false,
        ..TrainConfig::default()
    }
}

fn data(seed: u64) -> Dataset {
    generate_dataset(Split::Train, 6, 6, SIZE, seed, &GeneratorParams::default()).unwrap()
}

fn teacher(ds: &Dataset) -> medtex::arch::ParameterizedModel<f32> {
    let cfg = TrainConfig {
        epochs: 2,
        ..config(DistillMode::MedTex)
    };
    pretrain_teacher(ds, &cfg).unwrap()
}

fn losses(log: &MetricsLog) -> Vec<DistillLossTermsBits> {
    log.history.iter().map(|(s, t)| DistillLossTermsBits::from((*s, t))).collect()
}

/// Loss record compared bit for bit.
#[derive(Debug, PartialEq)]
struct DistillLossTermsBits(u64, u64, Option<[u64; 4]>, u64);

impl From<(u64, &medtex::losses::DistillLossTerms)> for DistillLossTermsBits {
    fn from((step, t): (u64, &medtex::losses::DistillLossTerms)) -> Self {
        DistillLossTermsBits(
            step,
            t.l_output.to_bits(),
            t.l_intermediate.map(|v| v.map(f64::to_bits)),
            t.total.to_bits(),
        )
    }
}

#[test]
fn distillation_leaves_teacher_untouched() {
    let ds = data(1);
    let t = teacher(&ds);
    let before = params_hash(&t);
    let images = ds.images();
    let state = distill(&t, &images, &config(DistillMode::MedTex)).unwrap();
    assert_eq!(params_hash(&t), before);
    assert_eq!(state.teacher_sha256, before);
}

#[test]
fn training_runs_are_bit_deterministic() {
    let ds = data(2);
    let t1 = teacher(&ds);
    let t2 = teacher(&ds);
    assert_eq!(params_hash(&t1), params_hash(&t2));
    let images = ds.images();
    let run = || {
        let mut d = Distiller::new(&t1, &images, config(DistillMode::MedTex), MetricsLog::in_memory()).unwrap();
        d.run(None).unwrap();
        (losses(&d.log), d.checkpoint().encode().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let ds = data(3);
    let t = teacher(&ds);
    let images = ds.images();
    let cfg = TrainConfig {
        epochs: 6,
        ..config(DistillMode::MedTex)
    };

    let mut straight = Distiller::new(&t, &images, cfg.clone(), MetricsLog::in_memory()).unwrap();
    for _ in 0..15 {
        straight.step(None).unwrap().unwrap();
    }

    let mut first = Distiller::new(&t, &images, cfg, MetricsLog::in_memory()).unwrap();
    for _ in 0..5 {
        first.step(None).unwrap().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let file = CheckpointFile::load(&path).unwrap();
    let state = DistillState::from_checkpoint(&file).unwrap();
    let mut resumed = Distiller::resume(&t, &images, state, MetricsLog::in_memory()).unwrap();
    for _ in 0..10 {
        resumed.step(None).unwrap().unwrap();
    }
    assert_eq!(losses(&resumed.log), losses(&straight.log)[5..]);
    assert_eq!(resumed.checkpoint().tensors, straight.checkpoint().tensors);
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let ds = data(4);
    let t = teacher(&ds);
    let images = ds.images();
    let state = distill(&t, &images, &config(DistillMode::MedEx)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    state.checkpoint(0).save(&a).unwrap();
    let loaded = CheckpointFile::load(&a).unwrap();
    DistillState::from_checkpoint(&loaded).unwrap().checkpoint(0).save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ds = data(5);
    let t = teacher(&ds);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let mut trainer = TeacherTrainer::new(&ds, config(DistillMode::MedTex), MetricsLog::in_memory()).unwrap();
    trainer.step().unwrap();
    trainer.checkpoint().save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let truncated = &good[..good.len() - 100];
    let err = CheckpointFile::decode(truncated, &path).unwrap_err();
    assert!(err.is_file_format(), "{err}");

    let mut flipped = good.clone();
    flipped[good.len() / 2] ^= 1;
    assert!(CheckpointFile::decode(&flipped, &path).unwrap_err().is_file_format());

    let mut version = good.clone();
    version[8] = 9;
    let err = CheckpointFile::decode(&version, &path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    assert!(params_hash(&t) != params_hash(&trainer.into_model()));
}

#[test]
fn student_checkpoint_is_not_a_teacher() {
    let ds = data(6);
    let t = teacher(&ds);
    let images = ds.images();
    let state = distill(&t, &images, &config(DistillMode::StudentOnly)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    state.checkpoint(0).save(&path).unwrap();
    match load_teacher(&path) {
        Err(Error::ArchMismatch { diff, .. }) => assert!(diff.contains("student"), "{diff}"),
        other => panic!("expected an architecture mismatch, got {other:?}"),
    }
    assert!(DistillState::new(&state.student, config(DistillMode::MedTex)).is_err());
}

#[test]
fn labels_never_reach_distillation() {
    let ds = data(7);
    let t = teacher(&ds);
    let mut corrupted = ds.clone();
    for s in &mut corrupted.samples {
        s.label = 1 - s.label;
        s.lesion_mask = None;
    }
    let a = distill(&t, &ds.images(), &config(DistillMode::MedTex)).unwrap();
    let b = distill(&t, &corrupted.images(), &config(DistillMode::MedTex)).unwrap();
    assert_eq!(a.checkpoint(0).encode().unwrap(), b.checkpoint(0).encode().unwrap());
}

#[test]
fn zero_lambda_with_frozen_adapters_matches_explainer_only_mode() {
    let ds = data(8);
    let t = teacher(&ds);
    let images = ds.images();
    let run = |cfg: TrainConfig| {
        let mut d = Distiller::new(&t, &images, cfg, MetricsLog::in_memory()).unwrap();
        d.run(None).unwrap();
        (d.log.history.iter().map(|(_, t)| t.l_output).collect::<Vec<_>>(), d.state)
    };
    let (tex, tex_state) = run(TrainConfig {
        lambda: 0.0,
        optimize_mu: false,
        ..config(DistillMode::MedTex)
    });
    let (ex, ex_state) = run(config(DistillMode::MedEx));
    assert_eq!(tex.len(), ex.len());
    for (a, b) in tex.iter().zip(&ex) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert_eq!(params_hash(&tex_state.student), params_hash(&ex_state.student));
}

#[test]
fn every_emitted_selection_is_bounded_and_rank_one() {
    let ds = data(9);
    let t = teacher(&ds);
    let images = ds.images();
    let mut seen = 0;
    let mut check = |e: &StepEvent<'_>| {
        for m in e.selection_maps().unwrap() {
            assert!(m.in_unit_range(), "step {}", e.step);
            assert!(m.is_exact_rank_one(), "step {}", e.step);
            seen += 1;
        }
    };
    let mut d = Distiller::new(&t, &images, config(DistillMode::MedTex), MetricsLog::in_memory()).unwrap();
    d.run(Some(&mut check)).unwrap();
    assert!(seen > 0);
}

#[test]
fn student_only_emits_no_selection_or_intermediate_terms() {
    let ds = data(10);
    let t = teacher(&ds);
    let images = ds.images();
    let mut d = Distiller::new(&t, &images, config(DistillMode::StudentOnly), MetricsLog::in_memory()).unwrap();
    let mut any_selection = false;
    let mut check = |e: &StepEvent<'_>| any_selection |= e.selection.is_some();
    d.run(Some(&mut check)).unwrap();
    assert!(!any_selection);
    assert!(d.log.history.iter().all(|(_, t)| t.l_intermediate.is_none() && t.total == t.l_output));
    assert!(d.state.pipeline().explainer.is_none());
}

#[test]
fn metrics_file_matches_history_and_resumes_at_offset() {
    let ds = data(11);
    let t = teacher(&ds);
    let images = ds.images();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.tsv");
    let mut d = Distiller::new(&t, &images, config(DistillMode::MedEx), MetricsLog::create(&path).unwrap()).unwrap();
    for _ in 0..3 {
        d.step(None).unwrap();
    }
    let offset = d.log.offset();
    d.step(None).unwrap();
    drop(d);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    for (i, line) in text.lines().enumerate() {
        let (step, terms) = parse_metrics_line(line).unwrap();
        assert_eq!(step, i as u64 + 1);
        assert!(terms.l_intermediate.is_none());
    }
    MetricsLog::resume(&path, offset).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
}

#[test]
fn non_finite_loss_stops_training_with_the_step() {
    let ds = data(12);
    let mut trainer = TeacherTrainer::new(&ds, config(DistillMode::MedTex), MetricsLog::in_memory()).unwrap();
    trainer.step().unwrap().unwrap();
    let last = trainer.model.params_mut().last_mut().unwrap();
    last.data[0] = f32::NAN;
    match trainer.step() {
        Err(Error::Divergence { step, loss }) => {
            assert_eq!(step, 2);
            assert!(loss.is_nan());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn non_finite_student_stops_distillation() {
    let ds = data(13);
    let t = teacher(&ds);
    let images = ds.images();
    let mut d = Distiller::new(&t, &images, config(DistillMode::StudentOnly), MetricsLog::in_memory()).unwrap();
    d.state.student.params_mut().last_mut().unwrap().data[0] = f32::INFINITY;
    assert!(matches!(d.step(None), Err(Error::Divergence { step: 1, .. })));
}
