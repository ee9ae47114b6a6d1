use std::fs;

use medtex::data::*;
use medtex::Error;
use proptest::prelude::*;

fn small(split: Split, seed: u64) -> Dataset {
    generate_dataset(split, 4, 4, 32, seed, &GeneratorParams::default()).unwrap()
}

#[test]
fn save_then_load_reproduces_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(Split::Train, 3);
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    assert!(manifest.entries.iter().all(|e| e.image_sha256.is_some()));
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.samples, ds.samples);
    assert_eq!(back.manifest, manifest);
    let images = load_images(dir.path()).unwrap();
    assert_eq!(images.len(), 8);
    assert_eq!(images.image(5), ds.samples[5].image.as_slice());
}

#[test]
fn abnormal_samples_carry_masks_and_normal_do_not() {
    let ds = small(Split::Test, 9);
    for s in &ds.samples {
        assert_eq!(s.lesion_pixels() > 0, s.label == 1, "sample {}", s.sample_id);
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn corrupted_image_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&small(Split::Train, 1), dir.path()).unwrap();
    let victim = &manifest.entries[2];
    let path = dir.path().join(&victim.image);
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Sample { sample_id, msg }) => {
            assert_eq!(sample_id, victim.sample_id);
            assert!(msg.contains("checksum"), "{msg}");
        }
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn undecodable_image_without_hash_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = save_dataset(&small(Split::Train, 1), dir.path()).unwrap();
    for e in &mut manifest.entries {
        e.image_sha256 = None;
    }
    fs::write(dir.path().join(MANIFEST_FILE), manifest.to_text()).unwrap();
    let victim = &manifest.entries[6];
    fs::write(dir.path().join(&victim.image), b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Sample { sample_id, .. } if sample_id == victim.sample_id), "{err}");
    assert!(err.is_file_format());
}

#[test]
fn hand_written_dataset_imports() {
    let dir = tempfile::tempdir().unwrap();
    let size = 32;
    let gray: Vec<f32> = (0..3 * size * size).map(|i| (i % 7) as f32 / 6.0).collect();
    let mut mask = vec![false; size * size];
    for y in 10..14 {
        for x in 8..12 {
            mask[y * size + x] = true;
        }
    }
    fs::create_dir_all(dir.path().join("img")).unwrap();
    fs::write(dir.path().join("img/a.png"), encode_rgb_png(&gray, size).unwrap()).unwrap();
    fs::write(dir.path().join("img/b.png"), encode_rgb_png(&gray, size).unwrap()).unwrap();
    fs::write(dir.path().join("img/b_mask.png"), encode_mask_png(&mask, size).unwrap()).unwrap();
    let text = "format = medtex-dataset\nversion = 1\nsplit = test\nfraction = 1\nseed = 0\nsize = 32\n\
                n_normal = 1\nn_abnormal = 1\n---\n\
                10\t0\timg/a.png\t-\t-\t-\n\
                11\t1\timg/b.png\timg/b_mask.png\t-\t-\n";
    fs::write(dir.path().join(MANIFEST_FILE), text).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.labels(), vec![0, 1]);
    assert_eq!(ds.samples[1].lesion_pixels(), 16);
    assert!(ds.samples[0].lesion_mask.is_none());
    // 8-bit quantization of k/6 values.
    for (a, b) in ds.samples[0].image.iter().zip(&gray) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn manifest_rejects_malformed_input() {
    let p = std::path::Path::new("m");
    let header = "format = medtex-dataset\nversion = 1\nsplit = train\nfraction = 1\nseed = 0\nsize = 32\nn_normal = 1\nn_abnormal = 0\n---\n";
    assert!(DatasetManifest::parse(&format!("{header}0\t0\ta.png\t-\t-\t-\n"), p).is_ok());
    for bad in [
        format!("{header}0\t2\ta.png\t-\t-\t-\n"),
        format!("{header}0\t0\t/etc/a.png\t-\t-\t-\n"),
        format!("{header}0\t0\t../a.png\t-\t-\t-\n"),
        format!("{header}0\t0\ta.png\t-\n"),
        format!("{header}0\t0\ta.png\t-\t-\t-\n0\t0\tb.png\t-\t-\t-\n"),
        header.replace("version = 1", "version = 2"),
        header.replace("---\n", ""),
    ] {
        let err = DatasetManifest::parse(&bad, p).unwrap_err();
        assert!(err.is_file_format(), "{err}");
    }
}

#[test]
fn subsets_nest_and_keep_class_balance() {
    let ds = generate_dataset(Split::Train, 20, 12, 32, 5, &GeneratorParams::default()).unwrap();
    let quarter = subset_fraction(&ds.manifest, 0.25).unwrap();
    let half = subset_fraction(&ds.manifest, 0.5).unwrap();
    assert_eq!((quarter.n_normal, quarter.n_abnormal), (5, 3));
    assert_eq!((half.n_normal, half.n_abnormal), (10, 6));
    let ids = |m: &DatasetManifest| m.entries.iter().map(|e| e.sample_id).collect::<Vec<_>>();
    assert!(ids(&quarter).iter().all(|i| ids(&half).contains(i)));
    assert!(subset_fraction(&ds.manifest, 0.3).is_err());
    assert!(subset_fraction(&half, 0.25).is_err());
}

#[test]
fn image_loading_ignores_label_column() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&small(Split::Train, 2), dir.path()).unwrap();
    write_subset_manifests(dir.path(), &manifest).unwrap();
    let before = load_images_from(dir.path(), &subset_manifest_file(0.5)).unwrap();
    // Flip every label and garble the mask columns.
    let name = subset_manifest_file(0.5);
    let text = fs::read_to_string(dir.path().join(&name)).unwrap();
    let (head, body) = text.split_once("---\n").unwrap();
    let flipped: String = body
        .lines()
        .map(|l| {
            let mut f: Vec<String> = l.split('\t').map(str::to_string).collect();
            f[1] = if f[1] == "0" { "1".into() } else { "0".into() };
            f[3] = "nowhere.png".into();
            f.join("\t") + "\n"
        })
        .collect();
    fs::write(dir.path().join(&name), format!("{head}---\n{flipped}")).unwrap();
    let after = load_images_from(dir.path(), &name).unwrap();
    assert_eq!(before, after);
    assert_eq!(after.len(), 4);
}

#[test]
fn generation_is_bit_deterministic() {
    let a = small(Split::Train, 42);
    let b = small(Split::Train, 42);
    assert_eq!(a, b);
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    save_dataset(&a, da.path()).unwrap();
    save_dataset(&b, db.path()).unwrap();
    for e in &a.manifest.entries {
        assert_eq!(fs::read(da.path().join(&e.image)).unwrap(), fs::read(db.path().join(&e.image)).unwrap());
    }
    assert_eq!(
        fs::read(da.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(db.path().join(MANIFEST_FILE)).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rgb_png_round_trip_is_exact_on_quantized_values(levels in prop::collection::vec(0u8..=255, 3 * 32 * 32)) {
        let img: Vec<f32> = levels.iter().map(|&v| v as f32 / 255.0).collect();
        let bytes = encode_rgb_png(&img, 32).unwrap();
        let (w, h, back) = decode_rgb_png(&bytes).unwrap();
        prop_assert_eq!((w, h), (32, 32));
        prop_assert_eq!(back, img);
    }

    #[test]
    fn mask_png_round_trip(bits in prop::collection::vec(any::<bool>(), 32 * 32)) {
        let bytes = encode_mask_png(&bits, 32).unwrap();
        let (_, _, back) = decode_mask_png(&bytes).unwrap();
        prop_assert_eq!(back, bits);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_rgb_png(&bytes);
        let _ = decode_mask_png(&bytes);
        let _ = DatasetManifest::parse(&String::from_utf8_lossy(&bytes), std::path::Path::new("x"));
    }
}
