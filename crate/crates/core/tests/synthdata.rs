use std::fs;

use cdfnet::synth::{export, generate, import, SceneSpec, Split, MANIFEST_NAME};
use cdfnet::Error;

fn class_totals(spec: &SceneSpec, n: usize, seed: u64) -> Vec<f64> {
    let ds = generate(spec, n, seed).unwrap();
    let mut totals = vec![0.0; spec.num_classes()];
    for l in &ds.labels {
        for &v in l.data() {
            totals[v as usize] += 1.0;
        }
    }
    totals
}

#[test]
fn rare_class_ratio_within_factor_two() {
    for name in ["imbalanced", "occluded"] {
        let spec = SceneSpec::preset(name).unwrap();
        let rare = spec.rare_class().unwrap();
        let r = spec.rare_class_ratio.unwrap();
        let target = if r < 1.0 { 1.0 / r } else { r };
        let totals = class_totals(&spec, 100, 42);
        let largest = (1..spec.num_classes())
            .filter(|&c| c != rare)
            .map(|c| totals[c])
            .fold(0.0, f64::max);
        assert!(totals[rare] > 0.0, "{name}: rare class never drawn");
        let measured = largest / totals[rare];
        assert!(
            measured >= target / 2.0 && measured <= target * 2.0,
            "{name}: measured 1:{measured:.1}, target 1:{target}"
        );
    }
}

#[test]
fn every_class_appears_in_every_preset() {
    for name in SceneSpec::PRESETS {
        let spec = SceneSpec::preset(name).unwrap();
        let totals = class_totals(&spec, 20, 1);
        assert!(totals.iter().all(|&t| t > 0.0), "{name}: {totals:?}");
    }
}

#[test]
fn generation_is_a_pure_function_of_seed() {
    let spec = SceneSpec::preset("occluded").unwrap();
    assert_eq!(
        generate(&spec, 6, 3).unwrap(),
        generate(&spec, 6, 3).unwrap()
    );
    assert_ne!(
        generate(&spec, 6, 3).unwrap().images,
        generate(&spec, 6, 4).unwrap().images
    );
}

#[test]
fn images_follow_the_label_intensities() {
    let spec = SceneSpec {
        noise_sigma: 0.0,
        ..SceneSpec::preset("easy").unwrap()
    };
    let ds = generate(&spec, 3, 0).unwrap();
    for (img, lbl) in ds.images.iter().zip(&ds.labels) {
        for (&v, &y) in img.data().iter().zip(lbl.data()) {
            let want = if y == 0 {
                spec.background_mean
            } else {
                spec.classes[y as usize - 1].mean
            };
            assert!((v as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        val_fraction: 0.2,
        ..SceneSpec::preset("imbalanced").unwrap()
    };
    let ds = generate(&spec, 10, 8).unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 6);
    assert_eq!(ds.indices(Split::Val).len(), 2);
    assert_eq!(ds.indices(Split::Test).len(), 2);
    export(&ds, dir.path()).unwrap();
    assert_eq!(import(dir.path()).unwrap(), ds);
}

#[test]
fn missing_or_altered_files_are_integrity_errors() {
    let spec = SceneSpec::preset("easy").unwrap();
    let ds = generate(&spec, 4, 2).unwrap();

    let dir = tempfile::tempdir().unwrap();
    export(&ds, dir.path()).unwrap();
    fs::remove_file(dir.path().join("label_00002.cdft")).unwrap();
    match import(dir.path()) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("sample 2"), "{msg}"),
        other => panic!("{other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    export(&ds, dir.path()).unwrap();
    let path = dir.path().join("image_00001.cdft");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(import(dir.path()), Err(Error::Integrity(_))));

    let dir = tempfile::tempdir().unwrap();
    export(&ds, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .replace("height = 64", "height = 32");
    fs::write(&manifest, text).unwrap();
    assert!(matches!(import(dir.path()), Err(Error::Integrity(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(import(empty.path()), Err(Error::Integrity(_))));
}

#[test]
fn bad_requests_are_rejected() {
    let spec = SceneSpec::preset("easy").unwrap();
    assert!(matches!(generate(&spec, 0, 0), Err(Error::Usage(_))));
    let odd = SceneSpec {
        height: 40,
        ..spec.clone()
    };
    assert!(generate(&odd, 1, 0).is_err());
    let tiny = SceneSpec {
        height: 16,
        width: 16,
        ..SceneSpec::preset("imbalanced").unwrap()
    };
    assert!(matches!(generate(&tiny, 1, 0), Err(Error::Config(_))));
    assert!(SceneSpec::preset("hard").is_err());
}
