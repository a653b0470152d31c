use std::path::Path;

use mint_core::aad::{batch_extract, SkippedSample, AuditableDataKind, FeatureForm, FeatureOptions, FeatureSet};
use mint_core::audit::*;
use mint_core::audited::*;
use mint_core::classifier::*;
use mint_core::data::*;
use mint_core::MintError;
use nnkit::{Tensor, TrainConfig};
use proptest::prelude::*;

fn small_data(seed: u64) -> (SyntheticDataConfig, DatasetPartition) {
    let config = SyntheticDataConfig {
        samples_per_class: 100,
        external_count: 400,
        image_size: 16,
        seed,
        ..SyntheticDataConfig::default()
    };
    let p = generate_synthetic_dataset(&config).unwrap();
    (config, p)
}

fn small_model(seed: u64) -> AuditedModel {
    build_toy_audited_model([4, 4, 8, 8], 8, 4, Preprocess { size: 16, channels: 1 }, seed).unwrap()
}

fn trained_model(p: &DatasetPartition) -> AuditedModel {
    let config = TrainConfig { epochs: 2, learning_rate: 0.05, ..TrainConfig::default() };
    train_audited(small_model(1), p.members(), &config).unwrap().0.detach_head().unwrap()
}

#[test]
fn taps_do_not_perturb_the_outcome() {
    let (_, p) = small_data(1);
    let model = trained_model(&p);
    let only_outcome = TapConfig::new([TapName::ModelOutcome]).unwrap();
    for s in p.iter().take(20) {
        let (a, r) = model.infer_with_taps(s, &TapConfig::all()).unwrap();
        let (b, _) = model.infer_with_taps(s, &only_outcome).unwrap();
        let (c, _) = model.infer_with_taps(s, &TapConfig::new([TapName::ConvBlock2]).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(r.outcome.as_ref(), Some(&a));
        assert_eq!(model.embed(&s.image).unwrap(), a);
    }
}

#[test]
fn constant_input_gives_repeatable_activations() {
    let model = small_model(3).detach_head().unwrap();
    let zero = Tensor::zeros(&[1, 16, 16]).unwrap();
    let (_, a) = model.infer_image("z", &zero, &TapConfig::all()).unwrap();
    let (_, b) = model.clone().infer_image("z", &zero, &TapConfig::all()).unwrap();
    assert_eq!(a, b);
    // block 1 with zero input is the ReLU of the bias, constant per channel
    let t = &a.taps[&TapName::ConvBlock1];
    let plane = t.len() / t.shape()[0];
    for map in t.data().chunks_exact(plane) {
        assert!(map.iter().all(|&v| v == map[0]));
    }
}

#[test]
fn externals_never_train_the_audited_model() {
    let (_, p) = small_data(2);
    let mut samples = p.members()[..10].to_vec();
    samples.push(p.externals()[0].clone());
    let err = train_audited(small_model(0), &samples, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, MintError::Partition(_)), "{err}");
}

#[test]
fn generation_and_extraction_are_deterministic() {
    let (_, a) = small_data(7);
    let (_, b) = small_data(7);
    let (_, c) = small_data(8);
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
    let model = small_model(1).detach_head().unwrap();
    let ea = batch_extract(&model, a.iter().cloned().map(Ok), &TapConfig::all(), 0);
    let eb = batch_extract(&model, b.iter().cloned().map(Ok), &TapConfig::all(), 0);
    assert_eq!(ea.records, eb.records);
    assert_eq!(ea.total(), a.len());
    let ids: Vec<_> = ea.records.iter().map(|r| r.sample_id.clone()).collect();
    let expected: Vec<_> = a.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn extraction_reports_skipped_samples() {
    let (_, p) = small_data(3);
    let model = small_model(1).detach_head().unwrap();
    let mut bad = p.members()[0].clone();
    bad.image = Tensor::zeros(&[1, 8, 8]).unwrap();
    let unreadable = SkippedSample {
        sample_id: "unreadable.png".into(),
        reason: "decode error".into(),
    };
    let stream = vec![Ok(p.members()[1].clone()), Ok(bad), Err(unreadable)];
    let ex = batch_extract(&model, stream, &TapConfig::all(), 1);
    assert_eq!(ex.records.len(), 1);
    assert_eq!(ex.skipped.len(), 2);
    assert_eq!(ex.total(), 3);
}

#[test]
fn audited_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, p) = small_data(4);
    let model = trained_model(&p);
    let (ck, sc) = (dir.path().join("m.mintnn"), dir.path().join("m.json"));
    model.save(&ck, &sc).unwrap();
    let loaded = AuditedModel::load(&ck, &sc).unwrap();
    for s in p.iter().take(5) {
        assert_eq!(model.embed(&s.image).unwrap(), loaded.embed(&s.image).unwrap());
    }
    assert!(AuditedModel::load(&ck, dir.path().join("missing.json")).is_err());
}

#[test]
fn png_round_trip_matches_quantized_pixels() {
    let (_, p) = small_data(5);
    let s = &p.members()[0];
    let png = encode_png(&s.image).unwrap();
    let back = decode_image(&png, &Preprocess { size: 16, channels: 1 }).unwrap();
    for (a, b) in s.image.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_balanced_disjoint_and_partition_respecting(
        n_members in 10usize..80, n_externals in 10usize..80, train in 0usize..40, test in 0usize..40, seed in any::<u64>()
    ) {
        let members: Vec<String> = (0..n_members).map(|i| format!("m{i}")).collect();
        let externals: Vec<String> = (0..n_externals).map(|i| format!("e{i}")).collect();
        match plan_split_ids(&members, &externals, train, test, seed) {
            Ok(plan) => {
                prop_assert_eq!(plan.mint_train.len(), train);
                prop_assert_eq!(plan.mint_test.len(), test);
                let m_train = plan.mint_train.iter().filter(|id| id.starts_with('m')).count();
                let m_test = plan.mint_test.iter().filter(|id| id.starts_with('m')).count();
                prop_assert!(m_train.abs_diff(train - m_train) <= 1);
                prop_assert!(m_test.abs_diff(test - m_test) <= 1);
                let train_set: std::collections::HashSet<_> = plan.mint_train.iter().collect();
                prop_assert_eq!(train_set.len(), train);
                prop_assert!(plan.mint_test.iter().all(|id| !train_set.contains(id)));
                let again = plan_split_ids(&members, &externals, train, test, seed).unwrap();
                prop_assert_eq!(again, plan);
            }
            Err(MintError::InsufficientSamples { .. }) => {
                prop_assert!(train.div_ceil(2) + test.div_ceil(2) > n_members || train / 2 + test / 2 > n_externals);
            }
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}

/// Writes a registry with one model and Vanilla classifiers for `kinds`.
fn write_registry(dir: &Path, kinds: &[AuditableDataKind]) -> (AuditedModel, Vec<MintClassifier>, DatasetPartition) {
    let (_, p) = small_data(6);
    let model = trained_model(&p);
    model.save(dir.join("audited.mintnn"), dir.join("audited.json")).unwrap();
    let records = batch_extract(&model, p.iter().cloned().map(Ok), &TapConfig::all(), 0).records;
    let plan = plan_split(&p, 200, 0, 1).unwrap();
    let mut entries = Vec::new();
    let mut classifiers = Vec::new();
    for &kind in kinds {
        let set = FeatureSet::from_records(&records, kind, FeatureForm::Vector, FeatureOptions::default())
            .unwrap()
            .select(&plan.mint_train)
            .unwrap();
        let clf = build_vanilla(kind, set.shape()[0], 2).unwrap();
        let config = TrainConfig { epochs: 2, ..default_mint_train_config() };
        let (clf, _) = train_mint(clf, &set, &config).unwrap();
        let stem = format!("vanilla-{}", kind.slug());
        clf.save(dir.join(format!("{stem}.mintnn")), dir.join(format!("{stem}.json"))).unwrap();
        entries.push(RegistryClassifierEntry {
            auditable_data: kind,
            architecture: MintArchitecture::Vanilla,
            checkpoint: format!("{stem}.mintnn").into(),
            sidecar: format!("{stem}.json").into(),
        });
        classifiers.push(clf);
    }
    let manifest = RegistryManifest {
        version: REGISTRY_VERSION,
        models: vec![RegistryModelEntry {
            model_id: "toy".into(),
            checkpoint: "audited.mintnn".into(),
            sidecar: "audited.json".into(),
            taps: TapConfig::all(),
            classifiers: entries,
        }],
    };
    save_registry_manifest(&manifest, dir.join(REGISTRY_FILE)).unwrap();
    (model, classifiers, p)
}

#[test]
fn audit_scores_match_offline_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let kinds = [AuditableDataKind::AllConvLayers, AuditableDataKind::ConvLayer(1), AuditableDataKind::ModelOutcome];
    let (model, classifiers, p) = write_registry(dir.path(), &kinds);
    let registry = AuditRegistry::load(dir.path().join(REGISTRY_FILE)).unwrap();
    assert_eq!(registry.configurations().len(), 3);

    let png = encode_png(&p.members()[3].image).unwrap();
    let report = audit_sample(&registry, &png, None).unwrap();
    assert_eq!(report.per_config.len(), 3);
    let image = decode_image(&png, model.preprocess()).unwrap();
    let (_, record) = model.infer_image("q", &image, &TapConfig::all()).unwrap();
    for (entry, clf) in report.per_config.iter().zip(&classifiers) {
        let offline = clf.predict(&clf.features_for(&record).unwrap()).unwrap();
        assert_eq!(entry.score.to_bits(), offline.score.to_bits());
        assert_eq!(entry.decision, offline.decision);
    }
    let mean = report.per_config.iter().map(|c| c.score).sum::<f64>() / 3.0;
    assert_eq!(report.aggregate_likelihood, mean);
    assert!(report.disclaimer.contains("not proof"));
    assert_eq!(audit_sample(&registry, &png, Some("toy")).unwrap(), report);
}

#[test]
fn audit_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_registry(dir.path(), &[AuditableDataKind::AllConvLayers]);
    let registry = AuditRegistry::load(dir.path().join(REGISTRY_FILE)).unwrap();
    assert!(matches!(audit_sample(&registry, b"not an image", None), Err(AuditError::Undecodable(_))));
    let png = encode_png(&Tensor::zeros(&[1, 16, 16]).unwrap()).unwrap();
    assert!(matches!(audit_sample(&registry, &png, Some("nope")), Err(AuditError::UnknownModel(_))));
}

#[test]
fn registry_rejects_mismatched_classifiers() {
    let dir = tempfile::tempdir().unwrap();
    write_registry(dir.path(), &[AuditableDataKind::ConvLayer(2)]);
    let path = dir.path().join(REGISTRY_FILE);
    let registry = AuditRegistry::load(&path).unwrap();
    let entry = registry.entries()[0].clone();

    // a classifier trained for another model's tap width
    let wide = build_vanilla(AuditableDataKind::ConvLayer(2), 99, 0).unwrap();
    let mut bad = entry.clone();
    bad.classifiers = vec![wide];
    assert!(AuditRegistry::new(vec![bad]).is_err());

    // taps disabled for a classifier's kind
    let mut no_tap = entry.clone();
    no_tap.taps = TapConfig::new([TapName::ModelOutcome]).unwrap();
    let err = AuditRegistry::new(vec![no_tap]).unwrap_err();
    assert!(err.to_string().contains("conv_block_2"), "{err}");

    // duplicate model ids
    assert!(AuditRegistry::new(vec![entry.clone(), entry]).is_err());

    // a broken checkpoint path names the file
    let text = std::fs::read_to_string(&path).unwrap().replace("audited.mintnn", "gone.mintnn");
    std::fs::write(&path, text).unwrap();
    let err = AuditRegistry::load(&path).unwrap_err();
    assert!(err.to_string().contains("gone.mintnn"), "{err}");
}
