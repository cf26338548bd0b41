mod support;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabsynth::artifact::ArtifactError;
use tabsynth::codec::sample_permutation;
use tabsynth::lm::TrainSchedule;
use tabsynth::pipeline::{self, BackendSpec, LoadedTable, TrainOptions};
use tabsynth::tokenizer::{build_vocab, decode, encode, BOS};
use tabsynth::{serialize_row, BackendKind, LanguageModel, Metadata, ModelArtifact, NeuralConfig, Table};

fn loaded(name: &str, header: &[&str], rows: Vec<Vec<String>>, target: &str) -> LoadedTable {
    LoadedTable {
        name: name.into(),
        table: support::table(header, &rows, target),
        meta: Metadata::new(format!("The {name} table"), target),
    }
}

fn corpus() -> Vec<LoadedTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = |n: usize, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<String>| (0..n).map(|_| f(&mut rng)).collect::<Vec<_>>();
    let houses = rows(40, &mut |r| {
        vec![format!("{}", r.gen_range(1..6)), ["city", "village"][r.gen_range(0..2)].into(), format!("{}", r.gen_range(100..900))]
    });
    let loans = rows(40, &mut |r| {
        vec![format!("{:.1}", r.gen_range(0.0..50.0)), ["yes", "no"][r.gen_range(0..2)].into()]
    });
    let weather = rows(40, &mut |r| {
        vec![["sun", "rain", "snow"][r.gen_range(0..3)].into(), format!("{}", r.gen_range(-10..35)), ["go", "stay"][r.gen_range(0..2)].into()]
    });
    // 27 of 60 cells (45%) missing.
    let sparse: Vec<Vec<String>> = (0..20)
        .map(|i| {
            let a = if i < 14 { String::new() } else { format!("{i}") };
            let b = if i < 13 { String::new() } else { ["p", "q"][i % 2].to_string() };
            vec![a, b, ["u", "v"][i % 2].to_string()]
        })
        .collect();
    vec![
        loaded("houses", &["rooms", "area", "price"], houses, "price"),
        loaded("loans", &["debt", "approved"], loans, "approved"),
        loaded("weather", &["sky", "temp", "outing"], weather, "outing"),
        loaded("sparse", &["ghost", "phantom", "spirit"], sparse, "spirit"),
    ]
}

fn neural_spec() -> BackendSpec {
    BackendSpec {
        kind: BackendKind::Neural,
        neural: NeuralConfig { d_model: 16, n_layers: 1, n_heads: 2, context: 64, ..NeuralConfig::default() },
        schedule: TrainSchedule { steps: 15, batch_size: 4, ..TrainSchedule::default() },
        ..BackendSpec::default()
    }
}

fn options(backend: BackendSpec) -> TrainOptions {
    TrainOptions { backend, seed: 21, ..TrainOptions::default() }
}

fn random_prefixes(model: &ModelArtifact, n: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let v = model.vocab.len() as u32;
    (0..n)
        .map(|_| std::iter::once(BOS).chain((0..rng.gen_range(0..20)).map(|_| rng.gen_range(2..v))).collect())
        .collect()
}

#[test]
fn pretrain_skips_sparse_tables_and_covers_all_columns() {
    let tables = corpus();
    let (model, report) = pipeline::pretrain(&tables, &options(BackendSpec::default())).unwrap();
    let used: Vec<(&str, bool)> = report.tables.iter().map(|n| (n.name.as_str(), n.used)).collect();
    assert_eq!(used, vec![("houses", true), ("loans", true), ("weather", true), ("sparse", false)]);
    assert!(report.tables[3].missing_fraction > 0.4);
    for name in ["rooms", "area", "price", "debt", "approved", "sky", "temp", "outing"] {
        assert!(model.vocab.word_id(name).is_some(), "{name}");
        assert!(model.known_columns.contains_key(name));
    }
    assert!(model.vocab.word_id("ghost").is_none());
    assert_eq!(report.examples, 120);
    assert!(model.backend.is_pretrained());
    assert!(model.table.is_none());
    assert!(pipeline::generate(&model, 1, &Default::default(), None).is_err());
}

#[test]
fn finetune_keeps_pretrained_ids() {
    let tables = corpus();
    let (base, _) = pipeline::pretrain(&tables[..3], &options(BackendSpec::default())).unwrap();
    let before = base.vocab.tokens().to_vec();
    let (tuned, _) = pipeline::finetune(Some(base), &tables[1], &options(BackendSpec::default())).unwrap();
    assert_eq!(&tuned.vocab.tokens()[..before.len()], &before[..]);
    let mismatch = pipeline::finetune(Some(tuned), &tables[0], &options(neural_spec()));
    assert!(matches!(mismatch, Err(pipeline::PipelineError::BackendMismatch { .. })));
}

fn roundtrip_check(model: &ModelArtifact) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let back = ModelArtifact::load(&path).unwrap();
    assert_eq!(&back, model);
    for p in random_prefixes(model, 100) {
        let a = model.backend.next_logits(&p).unwrap();
        let b = back.backend.next_logits(&p).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn artifacts_round_trip_bitwise() {
    let tables = corpus();
    for spec in [BackendSpec::default(), neural_spec()] {
        let (base, _) = pipeline::pretrain(&tables, &options(spec.clone())).unwrap();
        roundtrip_check(&base);
        let (tuned, _) = pipeline::finetune(Some(base), &tables[2], &options(spec)).unwrap();
        roundtrip_check(&tuned);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tables = corpus();
    for spec in [BackendSpec::default(), neural_spec()] {
        let a = pipeline::finetune(None, &tables[0], &options(spec.clone())).unwrap().0;
        let b = pipeline::finetune(None, &tables[0], &options(spec.clone())).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
        let other = pipeline::finetune(None, &tables[0], &TrainOptions { seed: 22, ..options(spec) }).unwrap().0;
        assert_ne!(a.to_bytes(), other.to_bytes());
    }
}

#[test]
fn damaged_artifacts_are_rejected() {
    let model = pipeline::finetune(None, &corpus()[1], &options(BackendSpec::default())).unwrap().0;
    let bytes = model.to_bytes();
    assert!(matches!(ModelArtifact::from_bytes(&bytes[..bytes.len() - 1]), Err(ArtifactError::CorruptArtifact(_))));
    assert!(matches!(ModelArtifact::from_bytes(&bytes[..12]), Err(ArtifactError::CorruptArtifact(_))));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(ModelArtifact::from_bytes(&flipped), Err(ArtifactError::CorruptArtifact(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(ModelArtifact::from_bytes(&magic), Err(ArtifactError::UnsupportedFormat(_))));
    let mut version = bytes;
    version[8] = 99;
    assert!(matches!(ModelArtifact::from_bytes(&version), Err(ArtifactError::UnsupportedFormat(_))));
    assert!(ModelArtifact::load("/nonexistent/model.bin").is_err());
}

#[test]
fn encode_decode_round_trip() {
    let t: Table = corpus().remove(2).table;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sentences: Vec<_> = t
        .rows()
        .iter()
        .map(|r| serialize_row(r, t.schema(), "Weather  log.", &sample_permutation(2, &mut rng), true).unwrap())
        .collect();
    let vocab = build_vocab(&sentences, t.schema());
    for s in &sentences {
        let ids = encode(s, &vocab).ids;
        assert_eq!(decode(&ids, &vocab).unwrap(), s.text.trim_end().replace("  ", " "));
    }
}

#[test]
fn permutations_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_permutation(5, &mut rng)).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 120);
    let p = 1.0 / 120.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (perm, &c) in &counts {
        assert!((c as f64 - mean).abs() <= 5.0 * sd, "{perm:?}: {c}");
    }
}
