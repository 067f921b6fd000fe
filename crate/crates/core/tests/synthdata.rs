use mma_core::synthdata::{self, generate, prototypes, read_manifest, read_split, write_dataset, TaskConfig};
use mma_core::Error;
use proptest::prelude::*;

fn small(seed: u64) -> TaskConfig {
    TaskConfig { train: 10, dev: 4, test: 4, seed, ..Default::default() }
}

/// Nearest prototype per raw frame, then collapse runs.
fn oracle_decode(frames: &mma_core::numerics::Tensor, protos: &mma_core::numerics::Tensor) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for i in 0..frames.rows() {
        let f = frames.row(i);
        let best = (0..protos.rows())
            .min_by(|&a, &b| {
                let da: f32 = protos.row(a).iter().zip(f).map(|(p, x)| (p - x) * (p - x)).sum();
                let db: f32 = protos.row(b).iter().zip(f).map(|(p, x)| (p - x) * (p - x)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if out.last() != Some(&best) {
            out.push(best);
        }
    }
    out
}

#[test]
fn noiseless_unit_spans_are_exact_prototypes() {
    let cfg = TaskConfig { noise_sigma: 0.0, d_min: 1, d_max: 1, stack_factor: 1, ..small(3) };
    let protos = prototypes(&cfg);
    let (s, _) = generate(&cfg).unwrap();
    for x in &s.train {
        for (i, &tok) in x.tokens.iter().enumerate() {
            assert_eq!(x.frames.row(i), protos.row(tok));
        }
        assert_eq!(x.true_boundaries, (1..=x.tokens.len()).collect::<Vec<_>>());
    }
}

#[test]
fn oracle_classifier_is_perfect_without_noise() {
    let cfg = TaskConfig { noise_sigma: 0.0, train: 100, ..small(5) };
    let protos = prototypes(&cfg);
    let (s, _) = generate(&cfg).unwrap();
    for x in s.train.iter().chain(&s.dev).chain(&s.test) {
        assert_eq!(oracle_decode(&x.frames, &protos), x.tokens, "{}", x.id);
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = generate(&small(1)).unwrap();
    let path = dir.path().join("train.jsonl");
    synthdata::save(&s.train, &path).unwrap();
    assert_eq!(s.train.len(), 10);
    assert_eq!(synthdata::load(&path).unwrap(), s.train);
}

#[test]
fn truncated_line_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = generate(&small(1)).unwrap();
    let body = synthdata::to_jsonl(&s.train[..3]).unwrap();
    let mut lines: Vec<&str> = body.lines().collect();
    let cut = &lines[1][..lines[1].len() / 2];
    lines[1] = cut;
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    match synthdata::load(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn empty_file_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(synthdata::load(&path).unwrap().is_empty());
}

#[test]
fn dataset_files_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small(9);
    let ma = write_dataset(a.path(), &cfg, &generate(&cfg).unwrap().0).unwrap();
    let mb = write_dataset(b.path(), &cfg, &generate(&cfg).unwrap().0).unwrap();
    assert_eq!(ma, mb);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let m = read_manifest(a.path()).unwrap();
    assert_eq!(read_split(a.path(), &m.dev).unwrap().len(), 4);
    std::fs::write(a.path().join("dev.jsonl"), "").unwrap();
    assert!(read_split(a.path(), &m.dev).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stacked_boundaries_track_raw_boundaries(seed in 0u64..1000, factor in 1usize..=4, extra in 0usize..4) {
        let cfg = TaskConfig {
            d_min: factor,
            d_max: factor + extra,
            stack_factor: factor,
            train: 5, dev: 1, test: 1,
            seed,
            ..Default::default()
        };
        let (s, _) = generate(&cfg).unwrap();
        for x in &s.train {
            prop_assert!(!x.tokens.is_empty());
            prop_assert!(x.true_boundaries.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(x.raw_boundaries.windows(2).all(|w| w[0] < w[1]));
            for (r, t) in x.raw_boundaries.iter().zip(&x.true_boundaries) {
                prop_assert_eq!(*t, r.div_ceil(factor));
            }
            prop_assert!(*x.true_boundaries.last().unwrap() <= x.frames.rows().div_ceil(factor));
        }
    }
}
