use std::fs;

use proptest::prelude::*;
use ssb_core::data::{generate_openset, GeneratorConfig, OpenSetDataset};
use ssb_core::eval::Evaluator;
use ssb_core::model::HeadMode;
use ssb_core::trainer::{load_checkpoint, save_checkpoint, train_ssb, FilterStrategy, PlMode, TrainConfig, Trainer};
use ssb_core::Error;

fn dataset() -> OpenSetDataset {
    generate_openset(&GeneratorConfig {
        dim: 4,
        n_inlier: 3,
        n_seen: 1,
        n_unseen: 1,
        train_per_class: 30,
        test_per_class: 10,
        label_fraction: 0.2,
        seed: 11,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn config(filter: FilterStrategy, pl_mode: PlMode, head_mode: HeadMode) -> TrainConfig {
    TrainConfig {
        iterations: 48,
        warmup: 20,
        eval_every: 8,
        batch_labeled: 6,
        batch_unlabeled: 10,
        feat_dim: 5,
        proj_dim: 7,
        filter,
        pl_mode,
        head_mode,
        ..TrainConfig::default()
    }
}

fn filters() -> impl Strategy<Value = FilterStrategy> {
    prop_oneof![
        Just(FilterStrategy::Off),
        Just(FilterStrategy::Confidence),
        Just(FilterStrategy::Detector),
        Just(FilterStrategy::DetectorTuned),
    ]
}

fn pl_modes() -> impl Strategy<Value = PlMode> {
    prop_oneof![Just(PlMode::None), Just(PlMode::Standard), Just(PlMode::PseudoNegative)]
}

fn heads() -> impl Strategy<Value = HeadMode> {
    prop_oneof![Just(HeadMode::None), Just(HeadMode::Shared), Just(HeadMode::Separate)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Interrupting anywhere, round-tripping through a file and resuming
    /// reproduces the uninterrupted run bit for bit.
    #[test]
    fn resume_anywhere_is_bitwise(stop in 1u64..48, filter in filters(), pl in pl_modes(), head in heads()) {
        let ds = dataset();
        let cfg = config(filter, pl, head);
        let full = train_ssb(&ds, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let mut eval = Evaluator::for_config(&ds, &cfg);
        let mut first = Trainer::new(ds.training_view(), &cfg).unwrap();
        first.run_until(stop, &mut eval).unwrap();
        first.save_checkpoint(&path).unwrap();
        drop(first);

        let mut second = Trainer::resume(ds.training_view(), load_checkpoint(&path).unwrap()).unwrap();
        prop_assert_eq!(second.iteration(), stop);
        second.run(&mut eval).unwrap();
        let resumed = second.finish();
        prop_assert_eq!(&resumed.metrics, &full.metrics);
        prop_assert_eq!(&resumed.model, &full.model);
    }
}

#[test]
fn saved_state_round_trips() {
    let ds = dataset();
    let cfg = config(FilterStrategy::DetectorTuned, PlMode::PseudoNegative, HeadMode::Separate);
    let mut eval = Evaluator::for_config(&ds, &cfg);
    let mut t = Trainer::new(ds.training_view(), &cfg).unwrap();
    t.run_until(30, &mut eval).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save_checkpoint(&path).unwrap();
    let state = load_checkpoint(&path).unwrap();
    assert_eq!(&state, t.state());
    // re-saving the loaded state gives the same bytes
    let again = dir.path().join("b.ckpt");
    save_checkpoint(&state, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn damaged_files_are_rejected() {
    let ds = dataset();
    let cfg = config(FilterStrategy::Confidence, PlMode::PseudoNegative, HeadMode::Separate);
    let t = Trainer::new(ds.training_view(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    t.save_checkpoint(&path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 2;
    flipped[last] ^= 0x01;
    let damaged = [
        good[..good.len() / 2].to_vec(),
        good[..10].to_vec(),
        flipped,
        [b"XXXXXXXX".as_slice(), &good[8..]].concat(),
    ];
    for (i, bytes) in damaged.iter().enumerate() {
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint { path: p, .. }) => assert_eq!(p, path),
            other => panic!("case {i}: {other:?}"),
        }
    }
}
