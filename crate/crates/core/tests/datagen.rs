use segkoop::datagen::{collect_dataset, count_jsonl, CollectionOptions, RampHoldSchedule};
use segkoop::{Error, RobotConfig, TrajectoryDataset};

fn small_options() -> CollectionOptions {
    CollectionOptions {
        per_segment: 4,
        waypoints: 2,
        ramp_steps: 6,
        hold_steps: 3,
        ..CollectionOptions::default()
    }
}

fn small_dataset(seed: u64) -> TrajectoryDataset {
    collect_dataset(&RobotConfig::default(), 3, seed, &small_options()).unwrap()
}

#[test]
fn collection_is_deterministic_and_seed_sensitive() {
    let a = small_dataset(7);
    let b = small_dataset(7);
    let c = small_dataset(8);
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn dataset_shapes() {
    let ds = small_dataset(1);
    let steps = small_options().steps_per_trajectory();
    assert_eq!(ds.trajectories.len(), 3);
    assert_eq!(ds.state_dim(), 12);
    assert_eq!(ds.input_dim(), 3);
    assert_eq!(ds.snapshot_count(), 3 * steps);
    for (i, t) in ds.trajectories.iter().enumerate() {
        assert_eq!(t.index, i);
        assert_eq!(t.inputs.len(), steps);
        assert_eq!(t.samples.len(), steps + 1);
        // Starts at the unactuated straight configuration.
        let tip = &t.samples[0].positions[9..12];
        assert!((tip[2] - 1.0).abs() < 1e-10 && tip[0].abs() < 1e-10);
    }
}

#[test]
fn inputs_are_zero_order_hold_samples_of_the_schedule() {
    let ds = small_dataset(3);
    let dt = ds.header.dt;
    for t in &ds.trajectories {
        for (k, u) in t.inputs.iter().enumerate() {
            let expected = t.schedule.input_at(k as f64 * dt).unwrap();
            assert_eq!(u.as_slice(), expected.as_slice());
            assert!(u.iter().all(|&v| (0.0..=8.0).contains(&v)));
        }
    }
}

#[test]
fn stride_subsamples_the_same_run() {
    let full = small_dataset(5);
    let strided = collect_dataset(
        &RobotConfig::default(),
        3,
        5,
        &CollectionOptions {
            stride: 2,
            ..small_options()
        },
    )
    .unwrap();
    assert_eq!(strided.header.dt, 2.0 * full.header.dt);
    for (a, b) in full.trajectories.iter().zip(&strided.trajectories) {
        assert_eq!(b.samples.len(), a.samples.len().div_ceil(2));
        for (k, s) in b.samples.iter().enumerate() {
            assert_eq!(s, &a.samples[2 * k]);
        }
        for (k, u) in b.inputs.iter().enumerate() {
            assert_eq!(u, &a.inputs[2 * k]);
        }
    }
}

#[test]
fn file_round_trip_is_exact() {
    let ds = small_dataset(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    ds.save(&path).unwrap();
    let back = TrajectoryDataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.hash(), ds.hash());
}

#[test]
fn truncated_and_padded_files_are_corrupt() {
    let ds = small_dataset(12);
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes).unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = TrajectoryDataset::read_from(&mut &bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_) | Error::Io(_)), "cut {cut}: {err}");
    }
    let mut padded = bytes.clone();
    padded.push(0);
    assert!(matches!(
        TrajectoryDataset::read_from(&mut padded.as_slice()),
        Err(Error::Corrupt(_))
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(TrajectoryDataset::read_from(&mut bad_magic.as_slice()).is_err());
    let mut bad_version = bytes;
    bad_version[4] = 99;
    assert!(matches!(
        TrajectoryDataset::read_from(&mut bad_version.as_slice()),
        Err(Error::VersionMismatch { .. })
    ));
}

#[test]
fn merge_checks_config_hash() {
    let mut a = small_dataset(1);
    let b = small_dataset(2);
    a.merge(b.clone()).unwrap();
    assert_eq!(a.trajectories.len(), 6);

    let other = collect_dataset(
        &RobotConfig {
            youngs_modulus: 1e11,
            ..RobotConfig::default()
        },
        1,
        2,
        &small_options(),
    )
    .unwrap();
    let mut c = small_dataset(1);
    assert!(matches!(c.merge(other), Err(Error::ConfigHashMismatch { .. })));
    assert_eq!(c.trajectories.len(), 3);
}

#[test]
fn split_partitions_trajectories() {
    let ds = small_dataset(4);
    let (train, test) = ds.split(2.0 / 3.0);
    assert_eq!(train.trajectories.len(), 2);
    assert_eq!(test.trajectories.len(), 1);
    assert_eq!(train.trajectories[0], ds.trajectories[0]);
    assert_eq!(test.trajectories[0], ds.trajectories[2]);
}

#[test]
fn json_lines_export_has_one_line_per_snapshot() {
    let ds = small_dataset(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    ds.write_jsonl(&mut f).unwrap();
    drop(f);
    assert_eq!(count_jsonl(&path).unwrap(), ds.snapshot_count());
    let first = std::fs::read_to_string(&path).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(line.is_object());
}

#[test]
fn schedule_rejects_bad_parameters() {
    assert!(RampHoldSchedule::sample(3, 0, 8.0, 0.4, 0.1, 0).is_err());
    assert!(RampHoldSchedule::sample(3, 2, -1.0, 0.4, 0.1, 0).is_err());
    assert!(RampHoldSchedule::sample(3, 2, 8.0, 0.0, 0.1, 0).is_err());
    let s = RampHoldSchedule::sample(3, 2, 8.0, 0.4, 0.1, 0).unwrap();
    assert!(matches!(s.input_at(-0.01), Err(Error::TimeOutOfRange { .. })));
    assert!(matches!(s.input_at(s.duration()), Err(Error::TimeOutOfRange { .. })));
}
