//! Checkpoint round trips and run reproducibility.

use std::collections::BTreeMap;

use commformer_core::diffmath::checkpoint::{self, MANIFEST_FILE, VALUES_FILE};
use commformer_core::diffmath::{normal, ParameterStore};
use commformer_core::envs::EnvSpec;
use commformer_core::trainer::{RunSetup, TrainConfig, Trainer};
use commformer_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store() -> ParameterStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParameterStore::new();
    s.insert("b.w", normal(&[3, 4], 1.0, &mut rng)).unwrap();
    s.insert("a.bias", normal(&[4], 1.0, &mut rng)).unwrap();
    s.insert("c.scalar", normal(&[1], 1e-300, &mut rng))
        .unwrap();
    s
}

fn setup(seed: u64) -> RunSetup {
    RunSetup {
        env: EnvSpec::by_name("diag").unwrap(),
        sparsity: 0.4,
        k: Some(1),
        hidden: 8,
        blocks: 1,
        seed,
        train: TrainConfig {
            n_workers: 1,
            rollout_len: 8,
            ppo_epochs: 2,
            ..Default::default()
        },
    }
}

fn records(tr: &mut Trainer<f64>, iterations: usize) -> Vec<String> {
    (0..iterations)
        .map(|_| {
            let out = tr.run_iteration().unwrap();
            serde_json::to_string(&out.record).unwrap()
                + &serde_json::to_string(&out.snapshot).unwrap()
        })
        .collect()
}

#[test]
fn save_then_load_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let s = store();
    let mut meta = BTreeMap::new();
    meta.insert("note".to_string(), serde_json::json!("x"));
    checkpoint::save(&path, &s, meta.clone()).unwrap();
    let (back, manifest) = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(manifest.meta, meta);
    let names: Vec<&str> = back.names().collect();
    assert_eq!(names, s.names().collect::<Vec<_>>());
    for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn corrupted_files_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    checkpoint::save(&path, &store(), BTreeMap::new()).unwrap();

    let values = std::fs::read(path.join(VALUES_FILE)).unwrap();
    let mut flipped = values.clone();
    flipped[3] ^= 0x10;
    std::fs::write(path.join(VALUES_FILE), &flipped).unwrap();
    assert!(matches!(
        checkpoint::load::<f64>(&path),
        Err(Error::Checkpoint(_))
    ));
    std::fs::write(path.join(VALUES_FILE), &values).unwrap();

    let manifest = std::fs::read_to_string(path.join(MANIFEST_FILE)).unwrap();
    std::fs::write(path.join(MANIFEST_FILE), &manifest[..manifest.len() / 2]).unwrap();
    assert!(matches!(
        checkpoint::load::<f64>(&path),
        Err(Error::Checkpoint(_))
    ));

    let bumped = manifest.replace("\"format_version\": 1", "\"format_version\": 99");
    std::fs::write(path.join(MANIFEST_FILE), bumped).unwrap();
    match checkpoint::load::<f64>(&path) {
        Err(Error::Version { found, expected }) => assert_eq!((found, expected), (99, 1)),
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn wrong_dtype_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    checkpoint::save(&path, &store(), BTreeMap::new()).unwrap();
    assert!(checkpoint::load::<f32>(&path).is_err());
}

#[test]
fn identical_single_worker_runs_match_byte_for_byte() {
    let a = records(&mut Trainer::new(setup(3)).unwrap(), 4);
    let b = records(&mut Trainer::new(setup(3)).unwrap(), 4);
    assert_eq!(a, b);
    let c = records(&mut Trainer::new(setup(4)).unwrap(), 4);
    assert_ne!(a, c);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_same_run() {
    let straight = records(&mut Trainer::new(setup(9)).unwrap(), 5);

    let mut first = Trainer::<f64>::new(setup(9)).unwrap();
    let mut resumed = records(&mut first, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid");
    let (state, meta) = first.state().unwrap();
    checkpoint::save(&path, &state, meta).unwrap();
    drop(first);

    let (state, manifest) = checkpoint::load::<f64>(&path).unwrap();
    let mut second = Trainer::from_state(setup(9), &state, &manifest.meta).unwrap();
    resumed.extend(records(&mut second, 3));
    assert_eq!(straight, resumed);
}

#[test]
fn stage_two_resumes_too() {
    let mut a = Trainer::<f64>::new(setup(2)).unwrap();
    records(&mut a, 2);
    a.begin_stage2().unwrap();
    let (state, meta) = a.state().unwrap();
    let mut b = Trainer::from_state(setup(2), &state, &meta).unwrap();
    assert_eq!(records(&mut a, 2), records(&mut b, 2));
}
