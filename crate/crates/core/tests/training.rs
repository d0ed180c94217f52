// SPDX-License-Identifier: Apache-2.0

use gaplanes::combiner::presets;
use gaplanes::geometry::{make_video, VideoSpec};
use gaplanes::experiments::video_datasets;
use gaplanes::model::{Mode, Model, ModelSpec};
use gaplanes::training::{estimate_lipschitz, fit, Optimizer, PointDataset, TrainConfig};

fn small_video() -> PointDataset {
    let v = make_video(&VideoSpec::default_video(12, 12, 0)).unwrap();
    video_datasets(&v).unwrap().0
}

fn small_spec(mode: Mode) -> ModelSpec {
    ModelSpec::volume(presets::CONCAT, [2, 2, 2], [6, 6, 4], mode, 4)
}

#[test]
fn convex_full_batch_descent_is_monotone() {
    let data = small_video();
    let mut model = Model::build(&small_spec(Mode::Convex), 3, 4).unwrap();
    let l = estimate_lipschitz(&model, &data, 60, 0);
    assert!(l > 0.0 && l.is_finite());
    let lr = 0.9 / l;
    let cfg = TrainConfig {
        steps: 150,
        batch_size: data.coords.len(),
        optimizer: Optimizer::Sgd,
        lr_grids: lr,
        lr_decoder: lr,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let log = fit(&mut model, &data, &cfg).unwrap();
    for w in log.rows.windows(2) {
        assert!(w[1].loss <= w[0].loss * (1.0 + 1e-12), "step {}: {} -> {}", w[1].step, w[0].loss, w[1].loss);
    }
    assert!(log.rows.last().unwrap().loss < log.rows[0].loss);
}

#[test]
fn identical_seeds_reproduce_logs_bitwise() {
    let data = small_video();
    for mode in Mode::ALL {
        let cfg = TrainConfig { steps: 40, batch_size: 300, eval_every: 5, seed: 17, ..TrainConfig::default() };
        let run = || {
            let mut m = Model::build(&small_spec(mode), 5, 6).unwrap();
            let log = fit(&mut m, &data, &cfg).unwrap();
            (log, m.trainable_vector())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert!(a.same_trace(&b), "{mode}");
        assert_eq!(pa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), pb.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let data = small_video();
    let base = TrainConfig { steps: 20, batch_size: 1000, eval_every: 5, ..TrainConfig::default() };
    let mut logs = Vec::new();
    for threads in [1, 2, 3] {
        let mut m = Model::build(&small_spec(Mode::Semiconvex), 1, 2).unwrap();
        logs.push((fit(&mut m, &data, &TrainConfig { threads, ..base.clone() }).unwrap(), m.trainable_vector()));
    }
    for (log, params) in &logs[1..] {
        assert!(log.same_trace(&logs[0].0));
        assert_eq!(params, &logs[0].1);
    }
}

#[test]
fn frozen_gates_survive_training() {
    let data = small_video();
    for mode in [Mode::Convex, Mode::Semiconvex] {
        let mut m = Model::build(&small_spec(mode), 8, 9).unwrap();
        let gates = m.gate_grids.clone();
        let frozen = m.decoder.clone();
        fit(&mut m, &data, &TrainConfig { steps: 30, batch_size: 256, ..TrainConfig::default() }).unwrap();
        assert_eq!(m.gate_grids, gates);
        if mode == Mode::Semiconvex {
            assert_eq!(m.decoder.frozen, frozen.frozen);
            assert_ne!(m.decoder.params, frozen.params);
        }
    }
}

#[test]
fn bad_configs_are_rejected() {
    let data = small_video();
    let mut m = Model::build(&small_spec(Mode::Nonconvex), 0, 1).unwrap();
    for cfg in [
        TrainConfig { steps: 0, ..TrainConfig::default() },
        TrainConfig { lr_grids: -1.0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { threads: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(fit(&mut m, &data, &cfg), Err(gaplanes::Error::Config(_))));
    }
    let empty = PointDataset::new(Vec::new(), Vec::new()).unwrap();
    assert!(fit(&mut m, &empty, &TrainConfig::default()).is_err());
}
