use std::collections::BTreeMap;

use magtrack::calibration::{CalibrationModel, CalibrationPair, Response};
use magtrack::evaluation::{align_streams, compute_errors};
use magtrack::pipeline::{frames_to_distances, track, Experiment, IncompletePolicy, TrackOptions};
use magtrack::positioning::{multilaterate, smooth_trajectory, StreamSolver};
use magtrack::receiver::ReceiverSpec;
use magtrack::scheduler::TdmaSchedule;
use magtrack::simulation::{builtin_scenario, calibration_sweep, generate_trajectory, simulate_run, SimulationConfig};

fn sweep_model(receiver: &ReceiverSpec, response: Response) -> CalibrationModel {
    let s = builtin_scenario("whiteboard").unwrap();
    let pairs = calibration_sweep(&s, receiver, &TdmaSchedule::default(), 100, [0.2, 2.0], 1).unwrap();
    let mut by_coil: BTreeMap<usize, Vec<CalibrationPair>> = BTreeMap::new();
    for (c, p) in pairs {
        by_coil.entry(c).or_default().push(p);
    }
    CalibrationModel::fit(&by_coil, response).unwrap()
}

fn axial_distance_mae(model: &CalibrationModel) -> f64 {
    let s = builtin_scenario("whiteboard").unwrap();
    let rx = ReceiverSpec::default().noiseless();
    let probe = calibration_sweep(&s, &rx, &TdmaSchedule::default(), 33, [0.2, 1.8], 2).unwrap();
    let errs: Vec<f64> = probe
        .iter()
        .map(|(c, p)| (model.get(*c).unwrap().distance(p.strength) - p.distance_m).abs())
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

#[test]
fn noise_free_calibration_round_trip() {
    let model = sweep_model(&ReceiverSpec::default().noiseless(), Response::LogLinear);
    let mae = axial_distance_mae(&model);
    assert!(mae < 0.005, "{mae}");
    for c in model.coils.values() {
        assert!(c.r2 >= 0.999);
    }
}

#[test]
fn straight_line_response_is_coarser_on_the_cube_law() {
    let log = axial_distance_mae(&sweep_model(&ReceiverSpec::default().noiseless(), Response::LogLinear));
    let lin = axial_distance_mae(&sweep_model(&ReceiverSpec::default().noiseless(), Response::Linear));
    assert!(lin > 5.0 * log, "linear {lin} vs log-linear {log}");
}

#[test]
fn whiteboard_default_noise_quality() {
    let res = Experiment::default().run(&builtin_scenario("whiteboard").unwrap()).unwrap();
    assert!(res.distance_mae_m <= 0.1, "{}", res.distance_mae_m);
    assert!(res.frames >= 1000);
    for m in res.report.mae_m {
        assert!((0.03..=0.15).contains(&m), "{:?}", res.report.mae_m);
    }
}

#[test]
fn wider_window_does_not_hurt_on_noisy_runs() {
    for seed in 1..=3 {
        let s = builtin_scenario("whiteboard").unwrap();
        let base = Experiment {
            seed,
            ..Default::default()
        };
        let w1 = Experiment {
            track: TrackOptions {
                window: 1,
                ..Default::default()
            },
            ..base.clone()
        };
        let a = base.run(&s).unwrap().report.mae_m;
        let b = w1.run(&s).unwrap().report.mae_m;
        for k in 0..3 {
            assert!(a[k] <= b[k], "seed {seed}: window 5 {a:?} vs window 1 {b:?}");
        }
    }
}

#[test]
fn warm_start_needs_fewer_iterations_than_cold() {
    let s = builtin_scenario("table").unwrap();
    let traj = generate_trajectory(&s, 120.0, 4).unwrap();
    assert!(traj.max_speed() <= 1.5);
    let cfg = SimulationConfig {
        seed: 4,
        ..Default::default()
    };
    let run = simulate_run(&s, &traj, &cfg).unwrap();
    let model = sweep_model(&cfg.receiver, Response::LogLinear);
    let dvs = frames_to_distances(&run.frames, &model, &cfg.schedule, IncompletePolicy::Drop).unwrap();
    let beacons = s.beacons();
    let mut warm_solver = StreamSolver::new(beacons.clone(), Default::default());
    let mut warm: Vec<usize> = dvs.iter().map(|d| warm_solver.solve(d).iterations).collect();
    let mut cold: Vec<usize> = dvs
        .iter()
        .map(|d| multilaterate(&beacons, d, beacons.centroid()).unwrap().iterations)
        .collect();
    warm.sort_unstable();
    cold.sort_unstable();
    let (mw, mc) = (warm[warm.len() / 2], cold[cold.len() / 2]);
    assert!(mw < mc, "warm median {mw}, cold median {mc}");
}

#[test]
fn hold_last_keeps_every_frame() {
    let s = builtin_scenario("shelf").unwrap();
    let traj = generate_trajectory(&s, 30.0, 6).unwrap();
    let cfg = SimulationConfig {
        seed: 6,
        ..Default::default()
    };
    let mut run = simulate_run(&s, &traj, &cfg).unwrap();
    for f in run.frames.iter_mut().skip(3).step_by(7) {
        f.strengths[2] = None;
    }
    let model = sweep_model(&cfg.receiver, Response::LogLinear);
    let opts = |incomplete| TrackOptions {
        incomplete,
        ..Default::default()
    };
    let drop = track(&run.frames, &model, &s.beacons(), &cfg.schedule, &opts(IncompletePolicy::Drop)).unwrap();
    let hold = track(&run.frames, &model, &s.beacons(), &cfg.schedule, &opts(IncompletePolicy::HoldLast)).unwrap();
    assert!(drop.dropped_frames > 0);
    assert_eq!(hold.dropped_frames, 0);
    assert_eq!(hold.smoothed.len(), drop.smoothed.len() + drop.dropped_frames);
    let score = |est: &[_]| {
        let a = align_streams(est, &run.truth_clean, 210.0).unwrap();
        compute_errors(&a.pairs, "shelf").unwrap().mae_m
    };
    let (sd, sh) = (score(&drop.smoothed), score(&hold.smoothed));
    for k in 0..3 {
        assert!(sh[k] < 0.2 && sd[k] < 0.2, "{sd:?} {sh:?}");
    }
    assert_eq!(smooth_trajectory(&hold.raw, 1).unwrap().len(), hold.raw.len());
}
