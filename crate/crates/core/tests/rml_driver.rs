mod common;

use nalgebra::{DMatrix, DVector};
use prml::models::{simulate, Ar1Maps, StateSpaceModel};
use prml::oracle::KalmanOracle;
use prml::param::{ParamBox, ParameterPoint};
use prml::rml::{
    replay_discrepancy, rml_step, run, run_with, InjectedScore, ParticleScore, RmlState, RunOptions, TraceRecord,
};
use prml::rng::{KeyedStreams, RngStream};
use prml::schedule::StepSchedule;
use prml::smc::ParticleSystem;
use prml::Error;

fn phi_box() -> ParamBox {
    ParamBox::new(vec![-0.95], vec![0.95]).unwrap()
}

fn opts(particles: usize, seed: u64) -> RunOptions {
    RunOptions { particles, seed, record_wall_time: false }
}

#[test]
fn zero_step_sizes_freeze_the_parameter() {
    let m = common::ar1_phi(1.0, 1.0, (-8.0, 8.0), (-12.0, 12.0));
    let obs = simulate(&m, &[0.5], 40, RngStream::new(50)).unwrap().observations;
    let start = ParameterPoint::new(vec![0.2], phi_box()).unwrap();
    let (summary, trace) = run(&m, &start, StepSchedule::frozen(), &obs, opts(20, 1)).unwrap();
    assert_eq!(summary.theta, vec![0.2]);
    assert!(trace.iter().all(|r| r.theta == vec![0.2] && r.theta_next == vec![0.2] && r.step_size == 0.0));
    // The particles still move and their weights still evolve.
    assert!(trace.iter().any(|r| r.score[0] != 0.0));
    assert!(trace.windows(2).any(|w| w[0].centered_weight_norm != w[1].centered_weight_norm));
}

#[test]
fn parameter_free_model_never_moves() {
    let m = common::inert((-4.0, 4.0), (-6.0, 6.0));
    let obs = simulate(&m, &[0.0], 60, RngStream::new(51)).unwrap().observations;
    let start = ParameterPoint::new(vec![0.3], ParamBox::new(vec![-1.0], vec![1.0]).unwrap()).unwrap();
    let sched = StepSchedule::new(1.0, 0.6, 0).unwrap();
    let (summary, trace) = run(&m, &start, sched, &obs, opts(25, 2)).unwrap();
    assert_eq!(summary.theta, vec![0.3]);
    for r in &trace {
        assert_eq!(r.score, vec![0.0]);
        assert_eq!(r.centered_weight_norm, 0.0);
    }
}

#[test]
fn one_step_matches_hand_evaluation() {
    let m = common::ar1_phi(0.9, 1.1, (-3.0, 3.0), (-5.0, 5.0));
    let theta0 = 0.35;
    let old = vec![vec![-0.4], vec![0.9]];
    let w0 = DMatrix::from_row_slice(1, 2, &[0.25, -0.6]);
    let (y0, y1) = (vec![0.5], vec![-0.3]);
    let sched = StepSchedule::new(0.8, 0.7, 0).unwrap();
    let particles = ParticleSystem::with_weights(old.clone(), w0.clone(), 0).unwrap();
    let start = ParameterPoint::new(vec![theta0], phi_box()).unwrap();
    let mut state = RmlState::new(start, particles, sched, y0.clone()).unwrap();
    let streams = KeyedStreams::new(RngStream::new(52));
    let rec = rml_step(&m, &mut state, &y1, &streams, &mut ParticleScore::new(&m)).unwrap();
    let new = state.particles().positions().to_vec();
    assert_eq!(state.step(), 1);

    let dens = |f: &dyn Fn(&mut [f64]) -> f64| {
        let mut g = [0.0];
        let v = f(&mut g);
        (v.exp(), g[0])
    };
    let t = [theta0];
    // Derivative weights of the new particles.
    let mut w1 = [0.0; 2];
    for j in 0..2 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..2 {
            let (p, gp) = dens(&|g| m.log_trans(&t, &old[i], &new[j], Some(g)).unwrap());
            let (q, gq) = dens(&|g| m.log_obs(&t, &old[i], &y0, Some(g)).unwrap());
            let r = p * q;
            num += r * (gp + gq) + r * w0[(0, i)];
            den += r;
        }
        w1[j] = num / den;
    }
    // Score against the next observation.
    let w_bar = 0.5 * (w1[0] + w1[1]);
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..2 {
        let (q, gq) = dens(&|g| m.log_obs(&t, &new[j], &y1, Some(g)).unwrap());
        num += q * (w1[j] - w_bar) + q * gq;
        den += q;
    }
    let h = num / den;
    let theta1 = (theta0 + 0.8 * h).clamp(-0.95, 0.95);

    for j in 0..2 {
        assert!((state.particles().weights()[(0, j)] - w1[j]).abs() < 1e-10);
    }
    assert!((rec.score[0] - h).abs() < 1e-10);
    assert!((rec.theta_next[0] - theta1).abs() < 1e-10);
    assert_eq!(rec.step_size, 0.8);
    assert_eq!(state.parameter().theta, rec.theta_next);
}

#[test]
fn two_observations_give_one_update() {
    let m = common::ar1_phi(1.0, 1.0, (-8.0, 8.0), (-12.0, 12.0));
    let obs = vec![vec![0.1], vec![-0.4]];
    let start = ParameterPoint::new(vec![0.0], phi_box()).unwrap();
    let (summary, trace) = run(&m, &start, StepSchedule::new(0.5, 0.7, 0).unwrap(), &obs, opts(10, 3)).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(summary.steps, 1);
    assert_eq!(trace[0].n, 0);
    assert_eq!(summary.theta, trace[0].theta_next);
}

#[test]
fn bad_runs_are_rejected() {
    let m = common::ar1_phi(1.0, 1.0, (-8.0, 8.0), (-12.0, 12.0));
    let start = ParameterPoint::new(vec![0.0], phi_box()).unwrap();
    let sched = StepSchedule::new(0.5, 0.7, 0).unwrap();
    assert!(run(&m, &start, sched, &[], opts(10, 0)).is_err());
    assert!(run(&m, &start, sched, &[vec![0.0]], opts(10, 0)).is_err());
    let r = run(&m, &start, sched, &[vec![0.0], vec![1.0], vec![13.0]], opts(10, 0));
    assert!(matches!(r, Err(Error::ObservationOutsideBox { step: 2 })), "{r:?}");
    let r = run(&m, &start, sched, &[vec![0.0], vec![1.0, 2.0]], opts(10, 0));
    assert!(matches!(r, Err(Error::Dimension { .. })), "{r:?}");
    assert!(run(&m, &start, sched, &[vec![0.0], vec![1.0]], opts(0, 0)).is_err());
    let outside = ParameterPoint { theta: vec![1.5], bounds: phi_box() };
    assert!(run(&m, &outside, sched, &[vec![0.0], vec![1.0]], opts(10, 0)).is_err());
}

#[test]
fn degeneracy_reports_the_failing_step() {
    // Tiny observation noise and an observation far from every particle.
    let m = common::ar1_phi(0.3, 0.01, (-1.0, 1.0), (-10.0, 10.0));
    let start = ParameterPoint::new(vec![0.0], phi_box()).unwrap();
    let obs = vec![vec![0.0], vec![0.1], vec![9.0], vec![0.0]];
    let err = run(&m, &start, StepSchedule::new(0.1, 0.7, 0).unwrap(), &obs, opts(5, 4)).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, Error::Degeneracy { step: 2, .. } | Error::AtStep { step: 2, .. }), "{text}");
}

#[test]
fn traces_replay_exactly_and_round_trip_through_json() {
    let m = common::ar1_phi(1.0, 1.0, (-8.0, 8.0), (-12.0, 12.0));
    let obs = simulate(&m, &[0.9], 400, RngStream::new(53)).unwrap().observations;
    // A narrow box so that the projection is exercised.
    let bounds = ParamBox::new(vec![-0.2], vec![0.5]).unwrap();
    let start = ParameterPoint::new(vec![0.0], bounds.clone()).unwrap();
    let (summary, trace) = run(&m, &start, StepSchedule::new(1.0, 0.6, 0).unwrap(), &obs, opts(40, 5)).unwrap();
    assert_eq!(trace.len(), obs.len() - 1);
    assert!(trace.iter().enumerate().all(|(k, r)| r.n == k));
    assert!(summary.projection_hits > 0);
    assert_eq!(summary.projection_hits, trace.iter().filter(|r| r.projected).count() as u64);
    assert!(trace.iter().all(|r| bounds.contains(&r.theta_next)));
    assert!(replay_discrepancy(&trace, &bounds).unwrap() <= 1e-12);

    let parsed: Vec<TraceRecord> =
        trace.iter().map(|r| TraceRecord::from_json_line(&r.to_json_line()).unwrap()).collect();
    assert_eq!(parsed, trace);

    let mut tampered = trace.clone();
    tampered[10].theta_next[0] += 1e-9;
    assert!(replay_discrepancy(&tampered, &bounds).unwrap() > 1e-10);
}

#[test]
fn exact_gradient_drives_the_loop_to_a_stationary_point() {
    let layout = common::layout(&Ar1Maps::NAMES, &["phi", "sigma_v"], &[("sigma_w", 1.0)]);
    let maps = Ar1Maps::new(layout.clone()).unwrap();
    let model = prml::models::ar1(
        layout,
        prml::models::Bounds::interval(-12.0, 12.0).unwrap(),
        prml::models::Bounds::interval(-16.0, 16.0).unwrap(),
    )
    .unwrap();
    let record = simulate(&model, &[0.6, 1.0], 2000, RngStream::new(54)).unwrap().observations;
    let oracle = KalmanOracle::new(maps, 0.0, 1.0 / (1.0 - 0.36)).unwrap();

    let bounds = ParamBox::new(vec![-0.95, 0.2], vec![0.95, 3.0]).unwrap();
    let start = ParameterPoint::new(vec![0.0, 2.0], bounds).unwrap();
    let stream = simulate(&model, &[0.6, 1.0], 3000, RngStream::new(55)).unwrap().observations;
    let mut exact = InjectedScore::new(|theta: &[f64], _n: usize| {
        Ok(oracle.evaluate_summary(theta, &record)?.gradient)
    });
    let summary = run_with(
        &model,
        &start,
        StepSchedule::new(1.0, 0.6, 0).unwrap(),
        &stream,
        opts(5, 6),
        &mut exact,
        |_| Ok(()),
    )
    .unwrap();
    let g: DVector<f64> = oracle.evaluate_summary(&summary.theta, &record).unwrap().gradient;
    assert!(g.norm() < 1e-3, "theta {:?}, gradient norm {}", summary.theta, g.norm());
    assert_eq!(summary.projection_hits, 0);
}

#[test]
fn particle_step_index_tracks_updates() {
    let m = common::ar1_phi(1.0, 1.0, (-8.0, 8.0), (-12.0, 12.0));
    let obs = simulate(&m, &[0.5], 12, RngStream::new(56)).unwrap().observations;
    let streams = KeyedStreams::new(RngStream::new(57));
    let particles = ParticleSystem::initial(&m, 15, &streams).unwrap();
    let start = ParameterPoint::new(vec![0.1], phi_box()).unwrap();
    let mut state = RmlState::new(start, particles, StepSchedule::new(0.5, 0.7, 0).unwrap(), obs[0].clone()).unwrap();
    for (k, y) in obs[1..].iter().enumerate() {
        let rec = rml_step(&m, &mut state, y, &streams, &mut ParticleScore::new(&m)).unwrap();
        assert_eq!(rec.n, k);
        assert_eq!(state.step(), k + 1);
        assert!(state.parameter().is_inside());
        assert!(state.particles().positions().iter().all(|x| m.contains_state(x)));
    }
}
