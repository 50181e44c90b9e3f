mod common;

use prml::param::{project_to_box, ParamBox, ParameterPoint};
use prml::rml::run;
use prml::rml::RunOptions;
use prml::models::simulate;
use prml::rng::{KeyedStreams, RngStream};
use prml::schedule::StepSchedule;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn step_size_examples() {
    assert_eq!(StepSchedule::new(1.0, 1.0, 0).unwrap().step_size(0), 1.0);
    assert!((StepSchedule::new(1.0, 1.0, 0).unwrap().step_size(99) - 0.01).abs() < 1e-15);
    let v = StepSchedule::new(1.0, 0.6, 0).unwrap().step_size(3);
    assert!((v - 0.435_275_281_648_062).abs() < 1e-12, "{v}");
}

#[test]
fn step_sizes_decrease() {
    let s = StepSchedule::new(0.5, 0.7, 4).unwrap();
    for n in 0..1000 {
        assert!(s.step_size(n + 1) < s.step_size(n));
        assert!(s.step_size(n) > 0.0);
    }
}

#[test]
fn invalid_schedules_rejected() {
    assert!(StepSchedule::new(-1.0, 0.7, 0).is_err());
    assert!(StepSchedule::new(1.0, 0.5, 0).is_err());
    assert!(StepSchedule::new(1.0, 1.1, 0).is_err());
    assert!(StepSchedule::new(f64::NAN, 0.7, 0).is_err());
}

#[test]
fn step_sums_diverge_while_squares_plateau() {
    for &(a0, a) in &[(1.0, 0.6), (0.5, 0.7), (1.0, 1.0)] {
        let s = StepSchedule::new(a0, a, 0).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        let mut decades = Vec::new();
        let mut next = 100u64;
        for n in 0..1_000_000u64 {
            let v = s.step_size(n);
            sum += v;
            sq += v * v;
            if n + 1 == next {
                decades.push((sum, sq));
                next *= 10;
            }
        }
        let bound = a0 * a0 * (1.0 + 1.0 / (2.0 * a - 1.0));
        assert!(sq <= bound, "a={a}: {sq} > {bound}");
        // Per-decade increments: linear sums never shrink, squared sums
        // shrink geometrically.
        let inc: Vec<(f64, f64)> = decades.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
        for k in 1..inc.len() {
            assert!(inc[k].0 >= 0.99 * inc[k - 1].0, "a={a}: {inc:?}");
            assert!(inc[k].1 <= 0.7 * inc[k - 1].1, "a={a}: {inc:?}");
        }
        assert!(inc.last().unwrap().0 > 1.0);
    }
}

#[test]
fn projection_examples() {
    let unit = ParamBox::new(vec![0.0], vec![1.0]).unwrap();
    let p = ParameterPoint { theta: vec![0.5], bounds: unit.clone() };
    assert_eq!(project_to_box(&p).theta, vec![0.5]);
    let p = ParameterPoint { theta: vec![1.7], bounds: unit };
    assert_eq!(project_to_box(&p).theta, vec![1.0]);
    let sq = ParamBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let p = ParameterPoint { theta: vec![-2.0, 0.3], bounds: sq };
    assert_eq!(project_to_box(&p).theta, vec![-1.0, 0.3]);
}

#[test]
fn invalid_boxes_rejected() {
    assert!(ParamBox::new(vec![1.0], vec![1.0]).is_err());
    assert!(ParamBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
    assert!(ParameterPoint::new(vec![0.5, 0.5], ParamBox::new(vec![0.0], vec![1.0]).unwrap()).is_err());
    assert!(ParameterPoint::new(vec![f64::NAN], ParamBox::new(vec![0.0], vec![1.0]).unwrap()).is_err());
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_lands_in_box(
        theta in proptest::collection::vec(-10.0f64..10.0, 3),
        lo in proptest::collection::vec(-5.0f64..0.0, 3),
        width in proptest::collection::vec(0.01f64..5.0, 3),
    ) {
        let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
        let p = ParameterPoint { theta, bounds: ParamBox::new(lo, hi).unwrap() };
        let once = project_to_box(&p);
        prop_assert!(once.is_inside());
        prop_assert_eq!(project_to_box(&once), once);
    }

    #[test]
    fn keyed_draws_do_not_depend_on_order(seed in any::<u64>(), step in 0u64..1000, i in 0u64..1000) {
        let streams = KeyedStreams::new(RngStream::new(seed));
        let _ = streams.particle(step + 1, i).random::<f64>();
        let a: f64 = streams.particle(step, i).random();
        let b: f64 = KeyedStreams::new(RngStream::new(seed)).particle(step, i).random();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn distinct_keys_give_distinct_streams() {
    let streams = KeyedStreams::new(RngStream::new(7));
    let a: u64 = streams.particle(3, 4).random();
    let b: u64 = streams.particle(4, 3).random();
    let c: u64 = streams.particle(3, 5).random();
    assert!(a != b && a != c && b != c);
    assert_ne!(RngStream::new(1).derive(1), RngStream::new(1).derive(2));
}

#[test]
fn identical_seeds_give_bit_identical_traces() {
    let m = common::ar1_phi(1.0, 1.0, (-8.0, 8.0), (-15.0, 15.0));
    let obs = simulate(&m, &[0.5], 60, RngStream::new(4)).unwrap().observations;
    let start = ParameterPoint::new(vec![0.0], ParamBox::new(vec![-0.9], vec![0.9]).unwrap()).unwrap();
    let opts = RunOptions { particles: 30, seed: 9, record_wall_time: false };
    let sched = StepSchedule::new(0.5, 0.7, 0).unwrap();
    let (_, a) = run(&m, &start, sched, &obs, opts).unwrap();
    let (_, b) = run(&m, &start, sched, &obs, opts).unwrap();
    let la: Vec<String> = a.iter().map(|r| r.to_json_line()).collect();
    let lb: Vec<String> = b.iter().map(|r| r.to_json_line()).collect();
    assert_eq!(la, lb);
    let (_, c) = run(&m, &start, sched, &obs, RunOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a, c);
}
