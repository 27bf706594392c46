use proptest::prelude::*;

use radar_core::drivers::{AlgorithmKind, EpochMode};
use radar_core::engine::{MetricKind, RunTrace, TracePoint};
use radar_core::geometry::{l1_norm, project_l1_ball};
use radar_core::harness::{
    fit_rate, read_trace_csv, summarize, write_trace_csv, ExperimentSpec, SparsityRule, TaggedTrace,
};
use radar_core::oracles::{make_sparse_target, stream_rng, TargetValues};
use radar_core::reference::project_l1_ball_enumerate;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        (-300i32..300, 1.0f64..10.0).prop_map(|(e, m)| m * 10f64.powi(e)),
        Just(0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn small_spec(dim: usize, budget: u64, seed: u64, mode: EpochMode) -> ExperimentSpec {
    ExperimentSpec {
        dim,
        sparsity: SparsityRule::Explicit(2),
        budget,
        seed,
        trials: 1,
        epoch_mode: mode,
        ..ExperimentSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l1_projection_matches_face_enumeration(x in prop::collection::vec(-5.0f64..5.0, 1..8), r in 0.05f64..6.0) {
        let fast = project_l1_ball(&x, r);
        let slow = project_l1_ball_enumerate(&x, r);
        prop_assert!(l1_norm(&fast) <= r * (1.0 + 1e-12));
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn targets_have_exact_support(d in 3usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let s = 1 + ((d - 1) as f64 * frac) as usize;
        let mut rng = stream_rng(seed, 0);
        let t = make_sparse_target(d, s, TargetValues::RandomSigns { magnitude: 1.0 }, &mut rng).unwrap();
        prop_assert_eq!(t.iter().filter(|v| **v != 0.0).count(), s);
    }

    #[test]
    fn radar_iterates_stay_feasible(d in 5usize..40, budget in 20u64..400, seed in 0u64..1000, halving in any::<bool>()) {
        let mode = if halving { EpochMode::OracleHalving } else { EpochMode::Theoretical };
        let spec = small_spec(d, budget, seed, mode);
        for kind in [AlgorithmKind::Radar, AlgorithmKind::RadarConst, AlgorithmKind::Eda] {
            let res = spec.run_one(kind, 0).unwrap();
            let total: u64 = res.trace.epochs.iter().map(|e| e.iterations).sum();
            prop_assert_eq!(total, budget);
            for e in &res.trace.epochs {
                prop_assert!(e.max_feasibility <= 1.0 + 1e-9);
            }
            for w in res.trace.epochs.windows(2) {
                prop_assert_eq!(w[1].radius_sq, w[0].radius_sq / 2.0);
            }
            for w in res.trace.points.windows(2) {
                prop_assert!(w[0].iteration < w[1].iteration);
            }
            prop_assert_eq!(res.trace.last().unwrap().iteration, budget);
            prop_assert!(res.final_iterate.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn trace_csv_round_trip(vals in prop::collection::vec((finite(), finite(), finite(), finite()), 1..30), trial in 0usize..100) {
        let points: Vec<TracePoint> = vals
            .iter()
            .enumerate()
            .map(|(k, &(a, b, c, l))| TracePoint {
                iteration: k as u64 + 1,
                epoch: k / 3 + 1,
                error_l2_sq: a.abs(),
                error_l1: b.abs(),
                radius: c.abs(),
                lambda: l.abs(),
            })
            .collect();
        let trace = RunTrace { stride: 1, metric: MetricKind::ParameterError, points, epochs: vec![] };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, trial, "eda", &trace).unwrap();
        let rows = read_trace_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(rows.len(), trace.points.len());
        for (r, p) in rows.iter().zip(&trace.points) {
            prop_assert_eq!(r.trial, trial);
            prop_assert_eq!(&r.point, p);
        }
    }

    #[test]
    fn fit_rate_recovers_power_laws(c in 1e-3f64..1e3, a in -2.0f64..1.0, stride in 1u64..50) {
        let pts: Vec<(u64, f64)> = (1..=100u64).map(|k| (k * stride, c * ((k * stride) as f64).powf(a))).collect();
        prop_assert!((fit_rate(&pts).unwrap() - a).abs() < 1e-6);
    }

    #[test]
    fn summary_means_are_bracketed(values in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 4), 1..6)) {
        let traces: Vec<TaggedTrace> = values
            .iter()
            .enumerate()
            .map(|(trial, v)| TaggedTrace {
                trial,
                algorithm: "radar".into(),
                trace: RunTrace {
                    stride: 5,
                    metric: MetricKind::ParameterError,
                    points: v
                        .iter()
                        .enumerate()
                        .map(|(k, &e)| TracePoint {
                            iteration: 5 * (k as u64 + 1),
                            epoch: 1,
                            error_l2_sq: e,
                            error_l1: 0.0,
                            radius: 1.0,
                            lambda: 0.0,
                        })
                        .collect(),
                    epochs: vec![],
                },
            })
            .collect();
        let rows = summarize(&traces).unwrap();
        prop_assert_eq!(rows.len(), 4);
        for (k, r) in rows.iter().enumerate() {
            let col: Vec<f64> = values.iter().map(|v| v[k]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(0.0, f64::max);
            prop_assert!(r.mean_error_l2_sq >= lo - 1e-12 && r.mean_error_l2_sq <= hi + 1e-12);
            prop_assert!(r.stderr >= 0.0);
        }
    }
}
