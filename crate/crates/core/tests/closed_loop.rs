use nalgebra::{DMatrix, DVector};
use netmpc::closed_loop::{metrics, run_episode, EpisodeConfig, EpisodeStatus, ReferenceSchedule, SimTrace};
use netmpc::mpc::{MpcController, TrackingOcp};
use netmpc::network::{LinkConfig, LossProcess};
use netmpc::plant::{horizon_layout, LtiModel, PlantKind, TruthPlant};
use netmpc::polytope::Polytope;

fn double_integrator() -> LtiModel {
    LtiModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
        1.0,
        Polytope::from_box(&[-5.0, -2.0], &[5.0, 2.0]).unwrap(),
        Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
    )
    .unwrap()
}

fn controller(h: &[usize]) -> MpcController {
    let ocp = TrackingOcp::new(
        double_integrator(),
        horizon_layout(h).unwrap(),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2) * 100.0,
        0.99,
        200,
    )
    .unwrap();
    MpcController::with_tolerance(ocp, 1e-9)
}

fn linear_plant(c: &MpcController) -> TruthPlant {
    TruthPlant {
        kind: PlantKind::Linear {
            a: c.ocp.model.a().clone(),
            b: c.ocp.model.b().clone(),
        },
        divergence_bound: 1e6,
    }
}

fn config(n: usize, steps: usize, links: LinkConfig, seed: u64, x0: [f64; 2], r: [f64; 2]) -> EpisodeConfig {
    EpisodeConfig {
        n,
        steps,
        x0: DVector::from_row_slice(&x0),
        reference: ReferenceSchedule::constant(DVector::from_row_slice(&r)),
        links,
        seed,
        config_hash: "test".into(),
    }
}

#[test]
fn equilibrium_run_stays_put() {
    let c = controller(&[5]);
    let plant = linear_plant(&c);
    let trace = run_episode(&c, &plant, &config(1, 30, LinkConfig::default(), 0, [2.0, 0.0], [2.0, 0.0])).unwrap();
    assert_eq!(trace.status, EpisodeStatus::Completed);
    for r in &trace.records {
        assert!((r.x[0] - 2.0).abs() < 1e-6 && r.x[1].abs() < 1e-6);
        assert!(r.u[0].abs() < 1e-6);
    }
}

#[test]
fn lossless_timestamps_and_prediction() {
    let c = controller(&[5]);
    let plant = linear_plant(&c);
    let trace = run_episode(&c, &plant, &config(1, 40, LinkConfig::default(), 0, [-3.0, 1.0], [2.0, 0.0])).unwrap();
    assert_eq!(trace.status, EpisodeStatus::Completed);
    for r in trace.records.iter().skip(1) {
        assert_eq!(r.s, r.t - 1);
        assert!(r.big_theta && r.gamma && r.theta);
        assert!((&r.x - &r.x_hat_prior).amax() < 1e-12);
    }
    let m = metrics(&trace);
    assert_eq!(m.uplink_loss_pct, 0.0);
    assert_eq!(m.downlink_loss_pct, 0.0);
    assert_eq!(m.solves, 40);
}

#[test]
fn lossy_rate_two_keeps_invariants() {
    let c = controller(&[3, 2, 2]);
    let plant = linear_plant(&c);
    let links = LinkConfig {
        uplink: LossProcess::Bernoulli { p: 0.3 },
        downlink: LossProcess::Bernoulli { p: 0.3 },
        guard: Some(10),
        ..LinkConfig::default()
    };
    for seed in 0..5 {
        let trace = run_episode(&c, &plant, &config(2, 80, links.clone(), seed, [-4.0, 1.0], [3.0, 0.0])).unwrap();
        let m = metrics(&trace);
        assert!(m.success, "seed {seed}: {:?}", trace.status);
        assert_eq!(m.x_violations + m.u_violations, 0);
        assert!(m.max_consistency_gap <= 1e-9);
        assert!(trace.records.iter().any(|r| r.down_sent && !r.theta));
    }
}

#[test]
fn csv_round_trip_reproduces_metrics() {
    let c = controller(&[4]);
    let plant = linear_plant(&c);
    let links = LinkConfig {
        uplink: LossProcess::Bernoulli { p: 0.2 },
        downlink: LossProcess::Bernoulli { p: 0.2 },
        guard: Some(4),
        ..LinkConfig::default()
    };
    let trace = run_episode(&c, &plant, &config(2, 50, links, 3, [1.0, -1.0], [-2.0, 0.0])).unwrap();
    let csv = trace.to_csv();
    let timing = trace.timing_csv();
    assert!(csv.starts_with("# config_hash=test, seed=3\n"));
    let parsed = SimTrace::from_csv(&csv, Some(&timing)).unwrap();
    assert_eq!(parsed, trace);
    assert_eq!(metrics(&parsed), metrics(&trace));
}
