use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhcbf::datasets::{build_ring, collect_expert, CollectSpec, DatasetBundle, Geometry, ProbeSpec};
use rhcbf::filter::{closed_loop, NominalLaws, SafetyFilter};
use rhcbf::hybrid::{simulate, Controls, DisturbancePolicy, FlowOptions, Horizon};
use rhcbf::net::{AnalyticBarrier, Barrier, BarrierNet};
use rhcbf::toy::KickedRotor;
use rhcbf::train::{train, Hyperparams, TrainingSet};
use rhcbf::verifier::{verify, VerificationReport, VerifyOptions};

fn rotor_bundle(rotor: &KickedRotor) -> DatasetBundle {
    let sys = rotor.system();
    let flow_law = |z: &[f64], _: f64| rotor.expert(z);
    let jump_law = |_: &[f64], _: f64| Vec::new();
    let safe = |_: &[f64]| true;
    let ics = rotor.initial_conditions(&[0.6, 0.7, 0.8]);
    let spec = CollectSpec {
        initial_conditions: &ics,
        flow_law: &flow_law,
        jump_law: &jump_law,
        disturbance: &DisturbancePolicy::uniform_flow(0.05),
        sample_dt: 0.2,
        horizon: Horizon { t_max: 6.3, max_jumps: 5 },
        opts: FlowOptions::default(),
        seed: 4,
        safe: &safe,
    };
    let (flow, jump, stats) = collect_expert(&sys, &spec).unwrap();
    assert_eq!(stats.dropped_runs, 0);
    assert_eq!(jump.len(), 3, "one kick per run");
    let mut bundle = DatasetBundle::new(flow, jump, Geometry::new(0.1, 0.1, 0.05).unwrap()).unwrap();
    build_ring(&mut bundle, &sys, 200, 4).unwrap();
    bundle
}

#[test]
fn rotor_learn_and_verify_round_trip() {
    let rotor = KickedRotor::default();
    let sys = rotor.system();
    let bundle = rotor_bundle(&rotor);
    assert_eq!(bundle.ring.len(), 200);
    assert!(bundle.ring.iter().all(|z| bundle.in_ring(z)));

    let set = TrainingSet::from_bundle(&sys, &bundle, 0.05).unwrap();
    let hp = Hyperparams { epochs: 300, eta: 0.05, alpha_gain: 2.0, lip_bar: 50.0, ..Default::default() };
    let out = train(&set, &hp, &[2, 8, 8, 1]).unwrap();
    assert_eq!(out.trace.rows.len(), 301);
    let first = out.trace.rows[0].violation;
    let best = out.trace.rows[out.best_epoch].violation;
    assert!(best.iter().sum::<f64>() < first.iter().sum::<f64>(), "{first:?} -> {best:?}");

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("net.json");
    out.best.save(&path).unwrap();
    let loaded = BarrierNet::load(&path).unwrap();
    for z in bundle.safe_flow().take(20) {
        assert_eq!(loaded.value(z), out.best.value(z));
    }

    let random = |seed| ProbeSpec::Random { count: 2000, seed };
    let opts = VerifyOptions {
        ball_samples: 2,
        eps_bar_probes: random(1),
        ring_probes: random(2),
        cover_probes: random(3),
        ..Default::default()
    };
    let report = verify(&loaded, &sys, &bundle, &hp, &opts).unwrap();
    assert!(report.geometry.eps_bar.unwrap() > 0.0);
    if report.certified {
        assert!(report.prop1.pass && report.prop2.pass && report.prop3.pass);
    }
    let again = VerificationReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(again, report);
    assert!(report.summary().contains("certified: "));
}

#[test]
fn inactive_filter_reproduces_the_nominal_closed_loop() {
    let rotor = KickedRotor::default();
    let sys = rotor.system();
    let h = AnalyticBarrier::constant(2, 1.0);
    let filter = SafetyFilter::new(&h, &sys, 1.0, 0.0).unwrap();
    let flow = |z: &[f64], _: f64| rotor.expert(z);
    let jump = |_: &[f64], _: f64| Vec::new();
    let laws = NominalLaws { flow: &flow, jump: &jump, jump_alternatives: &[] };
    let horizon = Horizon { t_max: 7.0, max_jumps: 3 };
    let opts = FlowOptions { step: 1e-2, ..Default::default() };
    let policy = DisturbancePolicy::uniform_flow(0.05);

    let (filtered, log) =
        closed_loop(&filter, &laws, &[0.0, 0.7], &policy, horizon, &opts, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mut f = |z: &[f64], t: f64| flow(z, t);
    let mut j = |z: &[f64], t: f64| jump(z, t);
    let plain = simulate(
        &sys,
        &[0.0, 0.7],
        Controls { flow: &mut f, jump: &mut j },
        &policy,
        horizon,
        &opts,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    assert_eq!(filtered, plain);
    assert_eq!(log.violation_count(), 0);
    assert_eq!(log.flow.modified, 0);
    assert!(!plain.jumps.is_empty());
}
