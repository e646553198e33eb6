mod common;

use std::collections::BTreeMap;

use common::{feeder, forest, rel_close};
use gridtopo::harness::synth::{synth_feeder, FeederSpec};
use gridtopo::lcpf::parent_edge_moments;
use gridtopo::line_params::{
    estimate_edge, estimate_edge_linear, estimate_edge_with, learn_structure_and_params, LineConfig, RootChoice,
};
use gridtopo::topology::{
    estimate_injection_stats, estimate_injection_stats_joint, learn_structure, learn_topology_and_injections,
    EstimationConfig, StructureConfig, Topology,
};
use gridtopo::{
    analytic_moments, sample_voltages, CovTriple, Execution, GridError, Impedance, InjectionModel, MomentSet, NodeId,
    Upstream,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn population(sf: &gridtopo::harness::synth::SynthFeeder) -> MomentSet {
    let mom = analytic_moments(&sf.forest, &sf.injections).unwrap();
    MomentSet::from_analytic(&mom, sf.forest.loads()).unwrap()
}

fn varied_feeder(seed: u64) -> gridtopo::harness::synth::SynthFeeder {
    let k = 1 + (seed as usize % 11);
    let n = (k + (seed as usize * 13) % 70).clamp(k, 80);
    feeder(n, k, 500 + seed)
}

#[test]
fn population_structure_is_exact() {
    for seed in 0..60 {
        let sf = varied_feeder(seed);
        let out = learn_structure(&population(&sf), &sf.forest.substation_children(), &StructureConfig::default())
            .unwrap();
        assert_eq!(out.topology, Topology::from_forest(&sf.forest), "seed {seed}");
        assert!(out.unattached.is_empty());
        assert!(out.selections.iter().all(|s| !s.ambiguous && s.margin.is_none_or(|m| m > 0.0)));
    }
}

#[test]
fn restricted_argmin_agrees_with_all_non_descendants() {
    for seed in 0..30 {
        let sf = varied_feeder(seed);
        let f = &sf.forest;
        let ms = population(&sf);
        for a in 0..f.n_loads() {
            let Upstream::Load(_) = f.upstream(a) else { continue };
            let ia = ms.index_of(f.id(a)).unwrap();
            let best = (0..f.n_loads())
                .filter(|&c| f.tree_of(c) == f.tree_of(a) && !f.is_descendant(c, a))
                .min_by(|&c, &d| {
                    let s = |x: usize| ms.sqdiff_idx(gridtopo::Channel::Eps, ia, ms.index_of(f.id(x)).unwrap()).unwrap();
                    s(c).total_cmp(&s(d))
                })
                .unwrap();
            assert_eq!(f.id(best), f.parent_id(a));
        }
    }
}

#[test]
fn structure_ignores_phase_channel() {
    for seed in 0..10 {
        let sf = feeder(13, 3, seed);
        let s = sample_voltages(&sf.forest, &sf.injections, 400, seed, Execution::Sequential).unwrap();
        let roots = sf.forest.substation_children();
        let cfg = StructureConfig { strict: false, ..StructureConfig::default() };
        let with = MomentSet::estimate(&s, &s.nodes, Execution::Sequential).unwrap();
        let without = MomentSet::estimate(&s.clone().without_theta(), &s.nodes, Execution::Sequential).unwrap();
        let (a, b) = (learn_structure(&with, &roots, &cfg).unwrap(), learn_structure(&without, &roots, &cfg).unwrap());
        assert_eq!(a.topology, b.topology);
        assert_eq!(a.selections, b.selections);
    }
}

#[test]
fn short_chain_learned_from_samples() {
    let f = forest(&[(0, 1, 0.03, 0.01), (1, 2, 0.02, 0.04), (2, 3, 0.04, 0.02)], &[0]);
    let truth = Topology::from_forest(&f);
    let mut correct = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inj = gridtopo::harness::synth::synth_injections(f.loads(), &Default::default(), &mut rng);
        let s = sample_voltages(&f, &inj, 10_000, seed, Execution::Sequential).unwrap();
        let ms = MomentSet::estimate(&s, f.loads(), Execution::Sequential).unwrap();
        let cfg = StructureConfig { strict: false, ..StructureConfig::default() };
        if learn_structure(&ms, &f.substation_children(), &cfg).is_ok_and(|o| o.topology == truth) {
            correct += 1;
        }
    }
    assert!(correct >= 99, "{correct}/100");
}

fn assert_model_close(got: &InjectionModel, want: &InjectionModel, tol: f64) {
    assert_eq!(got.node_ids, want.node_ids);
    for (g, w) in [
        (&got.mu_p, &want.mu_p),
        (&got.mu_q, &want.mu_q),
        (&got.var_p, &want.var_p),
        (&got.var_q, &want.var_q),
        (&got.cov_pq, &want.cov_pq),
    ] {
        for (a, b) in g.iter().zip(w.iter()) {
            assert!(rel_close(*a, *b, tol), "{a} vs {b}");
        }
    }
}

#[test]
fn injection_statistics_round_trip() {
    for seed in 0..40 {
        let sf = varied_feeder(seed);
        let ms = population(&sf);
        let est = estimate_injection_stats(&ms, &sf.forest, &EstimationConfig::default()).unwrap();
        assert!(est.clamped.is_empty());
        assert_model_close(&est.model, &sf.injections, 1e-8);
    }
}

#[test]
fn joint_inversion_agrees_with_edge_sweep() {
    for seed in 0..15 {
        let sf = feeder(10 + seed as usize, 1 + seed as usize % 4, seed);
        let ms = population(&sf);
        let a = estimate_injection_stats(&ms, &sf.forest, &EstimationConfig::default()).unwrap();
        let b = estimate_injection_stats_joint(&ms, &sf.forest, &EstimationConfig::default()).unwrap();
        assert_model_close(&a.model, &b.model, 1e-8);
    }
}

#[test]
fn pipeline_needs_phase_channel() {
    let sf = feeder(13, 3, 2);
    let s = sample_voltages(&sf.forest, &sf.injections, 100, 1, Execution::Sequential).unwrap().without_theta();
    let ms = MomentSet::estimate(&s, &s.nodes, Execution::Sequential).unwrap();
    let err = learn_topology_and_injections(
        &ms,
        &sf.forest.substation_children(),
        &sf.network.catalog(),
        &StructureConfig { strict: false, ..Default::default() },
        &EstimationConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, GridError::MissingPhaseChannel));
}

#[test]
fn pipeline_on_population_moments() {
    let sf = feeder(29, 1, 17);
    let out = learn_topology_and_injections(
        &population(&sf),
        &sf.forest.substation_children(),
        &sf.network.catalog(),
        &StructureConfig::default(),
        &EstimationConfig::default(),
    )
    .unwrap();
    assert_eq!(out.forest.edges(), sf.forest.edges());
    assert_model_close(&out.injections.model, &sf.injections, 1e-8);
}

fn forward(z: Impedance, t: CovTriple) -> (f64, f64, f64) {
    let e = parent_edge_moments(z, t);
    (e.eps, e.theta, e.cross)
}

fn random_draw(rng: &mut ChaCha8Rng) -> (Impedance, CovTriple) {
    loop {
        let (r, x): (f64, f64) = (rng.random_range(0.01..2.0), rng.random_range(0.01..2.0));
        if (r - x).abs() / f64::max(r, x) <= 0.05 {
            continue;
        }
        let (vp, vq) = (rng.random_range(0.01..3.0), rng.random_range(0.01..3.0));
        let rho = rng.random_range(0.05..0.95);
        return (Impedance::new(r, x), CovTriple { var_p: vp, var_q: vq, cov_pq: rho * f64::sqrt(vp * vq) });
    }
}

#[test]
fn edge_round_trip_over_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (z, t) = random_draw(&mut rng);
        let (a, b, c) = forward(z, t);
        let e = estimate_edge(a, b, c, t.var_p, t.var_q).unwrap();
        assert!(rel_close(e.r_hat, z.r, 1e-8), "{z:?} {t:?} -> {e:?}");
        assert!(rel_close(e.x_hat, z.x, 1e-8));
        assert!(rel_close(e.cov_pq_hat, t.cov_pq, 1e-8));
        // selected root honours the positive cross-covariance
        assert!(e.cov_pq_hat > 0.0 && !e.flags.nonpositive_cov_pq && !e.flags.inconsistent);
        let s = (a + b) / (t.var_p + t.var_q);
        assert!(rel_close(e.r_hat * e.r_hat + e.x_hat * e.x_hat, s, 1e-8));
    }
}

#[test]
fn edges_with_descendants_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let (z, own) = random_draw(&mut rng);
        let (_, below) = random_draw(&mut rng);
        let total = own + below;
        let (a, b, c) = forward(z, total);
        let e = estimate_edge_with(a, b, c, total.var_p, total.var_q, below.cov_pq, &LineConfig::default()).unwrap();
        assert!(rel_close(e.r_hat, z.r, 1e-8) && rel_close(e.x_hat, z.x, 1e-8));
        assert!(rel_close(e.cov_pq_hat, own.cov_pq, 1e-7));
        assert!(rel_close(e.cov_pq_sum, total.cov_pq, 1e-8));
    }
}

#[test]
fn negative_true_cross_covariance_is_flagged() {
    let z = Impedance::new(0.4, 1.1);
    let t = CovTriple { var_p: 1.0, var_q: 0.7, cov_pq: -0.3 };
    let (a, b, c) = forward(z, t);
    match estimate_edge(a, b, c, t.var_p, t.var_q) {
        Ok(e) => assert!(e.flags.nonpositive_cov_pq || e.cov_pq_hat > 0.0),
        Err(err) => assert!(err.is_learner_failure()),
    }
}

#[test]
fn symmetric_lines_are_flagged_or_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (mut z, t) = random_draw(&mut rng);
        z.x = z.r;
        let (a, b, c) = forward(z, t);
        match estimate_edge(a, b, c, t.var_p, t.var_q) {
            Ok(e) => {
                let exact = rel_close(e.r_hat, z.r, 1e-8) && rel_close(e.x_hat, z.x, 1e-8);
                assert!(exact || e.flags.symmetric_line || e.root_choice == RootChoice::Coincident, "{e:?}");
            }
            Err(err) => assert!(matches!(err, GridError::Unidentifiable { .. } | GridError::BothRootsFeasible { .. })),
        }
    }
}

#[test]
fn linear_and_quadratic_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let (z, t) = random_draw(&mut rng);
        let (a, b, c) = forward(z, t);
        let lin = estimate_edge_linear(a, b, c, t.var_p, t.var_q, t.cov_pq).unwrap();
        let quad = estimate_edge(a, b, c, t.var_p, t.var_q).unwrap();
        assert!(rel_close(lin.r, quad.r_hat, 1e-8) && rel_close(lin.x, quad.x_hat, 1e-8));
    }
}

/// Brute-force fit: for each `(r, x)` on a grid the best `Ωpq ≥ 0` is a 1-D
/// least-squares problem.
fn grid_search(a: f64, b: f64, c: f64, sp: f64, sq: f64) -> (f64, f64) {
    let fit = |r: f64, x: f64| {
        let g = [2.0 * r * x, -2.0 * r * x, x * x - r * r];
        let y = [a - r * r * sp - x * x * sq, b - x * x * sp - r * r * sq, c - r * x * (sp - sq)];
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let w = (g.iter().zip(&y).map(|(u, v)| u * v).sum::<f64>() / gg).max(0.0);
        g.iter().zip(&y).map(|(u, v)| (v - u * w).powi(2)).sum::<f64>()
    };
    let (mut best, mut lo, mut hi, mut span) = ((0.0, 0.0, f64::INFINITY), (0.01, 0.01), (4.0, 4.0), 0.0);
    for _ in 0..6 {
        let steps = 200;
        for i in 0..=steps {
            for j in 0..=steps {
                let r = lo.0 + (hi.0 - lo.0) * i as f64 / steps as f64;
                let x = lo.1 + (hi.1 - lo.1) * j as f64 / steps as f64;
                let v = fit(r, x);
                if v < best.2 {
                    best = (r, x, v);
                }
            }
        }
        span = (hi.0 - lo.0) / steps as f64 * 4.0;
        lo = ((best.0 - span).max(1e-6), (best.1 - span).max(1e-6));
        hi = (best.0 + span, best.1 + span);
    }
    assert!(span < 1e-6);
    (best.0, best.1)
}

#[test]
fn leaf_example_matches_grid_search() {
    let e = estimate_edge(7.0, 3.0, 1.5, 1.0, 1.0).unwrap();
    let (r, x) = grid_search(7.0, 3.0, 1.5, 1.0, 1.0);
    assert!((e.r_hat - 1.0).abs() < 1e-12 && (e.x_hat - 2.0).abs() < 1e-12 && (e.cov_pq_hat - 0.5).abs() < 1e-12);
    assert!((r - e.r_hat).abs() < 1e-5 && (x - e.x_hat).abs() < 1e-5, "grid found ({r}, {x})");
}

#[test]
fn matched_variances_without_cross_term() {
    let z = Impedance::new(0.7, 0.3);
    let t = CovTriple { var_p: 1.0, var_q: 1.0, cov_pq: 0.0 };
    let (a, b, c) = forward(z, t);
    assert_eq!(c, 0.0);
    match estimate_edge(a, b, c, 1.0, 1.0) {
        Err(GridError::Unidentifiable { impedance_sq_sum, cov_pq_sum }) => {
            assert_eq!(cov_pq_sum, 0.0);
            assert!(rel_close(impedance_sq_sum, 0.58, 1e-12));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn params_population_recovery() {
    for seed in 0..30 {
        let sf = varied_feeder(seed);
        let out = learn_structure_and_params(
            &population(&sf),
            &sf.injections,
            &sf.forest.substation_children(),
            &StructureConfig::default(),
            &LineConfig::default(),
        )
        .unwrap();
        let truth = sf.forest.edges();
        let got = out.forest.edges();
        assert_eq!(truth.len(), got.len());
        for ((c0, p0, z0), (c1, p1, z1)) in truth.iter().zip(&got) {
            assert_eq!((c0, p0), (c1, p1));
            assert!(rel_close(z0.r, z1.r, 1e-6) && rel_close(z0.x, z1.x, 1e-6), "{z0:?} vs {z1:?}");
        }
        for (id, e) in &out.estimates {
            let want = sf.injections.cov_of(*id).unwrap().cov_pq;
            assert!(rel_close(e.cov_pq_hat, want, 1e-6));
        }
    }
}

#[test]
fn single_edge_params_match_estimate_edge() {
    let f = forest(&[(0, 1, 1.0, 2.0)], &[0]);
    let mut inj = InjectionModel::zeros(vec![NodeId(1)]);
    inj.var_p[0] = 1.0;
    inj.var_q[0] = 1.0;
    inj.cov_pq[0] = 0.5;
    let ms = MomentSet::from_analytic(&analytic_moments(&f, &inj).unwrap(), f.loads()).unwrap();
    let out = learn_structure_and_params(
        &ms,
        &inj,
        &f.substation_children(),
        &StructureConfig::default(),
        &LineConfig::default(),
    )
    .unwrap();
    let direct = estimate_edge(7.0, 3.0, 1.5, 1.0, 1.0).unwrap();
    let e = &out.estimates[&NodeId(1)];
    assert!((e.r_hat - direct.r_hat).abs() < 1e-12 && (e.x_hat - direct.x_hat).abs() < 1e-12);
    assert!((e.cov_pq_hat - direct.cov_pq_hat).abs() < 1e-12);
}

#[test]
fn params_error_decays_with_samples() {
    let sf = synth_feeder(&FeederSpec::preset("bus_13_3").unwrap(), 3).unwrap();
    let roots = sf.forest.substation_children();
    let median_err = |m: usize| {
        let mut errs = Vec::new();
        for seed in 0..10 {
            let s = sample_voltages(&sf.forest, &sf.injections, m, seed, Execution::default()).unwrap();
            let ms = MomentSet::estimate(&s, &s.nodes, Execution::default()).unwrap();
            let cfg = StructureConfig { strict: false, ..Default::default() };
            let line_cfg = LineConfig::default();
            let out = match learn_structure_and_params(&ms, &sf.injections, &roots, &cfg, &line_cfg) {
                Ok(o) => o,
                Err(e) => {
                    assert!(e.is_learner_failure(), "{e}");
                    errs.push(1.0);
                    continue;
                }
            };
            let z: BTreeMap<NodeId, Impedance> = sf.forest.edges().iter().map(|&(c, _, z)| (c, z)).collect();
            for (id, e) in &out.estimates {
                errs.push((e.r_hat - z[id].r).abs() / z[id].r);
            }
        }
        errs.sort_by(f64::total_cmp);
        errs[errs.len() / 2]
    };
    let (coarse, fine) = (median_err(1_000), median_err(100_000));
    assert!(fine < coarse, "{fine} vs {coarse}");
    assert!(fine < 0.05, "{fine}");
}
