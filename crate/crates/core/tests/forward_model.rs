mod common;

use common::{feeder, forest, rel_close, small_feeders};
use gridtopo::lcpf::{pairwise_sqdiff_analytic, parent_sqdiff_closed_form};
use gridtopo::{
    analytic_moments, sample_voltages, solve_lcpf, Channel, Execution, InjectionModel, MomentSet, NodeId, Upstream,
    Weight,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn single_load() -> (gridtopo::RadialForest, InjectionModel) {
    let f = forest(&[(0, 1, 1.0, 2.0)], &[0]);
    let mut inj = InjectionModel::zeros(vec![NodeId(1)]);
    inj.var_p[0] = 1.0;
    inj.var_q[0] = 1.0;
    inj.cov_pq[0] = 0.5;
    (f, inj)
}

#[test]
fn zero_injection_gives_zero_voltages() {
    let f = feeder(20, 3, 1).forest;
    let (theta, eps) = solve_lcpf(&f, &[0.0; 20], &[0.0; 20]).unwrap();
    assert!(theta.iter().chain(&eps).all(|&v| v == 0.0));
}

#[test]
fn chain_unit_injection() {
    let f = forest(&[(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0)], &[0]);
    let (theta, eps) = solve_lcpf(&f, &[0.0, 1.0], &[0.0, 0.0]).unwrap();
    assert_eq!(eps, vec![1.0, 2.0]);
    assert_eq!(theta, vec![1.0, 2.0]);
    assert!(solve_lcpf(&f, &[0.0], &[0.0, 0.0]).is_err());
}

#[test]
fn solve_matches_dense_path_sums() {
    for sf in small_feeders(20) {
        let f = &sf.forest;
        let n = f.n_loads();
        let p = DVector::from_fn(n, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.1);
        let q = DVector::from_fn(n, |i, _| ((i * 3 % 4) as f64 - 1.5) * 0.1);
        let (hr, hx) = (f.h_inverse_dense(Weight::Resistance), f.h_inverse_dense(Weight::Reactance));
        let want_theta = &hx * &p - &hr * &q;
        let want_eps = &hr * &p + &hx * &q;
        let (theta, eps) = solve_lcpf(f, p.as_slice(), q.as_slice()).unwrap();
        for i in 0..n {
            assert!((theta[i] - want_theta[i]).abs() < 1e-12);
            assert!((eps[i] - want_eps[i]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn superposition(seed in 0u64..500, p1 in prop::collection::vec(-1.0f64..1.0, 12),
                     p2 in prop::collection::vec(-1.0f64..1.0, 12), q in prop::collection::vec(-1.0f64..1.0, 12)) {
        let f = feeder(12, 1 + (seed % 3) as usize, seed).forest;
        let sum: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a + b).collect();
        let (t, e) = solve_lcpf(&f, &sum, &q).unwrap();
        let (t1, e1) = solve_lcpf(&f, &p1, &q).unwrap();
        let (t2, e2) = solve_lcpf(&f, &p2, &[0.0; 12]).unwrap();
        for i in 0..12 {
            prop_assert!((t[i] - t1[i] - t2[i]).abs() < 1e-12);
            prop_assert!((e[i] - e1[i] - e2[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_load_variance() {
    let (f, inj) = single_load();
    let mom = analytic_moments(&f, &inj).unwrap();
    assert!((mom.omega_eps[(0, 0)] - 7.0).abs() < 1e-14);
}

#[test]
fn degenerate_injections_give_zero_covariances() {
    let sf = feeder(15, 2, 4);
    let mut inj = sf.injections.clone();
    for v in [&mut inj.var_p, &mut inj.var_q, &mut inj.cov_pq] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    let mom = analytic_moments(&sf.forest, &inj).unwrap();
    for m in [&mom.omega_eps, &mom.omega_theta, &mom.omega_theta_eps, &mom.omega_eps_theta] {
        assert!(m.iter().all(|&v| v == 0.0));
    }
}

fn assert_psd(m: &DMatrix<f64>) {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    assert!((m - m.transpose()).amax() <= 1e-14 * scale);
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    assert!(min >= -1e-10 * scale, "min eigenvalue {min}");
}

#[test]
fn analytic_covariances_are_symmetric_psd() {
    for sf in small_feeders(15) {
        let mom = analytic_moments(&sf.forest, &sf.injections).unwrap();
        assert_psd(&mom.omega_eps);
        assert_psd(&mom.omega_theta);
        assert_eq!(mom.omega_eps_theta, mom.omega_theta_eps.transpose());
        let n = sf.forest.n_loads();
        let mut joint = DMatrix::zeros(2 * n, 2 * n);
        joint.view_mut((0, 0), (n, n)).copy_from(&mom.omega_theta);
        joint.view_mut((n, n), (n, n)).copy_from(&mom.omega_eps);
        joint.view_mut((0, n), (n, n)).copy_from(&mom.omega_theta_eps);
        joint.view_mut((n, 0), (n, n)).copy_from(&mom.omega_eps_theta);
        assert_psd(&joint);
    }
}

#[test]
fn variance_grows_away_from_substation() {
    for sf in small_feeders(40) {
        let f = &sf.forest;
        let mom = analytic_moments(f, &sf.injections).unwrap();
        for a in 0..f.n_loads() {
            let mut b = a;
            while let Upstream::Load(up) = f.upstream(b) {
                assert!(mom.omega_eps[(a, a)] > mom.omega_eps[(up, up)]);
                b = up;
            }
        }
    }
}

#[test]
fn parent_minimizes_sqdiff_over_non_descendants() {
    for sf in small_feeders(40) {
        let f = &sf.forest;
        let om = analytic_moments(f, &sf.injections).unwrap().omega_eps;
        for a in 0..f.n_loads() {
            // the slack sits at zero, so its statistic is var(ε_a)
            let mut best = (om[(a, a)], None);
            for c in (0..f.n_loads()).filter(|&c| !f.is_descendant(c, a)) {
                let d = om[(a, a)] + om[(c, c)] - 2.0 * om[(a, c)];
                if d < best.0 {
                    best = (d, Some(c));
                }
            }
            let want = match f.upstream(a) {
                Upstream::Load(b) => Some(b),
                Upstream::Slack(_) => None,
            };
            assert_eq!(best.1, want, "node {}", f.id(a));
        }
    }
}

#[test]
fn closed_form_matches_general_sum() {
    for sf in small_feeders(40) {
        let f = &sf.forest;
        let mom = analytic_moments(f, &sf.injections).unwrap();
        for a in 0..f.n_loads() {
            for channel in [Channel::Eps, Channel::Theta, Channel::Cross] {
                let closed = parent_sqdiff_closed_form(f, &sf.injections, f.id(a), channel).unwrap();
                let general = match f.upstream(a) {
                    Upstream::Load(b) => pairwise_sqdiff_analytic(f, &sf.injections, f.id(a), f.id(b), channel).unwrap(),
                    Upstream::Slack(_) => match channel {
                        Channel::Eps => mom.omega_eps[(a, a)],
                        Channel::Theta => mom.omega_theta[(a, a)],
                        Channel::Cross => mom.omega_eps_theta[(a, a)],
                    },
                };
                assert!(rel_close(closed, general, 1e-10), "{closed} vs {general}");
            }
        }
    }
}

#[test]
fn leaf_edge_statistic() {
    let f = forest(&[(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0)], &[0]);
    let mut inj = InjectionModel::zeros(vec![NodeId(1), NodeId(2)]);
    inj.var_p = vec![1.0, 1.0];
    inj.var_q = vec![1.0, 1.0];
    inj.cov_pq = vec![0.5, 0.5];
    let closed = parent_sqdiff_closed_form(&f, &inj, NodeId(2), Channel::Eps).unwrap();
    let general = pairwise_sqdiff_analytic(&f, &inj, NodeId(2), NodeId(1), Channel::Eps).unwrap();
    assert_eq!(closed, 3.0);
    assert!((general - 3.0).abs() < 1e-14);
}

#[test]
fn grandparent_is_farther_than_parent() {
    for sf in small_feeders(20) {
        let f = &sf.forest;
        for a in 0..f.n_loads() {
            let Upstream::Load(b) = f.upstream(a) else { continue };
            let Upstream::Load(c) = f.upstream(b) else { continue };
            let d = |x: usize| pairwise_sqdiff_analytic(f, &sf.injections, f.id(a), f.id(x), Channel::Eps).unwrap();
            assert!(d(b) < d(c));
        }
    }
}

#[test]
fn monte_carlo_single_load_variance() {
    let (f, inj) = single_load();
    let m = 1_000_000;
    let s = sample_voltages(&f, &inj, m, 42, Execution::default()).unwrap();
    let ms = MomentSet::estimate(&s, f.loads(), Execution::default()).unwrap();
    let sigma = 7.0 * (2.0 / m as f64).sqrt();
    assert!((ms.var_eps(0) - 7.0).abs() < 3.0 * sigma, "{}", ms.var_eps(0));
}

#[test]
fn monte_carlo_matches_analytic_variances() {
    let sf = feeder(13, 3, 9);
    let m = 100_000;
    let mom = analytic_moments(&sf.forest, &sf.injections).unwrap();
    let s = sample_voltages(&sf.forest, &sf.injections, m, 7, Execution::default()).unwrap();
    let ms = MomentSet::estimate(&s, sf.forest.loads(), Execution::default()).unwrap();
    for i in 0..13 {
        let v = mom.omega_eps[(i, i)];
        assert!((ms.var_eps(i) - v).abs() < 5.0 * v / (m as f64).sqrt());
    }
}

#[test]
fn variance_error_decays_at_root_m_rate() {
    let (f, inj) = single_load();
    let grid = [100usize, 1_000, 10_000, 100_000, 1_000_000];
    let seeds = 30u64;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &m in &grid {
        let err: f64 = (0..seeds)
            .map(|seed| {
                let s = sample_voltages(&f, &inj, m, seed, Execution::default()).unwrap();
                let ms = MomentSet::estimate(&s, f.loads(), Execution::default()).unwrap();
                (ms.var_eps(0) - 7.0).abs()
            })
            .sum::<f64>()
            / seeds as f64;
        xs.push((m as f64).ln());
        ys.push(err.ln());
    }
    let slope = slope(&xs, &ys);
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    cov / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>()
}

#[test]
fn cross_channel_converges_to_closed_form() {
    let sf = feeder(13, 3, 21);
    let f = &sf.forest;
    let m = 100_000;
    let s = sample_voltages(f, &sf.injections, m, 3, Execution::default()).unwrap();
    let ms = MomentSet::estimate(&s, f.loads(), Execution::default()).unwrap();
    for a in 0..f.n_loads() {
        let Upstream::Load(b) = f.upstream(a) else { continue };
        let want = |ch| parent_sqdiff_closed_form(f, &sf.injections, f.id(a), ch).unwrap();
        let got = ms.sqdiff(Channel::Cross, f.id(a), f.id(b)).unwrap();
        let sd = (2.0 * want(Channel::Eps) * want(Channel::Theta) / m as f64).sqrt();
        assert!((got - want(Channel::Cross)).abs() < 5.0 * sd, "{got} vs {}", want(Channel::Cross));
    }
}

#[test]
fn zero_variance_samples_equal_mean_solve() {
    let sf = feeder(10, 2, 5);
    let mut inj = sf.injections.clone();
    for v in [&mut inj.var_p, &mut inj.var_q, &mut inj.cov_pq] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    let s = sample_voltages(&sf.forest, &inj, 50, 1, Execution::default()).unwrap();
    let (theta, eps) = solve_lcpf(&sf.forest, &inj.mu_p, &inj.mu_q).unwrap();
    for j in 0..50 {
        for i in 0..10 {
            assert_eq!(s.eps_at(j, i), eps[i]);
            assert_eq!(s.theta_at(j, i), Some(theta[i]));
        }
    }
}

#[test]
fn sampling_is_deterministic_across_execution_modes() {
    let sf = feeder(13, 3, 2);
    let a = sample_voltages(&sf.forest, &sf.injections, 5000, 11, Execution::Parallel).unwrap();
    let b = sample_voltages(&sf.forest, &sf.injections, 5000, 11, Execution::Sequential).unwrap();
    let c = sample_voltages(&sf.forest, &sf.injections, 5000, 12, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_covariance_rejected() {
    let (f, mut inj) = single_load();
    inj.cov_pq[0] = 2.0;
    assert!(sample_voltages(&f, &inj, 10, 0, Execution::default()).is_err());
    assert!(sample_voltages(&f, &single_load().1, 0, 0, Execution::default()).is_err());
}
