mod common;

use common::feeder;
use gridtopo::moments::PairStrategy;
use gridtopo::lcpf::pairwise_sqdiff_analytic;
use gridtopo::{sample_voltages, Channel, Execution, GridError, MomentSet, NodeId, VoltageSamples};
use proptest::prelude::*;

fn two_nodes(eps: Vec<f64>, theta: Option<Vec<f64>>) -> VoltageSamples {
    let m = eps.len() / 2;
    VoltageSamples { nodes: vec![NodeId(1), NodeId(2)], m, eps, theta }
}

#[test]
fn two_point_examples() {
    // rows are samples: (ε_a, ε_b)
    let s = two_nodes(vec![1.0, 0.0, 3.0, 0.0], None);
    let ms = MomentSet::estimate(&s, &s.nodes, Execution::Sequential).unwrap();
    assert_eq!(ms.mean_eps()[0], 2.0);
    assert_eq!(ms.var_eps(0), 1.0);
    assert_eq!(ms.var_eps(1), 0.0);
    assert_eq!(ms.sqdiff(Channel::Eps, NodeId(1), NodeId(2)).unwrap(), 1.0);
    assert_eq!(ms.sqdiff(Channel::Eps, NodeId(1), NodeId(1)).unwrap(), 0.0);
    assert!(matches!(ms.sqdiff(Channel::Theta, NodeId(1), NodeId(2)), Err(GridError::MissingPhaseChannel)));
    assert!(ms.sqdiff(Channel::Eps, NodeId(1), NodeId(9)).is_err());
    assert_eq!(ms.sample_count(), Some(2));
}

#[test]
fn too_few_samples() {
    let s = two_nodes(vec![1.0, 0.0], None);
    assert!(matches!(
        MomentSet::estimate(&s, &s.nodes, Execution::Sequential),
        Err(GridError::TooFewSamples { .. })
    ));
}

fn random_samples(m: usize, n: usize, seed: u64) -> VoltageSamples {
    let sf = feeder(n, 1 + (seed % 3) as usize, seed);
    sample_voltages(&sf.forest, &sf.injections, m, seed, Execution::Sequential).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sqdiff_identity_and_symmetry(seed in 0u64..1000, m in 2usize..60) {
        let s = random_samples(m, 8, seed);
        for strategy in [PairStrategy::Dense, PairStrategy::Lazy] {
            let ms = MomentSet::estimate_with(&s, &s.nodes, strategy, Execution::Sequential).unwrap();
            for i in 0..8 {
                prop_assert!(ms.var_eps(i) >= 0.0);
                prop_assert_eq!(ms.sqdiff_idx(Channel::Eps, i, i).unwrap(), 0.0);
                for j in 0..8 {
                    for ch in [Channel::Eps, Channel::Theta] {
                        let d = ms.sqdiff_idx(ch, i, j).unwrap();
                        prop_assert_eq!(d, ms.sqdiff_idx(ch, j, i).unwrap());
                        if i != j {
                            let (vi, vj) = (ms.cov_idx(ch, i, i).unwrap(), ms.cov_idx(ch, j, j).unwrap());
                            let want = vi - 2.0 * ms.cov_idx(ch, i, j).unwrap() + vj;
                            prop_assert!((d - want).abs() <= 1e-12 * (vi + vj).max(1e-12), "d={d:e} want={want:e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dense_and_lazy_agree(seed in 0u64..1000, m in 2usize..60) {
        let s = random_samples(m, 6, seed);
        let dense = MomentSet::estimate_with(&s, &s.nodes, PairStrategy::Dense, Execution::Sequential).unwrap();
        let lazy = MomentSet::estimate_with(&s, &s.nodes, PairStrategy::Lazy, Execution::Parallel).unwrap();
        for i in 0..6 {
            prop_assert!((dense.var_eps(i) - lazy.var_eps(i)).abs() <= 1e-12 * dense.var_eps(i).max(1e-12));
            for j in 0..6 {
                for ch in [Channel::Eps, Channel::Theta, Channel::Cross] {
                    let (a, b) = (dense.sqdiff_idx(ch, i, j).unwrap(), lazy.sqdiff_idx(ch, i, j).unwrap());
                    prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-9), "{:?} {} {}: {} vs {}", ch, i, j, a, b);
                }
            }
        }
    }
}

#[test]
fn observed_subset_and_theta_removal() {
    let s = random_samples(200, 10, 3);
    let keep = &s.nodes[2..7];
    let full = MomentSet::estimate(&s, &s.nodes, Execution::Sequential).unwrap();
    let part = MomentSet::estimate(&s, keep, Execution::Sequential).unwrap();
    assert_eq!(part.nodes(), keep);
    for (k, &id) in keep.iter().enumerate() {
        assert_eq!(part.var_eps(k), full.var_eps(full.index_of(id).unwrap()));
    }
    let no_theta = MomentSet::estimate(&s.clone().without_theta(), &s.nodes, Execution::Sequential).unwrap();
    assert!(!no_theta.has_theta());
    assert_eq!(no_theta.sqdiff_idx(Channel::Eps, 0, 4).unwrap(), full.sqdiff_idx(Channel::Eps, 0, 4).unwrap());
}

#[test]
fn pairwise_statistics_converge_to_analytic() {
    let sf = feeder(12, 2, 8);
    let f = &sf.forest;
    let m = 100_000;
    let s = sample_voltages(f, &sf.injections, m, 5, Execution::default()).unwrap();
    let ms = MomentSet::estimate(&s, f.loads(), Execution::default()).unwrap();
    for a in 0..f.n_loads() {
        for b in (0..f.n_loads()).filter(|&b| b != a && f.tree_of(b) == f.tree_of(a)) {
            let want = pairwise_sqdiff_analytic(f, &sf.injections, f.id(a), f.id(b), Channel::Eps).unwrap();
            let got = ms.sqdiff_idx(Channel::Eps, a, b).unwrap();
            assert!((got - want).abs() < 5.0 * want * (2.0 / m as f64).sqrt(), "{got} vs {want}");
        }
    }
}
