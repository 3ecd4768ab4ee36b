mod common;

use crl_core::audit::{
    audit_all_subsets, build_vector, layout, rank_test, required_environments, AuditOptions, VectorKind,
};
use crl_core::density::{model_grid, DerivMethod};
use crl_core::graph::{enumerate_dags, Dag};
use crl_core::scm::{sample_sem, MechanismNet, ModelClass, NodeParams, SemConfig, SemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tau_length_matches_brute_force_on_all_small_dags() {
    for n in 1..=4 {
        for g in enumerate_dags(n) {
            for s in common::closed_subsets(&g) {
                let moral_edges = s
                    .iter()
                    .enumerate()
                    .flat_map(|(a, &x)| s[a + 1..].iter().map(move |&y| (x, y)))
                    .filter(|&(x, y)| {
                        g.has_edge(x, y)
                            || g.has_edge(y, x)
                            || s.iter().any(|&c| g.has_edge(x, c) && g.has_edge(y, c))
                    })
                    .count();
                let lay = layout(&g, &s, VectorKind::Tau, false).unwrap();
                assert_eq!(lay.len(), 2 * s.len() + moral_edges, "{g} {s:?}");
            }
        }
    }
}

#[test]
fn single_subset_and_environment_edge_cases() {
    let spec = sample_sem(&Dag::chain(3), 4, ModelClass::Anm, &SemConfig::default(), 1).unwrap();
    let opts = AuditOptions::default();
    let r = rank_test(&spec, &[0], VectorKind::Tau, &[2], &[0.1], &opts).unwrap();
    assert_eq!((r.rank, r.pass), (0, false));

    let mut dup = spec.clone();
    let first = dup.envs[0].clone();
    dup.envs.iter_mut().for_each(|e| *e = first.clone());
    let r = rank_test(&dup, &[0, 1], VectorKind::Tau, &[0, 1, 2, 3], &[0.1, 0.2], &opts).unwrap();
    assert_eq!((r.rank, r.pass), (0, false));

    let err = build_vector(&spec, &[2], 0, &[0.0], VectorKind::Tau, false, DerivMethod::Analytic);
    assert!(err.is_err());
}

#[test]
fn rank_does_not_depend_on_reference_environment() {
    let g = Dag::new(3, &[(1, 0), (2, 0)]).unwrap();
    let spec = sample_sem(&g, 5, ModelClass::Anm, &SemConfig::default(), 8).unwrap();
    let opts = AuditOptions::default();
    let point = model_grid(&spec, 0, 1, 2).unwrap().remove(0);
    for kind in [VectorKind::Tau, VectorKind::WAnm] {
        for m in 2..=5 {
            let mut ranks = Vec::new();
            for base in 0..m {
                let mut envs: Vec<usize> = vec![base];
                envs.extend((0..m).filter(|&u| u != base));
                ranks.push(rank_test(&spec, &[0, 1, 2], kind, &envs, &point, &opts).unwrap().rank);
            }
            assert!(ranks.windows(2).all(|w| w[0] == w[1]), "{kind:?} m={m}: {ranks:?}");
        }
    }
}

#[test]
fn subset_enumeration_counts() {
    let opts = AuditOptions::default();
    for (g, count) in [(Dag::chain(3), 3), (Dag::empty(3), 7), (Dag::collider3(), 4)] {
        let spec = sample_sem(&g, 3, ModelClass::Anm, &SemConfig::default(), 0).unwrap();
        let pts = model_grid(&spec, 0, 1, 0).unwrap();
        let reports = audit_all_subsets(&spec, &[0, 1, 2], &pts, &[VectorKind::Tau], &opts).unwrap();
        assert_eq!(reports.len(), count);
    }
    let big = sample_sem(&Dag::empty(13), 1, ModelClass::Anm, &SemConfig::default(), 0).unwrap();
    assert!(audit_all_subsets(&big, &[0], &[vec![0.0; 13]], &[VectorKind::Tau], &opts).is_err());
}

/// Linear chain whose coefficients, biases and noise change per environment.
fn linear_chain_sem(m: usize, seed: u64) -> SemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Dag::chain(3);
    let envs = (0..m)
        .map(|_| {
            (0..3)
                .map(|i| NodeParams {
                    mech: if i == 0 {
                        MechanismNet::constant(0, rng.random_range(-2.0..2.0))
                    } else {
                        MechanismNet::linear(vec![rng.random_range(-2.0..2.0)], rng.random_range(-2.0..2.0))
                    },
                    noise_mean: rng.random_range(-1.0..1.0),
                    noise_std: rng.random_range(0.5..2.0),
                    scale_net: None,
                })
                .collect()
        })
        .collect();
    SemSpec::new(g, ModelClass::Anm, envs).unwrap()
}

#[test]
fn linear_models_never_reach_full_w_rank() {
    let m = required_environments(&Dag::chain(3));
    let opts = AuditOptions::default();
    for seed in 0..10 {
        let spec = linear_chain_sem(m, seed);
        let pts = model_grid(&spec, 0, 2, seed).unwrap();
        let envs: Vec<usize> = (0..m).collect();
        let reports = audit_all_subsets(&spec, &envs, &pts, &[VectorKind::WAnm], &opts).unwrap();
        let full = reports.iter().filter(|r| r.subset.len() == 3);
        for r in full {
            assert!(!r.pass, "seed {seed}");
            assert!(r.rank <= r.required_rank - 4);
        }
    }
}

#[test]
fn tanh_chain_passes_with_formula_environment_count() {
    let g = Dag::chain(3);
    let m = required_environments(&g);
    let envs: Vec<usize> = (0..m).collect();
    let opts = AuditOptions::default();
    let mut passes = 0;
    for seed in 0..10 {
        let spec = sample_sem(&g, m, ModelClass::Anm, &SemConfig::default(), seed).unwrap();
        let pts = model_grid(&spec, 0, 5, seed).unwrap();
        let reports =
            audit_all_subsets(&spec, &envs, &pts, &[VectorKind::Tau, VectorKind::WAnm], &opts).unwrap();
        if reports.iter().all(|r| r.pass) {
            passes += 1;
        }
    }
    assert!(passes >= 9, "{passes}/10");
}
