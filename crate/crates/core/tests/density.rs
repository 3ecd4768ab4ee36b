use crl_core::density::{
    check_lemma_sink, derivatives_analytic, derivatives_fd, log_density, markov_network_from_density,
    model_grid, DerivMethod, HALF_LN_2PI,
};
use crl_core::graph::{Dag, UGraph};
use crl_core::probe::{chain_rule_probe, DiffeoProbe, ProbeRoute};
use crl_core::scm::{
    sample_sem, Activation, DenseLayer, MechanismNet, ModelClass, NodeParams, SemConfig, SemSpec,
};
use nalgebra::{DMatrix, DVector};

fn anm_node(mech: MechanismNet, mean: f64, std: f64) -> NodeParams {
    NodeParams {
        mech,
        noise_mean: mean,
        noise_std: std,
        scale_net: None,
    }
}

/// Linear chain with coefficient `coef[i]` on the single parent.
fn linear_chain(coef: &[f64], bias: &[f64], means: &[f64], stds: &[f64]) -> SemSpec {
    let n = stds.len();
    let env = (0..n)
        .map(|i| {
            let mech = if i == 0 {
                MechanismNet::constant(0, bias[0])
            } else {
                MechanismNet::linear(vec![coef[i]], bias[i])
            };
            anm_node(mech, means[i], stds[i])
        })
        .collect();
    SemSpec::new(Dag::chain(n), ModelClass::Anm, vec![env]).unwrap()
}

/// Multivariate normal log-density from the path-rule covariance
/// `(I − B)⁻¹ D (I − B)⁻ᵀ`.
fn gaussian_oracle(coef: &[f64], bias: &[f64], means: &[f64], stds: &[f64], z: &[f64]) -> f64 {
    let n = stds.len();
    let mut b = DMatrix::zeros(n, n);
    for i in 1..n {
        b[(i, i - 1)] = coef[i];
    }
    let a = (DMatrix::identity(n, n) - b).try_inverse().unwrap();
    let c = DVector::from_iterator(n, (0..n).map(|i| bias[i] + means[i]));
    let mu = &a * c;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(n, stds.iter().map(|s| s * s)));
    let cov = &a * d * a.transpose();
    let chol = cov.clone().cholesky().unwrap();
    let diff = DVector::from_column_slice(z) - mu;
    let sol = chol.solve(&diff);
    let logdet: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    -0.5 * diff.dot(&sol) - 0.5 * logdet - n as f64 * HALF_LN_2PI
}

#[test]
fn linear_chain_matches_multivariate_normal() {
    let coef = [0.0, 1.4, -0.7, 2.1];
    let bias = [0.3, -0.2, 0.5, 0.0];
    let means = [0.1, -0.4, 0.2, 0.9];
    let stds = [0.8, 1.3, 0.6, 1.9];
    let spec = linear_chain(&coef, &bias, &means, &stds);
    for z in [[0.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.5, 3.0], [-0.7, 0.4, 2.2, -1.5]] {
        let got = log_density(&spec, 0, &z).unwrap();
        let want = gaussian_oracle(&coef, &bias, &means, &stds, &z);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        let b = derivatives_analytic(&spec, 0, &z).unwrap();
        assert!(b.third.iter().all(|&t| t == 0.0));
    }
}

#[test]
fn tanh_parent_example() {
    // Z2 = tanh(Z1) + ε.
    let tanh_net = MechanismNet {
        activation: Activation::Tanh,
        layers: vec![
            DenseLayer { inputs: 1, outputs: 1, weights: vec![1.0], bias: vec![0.0] },
            DenseLayer { inputs: 1, outputs: 1, weights: vec![1.0], bias: vec![0.0] },
        ],
    };
    let env = vec![
        anm_node(MechanismNet::constant(0, 0.0), 0.0, 1.0),
        anm_node(tanh_net, 0.0, 0.7),
    ];
    let spec = SemSpec::new(Dag::chain(2), ModelClass::Anm, vec![env]).unwrap();
    for z in model_grid(&spec, 0, 5, 3).unwrap() {
        let b = derivatives_analytic(&spec, 0, &z).unwrap();
        let fd = derivatives_fd(&spec, 0, &z, 1e-3).unwrap();
        let want = (1.0 - z[0].tanh().powi(2)) / 0.49;
        assert!((b.hess(0, 1) - want).abs() < 1e-12);
        assert!(b.hess(0, 1).abs() > 1e-3);
        assert_eq!(b.third(1, 1, 0), 0.0);
        assert!((fd.hess(0, 1) - b.hess(0, 1)).abs() < 1e-5);
        assert!(fd.third(1, 1, 0).abs() < 1e-6);
    }
}

fn symmetric(b: &crl_core::density::DerivativeBundle, tol: f64) -> bool {
    let n = b.n();
    (0..n).all(|i| {
        (0..n).all(|j| {
            (b.hess(i, j) - b.hess(j, i)).abs() <= tol
                && (0..n).all(|k| {
                    let t = b.third(i, j, k);
                    [b.third(i, k, j), b.third(j, i, k), b.third(j, k, i), b.third(k, i, j), b.third(k, j, i)]
                        .iter()
                        .all(|o| (o - t).abs() <= tol)
                })
        })
    })
}

#[test]
fn analytic_matches_fd_on_random_models() {
    let graphs = [Dag::chain(3), Dag::collider3(), Dag::pair3(), Dag::new(4, &[(1, 0), (2, 0), (3, 1), (3, 2)]).unwrap()];
    let mut worst: f64 = 0.0;
    for (s, g) in graphs.iter().enumerate() {
        for class in [ModelClass::Anm, ModelClass::Hnm] {
            let spec = sample_sem(g, 2, class, &SemConfig::default(), 40 + s as u64).unwrap();
            for u in 0..2 {
                for z in model_grid(&spec, u, 5, 1).unwrap() {
                    let a = derivatives_analytic(&spec, u, &z).unwrap();
                    assert!(symmetric(&a, 1e-10));
                    let f = derivatives_fd(&spec, u, &z, 1e-3).unwrap();
                    let scale = a.third.iter().chain(&a.hess).fold(1.0f64, |m, x| m.max(x.abs()));
                    let gap = a.max_abs_diff(&f) / scale;
                    worst = worst.max(gap);
                }
            }
        }
    }
    assert!(worst <= 1e-4, "relative gap {worst:e}");
}

#[test]
fn quadratic_log_density_has_no_fd_third_derivative() {
    let spec = linear_chain(&[0.0, 1.1, -2.0], &[0.0, 0.2, 0.1], &[0.0, 0.0, 0.0], &[1.0, 0.5, 0.9]);
    let b = derivatives_fd(&spec, 0, &[0.3, 1.2, -0.8], 1e-2).unwrap();
    assert!(b.third.iter().all(|t| t.abs() < 1e-4));
}

#[test]
fn anm_sink_third_derivatives_vanish() {
    let spec = sample_sem(&Dag::chain(3), 3, ModelClass::Anm, &SemConfig::default(), 12).unwrap();
    let grid = model_grid(&spec, 0, 25, 0).unwrap();
    let report = check_lemma_sink(&spec, &[0, 1, 2], &grid, DerivMethod::Analytic, 1e-8).unwrap();
    assert!(report.pass);
    assert_eq!(report.per_pair_max_abs.len(), 3);
    let fd = check_lemma_sink(&spec, &[0], &grid, DerivMethod::FiniteDiff { h: 1e-2 }, 1e-4).unwrap();
    assert!(fd.pass);

    // Z1 is not a sink and its child is nonlinear in it.
    let worst = grid
        .iter()
        .map(|z| derivatives_analytic(&spec, 0, z).unwrap().third(0, 0, 1).abs())
        .fold(0.0, f64::max);
    assert!(worst > 1e-3);
}

#[test]
fn hnm_collider_claims_only_non_parents() {
    // Collider Z1 → Z2 ← Z3 has sink Z2 with parents Z1, Z3.
    let spec = sample_sem(&Dag::collider3(), 2, ModelClass::Hnm, &SemConfig::default(), 7).unwrap();
    let grid = model_grid(&spec, 0, 25, 0).unwrap();
    let report = check_lemma_sink(&spec, &[0, 1], &grid, DerivMethod::Analytic, 1e-8).unwrap();
    assert!(report.pass);
    for p in &report.per_pair_max_abs {
        assert_eq!(p.sink, 1);
        if p.j == 1 {
            assert!(p.claimed_zero && p.max_abs <= 1e-8);
        } else {
            assert!(!p.claimed_zero && p.max_abs > 1e-3, "{p:?}");
        }
    }
}

#[test]
fn markov_networks_of_known_graphs() {
    let tol = 1e-8;
    let chain = sample_sem(&Dag::chain(3), 2, ModelClass::Anm, &SemConfig::default(), 3).unwrap();
    let grid = model_grid(&chain, 0, 25, 0).unwrap();
    let m = markov_network_from_density(&chain, &[0, 1], &grid, DerivMethod::Analytic, tol).unwrap();
    assert_eq!(m, UGraph::new(3, &[(0, 1), (1, 2)]).unwrap());

    let col = sample_sem(&Dag::collider3(), 2, ModelClass::Anm, &SemConfig::default(), 3).unwrap();
    let grid = model_grid(&col, 0, 25, 0).unwrap();
    let m = markov_network_from_density(&col, &[0, 1], &grid, DerivMethod::Analytic, tol).unwrap();
    assert_eq!(m.edge_count(), 3);

    let empty = sample_sem(&Dag::empty(3), 1, ModelClass::Hnm, &SemConfig::default(), 3).unwrap();
    let grid = model_grid(&empty, 0, 10, 0).unwrap();
    let m = markov_network_from_density(&empty, &[0], &grid, DerivMethod::Analytic, tol).unwrap();
    assert_eq!(m.edge_count(), 0);
    assert!(markov_network_from_density(&empty, &[0], &[], DerivMethod::Analytic, tol).is_err());
}

#[test]
fn chain_rule_probe_residuals() {
    let g = Dag::new(4, &[(1, 0), (3, 1), (3, 2)]).unwrap();
    for class in [ModelClass::Anm, ModelClass::Hnm] {
        let spec = sample_sem(&g, 1, class, &SemConfig::default(), 9).unwrap();
        let id = DiffeoProbe::identity(4);
        let lin = DiffeoProbe::random(4, 0.0, 1).unwrap();
        let nl = DiffeoProbe::random(4, 0.8, 2).unwrap();
        for z in model_grid(&spec, 0, 5, 4).unwrap() {
            let r = chain_rule_probe(&spec, 0, &id, &z, ProbeRoute::Jet).unwrap();
            assert!(r <= 1e-8, "identity {r:e}");
            let r = chain_rule_probe(&spec, 0, &lin, &z, ProbeRoute::FiniteDiff { h: 1e-2 }).unwrap();
            assert!(r <= 1e-4, "linear {r:e}");
            let r = chain_rule_probe(&spec, 0, &nl, &z, ProbeRoute::FiniteDiff { h: 1e-2 }).unwrap();
            assert!(r <= 1e-3, "nonlinear {r:e}");
            let r = chain_rule_probe(&spec, 0, &nl, &z, ProbeRoute::Jet).unwrap();
            assert!(r <= 1e-8, "nonlinear jet {r:e}");
        }
    }
}
