use crl_autodiff::Tensor;
use crl_core::eval::{align, knn_r2, mixing_check, scatter_export, structure_report, MixingOptions};
use crl_core::graph::{enumerate_dags, Dag, NodePermutation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn map_cols(t: &Tensor, f: impl Fn(usize, &[f64]) -> f64, cols: usize) -> Tensor {
    let n = t.shape()[1];
    let rows = t.shape()[0];
    let data = t.data().chunks(n).flat_map(|r| (0..cols).map(|c| f(c, r)).collect::<Vec<_>>()).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn alignment_recovers_a_shuffle() {
    let z = gaussian(500, 3, 1);
    // Estimate k holds true latent perm[k]: the cycle (2, 3, 1) in 1-based terms.
    let perm = [1, 2, 0];
    let zhat = map_cols(&z, |c, r| r[perm[c]], 3);
    let a = align(&zhat, &z).unwrap();
    assert_eq!(a.permutation, perm.to_vec());
    assert!(a.aligned.iter().all(|&s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn alignment_ignores_monotone_maps() {
    let z = gaussian(400, 3, 2);
    let zhat = map_cols(&z, |c, r| if c == 1 { -r[c].powi(3) } else { r[c].powi(3) + 2.0 }, 3);
    let a = align(&zhat, &z).unwrap();
    assert_eq!(a.permutation, vec![0, 1, 2]);
    assert!(a.aligned.iter().all(|&s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn independent_noise_scores_stay_small() {
    let n = 2000;
    let bound = 4.0 / (n as f64).sqrt();
    for seed in 0..10 {
        let a = align(&gaussian(n, 3, seed), &gaussian(n, 3, seed + 100)).unwrap();
        for row in &a.scores {
            assert!(row.iter().all(|&s| s <= bound), "{row:?}");
        }
    }
}

#[test]
fn constant_columns_score_zero() {
    let z = gaussian(100, 2, 3);
    let zhat = map_cols(&z, |c, r| if c == 0 { 5.0 } else { r[1] }, 2);
    let a = align(&zhat, &z).unwrap();
    assert_eq!(a.scores[0], vec![0.0, 0.0]);
    assert!(align(&gaussian(10, 2, 0), &gaussian(11, 2, 0)).is_err());
}

#[test]
fn identical_graphs_have_zero_distances() {
    for n in 1..=4 {
        for g in enumerate_dags(n) {
            let r = structure_report(&g, &g, &NodePermutation::identity(n)).unwrap();
            assert!(r.exact_match);
            assert_eq!((r.shd, r.moral_shd, r.tc_shd), (0, 0, 0), "{g}");
        }
    }
}

#[test]
fn structural_distances_of_hand_cases() {
    let chain = Dag::chain(3);
    let empty = structure_report(&Dag::empty(3), &chain, &NodePermutation::identity(3)).unwrap();
    assert!(!empty.exact_match);
    assert_eq!(empty.shd, 2);
    // The chain's moral graph is its skeleton; orient it backwards.
    let reversed = Dag::new(3, &[(0, 1), (1, 2)]).unwrap();
    let r = structure_report(&reversed, &chain, &NodePermutation::identity(3)).unwrap();
    assert!(r.shd > 0 && !r.exact_match);
    assert_eq!(r.moral_shd, 0);
    // Estimated chain Ẑ2 → Ẑ1 → Ẑ3 matches under Ẑ1 ↦ Z2, Ẑ2 ↦ Z1.
    let relabeled = Dag::new(3, &[(2, 0), (0, 1)]).unwrap();
    let p = NodePermutation::new(vec![1, 0, 2]).unwrap();
    let perm_r = structure_report(&relabeled, &chain, &p).unwrap();
    let id_r = structure_report(&relabeled, &chain, &NodePermutation::identity(3)).unwrap();
    assert!(perm_r.exact_match && !id_r.exact_match);
    // A collider estimate of a chain: wrong moral graph, extra closure edge.
    let col = structure_report(&Dag::pair3(), &chain, &NodePermutation::identity(3)).unwrap();
    assert_eq!((col.moral_shd > 0, col.tc_shd > 0), (true, true));
}

#[test]
fn knn_fit_is_monotone_in_its_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let x = gaussian(800, 3, seed);
        let y: Vec<f64> = x
            .data()
            .chunks(3)
            .map(|r| r[0].sin() + 0.5 * r[1] * r[2] + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let full = knn_r2(&x, &[0, 1, 2], &y, 10).unwrap();
        for sub in [vec![0], vec![1], vec![0, 1], vec![1, 2], vec![0, 2]] {
            assert!(full >= knn_r2(&x, &sub, &y, 10).unwrap() - 0.02);
        }
    }
    let x = gaussian(20, 1, 0);
    assert!(knn_r2(&x, &[0], &[0.0; 20], 20).is_err());
    assert_eq!(knn_r2(&x, &[], &[1.0; 20], 3).unwrap(), 0.0);
}

#[test]
fn mixing_check_on_synthetic_estimates() {
    let opts = MixingOptions::default();
    let id = NodePermutation::identity(3);
    let z = gaussian(2000, 3, 7);

    // Chain: the last estimate mixes Z3 with its surrounding parent Z2.
    let zhat = map_cols(&z, |c, r| if c == 2 { r[2] + r[1].tanh() } else { r[c].powi(3) }, 3);
    let rows = mixing_check(&zhat, &z, &Dag::chain(3), &id, &opts).unwrap();
    assert_eq!(rows[2].allowed, vec![1, 2]);
    assert!(rows.iter().all(|r| r.supported), "{rows:?}");

    // Collider Z1 → Z2 ← Z3: Z1 alone explains its estimate.
    let zhat = map_cols(&z, |c, r| r[c].exp(), 3);
    let rows = mixing_check(&zhat, &z, &Dag::collider3(), &id, &opts).unwrap();
    assert_eq!(rows[0].allowed, vec![0]);
    assert!(rows[0].r2_allowed >= 0.9);

    // Pure noise is explained by nothing.
    let rows = mixing_check(&gaussian(2000, 3, 8), &z, &Dag::chain(3), &id, &opts).unwrap();
    for r in &rows {
        assert!(r.r2_allowed < 0.1 && r.r2_all < 0.1 && !r.supported, "{r:?}");
    }
}

#[test]
fn scatter_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let z = gaussian(1000, 3, 0);
    let zhat = gaussian(1000, 3, 1);
    let p = NodePermutation::new(vec![2, 0, 1]).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    scatter_export(&zhat, &z, &p, &a).unwrap();
    scatter_export(&zhat, &z, &p, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,zhat,z"));
    assert_eq!(lines.clone().count(), 9000);
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&first[..2], &["1", "1"]);
    assert_eq!(first[3].parse::<f64>().unwrap(), z.get2(0, 0));
}
