mod common;

use crl_core::graph::{enumerate_dags, graphs_identical_under, Dag, NodePermutation, UGraph};
use proptest::prelude::*;

#[test]
fn operations_match_definitions_on_all_small_dags() {
    for n in 1..=4 {
        for g in enumerate_dags(n) {
            common::check_graph(&g).unwrap();
        }
    }
}

#[test]
fn intimate_neighbours_lie_within_surrounding_parents() {
    for n in 1..=4 {
        for g in enumerate_dags(n) {
            common::check_intimate_within_surrounding(&g).unwrap();
        }
    }
}

#[test]
fn closed_subsets_match_brute_force() {
    for n in 1..=4 {
        for g in enumerate_dags(n) {
            assert_eq!(g.ancestrally_closed_subsets(), common::closed_subsets(&g), "{g}");
        }
    }
}

fn arb_dag(max_n: usize) -> impl Strategy<Value = Dag> {
    (1..=max_n).prop_flat_map(|n| {
        (
            Just(n),
            proptest::collection::vec(any::<bool>(), n * n),
            Just(()).prop_perturb(move |_, mut rng| {
                let mut p: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    p.swap(i, rng.random_range(0..=i));
                }
                p
            }),
        )
            .prop_map(|(n, bits, order)| {
                // Edges only from earlier to later positions of `order`.
                let mut edges = Vec::new();
                for a in 0..n {
                    for b in a + 1..n {
                        if bits[a * n + b] {
                            edges.push((order[b], order[a]));
                        }
                    }
                }
                Dag::new(n, &edges).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn random_dags_match_definitions(g in arb_dag(7)) {
        prop_assert!(common::check_graph(&g).is_ok());
    }

    #[test]
    fn shd_is_a_metric_and_closure_is_idempotent(a in arb_dag(6), b in arb_dag(6)) {
        if a.n() == b.n() {
            prop_assert_eq!(a.shd(&b).unwrap(), b.shd(&a).unwrap());
            prop_assert_eq!(a.shd(&b).unwrap() == 0, a == b);
        }
        let c = a.transitive_closure();
        prop_assert_eq!(c.transitive_closure(), c);
        prop_assert!(a.skeleton().is_subgraph_of(&a.moralize()));
    }

    #[test]
    fn permuting_preserves_structure(g in arb_dag(6), seed in any::<u64>()) {
        let n = g.n();
        let mut p: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            p.swap(i, (s >> 33) as usize % (i + 1));
        }
        let perm = NodePermutation::new(p).unwrap();
        let h = g.permuted(&perm).unwrap();
        prop_assert!(graphs_identical_under(&perm, &g, &h).unwrap());
        prop_assert_eq!(h.edge_count(), g.edge_count());
        prop_assert_eq!(h.moralize().edge_count(), g.moralize().edge_count());
        let back = h.permuted(&perm.inverse()).unwrap();
        prop_assert_eq!(back, g);
    }
}

#[test]
fn json_roundtrip() {
    let g = Dag::new(4, &[(1, 0), (3, 1), (3, 2)]).unwrap();
    let s = serde_json::to_string(&g).unwrap();
    assert_eq!(serde_json::from_str::<Dag>(&s).unwrap(), g);
    let u = g.moralize();
    let s = serde_json::to_string(&u).unwrap();
    assert_eq!(serde_json::from_str::<UGraph>(&s).unwrap(), u);
    assert!(serde_json::from_str::<Dag>(r#"{"n":2,"edges":[[0,1],[1,0]]}"#).is_err());
}
