//! Symmetries of the few-shot heads.

mod common;

use common::{random, rng};
use ndarray::{array, Array2};
use plml::diffmath::{Array, Tape};
use plml::heads::{EpConfig, Head, ProtoState};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

struct Task {
    z: Array,
    labels: Vec<usize>,
    ways: usize,
    n_query: usize,
}

fn task(seed: u64) -> Task {
    let mut r = rng(seed);
    let ways = r.random_range(2..=5);
    let shots = r.random_range(1..=3);
    let n_query = r.random_range(1..=6);
    let n_u = r.random_range(0..=4);
    let labels: Vec<usize> = (0..ways).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    let d = r.random_range(2..=6);
    let z = random(&mut r, labels.len() + n_query + n_u, d) * 2.0;
    Task { z, labels, ways, n_query }
}

fn probs(head: &Head, t: &Task, labels: &[usize]) -> Array {
    let tape = Tape::new();
    let p = head.query_probs(&tape, tape.constant(t.z.clone()), labels, t.ways, t.n_query).unwrap();
    let out = tape.value(p).clone();
    out
}

#[test]
fn class_permutation_equivariance() {
    let heads = [Head::Proto, Head::Ep(EpConfig::default()), Head::SemiProto];
    for seed in 0..100u64 {
        let t = task(seed);
        let mut perm: Vec<usize> = (0..t.ways).collect();
        perm.shuffle(&mut rng(seed + 10_000));
        let relabeled: Vec<usize> = t.labels.iter().map(|&l| perm[l]).collect();
        for head in &heads {
            let p = probs(head, &t, &t.labels);
            let q = probs(head, &t, &relabeled);
            for i in 0..t.n_query {
                for j in 0..t.ways {
                    assert!((p[[i, j]] - q[[i, perm[j]]]).abs() < 1e-12, "{} seed {seed}", head.name());
                }
            }
        }
    }
}

#[test]
fn equidistant_query_is_exactly_half() {
    let st = ProtoState { prototypes: array![[0.0, 0.0], [2.0, 0.0]] };
    assert_eq!(st.predict(&array![[1.0, 5.0], [1.0, -3.0]]).unwrap(), array![[0.5, 0.5], [0.5, 0.5]]);
}

proptest! {
    #[test]
    fn proto_predict_translation_invariant(
        seed in 0u64..10_000,
        shift in prop::collection::vec(-50.0f64..50.0, 4),
    ) {
        let mut r = rng(seed);
        let protos = random(&mut r, 3, 4);
        let queries = random(&mut r, 5, 4);
        let c = Array2::from_shape_vec((1, 4), shift).unwrap();
        let base = ProtoState { prototypes: protos.clone() }.predict(&queries).unwrap();
        let moved = ProtoState { prototypes: &protos + &c }.predict(&(&queries + &c)).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
