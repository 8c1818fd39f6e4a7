mod common;

use common::oracles::{softmax_ce, triplet_oracle};
use pgga::autodiff::{finite_diff_check, GradCheckConfig, Graph, Params};
use pgga::losses::{batch_hard_triplet, id_loss, total_graph, triplet_anchor_terms, LossConfig};
use pgga::network::{adjacency, edge_matrix, saga_apply, SagaActivation, SagaParams};
use pgga::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_saga(rng: &mut ChaCha8Rng, d: usize) -> (Vec<Tensor>, SagaParams) {
    let nodes = (0..5).map(|_| Tensor::rand_uniform(&[d], 0.0, 2.0, rng)).collect();
    let s = (1.0 / d as f64).sqrt();
    let p = SagaParams {
        phi_a: Tensor::rand_normal(&[d, d], s, rng),
        phi_b: Tensor::rand_normal(&[d, d], s, rng),
        w: Tensor::rand_normal(&[d], s, rng),
    };
    (nodes, p)
}

#[test]
fn adjacency_rows_are_unit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..50 {
        let d = [4, 8, 32][trial % 3];
        let (v, p) = random_saga(&mut rng, d);
        let (a, degenerate) = adjacency(&edge_matrix(&v, &p).unwrap()).unwrap();
        assert!(degenerate.is_empty());
        for row in a.data().chunks(5) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9, "row norm {n}");
        }
        let out = saga_apply(&v, &p, SagaActivation::Logistic).unwrap();
        assert!(out.theta.iter().all(|&t| t > 0.0 && t < 1.0));
    }
}

#[test]
fn zero_edge_rows_are_flagged() {
    let v: Vec<Tensor> = (0..5).map(|i| Tensor::full(&[3], i as f64)).collect();
    let p = SagaParams {
        phi_a: Tensor::ones(&[3, 3]),
        phi_b: Tensor::ones(&[3, 3]),
        w: Tensor::ones(&[3]),
    };
    // node 0 is the zero vector, so its edge row vanishes
    let out = saga_apply(&v, &p, SagaActivation::Logistic).unwrap();
    assert_eq!(out.degenerate_rows, vec![0]);
    assert_eq!(out.theta[0], 0.5);
}

#[test]
fn permutation_equivariance_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..50 {
        let d = [4, 8, 32][trial % 3];
        let (v, p) = random_saga(&mut rng, d);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let pv: Vec<Tensor> = perm.iter().map(|&i| v[i].clone()).collect();
        let base = saga_apply(&v, &p, SagaActivation::Logistic).unwrap();
        let moved = saga_apply(&pv, &p, SagaActivation::Logistic).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(moved.theta[k], base.theta[i], "trial {trial}");
            assert_eq!(moved.weighted[k], base.weighted[i], "trial {trial}");
        }
    }
}

#[test]
fn weighted_vectors_are_scaled_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (v, p) = random_saga(&mut rng, 6);
    let out = saga_apply(&v, &p, SagaActivation::None).unwrap();
    for i in 0..5 {
        for (a, b) in out.weighted[i].data().iter().zip(v[i].data()) {
            assert_eq!(*a, b * out.theta[i]);
        }
    }
}

#[test]
fn zero_heads_give_log_identity_count() {
    for n_id in [2, 8, 751] {
        let feats = vec![Tensor::full(&[3, 4], 0.25); 8];
        let heads = vec![Tensor::zeros(&[n_id, 4]); 8];
        let l = id_loss(&feats, &heads, &[0, 1, n_id - 1]).unwrap();
        let per = l / 3.0;
        assert!((per - (n_id as f64).ln()).abs() < 1e-9, "{per}");
    }
}

#[test]
fn id_loss_matches_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let feats: Vec<Tensor> = (0..8).map(|_| Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng)).collect();
        let heads: Vec<Tensor> = (0..8).map(|_| Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut rng)).collect();
        let labels = [rng.random_range(0..3), rng.random_range(0..3)];
        let mut want = 0.0;
        for (x, w) in feats.iter().zip(&heads) {
            for (b, &y) in labels.iter().enumerate() {
                let logits: Vec<f64> = (0..3)
                    .map(|c| (0..3).map(|k| w.at(&[c, k]) * x.at(&[b, k])).sum())
                    .collect();
                want += softmax_ce(&logits, y);
            }
        }
        want /= 8.0;
        let got = id_loss(&feats, &heads, &labels).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let ids = rng.random_range(2..=4);
    let per = rng.random_range(2..=16 / ids);
    let dim = rng.random_range(1..=6);
    let labels: Vec<usize> = (0..ids * per).map(|i| i % ids).collect();
    let feats = (0..labels.len())
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    (feats, labels)
}

fn to_tensor(f: &[Vec<f64>]) -> Tensor {
    Tensor::new(&[f.len(), f[0].len()], f.concat()).unwrap()
}

#[test]
fn triplet_matches_exhaustive_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let (f, labels) = random_batch(&mut rng);
        assert!(f.len() <= 16);
        let got = batch_hard_triplet(&[to_tensor(&f)], &labels, 1.2).unwrap();
        let want = triplet_oracle(&f, &labels, 1.2);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn identical_features_give_margin_per_anchor() {
    let f = Tensor::full(&[6, 5], -0.3);
    let terms = triplet_anchor_terms(&f, &[0, 0, 1, 1, 2, 2], LossConfig::default().margin).unwrap();
    assert_eq!(terms, vec![1.2; 6]);
}

#[test]
fn total_gradient_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut p = Params::new();
    p.insert("x", Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng));
    p.insert("w", Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng));
    let labels = [0, 0, 1, 1];
    let build = |p: &Params, tau: f64, parts: (bool, bool)| {
        let mut g = Graph::new();
        let x = p.bind(&mut g, "x").unwrap();
        let w = p.bind(&mut g, "w").unwrap();
        let z = g.linear(x, w).unwrap();
        let id = g.cross_entropy(z, &labels).unwrap();
        let tri = g.batch_hard_triplet(x, &labels, 1.2).unwrap();
        let zero = g.constant(Tensor::scalar(0.0));
        let (t, i) = (if parts.0 { tri } else { zero }, if parts.1 { id } else { zero });
        let l = total_graph(&mut g, t, i, tau).unwrap();
        (g, l)
    };
    let grads = |parts| {
        let (g, l) = build(&p, 2.0, parts);
        g.backward(l).unwrap()
    };
    let (both, tri, id) = (grads((true, true)), grads((true, false)), grads((false, true)));
    for name in ["x", "w"] {
        let b = both.get(name).unwrap();
        let t = tri.get(name).map_or(vec![0.0; b.numel()], |t| t.data().to_vec());
        let i = id.get(name).unwrap();
        for ((a, x), y) in b.data().iter().zip(&t).zip(i.data()) {
            assert!((a - (x + y)).abs() < 1e-14);
        }
    }
    let f = |q: &Params| {
        let (g, l) = build(q, 2.0, (true, true));
        Ok(g.value(l).item())
    };
    let r = finite_diff_check(f, &p, &both, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn id_loss_is_nonnegative(vals in prop::collection::vec(-3.0f64..3.0, 12), w in prop::collection::vec(-3.0f64..3.0, 9), l0 in 0usize..3, l1 in 0usize..3) {
        let feats = vec![Tensor::new(&[4, 3], vals).unwrap()];
        let heads = vec![Tensor::new(&[3, 3], w).unwrap()];
        prop_assert!(id_loss(&feats, &heads, &[l0, l1, l0, l1]).unwrap() >= 0.0);
    }

    /// Dyadic features and integer shifts keep every sum exact, so the
    /// translation invariance holds bit for bit.
    #[test]
    fn triplet_translation_invariant(raw in prop::collection::vec(-32i32..32, 24), shift in prop::collection::vec(-100i32..100, 3)) {
        let f: Vec<f64> = raw.iter().map(|&v| v as f64 / 8.0).collect();
        let moved: Vec<f64> = f.iter().enumerate().map(|(i, v)| v + shift[i % 3] as f64).collect();
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let a = batch_hard_triplet(&[Tensor::new(&[8, 3], f).unwrap()], &labels, 1.2).unwrap();
        let b = batch_hard_triplet(&[Tensor::new(&[8, 3], moved).unwrap()], &labels, 1.2).unwrap();
        prop_assert_eq!(a, b);
    }
}
