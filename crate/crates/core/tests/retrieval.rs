mod common;

use common::oracles::retrieval_oracle;
use pgga::eval::{cmc, distance_matrix, mean_ap, parse_report, EvalReport, Meta};
use pgga::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    d: Vec<Vec<f64>>,
    q: Vec<Meta>,
    g: Vec<Meta>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng, integer: bool) -> Self {
        let ids = rng.random_range(2..=5);
        let (nq, ng) = (rng.random_range(1..=8), rng.random_range(2..=20));
        let meta = |rng: &mut ChaCha8Rng| Meta {
            id: rng.random_range(0..ids),
            camera: rng.random_range(0..2),
        };
        let q = (0..nq).map(|_| meta(rng)).collect();
        let g = (0..ng).map(|_| meta(rng)).collect();
        let d = (0..nq)
            .map(|_| {
                (0..ng)
                    .map(|_| if integer { rng.random_range(0..6) as f64 } else { rng.random_range(0.0..4.0) })
                    .collect()
            })
            .collect();
        Self { d, q, g }
    }

    fn tensor(&self) -> Tensor {
        Tensor::new(&[self.q.len(), self.g.len()], self.d.concat()).unwrap()
    }

    fn pairs(m: &[Meta]) -> Vec<(usize, usize)> {
        m.iter().map(|m| (m.id, m.camera)).collect()
    }
}

fn metas(v: &[(usize, usize)]) -> Vec<Meta> {
    v.iter().map(|&(id, camera)| Meta { id, camera }).collect()
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        // half the instances use small integers so ties are common
        let inst = Instance::random(&mut rng, trial % 2 == 0);
        let d = inst.tensor();
        let max_rank = inst.g.len();
        let (want_cmc, want_map, want_skip) =
            retrieval_oracle(&inst.d, &Instance::pairs(&inst.q), &Instance::pairs(&inst.g), max_rank);
        let c = cmc(&d, &inst.q, &inst.g, max_rank).unwrap();
        let m = mean_ap(&d, &inst.q, &inst.g).unwrap();
        assert_eq!(c.skipped, want_skip);
        for (a, b) in c.curve.iter().zip(&want_cmc) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((m - want_map).abs() < 1e-12, "{m} vs {want_map}");
        assert!(c.curve.windows(2).all(|w| w[0] <= w[1]));
        if want_skip < inst.q.len() {
            assert_eq!(*c.curve.last().unwrap(), 1.0);
            assert!(m <= *c.curve.last().unwrap());
        }
    }
}

#[test]
fn metrics_invariant_under_cubing() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..100 {
        let inst = Instance::random(&mut rng, trial % 2 == 0);
        let d = inst.tensor();
        let cubed = d.map(|x| x * x * x);
        let n = inst.g.len();
        assert_eq!(cmc(&d, &inst.q, &inst.g, n).unwrap(), cmc(&cubed, &inst.q, &inst.g, n).unwrap());
        assert_eq!(mean_ap(&d, &inst.q, &inst.g).unwrap(), mean_ap(&cubed, &inst.q, &inst.g).unwrap());
    }
}

#[test]
fn distance_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let (nq, ng, l) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..12));
        let q = Tensor::rand_uniform(&[nq, l], -3.0, 3.0, &mut rng);
        let g = Tensor::rand_uniform(&[ng, l], -3.0, 3.0, &mut rng);
        let d = distance_matrix(&q, &g).unwrap();
        for i in 0..nq {
            for j in 0..ng {
                let mut s = 0.0;
                for k in 0..l {
                    s += (q.at(&[i, k]) - g.at(&[j, k])).powi(2);
                }
                assert!((d.at(&[i, j]) - s.sqrt()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn self_distance_symmetric_with_zero_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = Tensor::rand_uniform(&[7, 9], -1.0, 1.0, &mut rng);
    let d = distance_matrix(&x, &x).unwrap();
    for i in 0..7 {
        assert_eq!(d.at(&[i, i]), 0.0);
        for j in 0..7 {
            assert_eq!(d.at(&[i, j]), d.at(&[j, i]));
        }
    }
}

#[test]
fn distance_examples() {
    let e = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let d = distance_matrix(&e, &e).unwrap();
    assert_eq!(d.at(&[0, 1]), 2f64.sqrt());
    assert!(distance_matrix(&e, &Tensor::zeros(&[2, 4])).is_err());
}

#[test]
fn ranking_examples() {
    // every query has its duplicate, seen by another camera, at distance 0
    let q = metas(&[(0, 0), (1, 0), (2, 0)]);
    let g = metas(&[(0, 1), (1, 1), (2, 1)]);
    let d = Tensor::new(&[3, 3], vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]).unwrap();
    assert_eq!(cmc(&d, &q, &g, 1).unwrap().curve, vec![1.0]);

    // the only match is ranked last of five
    let q = metas(&[(0, 0)]);
    let g = metas(&[(1, 1), (2, 1), (3, 1), (4, 1), (0, 1)]);
    let d = Tensor::new(&[1, 5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    assert_eq!(cmc(&d, &q, &g, 5).unwrap().curve, vec![0.0, 0.0, 0.0, 0.0, 1.0]);

    let g2 = metas(&[(0, 1), (1, 1)]);
    let first = Tensor::new(&[1, 2], vec![0.1, 0.2]).unwrap();
    let second = Tensor::new(&[1, 2], vec![0.2, 0.1]).unwrap();
    assert_eq!(mean_ap(&first, &q, &g2).unwrap(), 1.0);
    assert_eq!(mean_ap(&second, &q, &g2).unwrap(), 0.5);
}

#[test]
fn queries_without_match_are_counted() {
    // the only same-id item shares the query's camera
    let q = metas(&[(0, 0), (1, 0)]);
    let g = metas(&[(0, 0), (1, 1)]);
    let d = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let c = cmc(&d, &q, &g, 2).unwrap();
    assert_eq!(c.skipped, 1);
    assert_eq!(c.curve, vec![1.0, 1.0]);
}

#[test]
fn ties_break_by_gallery_index() {
    let q = metas(&[(0, 0)]);
    let d = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
    let early = metas(&[(0, 1), (1, 1)]);
    let late = metas(&[(1, 1), (0, 1)]);
    assert_eq!(cmc(&d, &q, &early, 1).unwrap().curve, vec![1.0]);
    assert_eq!(cmc(&d, &q, &late, 1).unwrap().curve, vec![0.0]);
}

#[test]
fn report_csv_round_trip() {
    let q = metas(&[(0, 0), (1, 0)]);
    let g = metas(&[(0, 1), (1, 1), (2, 1)]);
    let d = Tensor::new(&[2, 3], vec![0.3, 0.1, 0.2, 0.2, 0.1, 0.3]).unwrap();
    let r = EvalReport::compute(&d, &q, &g, vec![[0.5; 5]; 2]).unwrap();
    let rows = parse_report(&r.to_csv()).unwrap();
    let names: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(names, ["mAP", "cmc@1", "cmc@5", "cmc@10"]);
    assert_eq!(rows[0].1, r.map);
    assert_eq!(rows[1].1, 0.5);
    assert_eq!(r.theta_csv().lines().count(), 3);
}

proptest! {
    #[test]
    fn cmc_bounded_and_monotone(vals in prop::collection::vec(0.0f64..10.0, 24), ids in prop::collection::vec(0usize..3, 10)) {
        let q = ids[..4].iter().map(|&id| Meta { id, camera: 0 }).collect::<Vec<_>>();
        let g = ids[4..].iter().map(|&id| Meta { id, camera: 1 }).collect::<Vec<_>>();
        let d = Tensor::new(&[4, 6], vals).unwrap();
        let c = cmc(&d, &q, &g, 6).unwrap();
        prop_assert!(c.curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.curve.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let m = mean_ap(&d, &q, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }
}
