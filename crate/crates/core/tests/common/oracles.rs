//! Brute-force oracles. Each one is written from the definition, without
//! sharing code paths with the library.

use pgga::pose::{Keypoint, KeypointSet, NUM_PARTS};
use rand::Rng;

type Pt = (i64, i64);

fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(a: Pt, b: Pt, p: Pt) -> bool {
    cross(a, b, p) == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn in_triangle(a: Pt, b: Pt, c: Pt, p: Pt) -> bool {
    if cross(a, b, c) == 0 {
        return false;
    }
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0)
}

/// Carathéodory: in the plane, `p` lies in the hull of `pts` iff it lies in
/// some point, segment or triangle of them.
pub fn in_hull(pts: &[Pt], p: Pt) -> bool {
    let n = pts.len();
    for i in 0..n {
        if pts[i] == p {
            return true;
        }
        for j in i + 1..n {
            if on_segment(pts[i], pts[j], p) {
                return true;
            }
            for k in j + 1..n {
                if in_triangle(pts[i], pts[j], pts[k], p) {
                    return true;
                }
            }
        }
    }
    false
}

/// Chebyshev distance from `p` to segment `a→b`, minimized over the
/// breakpoints of the piecewise-linear objective in the segment parameter.
pub fn chebyshev_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (u, v) = (p.0 - a.0, p.1 - a.1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let f = |t: f64| (u - t * dx).abs().max((v - t * dy).abs());
    let mut cands = vec![0.0, 1.0];
    for (num, den) in [(u, dx), (v, dy), (u - v, dx - dy), (u + v, dx + dy)] {
        if den != 0.0 {
            cands.push(num / den);
        }
    }
    cands
        .into_iter()
        .filter(|t| (0.0..=1.0).contains(t))
        .map(f)
        .fold(f64::INFINITY, f64::min)
}

fn in_clamped_square(k: Keypoint, omega: usize, r: usize, c: usize) -> bool {
    r.abs_diff(k.row) <= omega && c.abs_diff(k.col) <= omega
}

fn clamped_corners(k: Keypoint, omega: usize, rows: usize, cols: usize) -> [Pt; 4] {
    let r0 = k.row.saturating_sub(omega) as i64;
    let r1 = (k.row + omega).min(rows - 1) as i64;
    let c0 = k.col.saturating_sub(omega) as i64;
    let c1 = (k.col + omega).min(cols - 1) as i64;
    [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
}

/// Per-pixel membership in the six-region body outline.
pub fn coarse_membership(kps: &KeypointSet, omega: usize) -> Vec<bool> {
    let (rows, cols) = (kps.rows, kps.cols);
    let e = &kps.entries;
    // indices in channel order
    let torso: Vec<Pt> = [1, 2, 8, 7].iter().flat_map(|&i| clamped_corners(e[i], omega, rows, cols)).collect();
    let limbs = [[1, 3, 5], [2, 4, 6], [7, 9, 11], [8, 10, 12]];
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let pos = |k: Keypoint| (k.row as f64, k.col as f64);
            let p = (r as f64, c as f64);
            let head = in_clamped_square(e[0], omega, r, c);
            let body = in_hull(&torso, (r as i64, c as i64));
            let limb = limbs.iter().any(|l| {
                l.iter().any(|&i| in_clamped_square(e[i], omega, r, c))
                    || chebyshev_to_segment(p, pos(e[l[0]]), pos(e[l[1]])) <= omega as f64 + 1e-9
                    || chebyshev_to_segment(p, pos(e[l[1]]), pos(e[l[2]])) <= omega as f64 + 1e-9
            });
            out.push(head || body || limb);
        }
    }
    out
}

/// Membership of the square around one keypoint.
pub fn fine_membership(k: Keypoint, omega: usize, rows: usize, cols: usize) -> Vec<bool> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| in_clamped_square(k, omega, r, c)))
        .collect()
}

pub fn random_keypoints<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> KeypointSet {
    let entries = std::array::from_fn::<_, NUM_PARTS, _>(|_| Keypoint {
        row: rng.random_range(0..rows),
        col: rng.random_range(0..cols),
        conf: rng.random_range(0.0..=1.0),
    });
    KeypointSet::new(entries, rows, cols).unwrap()
}

/// Labels of the gallery entries sorted ascending by distance, ties by index.
fn ranked(dist: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    // insertion sort keeps the tie rule obvious
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dist[order[j - 1]] > dist[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    order
}

/// Brute-force CMC and mAP with same-id-same-camera exclusion. Returns
/// `(cmc[0..max_rank], mAP, number of queries without any match)`.
pub fn retrieval_oracle(
    d: &[Vec<f64>],
    q_meta: &[(usize, usize)],
    g_meta: &[(usize, usize)],
    max_rank: usize,
) -> (Vec<f64>, f64, usize) {
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let (mut valid, mut skipped) = (0usize, 0usize);
    for (qi, row) in d.iter().enumerate() {
        let (qid, qcam) = q_meta[qi];
        let kept: Vec<usize> = ranked(row)
            .into_iter()
            .filter(|&g| !(g_meta[g].0 == qid && g_meta[g].1 == qcam))
            .collect();
        let relevant: Vec<bool> = kept.iter().map(|&g| g_meta[g].0 == qid).collect();
        let r = relevant.iter().filter(|&&x| x).count();
        if r == 0 {
            skipped += 1;
            continue;
        }
        valid += 1;
        let first = relevant.iter().position(|&x| x).unwrap();
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k {
                *h += 1;
            }
        }
        let mut ap = 0.0;
        for (pos, _) in relevant.iter().enumerate().filter(|(_, &x)| x) {
            let found = relevant[..=pos].iter().filter(|&&x| x).count();
            ap += found as f64 / (pos + 1) as f64;
        }
        ap_sum += ap / r as f64;
    }
    let cmc = hits.iter().map(|&h| h as f64 / valid.max(1) as f64).collect();
    (cmc, ap_sum / valid.max(1) as f64, skipped)
}

/// Batch-hard triplet over all ordered pairs, written with explicit loops.
pub fn triplet_oracle(feats: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..feats.len() {
        let mut hp = f64::NEG_INFINITY;
        let mut hn = f64::INFINITY;
        for j in 0..feats.len() {
            if i == j {
                continue;
            }
            let dij = dist(&feats[i], &feats[j]);
            if labels[i] == labels[j] {
                hp = hp.max(dij);
            } else {
                hn = hn.min(dij);
            }
        }
        total += (hp - hn + margin).max(0.0);
    }
    total
}

/// Softmax cross-entropy of one logit row, from the definition.
pub fn softmax_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    -((logits[label] - m).exp() / z).ln()
}
