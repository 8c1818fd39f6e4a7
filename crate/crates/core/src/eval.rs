//! Euclidean ranking with CMC and mAP.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{PggaError, Result};
use crate::network::saga::NUM_NODES;
use crate::tensor::Tensor;

/// Identity and camera of a query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub id: usize,
    pub camera: usize,
}

/// `D[q][g] = ‖x_q − x_g‖₂` between the rows of `Q×L` and `G×L` matrices.
pub fn distance_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(PggaError::shape(
            "distance_matrix",
            "Q×L and G×L descriptors",
            format!("{:?} and {:?}", queries.shape(), gallery.shape()),
        ));
    }
    let l = queries.shape()[1];
    let g = gallery.shape()[0];
    let mut out = Vec::with_capacity(queries.shape()[0] * g);
    for q in queries.data().chunks(l.max(1)).take(queries.shape()[0]) {
        for x in gallery.data().chunks(l.max(1)).take(g) {
            out.push(q.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    Tensor::new(&[queries.shape()[0], g], out)
}

/// Per-query ranking of valid gallery items: ascending distance, ties by
/// gallery index, same identity seen by the same camera removed. Each entry
/// says whether the item is a true match.
fn ranked_matches(d: &Tensor, q: &[Meta], g: &[Meta]) -> Result<Vec<Vec<bool>>> {
    if d.rank() != 2 || d.shape() != [q.len(), g.len()] {
        return Err(PggaError::shape(
            "ranking",
            format!("{}×{} distances", q.len(), g.len()),
            format!("{:?}", d.shape()),
        ));
    }
    let mut out = Vec::with_capacity(q.len());
    for (qi, qm) in q.iter().enumerate() {
        let row = &d.data()[qi * g.len()..(qi + 1) * g.len()];
        let mut order: Vec<usize> = (0..g.len())
            .filter(|&j| !(g[j].id == qm.id && g[j].camera == qm.camera))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        out.push(order.into_iter().map(|j| g[j].id == qm.id).collect());
    }
    Ok(out)
}

/// A CMC curve and the number of queries without any valid match, which
/// are left out of the curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmc {
    /// `curve[k]` is the rank-(k+1) accuracy.
    pub curve: Vec<f64>,
    pub skipped: usize,
}

pub fn cmc(d: &Tensor, q: &[Meta], g: &[Meta], max_rank: usize) -> Result<Cmc> {
    let ranked = ranked_matches(d, q, g)?;
    let mut hits = vec![0usize; max_rank];
    let mut valid = 0;
    for r in &ranked {
        let Some(first) = r.iter().position(|&m| m) else {
            continue;
        };
        valid += 1;
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let curve = hits
        .iter()
        .map(|&h| if valid == 0 { 0.0 } else { h as f64 / valid as f64 })
        .collect();
    Ok(Cmc {
        curve,
        skipped: ranked.len() - valid,
    })
}

/// Mean over queries with at least one valid match of
/// `AP = (1/R)·Σ_hits precision@hit`.
pub fn mean_ap(d: &Tensor, q: &[Meta], g: &[Meta]) -> Result<f64> {
    let ranked = ranked_matches(d, q, g)?;
    let mut total = 0.0;
    let mut valid = 0;
    for r in &ranked {
        let relevant = r.iter().filter(|&&m| m).count();
        if relevant == 0 {
            continue;
        }
        let mut hits = 0;
        let mut ap = 0.0;
        for (i, &m) in r.iter().enumerate() {
            if m {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / relevant as f64;
        valid += 1;
    }
    Ok(if valid == 0 { 0.0 } else { total / valid as f64 })
}

/// Ranks reported in the CSV.
pub const REPORT_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub skipped: usize,
    /// Per-query graph attention weights.
    pub thetas: Vec<[f64; NUM_NODES]>,
}

impl EvalReport {
    pub fn compute(d: &Tensor, q: &[Meta], g: &[Meta], thetas: Vec<[f64; NUM_NODES]>) -> Result<Self> {
        let c = cmc(d, q, g, REPORT_RANKS[REPORT_RANKS.len() - 1])?;
        Ok(Self {
            map: mean_ap(d, q, g)?,
            cmc: c.curve,
            skipped: c.skipped,
            thetas,
        })
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mAP,{}", self.map);
        for k in REPORT_RANKS {
            let _ = writeln!(s, "cmc@{k},{}", self.rank(k));
        }
        s
    }

    pub fn theta_csv(&self) -> String {
        let mut s = String::from("query_index,theta1,theta2,theta3,theta4,theta5\n");
        for (i, t) in self.thetas.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in t {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes the metrics to `path` and, when there are any, the θ table
    /// next to it as `<stem>_theta.csv`.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        if !self.thetas.is_empty() {
            fs::write(theta_path(path), self.theta_csv())?;
        }
        Ok(())
    }
}

pub fn theta_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_theta.csv"))
}

/// Parses the `metric,value` CSV back into `(metric, value)` pairs.
pub fn parse_report(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(PggaError::format("report", "missing `metric,value` header"));
    }
    lines
        .map(|l| {
            let (k, v) = l
                .split_once(',')
                .ok_or_else(|| PggaError::format("report", format!("bad row `{l}`")))?;
            let v = v.parse().map_err(|_| PggaError::format("report", format!("bad value in `{l}`")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(id: usize, camera: usize) -> Meta {
        Meta { id, camera }
    }

    #[test]
    fn unit_vectors() {
        let q = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let g = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = distance_matrix(&q, &g).unwrap();
        assert!((d.data()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d.data()[1], 0.0);
        assert!(distance_matrix(&q, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn adversarial_ordering() {
        let d = Tensor::new(&[1, 5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let g = [m(1, 1), m(2, 1), m(3, 1), m(4, 1), m(0, 1)];
        let c = cmc(&d, &[m(0, 0)], &g, 5).unwrap();
        assert_eq!(c.curve, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn average_precision_examples() {
        let q = [m(0, 0)];
        let d = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(mean_ap(&d, &q, &[m(0, 1), m(1, 1)]).unwrap(), 1.0);
        assert_eq!(mean_ap(&d, &q, &[m(1, 1), m(0, 1)]).unwrap(), 0.5);
    }

    #[test]
    fn same_camera_matches_excluded() {
        let d = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let c = cmc(&d, &[m(0, 0)], &[m(0, 0), m(0, 1)], 1).unwrap();
        assert_eq!(c.curve, vec![1.0]);
        let c = cmc(&d, &[m(0, 0)], &[m(0, 0), m(1, 1)], 1).unwrap();
        assert_eq!(c.skipped, 1);
    }

    #[test]
    fn csv_round_trip() {
        let r = EvalReport {
            map: 0.75,
            cmc: (1..=10).map(|k| k as f64 / 10.0).collect(),
            skipped: 0,
            thetas: vec![[0.5; NUM_NODES]],
        };
        let rows = parse_report(&r.to_csv()).unwrap();
        assert_eq!(rows[0], ("mAP".into(), 0.75));
        assert_eq!(rows[1], ("cmc@1".into(), 0.1));
        assert_eq!(rows[3], ("cmc@10".into(), 1.0));
        assert!(r.theta_csv().starts_with("query_index,theta1"));
    }
}
