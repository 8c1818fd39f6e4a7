use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Gradients;
use super::params::Params;
use crate::error::{PggaError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per parameter; tensors at most this large are
    /// checked exhaustively. Must be at least 32.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_param: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Discrepancy>,
    pub checked: usize,
    /// (parameter, coordinate) pairs where a perturbed forward was not finite.
    pub non_finite: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tol
    }

    /// Combines two reports, keeping the worst discrepancy.
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.non_finite.extend(other.non_finite);
        self
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Parameters absent from `analytic` are taken to have zero gradient.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &Params,
    analytic: &Gradients,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&Params) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(PggaError::InvalidArgument(format!("eps must lie in [1e-7, 1e-3], got {}", cfg.eps)));
    }
    if cfg.samples_per_param < 32 {
        return Err(PggaError::InvalidArgument(format!(
            "at least 32 coordinates per parameter are required, got {}",
            cfg.samples_per_param
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let numel = params.get(&name).unwrap().numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_param {
            (0..numel).collect()
        } else {
            let mut c = index::sample(&mut rng, numel, cfg.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = params.get(&name).unwrap().data()[i];
            let (hi, lo) = (orig + cfg.eps, orig - cfg.eps);
            work.get_mut(&name).unwrap().data_mut()[i] = hi;
            let plus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = lo;
            let minus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            report.checked += 1;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.push((name.clone(), i));
                continue;
            }
            // divide by the realized step, not 2·eps, to drop representation error
            let numeric = (plus - minus) / (hi - lo);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(a, numeric);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Discrepancy {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup() -> Params {
        let mut p = Params::new();
        p.insert("a", Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        p.insert("b", Tensor::from_vec((0..50).map(|i| i as f64 * 0.01 - 0.2).collect()));
        p
    }

    #[test]
    fn linear_function_is_exact() {
        let p = setup();
        let f = |p: &Params| -> Result<f64> {
            let a = p.get("a").unwrap().data();
            let b = p.get("b").unwrap().data();
            let alt: f64 = b.iter().enumerate().map(|(i, v)| if i % 2 == 0 { *v } else { -*v }).sum();
            Ok(2.0 * a[0] - 3.0 * a[1] + 0.5 * a[2] + alt)
        };
        let mut g = Gradients::new();
        g.insert("a", Tensor::from_vec(vec![2.0, -3.0, 0.5]));
        g.insert("b", Tensor::from_vec((0..50).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()));
        let r = finite_diff_check(f, &p, &g, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 3 + 32);
    }

    #[test]
    fn quadratic_is_tight() {
        let p = setup();
        let f = |p: &Params| -> Result<f64> { Ok(p.iter().flat_map(|(_, t)| t.data().iter()).map(|v| v * v).sum()) };
        let mut g = Gradients::new();
        for (n, t) in p.iter() {
            g.insert(n.clone(), t.map(|v| 2.0 * v));
        }
        let r = finite_diff_check(f, &p, &g, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = setup();
        let f = |p: &Params| -> Result<f64> { Ok(p.get("a").unwrap().data()[0].powi(2)) };
        let mut g = Gradients::new();
        g.insert("a", Tensor::from_vec(vec![1.0, 0.0, 0.0]));
        let r = finite_diff_check(f, &p, &g, &GradCheckConfig::default()).unwrap();
        assert!(!r.passes(1e-5));
        assert_eq!(r.worst.unwrap().param, "a");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let p = setup();
        let f = |p: &Params| -> Result<f64> { Ok((p.get("a").unwrap().data()[0] - 0.299995).ln()) };
        let r = finite_diff_check(f, &p, &Gradients::new(), &GradCheckConfig::default()).unwrap();
        assert_eq!(r.non_finite, vec![("a".to_string(), 0)]);
        assert!(!r.passes(1.0));
    }

    #[test]
    fn eps_bounds_enforced() {
        let p = setup();
        let cfg = GradCheckConfig {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(finite_diff_check(|_| Ok(0.0), &p, &Gradients::new(), &cfg).is_err());
    }
}
