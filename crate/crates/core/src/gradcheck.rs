//! Central-difference gradient validation.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which parameter coordinates to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Every coordinate of every tensor.
    All,
    /// Every coordinate of tensors with at most `per_tensor` entries, and a
    /// seeded random subset of `per_tensor` coordinates of larger ones.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_discrepancy: f64,
    /// `(tensor index, flat coordinate)` of the worst discrepancy.
    pub worst: Option<(usize, usize)>,
    pub probed: usize,
}

/// Compares analytic gradients of `f` at `point` against central differences.
///
/// The discrepancy of one coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`; the report
/// carries the maximum over all probed coordinates.
pub fn finite_difference_check<F>(f: F, point: &[Tensor], eps: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(
            "finite_difference_check",
            format!("epsilon {eps} outside [1e-7, 1e-3]"),
        ));
    }

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.leaf_ref(t, true)).collect();
        let out = f(&mut g, &vars)?;
        let mut grads = g.backward(out)?;
        vars.iter().map(|&v| grads.take(v)).collect()
    };

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.leaf_ref(t, false)).collect();
        let out = f(&mut g, &vars).map_err(|e| match e {
            Error::NonFinite { op } => Error::invalid(
                "finite_difference_check",
                format!("non-finite value in {op} at perturbed point"),
            ),
            other => other,
        })?;
        let value = g.value(out).item();
        if !value.is_finite() {
            return Err(Error::invalid(
                "finite_difference_check",
                "function is non-finite at perturbed point",
            ));
        }
        Ok(value)
    };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = GradCheckReport {
        max_discrepancy: 0.0,
        worst: None,
        probed: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let numel = work[ti].numel();
        let coords: Vec<usize> = match probe {
            Probe::Sampled { per_tensor, seed } if numel > per_tensor => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9E37_79B9));
                let mut picked = sample(&mut rng, numel, per_tensor).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        for c in coords {
            let original = work[ti].data()[c];
            work[ti].data_mut()[c] = original + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = original - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[c];
            let d = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.probed += 1;
            if d > report.max_discrepancy || report.worst.is_none() {
                report.max_discrepancy = report.max_discrepancy.max(d);
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let report = finite_difference_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
            Probe::All,
        )
        .unwrap();
        assert!(report.max_discrepancy < 1e-6, "{report:?}");
        assert_eq!(report.probed, 2);
    }

    #[test]
    fn constant_function_has_zero_discrepancy() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let report = finite_difference_check(|g, _| Ok(g.leaf(Tensor::scalar(7.0))), &[x], 1e-5, Probe::All).unwrap();
        assert_eq!(report.max_discrepancy, 0.0);
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        for eps in [1e-9, 1e-2] {
            assert!(finite_difference_check(|g, v| g.sum(v[0]), &[x.clone()], eps, Probe::All).is_err());
        }
    }

    #[test]
    fn non_finite_at_perturbed_point_is_an_error() {
        // x * 1e308 overflows once x is nudged above f64::MAX / 1e308.
        let x = Tensor::from_vec(vec![1.797]);
        let err = finite_difference_check(
            |g, v| {
                let y = g.scale(v[0], 1e308)?;
                g.sum(y)
            },
            &[x],
            1e-3,
            Probe::All,
        );
        assert!(err.is_err());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // A deliberately broken "function": reads the param through a leaf copy
        // so the analytic gradient is zero but the function still moves.
        let x = Tensor::from_vec(vec![1.0]);
        let report = finite_difference_check(
            |g, v| {
                let copy = g.value(v[0]).clone().with_grad(false);
                let c = g.leaf(copy);
                g.sum(c)
            },
            &[x],
            1e-5,
            Probe::All,
        )
        .unwrap();
        assert!(report.max_discrepancy > 0.9);
    }
}
