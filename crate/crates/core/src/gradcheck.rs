//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ParameterSet;

const MAX_REFINE_STEP: f64 = 1e-2;
const REFINE_TARGET_ULPS: f64 = 1e6;
/// Largest relative gap between one-sided slopes accepted at a widened step.
const REFINE_KINK_REL: f64 = 0.05;
const SIDE_RESOLVED_ULPS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on coordinates sampled from each parameter tensor; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    /// Coordinates whose forward and backward one-sided slopes differ by more
    /// than this are treated as straddling a kink (a k-max selection or a
    /// padding boundary switching inside ±eps) and skipped. `None` checks all.
    pub kink_tol: Option<f64>,
    /// When the two losses of a central difference are closer than this many
    /// ulps the estimate is roundoff-limited. It is then redone with wider
    /// steps (Richardson-extrapolated pairs, kink-guarded) until the loss
    /// difference is well resolved. `None` disables this.
    pub refine_below_ulps: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: Some(16),
            kink_tol: Some(1e-4),
            refine_below_ulps: Some(1e5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    /// Coordinates estimated with the extrapolated wide-step difference.
    pub coords_refined: usize,
    pub worst: Option<CoordError>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn collect_grads<M: ParameterSet + ?Sized>(model: &M) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| out.push((name.to_string(), p.grad.as_slice().to_vec())));
    out
}

fn read<M: ParameterSet + ?Sized>(model: &M, target: usize, coord: usize) -> f64 {
    let mut idx = 0;
    let mut out = 0.0;
    model.visit_params(&mut |_, p| {
        if idx == target {
            out = p.value.as_slice()[coord];
        }
        idx += 1;
    });
    out
}

fn write<M: ParameterSet + ?Sized>(model: &mut M, target: usize, coord: usize, value: f64) {
    let mut idx = 0;
    model.visit_params_mut(&mut |_, p| {
        if idx == target {
            p.value.as_mut_slice()[coord] = value;
        }
        idx += 1;
    });
}

/// Compares the gradients written by `loss_fn` against central differences.
///
/// `loss_fn` must return the scalar loss and *accumulate* its gradient into
/// the parameters of `model`; the checker zeroes gradients before each call.
/// The returned error is the maximum over checked coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The kink test only looks at loss values, so it cannot hide a wrong
/// analytic gradient on a smooth stretch of the loss.
pub fn finite_difference_check<M, F>(
    model: &mut M,
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: ParameterSet + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    model.zero_grads();
    let first = loss_fn(model)?;
    let analytic = collect_grads(model);
    model.zero_grads();
    let second = loss_fn(model)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        coords_refined: 0,
        worst: None,
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < grads.len() => {
                let mut c = sample(&mut rng, grads.len(), cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..grads.len()).collect(),
        };
        for coord in coords {
            let original = read(model, pi, coord);
            let mut probe = |model: &mut M, step: f64| -> Result<(f64, f64)> {
                write(model, pi, coord, original + step);
                model.zero_grads();
                let plus = loss_fn(model)?;
                write(model, pi, coord, original - step);
                model.zero_grads();
                let minus = loss_fn(model)?;
                write(model, pi, coord, original);
                Ok((plus, minus))
            };
            let kinked = |plus: f64, minus: f64, step: f64| {
                let forward = (plus - first) / step;
                let backward = (first - minus) / step;
                opts.kink_tol.is_some_and(|tol| (forward - backward).abs() > tol)
            };

            let (plus, minus) = probe(model, opts.eps)?;
            if kinked(plus, minus, opts.eps) {
                report.coords_skipped += 1;
                continue;
            }
            let mut numeric = (plus - minus) / (2.0 * opts.eps);
            let ulp = f64::EPSILON * first.abs().max(plus.abs()).max(minus.abs());
            if let Some(limit) = opts.refine_below_ulps {
                if (plus - minus).abs() < limit * ulp {
                    // Weak coordinate: widen the step until the loss
                    // difference is well resolved, extrapolating each pair.
                    let mut step = opts.eps;
                    let mut refined = None;
                    while step * 4.0 <= MAX_REFINE_STEP {
                        step *= 4.0;
                        let (p1, m1) = probe(model, step / 2.0)?;
                        let (p2, m2) = probe(model, step)?;
                        if kinked(p1, m1, step / 2.0) || kinked(p2, m2, step) {
                            break;
                        }
                        // One-sided slopes are only compared once both sides
                        // rise clear of roundoff.
                        let sides = [p1 - first, first - m1, p2 - first, first - m2];
                        if sides.iter().any(|d| d.abs() < SIDE_RESOLVED_ULPS * ulp) {
                            continue;
                        }
                        let lopsided = |p: f64, m: f64, h: f64| {
                            let (fw, bw) = ((p - first) / h, (first - m) / h);
                            (fw - bw).abs() > REFINE_KINK_REL * fw.abs().max(bw.abs())
                        };
                        if lopsided(p1, m1, step / 2.0) || lopsided(p2, m2, step) {
                            break;
                        }
                        let d1 = (p1 - m1) / step;
                        let d2 = (p2 - m2) / (2.0 * step);
                        refined = Some((4.0 * d1 - d2) / 3.0);
                        if (p2 - m2).abs() >= REFINE_TARGET_ULPS * ulp {
                            break;
                        }
                    }
                    if let Some(r) = refined {
                        numeric = r;
                        report.coords_refined += 1;
                    }
                }
            }
            let a = grads[coord];
            let rel = relative_error(a, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordError {
                    param: name.clone(),
                    index: coord,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    model.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::tensor::{Parameter, RealArray};

    fn scalar(x: f64) -> Vec<Parameter> {
        vec![Parameter::new(RealArray::vector(vec![x]))]
    }

    #[test]
    fn quadratic_is_exact() {
        let mut params = scalar(3.0);
        let report = finite_difference_check(
            &mut params,
            |p| {
                let x = p[0].value.as_slice()[0];
                p[0].grad.as_mut_slice()[0] += x;
                Ok(0.5 * x * x)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        let worst = report.worst.unwrap();
        assert_eq!(worst.analytic, 3.0);
        assert!((worst.numeric - 3.0).abs() < 1e-8);
        // parameters restored
        assert_eq!(params[0].value.as_slice(), &[3.0]);
    }

    #[test]
    fn sign_flip_is_caught() {
        let mut params = scalar(3.0);
        let report = finite_difference_check(
            &mut params,
            |p| {
                let x = p[0].value.as_slice()[0];
                p[0].grad.as_mut_slice()[0] -= x;
                Ok(0.5 * x * x)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((report.max_rel_error - 2.0).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn kinks_are_skipped_and_counted() {
        let mut params = scalar(0.0);
        let relu = |p: &mut Vec<Parameter>| {
            let x = p[0].value.as_slice()[0];
            p[0].grad.as_mut_slice()[0] += if x > 0.0 { 1.0 } else { 0.0 };
            Ok(x.max(0.0))
        };
        let report = finite_difference_check(&mut params, relu, &GradCheckOptions::default()).unwrap();
        assert_eq!((report.coords_checked, report.coords_skipped), (0, 1));
        let opts = GradCheckOptions {
            kink_tol: None,
            ..Default::default()
        };
        let report = finite_difference_check(&mut params, relu, &opts).unwrap();
        assert_eq!(report.coords_checked, 1);
        assert!((report.max_rel_error - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weak_coordinates_are_resolved() {
        // loss ≈ 1 with a slope of 3e-10: the base step spans ~30 ulps
        let mut params = scalar(0.3);
        let weak = |p: &mut Vec<Parameter>| {
            let x = p[0].value.as_slice()[0];
            p[0].grad.as_mut_slice()[0] += 3e-10 * x.cos();
            Ok(1.0 + 3e-10 * x.sin())
        };
        let opts = GradCheckOptions {
            refine_below_ulps: None,
            ..Default::default()
        };
        let plain = finite_difference_check(&mut params, weak, &opts).unwrap();
        assert!(plain.max_rel_error > 1e-4, "{plain:?}");
        let report = finite_difference_check(&mut params, weak, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.coords_refined, 1);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn detects_non_determinism() {
        let mut params = scalar(1.0);
        let calls = Cell::new(0.0);
        let err = finite_difference_check(
            &mut params,
            |_| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
