//! Moment statistics of ensembles and the explicit moment-decay machinery:
//! the moment ODE bound, the ODE comparison lemma with its RK4 oracle, the
//! explicit time-decay bound, and Gaussian-moment estimation.

use crate::linalg::{tree_sum, Vec3};
use crate::transport::DiscreteMeasure;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MomentsError {
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("ode parameters must all be positive")]
    NonPositiveParams,
    #[error("invalid moment series: {0}")]
    BadSeries(String),
}

/// `m_p(f) = sum_i w_i |v_i|^p` with deterministic pairwise summation.
pub fn empirical_moment(measure: &DiscreteMeasure, p: f64) -> f64 {
    let terms: Vec<f64> = measure
        .points()
        .par_iter()
        .zip(measure.weights().par_iter())
        .map(|(v, w)| w * crate::kernel::pow_norm(v.norm(), p))
        .collect();
    tree_sum(&terms)
}

/// `m_p` of a uniformly weighted sample.
pub fn empirical_moment_uniform(points: &[Vec3], p: f64) -> f64 {
    let terms: Vec<f64> = points
        .par_iter()
        .map(|v| crate::kernel::pow_norm(v.norm(), p))
        .collect();
    tree_sum(&terms) / points.len() as f64
}

/// Mean velocity of a uniformly weighted sample.
pub fn mean_velocity(points: &[Vec3]) -> Vec3 {
    let xs: Vec<f64> = points.iter().map(|v| v.x).collect();
    let ys: Vec<f64> = points.iter().map(|v| v.y).collect();
    let zs: Vec<f64> = points.iter().map(|v| v.z).collect();
    let n = points.len() as f64;
    Vec3::new(tree_sum(&xs) / n, tree_sum(&ys) / n, tree_sum(&zs) / n)
}

/// Right side of the moment differential inequality
/// `-p m_{p+g} + p m_p + C p^2 [m_{p-2+g} + m_{p-2} m_{2+g}]`
/// (stated under the normalization `m_2 = 1`).
pub fn moment_ode_rhs_bound(
    p: f64,
    m_p: f64,
    m_p_plus_g: f64,
    m_p_minus_2_plus_g: f64,
    m_p_minus_2: f64,
    m_2_plus_g: f64,
    c: f64,
) -> f64 {
    -p * m_p_plus_g + p * m_p + c * p * p * (m_p_minus_2_plus_g + m_p_minus_2 * m_2_plus_g)
}

/// Parameters of the comparison ODE
/// `u' <= -a u^(1+alpha) + b u + c u^(1-beta)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OdeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl OdeParams {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64) -> Result<Self, MomentsError> {
        let params = OdeParams { a, b, c, alpha, beta };
        if [a, b, c, alpha, beta].iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(params)
        } else {
            Err(MomentsError::NonPositiveParams)
        }
    }
}

/// The three-term comparison bound
/// `(2/(a alpha t))^(1/alpha) + (4b/a)^(1/alpha) + (4c/a)^(1/(alpha+beta))`.
pub fn ode_comparison_bound(params: OdeParams, t: f64) -> Result<f64, MomentsError> {
    if !(t > 0.0) {
        return Err(MomentsError::NonPositiveTime(t));
    }
    let OdeParams { a, b, c, alpha, beta } = params;
    Ok((2.0 / (a * alpha * t)).powf(1.0 / alpha)
        + (4.0 * b / a).powf(1.0 / alpha)
        + (4.0 * c / a).powf(1.0 / (alpha + beta)))
}

/// Blow-up-start RK4 oracle for the comparison ODE, from `u(0+) = 1e6`.
///
/// The equation is integrated in the variable `w = u^(-alpha)`, where it
/// reads `w' = alpha (a - b w - c w^(1 + beta/alpha))` and is not stiff at
/// the blow-up start; steps are fixed at 1e-5 below t = 0.1 and 1e-4 after.
/// Returns `u` at each requested time (which must be increasing).
pub fn integrate_comparison_ode(params: OdeParams, times: &[f64]) -> Vec<f64> {
    let OdeParams { a, b, c, alpha, beta } = params;
    let u0: f64 = 1e6;
    let mut w = u0.powf(-alpha);
    let mut t = 0.0f64;
    let rhs = |w: f64| alpha * (a - b * w - c * w.powf(1.0 + beta / alpha));
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        assert!(target >= t, "times must be increasing");
        while t < target {
            let h: f64 = if t < 0.1 { 1e-5 } else { 1e-4 };
            let h = h.min(target - t);
            let k1 = rhs(w);
            let k2 = rhs(w + 0.5 * h * k1);
            let k3 = rhs(w + 0.5 * h * k2);
            let k4 = rhs(w + h * k3);
            w += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        out.push(w.powf(-1.0 / alpha));
    }
    out
}

/// Explicit moment-decay bound `(1 + 2/(g t))^(p/g) + (C p)^(p/2)`
/// (stated for `p >= 4` under the normalization `m_2(f_0) = 1`).
pub fn step4_moment_bound(p: f64, gamma: f64, t: f64, c: f64) -> f64 {
    (1.0 + 2.0 / (gamma * t)).powf(p / gamma) + (c * p).powf(0.5 * p)
}

/// A Gaussian-moment estimate; when `clipped` the exponent cap was active
/// and the value is only a lower bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianMoment {
    pub value: f64,
    pub clipped: bool,
}

/// `int exp(a |v|^2) f(dv)` over the ensemble, with the exponent capped at
/// `cutoff` to avoid overflow.
pub fn gaussian_moment(measure: &DiscreteMeasure, a: f64, cutoff: f64) -> GaussianMoment {
    assert!(a > 0.0, "gaussian moment needs a > 0");
    let mut clipped = false;
    let terms: Vec<f64> = measure
        .points()
        .iter()
        .zip(measure.weights())
        .map(|(v, w)| {
            let e = a * v.norm_squared();
            if e > cutoff {
                clipped = true;
                w * cutoff.exp()
            } else {
                w * e.exp()
            }
        })
        .collect();
    GaussianMoment { value: tree_sum(&terms), clipped }
}

/// Divide all velocities by `sqrt(m_2)` so the rescaled sample has unit
/// energy; returns the scale that was applied. Times are left untouched.
pub fn normalize_to_unit_energy(points: &mut [Vec3]) -> f64 {
    let m2 = empirical_moment_uniform(points, 2.0);
    assert!(m2 > 0.0, "cannot normalize a zero-energy ensemble");
    let scale = m2.sqrt();
    for v in points.iter_mut() {
        *v = v.scale(1.0 / scale);
    }
    scale
}

/// Moment values of one ensemble trajectory on a time grid.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub orders: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl MomentSeries {
    pub fn new(orders: Vec<f64>) -> Self {
        MomentSeries { times: Vec::new(), orders, values: Vec::new() }
    }

    pub fn push(&mut self, time: f64, row: Vec<f64>) -> Result<(), MomentsError> {
        if row.len() != self.orders.len() {
            return Err(MomentsError::BadSeries(format!(
                "row has {} entries for {} orders",
                row.len(),
                self.orders.len()
            )));
        }
        if let Some(&last) = self.times.last() {
            if time <= last {
                return Err(MomentsError::BadSeries(format!("time {time} not after {last}")));
            }
        }
        if row.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(MomentsError::BadSeries("negative or non-finite moment".into()));
        }
        self.times.push(time);
        self.values.push(row);
        Ok(())
    }

    pub fn column(&self, order: f64) -> Option<Vec<f64>> {
        let k = self.orders.iter().position(|&o| o == order)?;
        Some(self.values.iter().map(|row| row[k]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_relative_eq;

    #[test]
    fn empirical_moment_examples() {
        let origin = DiscreteMeasure::uniform(vec![Vec3::ZERO]).unwrap();
        assert_eq!(empirical_moment(&origin, 3.0), 0.0);
        let two = DiscreteMeasure::uniform(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(empirical_moment(&two, 2.0), 1.0);
    }

    #[test]
    fn empirical_moment_normal_sample_confidence_interval() {
        let mut rng = CounterRng::new(&[401]);
        let n = 100_000;
        let points: Vec<Vec3> = (0..n).map(|_| rng.normal_vec3()).collect();
        let f = DiscreteMeasure::uniform(points).unwrap();
        let m2 = empirical_moment(&f, 2.0);
        // E|v|^2 = 3; sample-variance CI at three standard errors.
        let var: f64 = f
            .points()
            .iter()
            .map(|v| (v.norm_squared() - m2).powi(2))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((m2 - 3.0).abs() <= 3.0 * se, "m2 = {m2}, se = {se}");
    }

    #[test]
    fn moment_ode_rhs_example() {
        let v = moment_ode_rhs_bound(2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(v, 8.0);
        // Dominant m_{p+gamma} makes the bound negative.
        let v = moment_ode_rhs_bound(2.0, 1.0, 100.0, 1.0, 1.0, 1.0, 1.0);
        assert!(v < 0.0);
    }

    #[test]
    fn ode_comparison_bound_examples() {
        let params = OdeParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(ode_comparison_bound(params, 1.0).unwrap(), 8.0, epsilon = 1e-12);
        assert!(ode_comparison_bound(params, 0.0).is_err());
        assert!(ode_comparison_bound(params, -1.0).is_err());
        // Large-time limit keeps only the two stationary terms.
        let late = ode_comparison_bound(params, 1e12).unwrap();
        assert_relative_eq!(late, 4.0 + 2.0, max_relative = 1e-6);
    }

    #[test]
    fn rk4_oracle_stays_below_comparison_bound() {
        let mut rng = CounterRng::new(&[402]);
        for _ in 0..10 {
            let params = OdeParams::new(
                rng.uniform_in(0.1, 4.0),
                rng.uniform_in(0.1, 4.0),
                rng.uniform_in(0.1, 4.0),
                rng.uniform_in(0.2, 2.0),
                rng.uniform_in(0.2, 2.0),
            )
            .unwrap();
            let times = [0.01, 0.1, 1.0, 10.0];
            let us = integrate_comparison_ode(params, &times);
            for (&t, &u) in times.iter().zip(&us) {
                let bound = ode_comparison_bound(params, t).unwrap();
                assert!(
                    u <= bound * (1.0 + 1e-6),
                    "u({t}) = {u} above bound {bound} for {params:?}"
                );
            }
        }
    }

    #[test]
    fn step4_examples() {
        assert_relative_eq!(step4_moment_bound(4.0, 1.0, 1.0, 1.0), 97.0, epsilon = 1e-10);
        assert!(step4_moment_bound(4.0, 1.0, 1e-9, 1.0) > 1e30);
    }

    #[test]
    fn gaussian_moment_examples() {
        let origin = DiscreteMeasure::uniform(vec![Vec3::ZERO]).unwrap();
        assert_eq!(gaussian_moment(&origin, 1.0, 700.0).value, 1.0);
        let two = DiscreteMeasure::uniform(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
        ])
        .unwrap();
        let g = gaussian_moment(&two, std::f64::consts::LN_2, 700.0);
        assert_relative_eq!(g.value, 2.0, epsilon = 1e-12);
        assert!(!g.clipped);
    }

    #[test]
    fn gaussian_moment_monte_carlo_matches_gaussian_integral() {
        // N(0, 0.5 I) with a = 0.25: E exp(a|v|^2) = (1 - 2 a 0.5)^(-3/2).
        let mut rng = CounterRng::new(&[403]);
        let n = 100_000;
        let sd = 0.5f64.sqrt();
        let points: Vec<Vec3> = (0..n).map(|_| rng.normal_vec3().scale(sd)).collect();
        let f = DiscreteMeasure::uniform(points).unwrap();
        let got = gaussian_moment(&f, 0.25, 700.0);
        assert!(!got.clipped);
        let expect = 0.75f64.powf(-1.5);
        // CI from the sample variance of the exponential terms.
        let var: f64 = f
            .points()
            .iter()
            .map(|v| ((0.25 * v.norm_squared()).exp() - got.value).powi(2))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (got.value - expect).abs() <= 4.0 * se,
            "got {} expect {expect} se {se}",
            got.value
        );
    }

    #[test]
    fn gaussian_moment_flags_clipping() {
        let far = DiscreteMeasure::uniform(vec![Vec3::new(100.0, 0.0, 0.0)]).unwrap();
        let g = gaussian_moment(&far, 1.0, 700.0);
        assert!(g.clipped);
        assert_relative_eq!(g.value, 700.0f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn gaussian_moment_monotone_in_a() {
        let mut rng = CounterRng::new(&[404]);
        let points: Vec<Vec3> = (0..100).map(|_| rng.normal_vec3()).collect();
        let f = DiscreteMeasure::uniform(points).unwrap();
        let mut last = 0.0;
        for k in 1..6 {
            let g = gaussian_moment(&f, 0.05 * k as f64, 700.0);
            assert!(g.value > last);
            last = g.value;
        }
    }

    #[test]
    fn moment_interpolation_after_normalization() {
        let mut rng = CounterRng::new(&[405]);
        for _ in 0..200 {
            let n = 2 + rng.below(40);
            let mut points: Vec<Vec3> =
                (0..n).map(|_| rng.normal_vec3().scale(rng.uniform_in(0.1, 4.0))).collect();
            normalize_to_unit_energy(&mut points);
            let f = DiscreteMeasure::uniform(points).unwrap();
            let alpha = rng.uniform_in(2.0, 5.0);
            let beta = alpha + rng.uniform_in(0.1, 3.0);
            let ma = empirical_moment(&f, alpha);
            let mb = empirical_moment(&f, beta);
            let bound = mb.powf((alpha - 2.0) / (beta - 2.0));
            assert!(ma <= bound * (1.0 + 1e-12), "{ma} vs {bound}");
        }
    }

    #[test]
    fn monomial_moments_monotone_outside_unit_ball() {
        let mut rng = CounterRng::new(&[406]);
        let points: Vec<Vec3> = (0..200)
            .map(|_| rng.unit_vec3().scale(rng.uniform_in(1.0, 3.0)))
            .collect();
        let f = DiscreteMeasure::uniform(points).unwrap();
        let mut last = 0.0;
        for k in 0..6 {
            let m = empirical_moment(&f, 1.0 + k as f64);
            assert!(m >= last);
            last = m;
        }
    }

    #[test]
    fn moment_series_invariants() {
        let mut s = MomentSeries::new(vec![2.0, 4.0]);
        s.push(0.0, vec![1.0, 3.0]).unwrap();
        s.push(0.5, vec![1.0, 2.5]).unwrap();
        assert!(s.push(0.5, vec![1.0, 2.0]).is_err(), "times strictly increasing");
        assert!(s.push(1.0, vec![1.0]).is_err(), "row width");
        assert!(s.push(1.0, vec![1.0, -2.0]).is_err(), "nonnegative");
        assert_eq!(s.column(4.0), Some(vec![3.0, 2.5]));
    }
}
