//! Property suites over the kernel identities, the cost family, the
//! generator decompositions and the fitted-constant inequalities, with a
//! JSON-serializable report.
//!
//! Each suite scans counter-keyed samples in parallel, tallying violations
//! against a relative tolerance, and records fitted constants where the
//! underlying statement only asserts existence of one.

use crate::generators::{
    self, a_apply, a_apply_with_magnitude, cent_bound, cent_step_bounds, energy_exchange_rate,
    fit_constant, ito_remainder, k_terms, l_apply, Coordinate, CostFunction, GaussBump,
    InverseQuad, LinearBound, MomentMonomial, PairFiniteDiff, Quadruple, SinWave, TestFunction,
    FIT_REL_TOL,
};
use crate::kernel::{
    a_matrix, b_vector, pow_norm, proj_perp, sigma_apply, sigma_diff_norm_squared, sigma_matrix,
    Gamma,
};
use crate::linalg::Vec3;
use crate::moments::normalize_to_unit_energy;
use crate::rng::CounterRng;
use crate::sampler::{stress_quadruples, SamplerConfig};
use crate::transport::{
    cost, optimal_cost, phi_eps_prime, phi_eps_raw, phi_eps_second, rti_constant_estimate,
    CostParams, DiscreteMeasure,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Scales every suite's base sample count.
    pub sample_factor: f64,
    /// Replaces each suite's relative tolerance when set (0 forces failure
    /// on any floating noise, the sabotage path).
    pub tolerance_override: Option<f64>,
    pub sampler: SamplerConfig,
    pub gamma_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub eps_values: Vec<f64>,
    /// Also run the informative eps = 0, p = 32 variant of the central
    /// inequality (advisory: not counted toward the exit status).
    pub include_eps0_p32: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 42,
            sample_factor: 1.0,
            tolerance_override: None,
            sampler: SamplerConfig::default(),
            gamma_values: vec![0.5, 1.0],
            p_values: vec![2.5, 3.0, 4.0],
            eps_values: vec![0.05, 0.25, 1.0],
            include_eps0_p32: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub samples: u64,
    pub violations: u64,
    pub max_violation: f64,
    pub tolerance: f64,
    pub constants: BTreeMap<String, f64>,
    pub worst_sample: Option<String>,
    pub advisory: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub violations_total: u64,
    pub elapsed_seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations_total == 0
    }
}

#[derive(Clone, Copy, Default)]
struct Tally {
    violations: u64,
    max_violation: f64,
    worst_index: Option<u64>,
}

impl Tally {
    fn absorb(mut self, k: u64, magnitude: f64, tolerance: f64) -> Self {
        if magnitude > tolerance {
            self.violations += 1;
        }
        if magnitude > self.max_violation || self.worst_index.is_none() {
            self.max_violation = magnitude;
            self.worst_index = Some(k);
        }
        self
    }

    fn merge(self, other: Self) -> Self {
        let (max_violation, worst_index) = match (self.worst_index, other.worst_index) {
            (None, _) => (other.max_violation, other.worst_index),
            (_, None) => (self.max_violation, self.worst_index),
            (Some(a), Some(b)) => {
                if other.max_violation > self.max_violation
                    || (other.max_violation == self.max_violation && b < a)
                {
                    (other.max_violation, other.worst_index)
                } else {
                    (self.max_violation, self.worst_index)
                }
            }
        };
        Tally { violations: self.violations + other.violations, max_violation, worst_index }
    }
}

/// Scan `samples` counter-indexed draws; `eval` returns the relative
/// violation magnitude at index `k` and `describe` reconstructs the worst
/// sample for the report.
fn scan<F, D>(
    name: &str,
    samples: u64,
    tolerance: f64,
    eval: F,
    describe: D,
    constants: BTreeMap<String, f64>,
) -> SuiteReport
where
    F: Fn(u64) -> f64 + Sync,
    D: Fn(u64) -> String,
{
    let tally = (0..samples)
        .into_par_iter()
        .fold(Tally::default, |acc, k| acc.absorb(k, eval(k), tolerance))
        .reduce(Tally::default, Tally::merge);
    let worst_sample = tally
        .worst_index
        .filter(|_| tally.violations > 0)
        .map(|k| format!("sample {k}: {}", describe(k)));
    SuiteReport {
        name: name.to_string(),
        samples,
        violations: tally.violations,
        max_violation: tally.max_violation,
        tolerance,
        constants,
        worst_sample,
        advisory: false,
    }
}

fn rel_excess(lhs: f64, rhs: f64) -> f64 {
    // Relative amount by which `lhs <= rhs` fails.
    let scale = lhs.abs().max(rhs.abs()).max(1e-300);
    ((lhs - rhs) / scale).max(0.0)
}

fn rel_diff(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn draw_gamma(rng: &mut CounterRng) -> Gamma {
    Gamma::new(rng.uniform_in(0.05, 1.0)).unwrap()
}

/// sigma(x)^2 = a(x), trace a = 2 |x|^(2+gamma), a(x) x = 0, and the
/// projector properties.
pub fn suite_kernel_identities(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-10);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xA1, k]);
        let gamma = draw_gamma(&mut rng);
        let (x, _) = sampler.pair(seed ^ 0xA1, k);
        if x.norm() == 0.0 {
            return 0.0;
        }
        let a = a_matrix(x, gamma);
        let s = sigma_matrix(x, gamma);
        let scale = 1.0 + a.norm();
        let mut worst = (s.matmul(s) - a).norm() / scale;
        worst = worst.max((a.trace() - 2.0 * pow_norm(x.norm(), gamma.get() + 2.0)).abs() / scale);
        worst = worst.max(a.matvec(x).norm() / (scale * (1.0 + x.norm())));
        let p = proj_perp(x).expect("nonzero");
        worst = worst.max((p.matmul(p) - p).norm());
        worst = worst.max(p.matvec(x).norm() / (1.0 + x.norm()));
        worst = worst.max((p.trace() - 2.0).abs());
        worst = worst.max(p.asymmetry());
        worst
    };
    let describe = move |k: u64| {
        let mut rng = CounterRng::new(&[seed, 0xA1, k]);
        let gamma = draw_gamma(&mut rng);
        let (x, _) = sampler.pair(seed ^ 0xA1, k);
        format!("x = {x:?}, gamma = {}", gamma.get())
    };
    scan("kernel_identities", samples, tol, eval, describe, BTreeMap::new())
}

/// The drift/diffusion difference inequalities, the power mean-value bound
/// and the sigma transposition identity with its constant-2 chain.
pub fn suite_kernel_inequalities(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-10);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let max_tr_ratio = (0..samples.min(100_000))
        .into_par_iter()
        .map(|k| {
            let mut rng = CounterRng::new(&[seed, 0xA3, k]);
            let gamma = draw_gamma(&mut rng);
            let (v, v_star) = sampler.pair(seed ^ 0xA3, k);
            let x = v - v_star;
            let denom = pow_norm(x.norm(), 0.5 * gamma.get()) * v.norm() * v_star.norm();
            if denom == 0.0 {
                return 0.0;
            }
            sigma_apply(x, v, gamma).norm() / denom
        })
        .reduce(|| 0.0, f64::max);
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xA2, k]);
        let gamma = draw_gamma(&mut rng);
        let g = gamma.get();
        let (x, xt) = sampler.pair(seed ^ 0xA2, k);
        let (v, v_star) = sampler.pair(seed ^ 0xA4, k);
        let mut worst: f64 = 0.0;

        // |b(x) - b(xt)| <= 2 (|x|^g + |xt|^g) |x - xt|.
        let db = (b_vector(x, gamma) - b_vector(xt, gamma)).norm();
        let p2 = 2.0 * (pow_norm(x.norm(), g) + pow_norm(xt.norm(), g)) * (x - xt).norm();
        worst = worst.max(rel_excess(db, p2));

        // ||sigma(x) - sigma(xt)||^2 through both chain links.
        let sd = sigma_diff_norm_squared(x, xt, gamma);
        let mid =
            2.0 * (x.scale(pow_norm(x.norm(), 0.5 * g)) - xt.scale(pow_norm(xt.norm(), 0.5 * g)))
                .norm_squared();
        let right = 2.0
            * (pow_norm(x.norm(), 0.5 * g) + pow_norm(xt.norm(), 0.5 * g)).powi(2)
            * (x - xt).norm_squared();
        worst = worst.max(rel_excess(sd, mid));
        worst = worst.max(rel_excess(mid, right));

        // |a^alpha - b^alpha| <= (a v b)^(alpha - 1) |a - b|.
        let a = rng.uniform_in(0.0, 10.0);
        let b = rng.uniform_in(0.0, 10.0);
        let alpha = rng.uniform_in(0.01, 0.99);
        if a.max(b) > 0.0 {
            let lhs = (a.powf(alpha) - b.powf(alpha)).abs();
            let rhs = a.max(b).powf(alpha - 1.0) * (a - b).abs();
            worst = worst.max(rel_excess(lhs, rhs));
        }

        // sigma(v - v*) v = sigma(v - v*) v* and the constant-2 chain.
        let xs = v - v_star;
        let sv = sigma_apply(xs, v, gamma);
        let svs = sigma_apply(xs, v_star, gamma);
        let scale = sigma_matrix(xs, gamma).norm() * (v.norm() + v_star.norm()) + 1e-300;
        worst = worst.max((sv - svs).norm() / scale);
        let chain = 2.0 * pow_norm(xs.norm(), 0.5 * g) * v.norm() * v_star.norm();
        worst = worst.max(rel_excess(sv.norm(), chain));
        worst
    };
    let describe = move |k: u64| {
        let (x, xt) = sampler.pair(seed ^ 0xA2, k);
        let (v, v_star) = sampler.pair(seed ^ 0xA4, k);
        format!("x = {x:?}, xt = {xt:?}, v = {v:?}, v* = {v_star:?}")
    };
    let mut constants = BTreeMap::new();
    constants.insert("sigma_v_bound_max_ratio".into(), max_tr_ratio);
    scan("kernel_inequalities", samples, tol, eval, describe, constants)
}

/// r phi' <= phi, 0 <= phi' <= 1, phi'' <= 0 on random (r, eps).
pub fn suite_phi_properties(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-12);
    let seed = cfg.seed;
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xB1, k]);
        let r = rng.uniform_in(0.0, 100.0);
        let eps = rng.uniform();
        let phi = phi_eps_raw(r, eps);
        let d1 = phi_eps_prime(r, eps);
        let d2 = phi_eps_second(r, eps);
        let mut worst = rel_excess(r * d1, phi);
        worst = worst.max((-d1).max(0.0));
        worst = worst.max(rel_excess(d1, 1.0));
        worst = worst.max(d2.max(0.0));
        worst
    };
    let describe = move |k: u64| {
        let mut rng = CounterRng::new(&[seed, 0xB1, k]);
        format!("r = {}, eps = {}", rng.uniform_in(0.0, 100.0), rng.uniform())
    };
    scan("phi_properties", samples, tol, eval, describe, BTreeMap::new())
}

/// c_{p,1} <= c_{p,eps} <= c_{p,1}/eps for eps in (0, 1].
pub fn suite_cost_sandwich(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-12);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xB2, k]);
        let p = rng.uniform_in(2.0, 4.0);
        let eps = rng.uniform();
        let (v, vt) = sampler.pair(seed ^ 0xB2, k);
        let c1 = cost(v, vt, CostParams { p, eps: 1.0 });
        let ce = cost(v, vt, CostParams { p, eps });
        rel_excess(c1, ce).max(rel_excess(ce, c1 / eps))
    };
    let describe = move |k: u64| {
        let (v, vt) = sampler.pair(seed ^ 0xB2, k);
        format!("v = {v:?}, vt = {vt:?}")
    };
    scan("cost_sandwich", samples, tol, eval, describe, BTreeMap::new())
}

/// Fit C in `|v - vt|^p <= C (1 + |v|^p + |vt|^p) phi_1(|v - vt|^2)` and
/// validate on fresh draws.
pub fn suite_wp_domination(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(FIT_REL_TOL);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let bound_at = move |stream: u64, k: u64, p: f64| -> LinearBound {
        let (v, vt) = sampler.pair(stream, k);
        LinearBound::exact(
            pow_norm((v - vt).norm(), p),
            0.0,
            cost(v, vt, CostParams { p, eps: 1.0 }),
        )
    };
    let mut constants = BTreeMap::new();
    let mut reports = Vec::new();
    for &p in &cfg.p_values {
        let fit: Vec<LinearBound> = (0..samples)
            .into_par_iter()
            .map(|k| bound_at(seed ^ 0xB31, k, p))
            .collect();
        // Antipodal far pairs approach the worst ratio 2^(p-1).
        let mut stress = fit;
        for k in 0..200 {
            let r = 1.1f64.powi(k);
            let v = Vec3::new(r, 0.0, 0.0);
            stress.push(LinearBound::exact(
                pow_norm(2.0 * r, p),
                0.0,
                cost(v, -v, CostParams { p, eps: 1.0 }),
            ));
        }
        let c = fit_constant(&stress);
        constants.insert(format!("wp_domination_c[p={p}]"), c);
        reports.push((p, c));
    }
    let ps = reports.clone();
    let eval = move |k: u64| -> f64 {
        let mut worst: f64 = 0.0;
        for &(p, c) in &ps {
            worst = worst.max(bound_at(seed ^ 0xB32, k, p).violation(c));
        }
        worst
    };
    let describe = move |k: u64| {
        let (v, vt) = sampler.pair(seed ^ 0xB32, k);
        format!("v = {v:?}, vt = {vt:?}")
    };
    scan("wp_domination", samples, tol, eval, describe, constants)
}

/// Pointwise relaxed triangle inequality constant, recorded per (p, eps).
pub fn suite_rti_pointwise(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let mut constants = BTreeMap::new();
    for &p in &cfg.p_values {
        for &eps in &cfg.eps_values {
            let params = CostParams { p, eps };
            let c = rti_constant_estimate(params, samples as usize, cfg.seed);
            constants.insert(format!("rti_c[p={p},eps={eps}]"), c);
        }
    }
    let max = constants.values().fold(0.0f64, |a, &b| a.max(b));
    SuiteReport {
        name: "rti_pointwise".into(),
        samples: samples * (cfg.p_values.len() * cfg.eps_values.len()) as u64,
        violations: u64::from(!max.is_finite()),
        max_violation: if max.is_finite() { 0.0 } else { f64::INFINITY },
        tolerance: f64::INFINITY,
        constants,
        worst_sample: None,
        advisory: false,
    }
}

/// Measure-level relaxed triangle inequality with the pointwise constant.
pub fn suite_rti_measure(cfg: &VerifyConfig, triples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(FIT_REL_TOL);
    let seed = cfg.seed;
    let p = cfg.p_values[0];
    let eps = *cfg.eps_values.last().unwrap();
    let params = CostParams { p, eps };
    let c = rti_constant_estimate(params, 20_000, seed);
    let random_measure = move |stream: u64, k: u64| -> DiscreteMeasure {
        let mut rng = CounterRng::new(&[stream, k]);
        let n = 2 + rng.below(5);
        let scale = rng.uniform_in(0.2, 3.0);
        DiscreteMeasure::uniform((0..n).map(|_| rng.normal_vec3().scale(scale)).collect()).unwrap()
    };
    let eval = move |k: u64| -> f64 {
        let f = random_measure(seed ^ 0xC1, k);
        let g = random_measure(seed ^ 0xC2, k);
        let h = random_measure(seed ^ 0xC3, k);
        let t_fh = optimal_cost(&f, &h, params).unwrap().value;
        let t_fg = optimal_cost(&f, &g, params).unwrap().value;
        let t_gh = optimal_cost(&g, &h, params).unwrap().value;
        rel_excess(t_fh, c * (t_fg + t_gh))
    };
    let describe = move |k: u64| format!("triple index {k} (regenerate from seeds)");
    let mut constants = BTreeMap::new();
    constants.insert("rti_measure_c".into(), c);
    scan("rti_measure", triples, tol, eval, describe, constants)
}

/// Symmetrized momentum and energy identities vanish.
pub fn suite_conservation(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-12);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xC5, k]);
        let gamma = draw_gamma(&mut rng);
        let (v, v_star) = sampler.pair(seed ^ 0xC5, k);
        let mut worst: f64 = 0.0;
        for axis in 0..3 {
            let phi = Coordinate { axis };
            let s = l_apply(&phi, v, v_star, gamma) + l_apply(&phi, v_star, v, gamma);
            // Exact cancellation; any nonzero is a violation.
            if s != 0.0 {
                worst = worst.max(1.0);
            }
        }
        let closed = energy_exchange_rate(v, v_star, gamma) + energy_exchange_rate(v_star, v, gamma);
        if closed != 0.0 {
            worst = worst.max(1.0);
        }
        let phi = MomentMonomial { p: 2.0 };
        let one = l_apply(&phi, v, v_star, gamma);
        let via_l = one + l_apply(&phi, v_star, v, gamma);
        worst = worst.max(via_l.abs() / one.abs().max(1.0));
        worst
    };
    let describe = move |k: u64| {
        let (v, v_star) = sampler.pair(seed ^ 0xC5, k);
        format!("v = {v:?}, v* = {v_star:?}")
    };
    scan("conservation_identities", samples, tol, eval, describe, BTreeMap::new())
}

/// `A c - sum k` equals the closed-form nonpositive remainder.
pub fn suite_ito_remainder(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-8);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let p_values = cfg.p_values.clone();
    let eps_values = cfg.eps_values.clone();
    let pick = move |k: u64| -> (Quadruple, f64, f64, Gamma) {
        let mut rng = CounterRng::new(&[seed, 0xD1, k]);
        let q = sampler.quadruple(seed ^ 0xD1, k);
        let p = p_values[rng.below(p_values.len())];
        let eps = eps_values[rng.below(eps_values.len())];
        let gamma = draw_gamma(&mut rng);
        (q, p, eps, gamma)
    };
    let pick_desc = pick.clone();
    let eval = move |k: u64| -> f64 {
        let (q, p, eps, gamma) = pick(k);
        let (lhs, magnitude) =
            a_apply_with_magnitude(&CostFunction { params: CostParams { p, eps } }, &q, gamma);
        let terms = k_terms(p, eps, &q, gamma);
        let remainder = ito_remainder(p, eps, &q, gamma);
        let mut worst = remainder.max(0.0); // sign: remainder <= 0 exactly
        let scale = magnitude.max(terms.magnitude()).max(remainder.abs()).max(1e-300);
        worst = worst.max(((lhs - terms.sum()) - remainder).abs() / scale);
        worst
    };
    let describe = move |k: u64| {
        let (q, p, eps, gamma) = pick_desc(k);
        format!("{q:?}, p = {p}, eps = {eps}, gamma = {}", gamma.get())
    };
    scan("ito_remainder", samples, tol, eval, describe, BTreeMap::new())
}

/// Analytic generator versus the central finite-difference oracle.
pub fn suite_ito_fd_consistency(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-4);
    let seed = cfg.seed;
    let p_values = cfg.p_values.clone();
    let eps_values = cfg.eps_values.clone();
    let pick = move |k: u64| -> (Quadruple, f64, f64, Gamma) {
        let mut rng = CounterRng::new(&[seed, 0xD2, k]);
        let point = |r: &mut CounterRng| {
            Vec3::new(r.uniform_in(-10.0, 10.0), r.uniform_in(-10.0, 10.0), r.uniform_in(-10.0, 10.0))
        };
        let q = Quadruple {
            v: point(&mut rng),
            v_star: point(&mut rng),
            v_tilde: point(&mut rng),
            v_tilde_star: point(&mut rng),
        };
        let p = p_values[rng.below(p_values.len())];
        let eps = eps_values[rng.below(eps_values.len())];
        let gamma = draw_gamma(&mut rng);
        (q, p, eps, gamma)
    };
    let pick_desc = pick.clone();
    let eval = move |k: u64| -> f64 {
        let (q, p, eps, gamma) = pick(k);
        let params = CostParams { p, eps };
        let analytic = a_apply(&CostFunction { params }, &q, gamma);
        let fd =
            a_apply(&PairFiniteDiff::balanced(move |a: Vec3, b: Vec3| cost(a, b, params)), &q, gamma);
        rel_diff(analytic, fd, 1.0)
    };
    let describe = move |k: u64| {
        let (q, p, eps, gamma) = pick_desc(k);
        format!("{q:?}, p = {p}, eps = {eps}, gamma = {}", gamma.get())
    };
    scan("ito_fd_consistency", samples, tol, eval, describe, BTreeMap::new())
}

/// Fit the central-inequality constant per (p, gamma, eps) and validate on
/// fresh samples; `validate_factor` controls how many fresh draws per combo.
pub fn suite_cent(
    cfg: &VerifyConfig,
    fit_samples: u64,
    validate_samples: u64,
) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    for &gv in &cfg.gamma_values {
        let gamma = Gamma::new(gv).unwrap();
        for &p in &cfg.p_values {
            for &eps in &cfg.eps_values {
                out.push(cent_combo(cfg, gamma, p, eps, fit_samples, validate_samples));
            }
        }
    }
    if cfg.include_eps0_p32 {
        let gamma = Gamma::new(*cfg.gamma_values.last().unwrap()).unwrap();
        out.push(cent_eps0_combo(cfg, gamma, fit_samples, validate_samples));
    }
    out
}

/// Fit over the sample set plus hill-climbed extreme configurations, so
/// the constant dominates the local suprema of the required ratio and
/// survives larger fresh validation samples.
fn fit_with_refinement<F>(fit_set: &[Quadruple], eval: F, seed: u64) -> f64
where
    F: Fn(&Quadruple) -> LinearBound + Sync + Copy,
{
    let refined = generators::refine_extremes(fit_set, eval, 192, 400, seed);
    let mut bounds: Vec<LinearBound> = fit_set.par_iter().map(|q| eval(q)).collect();
    bounds.extend(refined.iter().map(|q| eval(q)));
    fit_constant(&bounds)
}

fn cent_combo(
    cfg: &VerifyConfig,
    gamma: Gamma,
    p: f64,
    eps: f64,
    fit_samples: u64,
    validate_samples: u64,
) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(FIT_REL_TOL);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let fit_stream = seed ^ 0xE1;
    let val_stream = seed ^ 0xE2;

    let mut fit_set: Vec<Quadruple> = (0..fit_samples)
        .into_par_iter()
        .map(|k| sampler.quadruple(fit_stream, k))
        .collect();
    fit_set.extend(stress_quadruples());

    let full = |q: &Quadruple| cent_bound(p, eps, q, gamma);
    let c_full = fit_with_refinement(&fit_set, full, seed ^ 0x51);
    let step_fits: [f64; 3] = [0, 1, 2].map(|i| {
        fit_with_refinement(
            &fit_set,
            |q: &Quadruple| cent_step_bounds(p, eps, q, gamma)[i],
            seed ^ (0x52 + i as u64),
        )
    });

    let eval = move |k: u64| -> f64 {
        let q = sampler.quadruple(val_stream, k);
        let mut worst = cent_bound(p, eps, &q, gamma).violation(c_full);
        let sb = cent_step_bounds(p, eps, &q, gamma);
        for (b, c) in sb.iter().zip(&step_fits) {
            worst = worst.max(b.violation(*c));
        }
        worst
    };
    let describe = move |k: u64| format!("{:?}", sampler.quadruple(val_stream, k));

    let mut constants = BTreeMap::new();
    constants.insert("c_fit".into(), c_full);
    constants.insert("c_i1".into(), step_fits[0]);
    constants.insert("c_i2p".into(), step_fits[1]);
    constants.insert("c_i3".into(), step_fits[2]);
    scan(
        &format!("cent[p={p},gamma={},eps={eps}]", gamma.get()),
        validate_samples,
        tol,
        eval,
        describe,
        constants,
    )
}

/// The informative eps = 0 variant with p = 32, where the leading
/// coefficient `32 - p` vanishes.
fn cent_eps0_combo(
    cfg: &VerifyConfig,
    gamma: Gamma,
    fit_samples: u64,
    validate_samples: u64,
) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(FIT_REL_TOL);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let p = 32.0;
    let g = gamma.get();
    let bound = move |q: &Quadruple| -> LinearBound {
        let c_pg = CostParams { p: p + g, eps: 0.0 };
        let c_p = CostParams { p, eps: 0.0 };
        let star_pg = 1.0
            + pow_norm(q.v_star.norm(), p + g)
            + pow_norm(q.v_tilde_star.norm(), p + g);
        let main_pg =
            1.0 + pow_norm(q.v.norm(), p + g) + pow_norm(q.v_tilde.norm(), p + g);
        let (lhs, lhs_scale) = a_apply_with_magnitude(&CostFunction { params: c_p }, q, gamma);
        LinearBound {
            lhs,
            lhs_scale,
            base: (32.0 - p) * cost(q.v, q.v_tilde, c_pg),
            weight: star_pg * cost(q.v, q.v_tilde, c_p)
                + main_pg * cost(q.v_star, q.v_tilde_star, c_p),
        }
    };
    let mut fit_set: Vec<Quadruple> = (0..fit_samples)
        .into_par_iter()
        .map(|k| sampler.quadruple(seed ^ 0xE3, k))
        .collect();
    fit_set.extend(stress_quadruples());
    let c = fit_with_refinement(&fit_set, bound, seed ^ 0x55);
    let eval = move |k: u64| bound(&sampler.quadruple(seed ^ 0xE4, k)).violation(c);
    let describe = move |k: u64| format!("{:?}", sampler.quadruple(seed ^ 0xE4, k));
    let mut constants = BTreeMap::new();
    constants.insert("c_fit".into(), c);
    let mut report = scan(
        &format!("cent_eps0[p=32,gamma={g}]"),
        validate_samples,
        tol,
        eval,
        describe,
        constants,
    );
    report.advisory = true;
    report
}

/// The g1/g2 chain links from the proof of the k^(1) bound.
pub fn suite_g_chains(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-10);
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xE5, k]);
        let gamma = draw_gamma(&mut rng);
        let q = sampler.quadruple(seed ^ 0xE5, k);
        let (g1, b1) = generators::g1_chain(q.x(), q.x_tilde(), gamma);
        let (g2, b2) = generators::g2_chain(&q, gamma);
        rel_excess(g1, b1).max(rel_excess(g2, b2))
    };
    let describe = move |k: u64| format!("{:?}", sampler.quadruple(seed ^ 0xE5, k));
    scan("g_chains", samples, tol, eval, describe, BTreeMap::new())
}

/// Fitted growth constants for bounded test functions, stable across two
/// disjoint sample sets. Both sets share a deterministic radial grid that
/// pins the far-field part of the ratio, so resampling differences reflect
/// only bulk exploration.
pub fn suite_growth_bound(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let sampler = SamplerConfig { heavy_tail_prob: 0.0, ..cfg.sampler };
    let seed = cfg.seed;
    let grid: Vec<(Vec3, Vec3)> = {
        let dirs = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 1.0).scale(1.0 / 3.0f64.sqrt()),
            Vec3::new(1.0, -2.0, 0.5).scale(1.0 / 5.25f64.sqrt()),
        ];
        // Bulk anchor points where the test functions' derivatives peak; the
        // far partner then drives the |x|^(2+gamma) factor.
        let anchors = [
            Vec3::ZERO,
            Vec3::new(0.7, 0.0, 0.0),
            Vec3::new(0.0, 1.2, 0.0),
            Vec3::new(0.9, -0.9, 0.45),
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(-0.4, 0.0, 3.8),
        ];
        let mut g = Vec::new();
        for k in 0..60 {
            let r = 1.2f64.powi(k);
            for d in dirs {
                let far = d.scale(r);
                g.push((far, Vec3::ZERO));
                g.push((far, d.scale(-r)));
                g.push((far, d.scale(0.5 * r)));
                for v in anchors {
                    g.push((v, far));
                }
            }
        }
        g
    };
    let draw = |stream: u64| -> Vec<(Vec3, Vec3)> {
        let mut pairs: Vec<(Vec3, Vec3)> =
            (0..samples).into_par_iter().map(|k| sampler.pair(stream, k)).collect();
        pairs.extend_from_slice(&grid);
        pairs
    };
    let first = draw(seed ^ 0xF1);
    let second = draw(seed ^ 0xF2);
    let gamma = Gamma::new(*cfg.gamma_values.last().unwrap()).unwrap();
    let functions: Vec<(&str, Box<dyn TestFunction>)> = vec![
        ("sin", Box::new(SinWave { k: Vec3::new(1.0, -2.0, 0.5) })),
        ("gauss", Box::new(GaussBump)),
        ("inverse_quad", Box::new(InverseQuad)),
    ];
    let mut constants = BTreeMap::new();
    let mut violations = 0;
    let mut max_violation = 0.0f64;
    for (name, phi) in &functions {
        let c1 = generators::fit_growth_constant(phi.as_ref(), &first, gamma);
        let c2 = generators::fit_growth_constant(phi.as_ref(), &second, gamma);
        constants.insert(format!("c_phi[{name}]"), c1);
        let drift = (c1 - c2).abs() / c1.max(c2).max(1e-300);
        max_violation = max_violation.max((drift - 0.15).max(0.0));
        if drift > 0.15 {
            violations += 1;
        }
    }
    SuiteReport {
        name: "growth_bound".into(),
        samples: samples * 2 * functions.len() as u64,
        violations,
        max_violation,
        tolerance: cfg.tolerance_override.unwrap_or(0.15),
        constants,
        worst_sample: None,
        advisory: false,
    }
}

/// Large-velocity negativity of the generator for p > 2.
pub fn suite_povzner(cfg: &VerifyConfig, configs: u64) -> SuiteReport {
    let sampler = cfg.sampler;
    let seed = cfg.seed;
    let p = *cfg.p_values.last().unwrap();
    let eps = cfg.eps_values[cfg.eps_values.len() / 2];
    let gamma = Gamma::new(*cfg.gamma_values.last().unwrap()).unwrap();
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xF3, k]);
        let base = sampler.quadruple(seed ^ 0xF3, k);
        let dir = rng.unit_vec3();
        match generators::povzner_threshold(p, eps, &base, dir, gamma) {
            Some(_) => 0.0,
            None => 1.0,
        }
    };
    let describe = move |k: u64| format!("{:?}", sampler.quadruple(seed ^ 0xF3, k));
    scan(
        "povzner_sign",
        configs,
        cfg.tolerance_override.unwrap_or(0.0).max(0.0),
        eval,
        describe,
        BTreeMap::new(),
    )
}

/// Moment interpolation on random unit-energy ensembles.
pub fn suite_moment_interpolation(cfg: &VerifyConfig, samples: u64) -> SuiteReport {
    let tol = cfg.tolerance_override.unwrap_or(1e-12);
    let seed = cfg.seed;
    let eval = move |k: u64| -> f64 {
        let mut rng = CounterRng::new(&[seed, 0xF4, k]);
        let n = 2 + rng.below(50);
        let mut points: Vec<Vec3> =
            (0..n).map(|_| rng.normal_vec3().scale(rng.uniform_in(0.1, 5.0))).collect();
        normalize_to_unit_energy(&mut points);
        let f = DiscreteMeasure::uniform(points).unwrap();
        let alpha = rng.uniform_in(2.0, 6.0);
        let beta = alpha + rng.uniform_in(0.1, 3.0);
        let ma = crate::moments::empirical_moment(&f, alpha);
        let mb = crate::moments::empirical_moment(&f, beta);
        rel_excess(ma, mb.powf((alpha - 2.0) / (beta - 2.0)))
    };
    let describe = move |k: u64| format!("ensemble index {k}");
    scan("moment_interpolation", samples, tol, eval, describe, BTreeMap::new())
}

/// Run every suite at the configured sample factor.
pub fn run_all(cfg: &VerifyConfig) -> VerifyReport {
    let start = std::time::Instant::now();
    let scale = |base: u64| ((base as f64 * cfg.sample_factor).ceil() as u64).max(8);
    let mut suites = vec![
        suite_kernel_identities(cfg, scale(1_000_000)),
        suite_kernel_inequalities(cfg, scale(1_000_000)),
        suite_phi_properties(cfg, scale(1_000_000)),
        suite_cost_sandwich(cfg, scale(100_000)),
        suite_wp_domination(cfg, scale(100_000)),
        suite_rti_pointwise(cfg, scale(20_000)),
        suite_rti_measure(cfg, scale(200)),
        suite_conservation(cfg, scale(1_000_000)),
        suite_ito_remainder(cfg, scale(100_000)),
        suite_ito_fd_consistency(cfg, scale(10_000)),
        suite_g_chains(cfg, scale(100_000)),
        // The resampling-stability comparison of empirical maxima is
        // meaningless below a few thousand draws.
        suite_growth_bound(cfg, scale(20_000).max(4_000)),
        suite_povzner(cfg, scale(500)),
        suite_moment_interpolation(cfg, scale(10_000)),
    ];
    suites.extend(suite_cent(cfg, scale(100_000), scale(1_000_000)));
    let violations_total = suites.iter().filter(|s| !s.advisory).map(|s| s.violations).sum();
    VerifyReport {
        schema_version: 1,
        seed: cfg.seed,
        suites,
        violations_total,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> VerifyConfig {
        VerifyConfig { sample_factor: 0.002, ..VerifyConfig::default() }
    }

    #[test]
    fn quick_run_has_zero_violations() {
        let report = run_all(&quick_config());
        for suite in &report.suites {
            assert_eq!(
                suite.violations, 0,
                "suite {} max violation {} (worst: {:?})",
                suite.name, suite.max_violation, suite.worst_sample
            );
        }
        assert!(report.passed());
    }

    #[test]
    fn sabotaged_tolerance_forces_violations_with_sample_dump() {
        let cfg = VerifyConfig {
            sample_factor: 0.0002,
            tolerance_override: Some(0.0),
            ..VerifyConfig::default()
        };
        let report = run_all(&cfg);
        assert!(!report.passed());
        let offending = report
            .suites
            .iter()
            .find(|s| s.violations > 0 && s.worst_sample.is_some());
        assert!(offending.is_some(), "violating suite must serialize its worst sample");
    }

    #[test]
    fn tally_merge_prefers_larger_then_earlier() {
        let a = Tally { violations: 1, max_violation: 0.5, worst_index: Some(10) };
        let b = Tally { violations: 2, max_violation: 0.5, worst_index: Some(3) };
        let m = a.merge(b);
        assert_eq!(m.violations, 3);
        assert_eq!(m.worst_index, Some(3));
        let c = Tally { violations: 0, max_violation: 0.9, worst_index: Some(99) };
        assert_eq!(a.merge(c).worst_index, Some(99));
    }
}
