//! Mixture samplers for the inequality suites.
//!
//! Constant fits fail at extremes, so quadruples are drawn from a mixture of
//! standard normal coordinates, heavy-tail radii (Pareto index 2.6) and
//! near-coincident pairs stressing the phi' / phi'' branches, plus a small
//! deterministic stress set of coincident, collinear and far-field
//! configurations.

use crate::generators::Quadruple;
use crate::linalg::Vec3;
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};

/// Mixture weights and scales of the quadruple sampler.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability of a heavy-tail radius instead of a plain normal draw.
    pub heavy_tail_prob: f64,
    /// Pareto tail index of the heavy component.
    pub tail_index: f64,
    /// Probability that the tilde points sit 1e-6 from their partners.
    pub coincident_prob: f64,
    /// Base scale multiplying every draw.
    pub scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { heavy_tail_prob: 0.25, tail_index: 2.6, coincident_prob: 0.2, scale: 1.0 }
    }
}

impl SamplerConfig {
    fn point(&self, rng: &mut CounterRng) -> Vec3 {
        if rng.uniform() < self.heavy_tail_prob {
            let radius = rng.uniform().powf(-1.0 / self.tail_index);
            rng.unit_vec3().scale(self.scale * radius)
        } else {
            rng.normal_vec3().scale(self.scale)
        }
    }

    /// The `k`-th quadruple of the stream identified by `seed`.
    pub fn quadruple(&self, seed: u64, k: u64) -> Quadruple {
        let mut rng = CounterRng::new(&[seed, 0x9_44, k]);
        let v = self.point(&mut rng);
        let v_star = self.point(&mut rng);
        if rng.uniform() < self.coincident_prob {
            Quadruple {
                v,
                v_star,
                v_tilde: v + rng.unit_vec3().scale(1e-6),
                v_tilde_star: v_star + rng.unit_vec3().scale(1e-6),
            }
        } else {
            Quadruple { v, v_star, v_tilde: self.point(&mut rng), v_tilde_star: self.point(&mut rng) }
        }
    }

    /// The `k`-th velocity pair of the stream identified by `seed`.
    pub fn pair(&self, seed: u64, k: u64) -> (Vec3, Vec3) {
        let mut rng = CounterRng::new(&[seed, 0x9_55, k]);
        (self.point(&mut rng), self.point(&mut rng))
    }
}

/// Deterministic extreme configurations folded into every fit so calibrated
/// constants already cover the tails that random validation rarely reaches.
pub fn stress_quadruples() -> Vec<Quadruple> {
    let e1 = Vec3::new(1.0, 0.0, 0.0);
    let e2 = Vec3::new(0.0, 1.0, 0.0);
    let diag = Vec3::new(1.0, 1.0, 1.0).scale(1.0 / 3.0f64.sqrt());
    let mut out = Vec::new();
    for &r in &[1e-3, 1.0, 10.0, 1e2, 1e3] {
        // One far point against bounded partners.
        out.push(Quadruple {
            v: e1.scale(r),
            v_star: e2.scale(0.5),
            v_tilde: e1.scale(0.5),
            v_tilde_star: Vec3::ZERO,
        });
        // Far star points.
        out.push(Quadruple {
            v: e1,
            v_star: e2.scale(r),
            v_tilde: e1.scale(0.9),
            v_tilde_star: e2.scale(r).scale(1.01),
        });
        // Two far pairs nearly coupled.
        out.push(Quadruple {
            v: diag.scale(r),
            v_star: e2,
            v_tilde: diag.scale(r) + e1.scale(1e-6),
            v_tilde_star: e2 + e2.scale(1e-6),
        });
        // Antipodal far points.
        out.push(Quadruple {
            v: e1.scale(r),
            v_star: Vec3::ZERO,
            v_tilde: e1.scale(-r),
            v_tilde_star: Vec3::ZERO,
        });
        // Collinear ray with the tilde pair shifted along it.
        out.push(Quadruple {
            v: e1.scale(r),
            v_star: e1.scale(0.5 * r),
            v_tilde: e1.scale(2.0 * r),
            v_tilde_star: e1.scale(r),
        });
    }
    // Fully coincident.
    out.push(Quadruple { v: e1, v_star: e2, v_tilde: e1, v_tilde_star: e2 });
    out.push(Quadruple {
        v: Vec3::ZERO,
        v_star: Vec3::ZERO,
        v_tilde: Vec3::ZERO,
        v_tilde_star: Vec3::ZERO,
    });
    out
}
