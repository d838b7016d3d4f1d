//! Weighted transport costs between discrete measures.
//!
//! The cost family is `c_{p,eps}(v, vt) = (1 + |v|^p + |vt|^p) *
//! phi_eps(|v - vt|^2)` with `phi_eps(r) = r / (1 + eps r)`, and the
//! transport cost is the exact minimum of the coupled integral over all
//! couplings with the prescribed marginals. Equal-size uniform inputs go
//! through a shortest-augmenting-path assignment solver; general weights go
//! through successive-shortest-path min-cost flow on integer-scaled weights.

use crate::kernel::pow_norm;
use crate::linalg::Vec3;
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weight scale for the min-cost-flow formulation.
const FLOW_SCALE: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("negative argument r = {0} to phi_eps")]
    NegativeRadius(f64),
    #[error("cost parameters out of range: p = {p}, eps = {eps} (need p >= 2, 0 <= eps <= 1)")]
    BadParams { p: f64, eps: f64 },
    #[error("invalid discrete measure: {0}")]
    BadMeasure(String),
    #[error("marginal masses differ: {0} vs {1}")]
    MismatchedMass(f64, f64),
    #[error("brute force supports n <= 8, got {0}")]
    TooLargeForBruteForce(usize),
    #[error("brute force requires equal-size uniform measures")]
    NotUniform,
    #[error("problem size {0} exceeds solver cap {1}")]
    SolverCap(usize, usize),
    #[error("computed cost is not finite (eps = 0 requires finite p+2 moments)")]
    NonFiniteCost,
}

/// The `(p, eps)` pair of the cost family. `eps = 0` is allowed, in which
/// case finiteness of the computed sums is the caller's responsibility and
/// only checked a posteriori.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub p: f64,
    pub eps: f64,
}

impl CostParams {
    pub fn new(p: f64, eps: f64) -> Result<Self, TransportError> {
        if p.is_finite() && p >= 2.0 && eps.is_finite() && (0.0..=1.0).contains(&eps) {
            Ok(CostParams { p, eps })
        } else {
            Err(TransportError::BadParams { p, eps })
        }
    }
}

/// `phi_eps(r) = r / (1 + eps r)`; rejects negative `r`.
pub fn phi_eps(r: f64, eps: f64) -> Result<f64, TransportError> {
    if r < 0.0 {
        return Err(TransportError::NegativeRadius(r));
    }
    Ok(phi_eps_raw(r, eps))
}

#[inline]
pub(crate) fn phi_eps_raw(r: f64, eps: f64) -> f64 {
    r / (1.0 + eps * r)
}

/// `phi_eps'(r) = (1 + eps r)^-2`.
#[inline]
pub fn phi_eps_prime(r: f64, eps: f64) -> f64 {
    let d = 1.0 + eps * r;
    1.0 / (d * d)
}

/// `phi_eps''(r) = -2 eps (1 + eps r)^-3`.
#[inline]
pub fn phi_eps_second(r: f64, eps: f64) -> f64 {
    let d = 1.0 + eps * r;
    -2.0 * eps / (d * d * d)
}

/// `c_{p,eps}(v, vt)`; zero exactly when `v = vt`, and bitwise symmetric
/// because the moment weights are summed in norm order.
pub fn cost(v: Vec3, vt: Vec3, params: CostParams) -> f64 {
    let a = pow_norm(v.norm(), params.p);
    let b = pow_norm(vt.norm(), params.p);
    let weight = 1.0 + a.min(b) + a.max(b);
    weight * phi_eps_raw((v - vt).norm_squared(), params.eps)
}

/// N points with nonnegative weights summing to one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    points: Vec<Vec3>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec3>, weights: Vec<f64>) -> Result<Self, TransportError> {
        if points.len() != weights.len() {
            return Err(TransportError::BadMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.is_empty() {
            return Err(TransportError::BadMeasure("empty measure".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(TransportError::BadMeasure("non-finite point".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TransportError::BadMeasure("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TransportError::BadMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(DiscreteMeasure { points, weights })
    }

    /// Equal weights `1/n` on the given points.
    pub fn uniform(points: Vec<Vec3>) -> Result<Self, TransportError> {
        let n = points.len();
        if n == 0 {
            return Err(TransportError::BadMeasure("empty measure".into()));
        }
        let w = 1.0 / n as f64;
        // Pad the last weight so the sum is exactly representable as 1.
        let mut weights = vec![w; n];
        let partial: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - partial;
        DiscreteMeasure::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&wi| (wi - w).abs() <= 1e-12)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// An optimal coupling as sparse `(i, j, mass)` entries plus the value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportPlan {
    pub value: f64,
    pub coupling: Vec<(usize, usize, f64)>,
    /// Largest per-weight error introduced by the integer scaling of the
    /// flow formulation; zero on the assignment path.
    pub weight_rounding_error: f64,
}

impl TransportPlan {
    /// Marginals of the coupling, for invariant checks.
    pub fn marginals(&self, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; m];
        for &(i, j, w) in &self.coupling {
            left[i] += w;
            right[j] += w;
        }
        (left, right)
    }
}

/// Exact optimal transport cost between discrete measures with cost
/// `c_{p,eps}`, plus an optimal coupling.
pub fn optimal_cost(
    f: &DiscreteMeasure,
    g: &DiscreteMeasure,
    params: CostParams,
) -> Result<TransportPlan, TransportError> {
    optimal_cost_with(f, g, |v, vt| cost(v, vt, params))
}

/// Exact discrete Wasserstein distance of order `p >= 1` (the p-th root of
/// the optimal cost for `|v - vt|^p`).
pub fn wasserstein_p(f: &DiscreteMeasure, g: &DiscreteMeasure, p: f64) -> Result<f64, TransportError> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(TransportError::BadParams { p, eps: f64::NAN });
    }
    let plan = optimal_cost_with(f, g, |v, vt| pow_norm((v - vt).norm(), p))?;
    Ok(plan.value.powf(1.0 / p))
}

/// Shared solver dispatch over an arbitrary pairwise cost.
pub fn optimal_cost_with(
    f: &DiscreteMeasure,
    g: &DiscreteMeasure,
    pair_cost: impl Fn(Vec3, Vec3) -> f64,
) -> Result<TransportPlan, TransportError> {
    let mass_f = f.total_mass();
    let mass_g = g.total_mass();
    if (mass_f - mass_g).abs() > 1e-12 {
        return Err(TransportError::MismatchedMass(mass_f, mass_g));
    }
    let n = f.len();
    let m = g.len();
    let mut matrix = Vec::with_capacity(n * m);
    for &v in f.points() {
        for &vt in g.points() {
            matrix.push(pair_cost(v, vt));
        }
    }
    if matrix.iter().any(|c| !c.is_finite()) {
        return Err(TransportError::NonFiniteCost);
    }

    let plan = if n == m && f.is_uniform() && g.is_uniform() {
        let mut assign = assignment(n, &matrix);
        canonicalize_ties(n, &matrix, &mut assign);
        let w = 1.0 / n as f64;
        let value_terms: Vec<f64> = (0..n).map(|i| matrix[i * n + assign[i]]).collect();
        let value = w * crate::linalg::tree_sum(&value_terms);
        TransportPlan {
            value,
            coupling: assign.iter().enumerate().map(|(i, &j)| (i, j, w)).collect(),
            weight_rounding_error: 0.0,
        }
    } else {
        let (supplies, err_f) = scale_weights(f.weights());
        let (demands, err_g) = scale_weights(g.weights());
        let flows = min_cost_flow(n, m, &matrix, &supplies, &demands);
        let mut coupling = Vec::with_capacity(flows.len());
        let mut value_terms = Vec::with_capacity(flows.len());
        for (i, j, units) in flows {
            let w = units as f64 / FLOW_SCALE;
            coupling.push((i, j, w));
            value_terms.push(w * matrix[i * m + j]);
        }
        coupling.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        TransportPlan {
            value: crate::linalg::tree_sum(&value_terms),
            coupling,
            weight_rounding_error: err_f.max(err_g),
        }
    };
    if !plan.value.is_finite() {
        return Err(TransportError::NonFiniteCost);
    }
    Ok(plan)
}

/// Exact minimum over all `n!` pairings of equal-size uniform measures;
/// the oracle for `optimal_cost`. Returns the lexicographically smallest
/// minimizing permutation.
pub fn brute_force_cost(
    f: &DiscreteMeasure,
    g: &DiscreteMeasure,
    params: CostParams,
) -> Result<(f64, Vec<usize>), TransportError> {
    if f.len() != g.len() || !f.is_uniform() || !g.is_uniform() {
        return Err(TransportError::NotUniform);
    }
    let n = f.len();
    if n > 8 {
        return Err(TransportError::TooLargeForBruteForce(n));
    }
    let matrix: Vec<f64> = f
        .points()
        .iter()
        .flat_map(|&v| g.points().iter().map(move |&vt| cost(v, vt, params)))
        .collect();
    let w = 1.0 / n as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_value = f64::INFINITY;
    let mut best_perm = perm.clone();
    permute(&mut perm, 0, &mut |p| {
        let terms: Vec<f64> = (0..n).map(|i| matrix[i * n + p[i]]).collect();
        let value = w * crate::linalg::tree_sum(&terms);
        if value < best_value || (value == best_value && p < &best_perm[..]) {
            best_value = value;
            best_perm = p.to_vec();
        }
    });
    Ok((best_value, best_perm))
}

fn permute(perm: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    // Swap-based enumeration; restore order so ties resolve lexicographically.
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Empirical lower bound on the relaxed-triangle-inequality constant of
/// `c_{p,eps}`: the max of `c(v,y) / (c(v,w) + c(w,y))` over sampled triples
/// plus deterministic stress families (collinear rays and far midpoints).
pub fn rti_constant_estimate(params: CostParams, samples: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut consider = |v: Vec3, w: Vec3, y: Vec3| {
        let denom = cost(v, w, params) + cost(w, y, params);
        if denom > 0.0 {
            let ratio = cost(v, y, params) / denom;
            if ratio.is_finite() && ratio > worst {
                worst = ratio;
            }
        }
    };
    let mut rng = CounterRng::new(&[seed, 0x7274_69]);
    for _ in 0..samples {
        let scale = (-3.0 + 6.0 * rng.uniform()).exp2();
        let v = rng.normal_vec3().scale(scale);
        let w = rng.normal_vec3().scale(scale);
        let y = rng.normal_vec3().scale(scale);
        consider(v, w, y);
        // Collinear variant with w between v and y.
        let dir = rng.unit_vec3();
        let t = rng.uniform();
        let a = rng.uniform_in(0.0, 10.0 * scale);
        let b = rng.uniform_in(0.0, 10.0 * scale);
        consider(dir.scale(-a), dir.scale(-a + t * (a + b)), dir.scale(b));
    }
    // Deterministic stress rays.
    for k in 0..220 {
        let d = 1.1f64.powi(k);
        let e = Vec3::new(1.0, 0.0, 0.0);
        consider(Vec3::ZERO, e.scale(d), e.scale(2.0 * d));
        consider(e.scale(-d), Vec3::ZERO, e.scale(d));
    }
    worst
}

fn scale_weights(weights: &[f64]) -> (Vec<u64>, f64) {
    let mut scaled: Vec<u64> = weights.iter().map(|w| (w * FLOW_SCALE).round() as u64).collect();
    let target = FLOW_SCALE as i64;
    let mut deficit = target - scaled.iter().map(|&s| s as i64).sum::<i64>();
    // Distribute the rounding deficit over the largest weights, one unit each.
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    let mut k = 0;
    while deficit != 0 {
        let idx = order[k % order.len()];
        if deficit > 0 {
            scaled[idx] += 1;
            deficit -= 1;
        } else if scaled[idx] > 0 {
            scaled[idx] -= 1;
            deficit += 1;
        }
        k += 1;
    }
    let err = weights
        .iter()
        .zip(&scaled)
        .map(|(w, &s)| (w - s as f64 / FLOW_SCALE).abs())
        .fold(0.0, f64::max);
    (scaled, err)
}

/// Square linear assignment by shortest augmenting paths with dual
/// potentials (the scipy `linear_sum_assignment` algorithm). Returns the
/// column assigned to each row.
fn assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut col4row = vec![UNSET; n];
    let mut row4col = vec![UNSET; n];
    let mut path = vec![UNSET; n];
    let mut shortest = vec![0.0f64; n];

    for cur_row in 0..n {
        for s in shortest.iter_mut() {
            *s = f64::INFINITY;
        }
        let mut remaining: Vec<usize> = (0..n).rev().collect();
        let mut scanned_rows = Vec::with_capacity(n);
        let mut scanned_cols = Vec::with_capacity(n);
        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut sink = UNSET;
        while sink == UNSET {
            scanned_rows.push(i);
            let mut lowest = f64::INFINITY;
            let mut index = UNSET;
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + cost[i * n + j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == UNSET) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            debug_assert!(min_val.is_finite(), "infeasible assignment step");
            let j = remaining[index];
            if row4col[j] == UNSET {
                sink = j;
            } else {
                i = row4col[j];
            }
            scanned_cols.push(j);
            remaining.swap_remove(index);
        }

        u[cur_row] += min_val;
        for &r in &scanned_rows {
            if r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for &j in &scanned_cols {
            v[j] -= min_val - shortest[j];
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}

/// Among exactly equal-cost couplings, prefer the lexicographically smaller
/// assignment; pair swaps whose exact summed cost is unchanged cannot alter
/// the optimum.
fn canonicalize_ties(n: usize, cost: &[f64], assign: &mut [usize]) {
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if assign[i] > assign[j] {
                    let old = cost[i * n + assign[i]] + cost[j * n + assign[j]];
                    let new = cost[i * n + assign[j]] + cost[j * n + assign[i]];
                    if new == old {
                        assign.swap(i, j);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return;
        }
    }
}

/// Min-cost flow on the complete bipartite graph by successive shortest
/// paths with Johnson potentials. Supplies and demands are integer units
/// with equal totals; costs are nonnegative.
fn min_cost_flow(
    n: usize,
    m: usize,
    cost: &[f64],
    supplies: &[u64],
    demands: &[u64],
) -> Vec<(usize, usize, u64)> {
    let mut supply: Vec<u64> = supplies.to_vec();
    let mut demand: Vec<u64> = demands.to_vec();
    let mut flow: Vec<u64> = vec![0; n * m];
    let mut pi_left = vec![0.0f64; n];
    let mut pi_right = vec![0.0f64; m];
    let mut remaining: u64 = supply.iter().sum();

    // Dijkstra scratch over n + m nodes (left block first).
    let total = n + m;
    let mut dist = vec![f64::INFINITY; total];
    let mut prev = vec![usize::MAX; total];
    let mut done = vec![false; total];

    let max_rounds = 50 * (n + m) + 32;
    let mut rounds = 0;
    while remaining > 0 {
        rounds += 1;
        assert!(rounds <= max_rounds, "min-cost flow failed to converge");
        for k in 0..total {
            dist[k] = f64::INFINITY;
            prev[k] = usize::MAX;
            done[k] = false;
        }
        let mut heap = std::collections::BinaryHeap::new();
        for (i, &s) in supply.iter().enumerate() {
            if s > 0 {
                dist[i] = 0.0;
                heap.push(HeapEntry { dist: 0.0, node: i });
            }
        }
        let mut sink = usize::MAX;
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if done[node] || d > dist[node] {
                continue;
            }
            done[node] = true;
            if node >= n && demand[node - n] > 0 {
                sink = node;
                break;
            }
            if node < n {
                let i = node;
                for j in 0..m {
                    let rc = cost[i * m + j] + pi_left[i] - pi_right[j];
                    let nd = d + rc;
                    if nd < dist[n + j] {
                        dist[n + j] = nd;
                        prev[n + j] = i;
                        heap.push(HeapEntry { dist: nd, node: n + j });
                    }
                }
            } else {
                let j = node - n;
                for i in 0..n {
                    if flow[i * m + j] > 0 {
                        let rc = -cost[i * m + j] - pi_left[i] + pi_right[j];
                        let nd = d + rc.max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = n + j;
                            heap.push(HeapEntry { dist: nd, node: i });
                        }
                    }
                }
            }
        }
        assert!(sink != usize::MAX, "min-cost flow: no augmenting path");

        // Bottleneck along the path.
        let mut bottleneck = demand[sink - n];
        let mut node = sink;
        while prev[node] != usize::MAX {
            let p = prev[node];
            if node < n {
                // Backward arc p (right) -> node (left) uses existing flow.
                bottleneck = bottleneck.min(flow[node * m + (p - n)]);
            }
            node = p;
        }
        bottleneck = bottleneck.min(supply[node]);
        debug_assert!(bottleneck > 0);

        // Apply the augmentation.
        let source = node;
        let mut node = sink;
        while prev[node] != usize::MAX {
            let p = prev[node];
            if node >= n {
                flow[p * m + (node - n)] += bottleneck;
            } else {
                flow[node * m + (p - n)] -= bottleneck;
            }
            node = p;
        }
        supply[source] -= bottleneck;
        demand[sink - n] -= bottleneck;
        remaining -= bottleneck;

        // Update potentials for reached nodes.
        let d_sink = dist[sink];
        for i in 0..n {
            if dist[i] < f64::INFINITY {
                pi_left[i] += dist[i].min(d_sink);
            } else {
                pi_left[i] += d_sink;
            }
        }
        for j in 0..m {
            if dist[n + j] < f64::INFINITY {
                pi_right[j] += dist[n + j].min(d_sink);
            } else {
                pi_right[j] += d_sink;
            }
        }
    }

    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if flow[i * m + j] > 0 {
                out.push((i, j, flow[i * m + j]));
            }
        }
    }
    out
}

struct HeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by distance; break ties by node for determinism.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}
