//! Centralized reference policies: equal-split naive allocation, an
//! alternating projected-gradient solver with exhaustive ordering search,
//! and a brute-force grid oracle for small instances.
//!
//! The projected-gradient solver works in normalized coordinates
//! `x = tau / (T - eps_tau)` and `q = p (T - tau) / E(tau)`, both in
//! `[0, 1]`, so the energy budget holds by construction and projections
//! reduce to a box clamp plus isotonic ordering on `x`.

use std::time::Instant;

use crate::agent::ActionSpaces;
use crate::channel::LinkGains;
use crate::env::Scenario;
use crate::error::{Error, Result};

/// Solution found by a centralized policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    /// Sum objective `(1/T) sum_i R_i` in nats per second, recomputed by
    /// a full environment step on the reported allocation.
    pub objective: f64,
    pub tau: Vec<f64>,
    pub p: Vec<f64>,
    /// Cell ordering by ascending `tau`.
    pub ordering: Vec<usize>,
    pub iterations: usize,
    pub wall_time: f64,
}

fn finish_report(
    scenario: &Scenario,
    gains: &LinkGains,
    tau: Vec<f64>,
    p: Vec<f64>,
    iterations: usize,
    started: Instant,
) -> Result<SolverReport> {
    let actions: Vec<(f64, f64)> = tau.iter().cloned().zip(p.iter().cloned()).collect();
    let outcome = scenario.step(gains, &actions)?;
    let mut ordering: Vec<usize> = (0..tau.len()).collect();
    ordering.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]));
    Ok(SolverReport {
        objective: outcome.sum_rate(scenario.slot_len),
        tau,
        p,
        ordering,
        iterations,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Equal-split policy: every H-AP charges for half the slot and every
/// user spends its whole harvest.
pub fn naive_policy(scenario: &Scenario, gains: &LinkGains) -> Result<SolverReport> {
    let started = Instant::now();
    let n = gains.n_cells();
    let tau = vec![scenario.slot_len / 2.0; n];
    let sched = scenario.schedule(&tau)?;
    let energies = scenario.harvested(&sched, gains);
    let p: Vec<f64> = energies
        .iter()
        .zip(&tau)
        .map(|(e, t)| e / (scenario.slot_len - t))
        .collect();
    finish_report(scenario, gains, tau, p, 0, started)
}

// Recursive permutation enumeration; instance sizes are capped at 7.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        let n = used.len();
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for k in 0..n {
            if !used[k] {
                used[k] = true;
                prefix.push(k);
                go(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

// Pool-adjacent-violators: least-squares nondecreasing fit.
fn isotonic_increasing(y: &[f64]) -> Vec<f64> {
    let mut means: Vec<f64> = Vec::with_capacity(y.len());
    let mut counts: Vec<usize> = Vec::with_capacity(y.len());
    for &v in y {
        means.push(v);
        counts.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m2, c2) = (means.pop().unwrap(), counts.pop().unwrap());
            let last = means.len() - 1;
            let merged = (means[last] * counts[last] as f64 + m2 * c2 as f64)
                / (counts[last] + c2) as f64;
            means[last] = merged;
            counts[last] += c2;
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (m, c) in means.iter().zip(&counts) {
        out.extend(std::iter::repeat(*m).take(*c));
    }
    out
}

const FD_STEP: f64 = 1e-6;
const MAX_OUTER: usize = 100;
const MAX_INNER: usize = 40;
const MAX_HALVINGS: usize = 30;
const INITIAL_STEP: f64 = 0.5;

struct OrderingSolver<'a> {
    scenario: &'a Scenario,
    gains: &'a LinkGains,
    mu: &'a [usize],
    n: usize,
}

impl<'a> OrderingSolver<'a> {
    /// Objective at normalized coordinates. `x` is clamped and ordered
    /// feasibly by the projections; FD probes may step slightly outside
    /// the box, so clamp defensively here as well.
    fn eval(&self, x: &[f64], q: &[f64]) -> f64 {
        let tau_max = self.scenario.slot_len - self.scenario.eps_tau;
        let tau: Vec<f64> = x.iter().map(|&v| v.clamp(0.0, 1.0) * tau_max).collect();
        let sched = match self.scenario.schedule(&tau) {
            Ok(s) => s,
            Err(_) => return f64::NEG_INFINITY,
        };
        let energies = self.scenario.harvested(&sched, self.gains);
        let p: Vec<f64> = (0..self.n)
            .map(|i| q[i].clamp(0.0, 1.0) * energies[i] / (self.scenario.slot_len - tau[i]))
            .collect();
        self.scenario
            .objective(self.gains, &tau, &p)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn project_x(&self, x: &[f64]) -> Vec<f64> {
        // Isotonic fit along the candidate ordering, then box clamp;
        // clamping preserves monotonicity.
        let seq: Vec<f64> = self.mu.iter().map(|&k| x[k]).collect();
        let fitted = isotonic_increasing(&seq);
        let mut out = vec![0.0; self.n];
        for (pos, &k) in self.mu.iter().enumerate() {
            out[k] = fitted[pos].clamp(0.0, 1.0);
        }
        out
    }

    fn project_q(&self, q: &[f64]) -> Vec<f64> {
        q.iter().map(|&v| v.clamp(0.0, 1.0)).collect()
    }

    /// Projected-gradient ascent over one variable block with a halving
    /// line search; the objective never decreases.
    fn ascend_block(&self, x: &mut Vec<f64>, q: &mut Vec<f64>, over_x: bool, f: &mut f64) {
        for _ in 0..MAX_INNER {
            let grad: Vec<f64> = (0..self.n)
                .map(|k| {
                    let probe = |delta: f64| {
                        let mut xs = x.clone();
                        let mut qs = q.clone();
                        if over_x {
                            xs[k] += delta;
                        } else {
                            qs[k] += delta;
                        }
                        self.eval(&xs, &qs)
                    };
                    (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP)
                })
                .collect();
            let mut step = INITIAL_STEP;
            let mut improved = false;
            for _ in 0..MAX_HALVINGS {
                let (cand_x, cand_q) = if over_x {
                    let moved: Vec<f64> =
                        x.iter().zip(&grad).map(|(v, g)| v + step * g).collect();
                    (self.project_x(&moved), q.clone())
                } else {
                    let moved: Vec<f64> =
                        q.iter().zip(&grad).map(|(v, g)| v + step * g).collect();
                    (x.clone(), self.project_q(&moved))
                };
                let cand_f = self.eval(&cand_x, &cand_q);
                if cand_f > *f {
                    *x = cand_x;
                    *q = cand_q;
                    *f = cand_f;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                return;
            }
        }
    }

    fn solve(&self, precision: f64) -> (Vec<f64>, Vec<f64>, f64, usize) {
        let mut x = self.project_x(&vec![0.5 / (1.0 - self.scenario.eps_tau / self.scenario.slot_len); self.n]);
        let mut q = vec![0.5; self.n];
        let mut f = self.eval(&x, &q);
        let mut iterations = 0;
        for _ in 0..MAX_OUTER {
            let f_before = f;
            self.ascend_block(&mut x, &mut q, false, &mut f);
            self.ascend_block(&mut x, &mut q, true, &mut f);
            iterations += 1;
            if f - f_before <= precision * f_before.abs().max(1e-12) {
                break;
            }
        }
        (x, q, f, iterations)
    }
}

/// Alternating projected-gradient ascent over powers and time splits,
/// repeated for every one of the `N!` cell orderings; returns the best
/// ordering's local optimum. Gradients come from central finite
/// differences on the normalized variables.
pub fn pgd_solve(scenario: &Scenario, gains: &LinkGains, precision: f64) -> Result<SolverReport> {
    let started = Instant::now();
    let n = gains.n_cells();
    if n > 7 {
        return Err(Error::Unsupported(format!(
            "pgd ordering search over {n}! orderings"
        )));
    }
    if !(precision > 0.0) {
        return Err(Error::InvalidArgument(format!("precision = {precision}")));
    }
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut total_iterations = 0;
    for mu in permutations(n) {
        let solver = OrderingSolver {
            scenario,
            gains,
            mu: &mu,
            n,
        };
        let (x, q, f, iters) = solver.solve(precision);
        total_iterations += iters;
        if best.as_ref().map_or(true, |(bf, _, _)| f > *bf) {
            best = Some((f, x, q));
        }
    }
    let (_, x, q) = best.expect("at least one ordering");
    let tau_max = scenario.slot_len - scenario.eps_tau;
    let tau: Vec<f64> = x.iter().map(|&v| v.clamp(0.0, 1.0) * tau_max).collect();
    let sched = scenario.schedule(&tau)?;
    let energies = scenario.harvested(&sched, gains);
    let p: Vec<f64> = (0..n)
        .map(|i| q[i].clamp(0.0, 1.0) * energies[i] / (scenario.slot_len - tau[i]))
        .collect();
    finish_report(scenario, gains, tau, p, total_iterations, started)
}

/// Exact maximizer of the sum objective over the joint discrete action
/// grid the agents use (the power grid is recomputed for every candidate
/// split vector). Exponential in `N`; the budget guard keeps instances
/// at roughly `N * K^(2N) <= 1e7` grid points.
pub fn brute_force_oracle(
    scenario: &Scenario,
    gains: &LinkGains,
    k: usize,
) -> Result<SolverReport> {
    let started = Instant::now();
    let n = gains.n_cells();
    let cost = (n as f64) * (k as f64).powi(2 * n as i32);
    if cost > 1e7 {
        return Err(Error::Unsupported(format!(
            "oracle budget exceeded: N = {n}, K = {k}"
        )));
    }
    let spaces = ActionSpaces::new(k, k, scenario.slot_len, scenario.eps_tau)?;
    let mut tau_idx = vec![0usize; n];
    let mut best_obj = f64::NEG_INFINITY;
    let mut best_tau = vec![0.0; n];
    let mut best_p = vec![0.0; n];
    let mut evaluated = 0usize;
    loop {
        let tau: Vec<f64> = tau_idx.iter().map(|&ki| spaces.tau_value(ki)).collect();
        let sched = scenario.schedule(&tau)?;
        let energies = scenario.harvested(&sched, gains);
        let mut p_idx = vec![0usize; n];
        loop {
            let p: Vec<f64> = (0..n)
                .map(|i| spaces.power_value(p_idx[i], energies[i], tau[i]))
                .collect();
            let obj = scenario.objective(gains, &tau, &p)?;
            evaluated += 1;
            if obj > best_obj {
                best_obj = obj;
                best_tau.clone_from(&tau);
                best_p.clone_from(&p);
            }
            if !advance(&mut p_idx, k) {
                break;
            }
        }
        if !advance(&mut tau_idx, k) {
            break;
        }
    }
    finish_report(scenario, gains, best_tau, best_p, evaluated, started)
}

// Odometer increment over a base-`k` index vector.
fn advance(idx: &mut [usize], k: usize) -> bool {
    for d in idx.iter_mut() {
        *d += 1;
        if *d < k {
            return true;
        }
        *d = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{compose_gains, large_scale_gains, FadingProcess, Geometry};
    use crate::env::EhModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MS: f64 = 1e-3;

    fn scenario() -> Scenario {
        Scenario {
            p_hap: 1.0,
            sigma2: 1e-8,
            beta: 1e-5,
            slot_len: 20.0 * MS,
            eps_tau: 0.2 * MS,
            model: EhModel::Linear { eta: 0.5 },
        }
    }

    fn random_gains(n: usize, seed: u64) -> LinkGains {
        let geom = Geometry::circular(n, 3.0).unwrap();
        let scale = large_scale_gains(&geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fading = FadingProcess::new(n, 0.64, &mut rng).unwrap();
        compose_gains(&scale, &fading)
    }

    fn fixed_single_cell() -> LinkGains {
        LinkGains {
            user_hap: vec![vec![1e-3]],
            hap_hap: vec![vec![0.0]],
        }
    }

    #[test]
    fn naive_single_cell_closed_form() {
        let report = naive_policy(&scenario(), &fixed_single_cell()).unwrap();
        assert!((report.tau[0] - 10.0 * MS).abs() < 1e-15);
        assert!((report.p[0] - 5e-4).abs() < 1e-15);
        let want = 50.0 * 0.01 * 51f64.ln();
        assert!(
            (report.objective - want).abs() < 1e-9,
            "objective {}",
            report.objective
        );
        assert!((report.objective - 1.9659128).abs() < 1e-6);
    }

    #[test]
    fn naive_zero_gains_zero_objective() {
        let gains = LinkGains {
            user_hap: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            hap_hap: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let report = naive_policy(&scenario(), &gains).unwrap();
        assert_eq!(report.objective, 0.0);
    }

    #[test]
    fn naive_is_permutation_equivariant() {
        let gains = random_gains(3, 5);
        let perm = [2usize, 0, 1];
        let mut permuted = gains.clone();
        for i in 0..3 {
            for j in 0..3 {
                permuted.user_hap[i][j] = gains.user_hap[perm[i]][perm[j]];
                permuted.hap_hap[i][j] = gains.hap_hap[perm[i]][perm[j]];
            }
        }
        let base = naive_policy(&scenario(), &gains).unwrap();
        let swapped = naive_policy(&scenario(), &permuted).unwrap();
        for i in 0..3 {
            assert_eq!(swapped.p[i], base.p[perm[i]]);
        }
        assert!((swapped.objective - base.objective).abs() < 1e-15);
    }

    #[test]
    fn pgd_dominates_naive_single_cell() {
        let sc = scenario();
        for seed in 0..100 {
            let gains = random_gains(1, seed);
            let naive = naive_policy(&sc, &gains).unwrap();
            let pgd = pgd_solve(&sc, &gains, 1e-2).unwrap();
            assert!(
                pgd.objective >= naive.objective - 1e-9,
                "seed {seed}: pgd {} < naive {}",
                pgd.objective,
                naive.objective
            );
        }
    }

    #[test]
    fn pgd_separates_on_zero_cross_gains() {
        let sc = scenario();
        let own = [8e-4, 1.3e-3];
        let joint_gains = LinkGains {
            user_hap: vec![vec![own[0], 0.0], vec![0.0, own[1]]],
            hap_hap: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let joint = pgd_solve(&sc, &joint_gains, 1e-5).unwrap();
        let mut separate = 0.0;
        for h in own {
            let gains = LinkGains {
                user_hap: vec![vec![h]],
                hap_hap: vec![vec![0.0]],
            };
            separate += pgd_solve(&sc, &gains, 1e-5).unwrap().objective;
        }
        let rel = (joint.objective - separate).abs() / separate;
        assert!(rel < 1e-3, "joint {} vs separate {separate}", joint.objective);
    }

    #[test]
    fn pgd_report_is_self_consistent() {
        let sc = scenario();
        let gains = random_gains(2, 9);
        let report = pgd_solve(&sc, &gains, 1e-2).unwrap();
        let actions: Vec<(f64, f64)> = report
            .tau
            .iter()
            .cloned()
            .zip(report.p.iter().cloned())
            .collect();
        let outcome = sc.step(&gains, &actions).unwrap();
        assert!((outcome.sum_rate(sc.slot_len) - report.objective).abs() < 1e-9);
        // Budget feasibility of the reported solution.
        for i in 0..2 {
            let spent = (sc.slot_len - report.tau[i]) * report.p[i];
            assert!(spent <= outcome.energies[i] + 1e-9);
        }
    }

    #[test]
    fn pgd_rejects_oversized_instances() {
        let gains = random_gains(8, 1);
        assert!(matches!(
            pgd_solve(&scenario(), &gains, 1e-2),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn oracle_near_dominates_naive_single_cell() {
        let sc = scenario();
        for seed in 0..25 {
            let gains = random_gains(1, seed);
            let naive = naive_policy(&sc, &gains).unwrap();
            let oracle = brute_force_oracle(&sc, &gains, 20).unwrap();
            // T/2 is not a grid point, but a neighbor comes close.
            assert!(
                oracle.objective >= 0.99 * naive.objective,
                "seed {seed}: oracle {} vs naive {}",
                oracle.objective,
                naive.objective
            );
        }
    }

    #[test]
    fn oracle_factorizes_on_zero_cross_gains() {
        let sc = scenario();
        let own = [8e-4, 1.3e-3];
        let joint_gains = LinkGains {
            user_hap: vec![vec![own[0], 0.0], vec![0.0, own[1]]],
            hap_hap: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let joint = brute_force_oracle(&sc, &joint_gains, 12).unwrap();
        let mut separate = 0.0;
        for h in own {
            let gains = LinkGains {
                user_hap: vec![vec![h]],
                hap_hap: vec![vec![0.0]],
            };
            separate += brute_force_oracle(&sc, &gains, 12).unwrap().objective;
        }
        assert!((joint.objective - separate).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_hand_enumeration_at_k2() {
        let sc = scenario();
        let gains = LinkGains {
            user_hap: vec![vec![9e-4, 5e-5], vec![7e-5, 1.1e-3]],
            hap_hap: vec![vec![0.0, 2.9e-4], vec![2.9e-4, 0.0]],
        };
        // 16 joint actions, enumerated with independent plain loops.
        let spaces = ActionSpaces::new(2, 2, sc.slot_len, sc.eps_tau).unwrap();
        let mut best = f64::NEG_INFINITY;
        for kt0 in 0..2 {
            for kt1 in 0..2 {
                let tau = [spaces.tau_value(kt0), spaces.tau_value(kt1)];
                let sched = sc.schedule(&tau).unwrap();
                let energies = sc.harvested(&sched, &gains);
                for kp0 in 0..2 {
                    for kp1 in 0..2 {
                        let p = [
                            spaces.power_value(kp0, energies[0], tau[0]),
                            spaces.power_value(kp1, energies[1], tau[1]),
                        ];
                        let obj = sc.objective(&gains, &tau, &p).unwrap();
                        if obj > best {
                            best = obj;
                        }
                    }
                }
            }
        }
        let oracle = brute_force_oracle(&sc, &gains, 2).unwrap();
        assert_eq!(oracle.iterations, 16);
        assert!((oracle.objective - best).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_oversized_budget() {
        let gains = random_gains(3, 2);
        assert!(matches!(
            brute_force_oracle(&scenario(), &gains, 20),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn isotonic_regression_pools_violators() {
        assert_eq!(isotonic_increasing(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(isotonic_increasing(&[3.0, 1.0]), vec![2.0, 2.0]);
        let fitted = isotonic_increasing(&[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(fitted, vec![1.0, 2.5, 2.5, 4.0]);
        for w in fitted.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }
}
