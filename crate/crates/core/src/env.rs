//! Per-slot network physics: interval construction from the time splits,
//! WIT/WET indicators, cross-link interference, achievable rates,
//! harvested energy, the energy budget check and the price-based reward.
//!
//! A slot of length `T` is cut into `N+1` intervals by the sorted time
//! splits. Within interval `n`, cell `i` is in uplink data mode (WIT) iff
//! its split `tau_i` lies strictly before the interval's right endpoint;
//! otherwise its H-AP is still radiating energy (WET).

use crate::channel::LinkGains;
use crate::error::{Error, Result};

/// Slack allowed on the per-user energy budget `(T - tau_i) p_i <= E_i`,
/// in joules. Callers build `p_i` from a discretized fraction of `E_i`,
/// so anything beyond rounding noise signals a bug.
pub const EH_BUDGET_TOLERANCE: f64 = 1e-12;

/// Interval decomposition of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSchedule {
    /// Per-cell WET durations in seconds.
    pub tau: Vec<f64>,
    /// Cell indices sorted by ascending `tau`, ties by index.
    pub mu: Vec<usize>,
    /// `N + 2` interval endpoints: `0, tau_{mu_1}, ..., tau_{mu_N}, T`.
    pub boundaries: Vec<f64>,
    /// `wit[n][i]` is true iff cell `i` receives uplink data during
    /// interval `n` (0-based, spanning `boundaries[n]..boundaries[n+1]`).
    pub wit: Vec<Vec<bool>>,
    /// Slot length `T` in seconds.
    pub slot_len: f64,
}

impl SlotSchedule {
    pub fn n_cells(&self) -> usize {
        self.tau.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.tau.len() + 1
    }

    /// Duration of interval `n` in seconds.
    pub fn duration(&self, n: usize) -> f64 {
        self.boundaries[n + 1] - self.boundaries[n]
    }
}

/// Builds the interval structure for the given time splits.
///
/// Every split must lie in `[0, T - eps_tau]`; `eps_tau > 0` keeps at
/// least that much uplink time per cell so transmit powers stay finite.
pub fn build_schedule(tau: &[f64], slot_len: f64, eps_tau: f64) -> Result<SlotSchedule> {
    if !(slot_len.is_finite() && slot_len > 0.0) {
        return Err(Error::Domain(format!("slot length T = {slot_len}")));
    }
    if !(eps_tau.is_finite() && eps_tau > 0.0 && eps_tau < slot_len) {
        return Err(Error::Domain(format!("eps_tau = {eps_tau}")));
    }
    for (i, &t) in tau.iter().enumerate() {
        if !(t.is_finite() && t >= 0.0 && t <= slot_len - eps_tau) {
            return Err(Error::Domain(format!(
                "tau[{i}] = {t} outside [0, {}]",
                slot_len - eps_tau
            )));
        }
    }
    let n = tau.len();
    let mut mu: Vec<usize> = (0..n).collect();
    mu.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]));

    let mut boundaries = Vec::with_capacity(n + 2);
    boundaries.push(0.0);
    boundaries.extend(mu.iter().map(|&k| tau[k]));
    boundaries.push(slot_len);

    let wit = (0..n + 1)
        .map(|iv| tau.iter().map(|&t| t < boundaries[iv + 1]).collect())
        .collect();

    Ok(SlotSchedule {
        tau: tau.to_vec(),
        mu,
        boundaries,
        wit,
        slot_len,
    })
}

/// Energy-harvesting circuit response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EhModel {
    /// Ideal transfer `eta * x`.
    Linear { eta: f64 },
    /// Saturating circuit `a3 (1 - e^{-a1 x}) / (1 + e^{-a1 x + a2})`,
    /// zero at zero input and bounded by `a3`.
    Nonlinear { a1: f64, a2: f64, a3: f64 },
}

/// Harvested power for a received power `x` in watts.
pub fn eh_transfer(model: EhModel, x: f64) -> Result<f64> {
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::Domain(format!("EH input power x = {x}")));
    }
    Ok(match model {
        EhModel::Linear { eta } => eta * x,
        EhModel::Nonlinear { a1, a2, a3 } => {
            let e = (-a1 * x).exp();
            a3 * (1.0 - e) / (1.0 + (-a1 * x + a2).exp())
        }
    })
}

/// WIT interference `I_nji` and cross-link WET interference `D_nji`
/// received by H-AP `i` from cell `j` during interval `n`, in watts.
/// Exactly one of the pair is zero because cell `j` is in one mode.
pub fn interference(
    sched: &SlotSchedule,
    gains: &LinkGains,
    p: &[f64],
    beta: f64,
    p_hap: f64,
    n: usize,
    j: usize,
    i: usize,
) -> Result<(f64, f64)> {
    if i == j {
        return Err(Error::InvalidArgument(format!(
            "interference of cell {i} onto itself"
        )));
    }
    if n >= sched.n_intervals() {
        return Err(Error::InvalidArgument(format!("interval index {n}")));
    }
    Ok(if sched.wit[n][j] {
        (gains.user_hap[j][i] * p[j], 0.0)
    } else {
        (0.0, beta * gains.hap_hap[j][i] * p_hap)
    })
}

// Cross-cell accumulations run in value order so that relabeling the
// cells permutes every outcome field exactly.
pub(crate) fn sum_by_value(terms: &mut Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

/// Achievable rate of user `i` over the slot, in nats (interval durations
/// in seconds times natural-log spectral efficiencies, before the `1/T`
/// of the sum objective). With `exclude = Some(k)` the interference from
/// cell `k` is removed, which yields the `R_{i\k}` rate of the price term.
pub fn rate(
    sched: &SlotSchedule,
    gains: &LinkGains,
    p: &[f64],
    sigma2: f64,
    beta: f64,
    p_hap: f64,
    i: usize,
    exclude: Option<usize>,
) -> f64 {
    assert!(sigma2 > 0.0, "noise power must be positive");
    let n = sched.n_cells();
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(n);
    for iv in 0..sched.n_intervals() {
        let dur = sched.duration(iv);
        if dur <= 0.0 || !sched.wit[iv][i] {
            continue;
        }
        terms.clear();
        for j in 0..n {
            if j == i || exclude == Some(j) {
                continue;
            }
            let (wit_i, wet_i) =
                interference(sched, gains, p, beta, p_hap, iv, j, i).expect("valid indices");
            terms.push(wit_i + wet_i);
        }
        let denom = sigma2 + sum_by_value(&mut terms);
        total += dur * (1.0 + gains.user_hap[i][i] * p[i] / denom).ln();
    }
    total
}

/// Total energy harvested by user `i` over the slot, in joules. The
/// circuit response applies to each H-AP's received power separately.
pub fn harvested_energy(
    sched: &SlotSchedule,
    gains: &LinkGains,
    model: EhModel,
    p_hap: f64,
    i: usize,
) -> f64 {
    let n = sched.n_cells();
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(n);
    for iv in 0..sched.n_intervals() {
        let dur = sched.duration(iv);
        if dur <= 0.0 || sched.wit[iv][i] {
            continue;
        }
        terms.clear();
        for j in 0..n {
            let received = if sched.wit[iv][j] {
                0.0
            } else {
                p_hap * gains.user_hap[i][j]
            };
            terms.push(eh_transfer(model, received).expect("nonnegative received power"));
        }
        total += dur * sum_by_value(&mut terms);
    }
    total
}

/// Harvested energy of every user under the given schedule.
pub fn harvested_energies(
    sched: &SlotSchedule,
    gains: &LinkGains,
    model: EhModel,
    p_hap: f64,
) -> Vec<f64> {
    (0..sched.n_cells())
        .map(|i| harvested_energy(sched, gains, model, p_hap, i))
        .collect()
}

/// Everything observable at the end of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    /// Per-user rates in nats (duration-weighted, before `1/T`).
    pub rates: Vec<f64>,
    /// `rates_excl[j][i]` is user `j`'s rate without interference from
    /// cell `i`; the diagonal holds `rates[j]`.
    pub rates_excl: Vec<Vec<f64>>,
    /// Per-user harvested energy in joules.
    pub energies: Vec<f64>,
    /// Price-based rewards `r_i = R_i - sum_{j != i} (R_{j\i} - R_j)`.
    pub rewards: Vec<f64>,
    /// `wit_interference[n][j][i]` = `I_nji` in watts (zero on `j == i`).
    pub wit_interference: Vec<Vec<Vec<f64>>>,
    /// `wet_interference[n][j][i]` = `D_nji` in watts (zero on `j == i`).
    pub wet_interference: Vec<Vec<Vec<f64>>>,
}

impl SlotOutcome {
    /// Sum objective `(1/T) sum_i R_i` in nats per second.
    pub fn sum_rate(&self, slot_len: f64) -> f64 {
        let mut terms = self.rates.clone();
        sum_by_value(&mut terms) / slot_len
    }
}

/// Physical constants of a network instance, bundled because they travel
/// together through every solver and the runner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    /// Downlink WET power of every H-AP, watts.
    pub p_hap: f64,
    /// Noise power, watts.
    pub sigma2: f64,
    /// WET signal cancellation factor in (0, 1).
    pub beta: f64,
    /// Slot length `T`, seconds.
    pub slot_len: f64,
    /// Minimum uplink time `eps_tau`, seconds.
    pub eps_tau: f64,
    /// Energy-harvesting circuit response.
    pub model: EhModel,
}

impl Scenario {
    pub fn schedule(&self, tau: &[f64]) -> Result<SlotSchedule> {
        build_schedule(tau, self.slot_len, self.eps_tau)
    }

    pub fn harvested(&self, sched: &SlotSchedule, gains: &LinkGains) -> Vec<f64> {
        harvested_energies(sched, gains, self.model, self.p_hap)
    }

    pub fn step(&self, gains: &LinkGains, actions: &[(f64, f64)]) -> Result<SlotOutcome> {
        step(
            gains,
            actions,
            self.model,
            self.p_hap,
            self.sigma2,
            self.beta,
            self.slot_len,
            self.eps_tau,
        )
    }

    /// Sum objective `(1/T) sum_i R_i` without assembling a full
    /// [`SlotOutcome`]; used in solver inner loops. Does not check the
    /// energy budget.
    pub fn objective(&self, gains: &LinkGains, tau: &[f64], p: &[f64]) -> Result<f64> {
        let sched = self.schedule(tau)?;
        let mut terms: Vec<f64> = (0..gains.n_cells())
            .map(|i| rate(&sched, gains, p, self.sigma2, self.beta, self.p_hap, i, None))
            .collect();
        Ok(sum_by_value(&mut terms) / self.slot_len)
    }
}

/// Evaluates one slot for realized actions `(tau_i, p_i)`.
///
/// The caller must have built each `p_i` from the energy actually
/// harvestable under the joint schedule; a budget violation beyond
/// [`EH_BUDGET_TOLERANCE`] is a caller bug and is rejected.
#[allow(clippy::too_many_arguments)]
pub fn step(
    gains: &LinkGains,
    actions: &[(f64, f64)],
    model: EhModel,
    p_hap: f64,
    sigma2: f64,
    beta: f64,
    slot_len: f64,
    eps_tau: f64,
) -> Result<SlotOutcome> {
    let n = gains.n_cells();
    if actions.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} actions for {n} cells",
            actions.len()
        )));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 = {sigma2}")));
    }
    let tau: Vec<f64> = actions.iter().map(|a| a.0).collect();
    let p: Vec<f64> = actions.iter().map(|a| a.1).collect();
    for (i, &pi) in p.iter().enumerate() {
        if !(pi.is_finite() && pi >= 0.0) {
            return Err(Error::Domain(format!("p[{i}] = {pi}")));
        }
    }
    let sched = build_schedule(&tau, slot_len, eps_tau)?;
    let energies = harvested_energies(&sched, gains, model, p_hap);
    for i in 0..n {
        let spent = (slot_len - tau[i]) * p[i];
        if spent > energies[i] + EH_BUDGET_TOLERANCE {
            return Err(Error::Constraint(format!(
                "cell {i} spends {spent} J but harvested {} J",
                energies[i]
            )));
        }
    }

    let rates: Vec<f64> = (0..n)
        .map(|i| rate(&sched, gains, &p, sigma2, beta, p_hap, i, None))
        .collect();
    let mut rates_excl = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..n {
            rates_excl[j][i] = if i == j {
                rates[j]
            } else {
                rate(&sched, gains, &p, sigma2, beta, p_hap, j, Some(i))
            };
        }
    }
    let mut rewards = Vec::with_capacity(n);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        terms.clear();
        for j in 0..n {
            if j != i {
                terms.push(rates_excl[j][i] - rates[j]);
            }
        }
        rewards.push(rates[i] - sum_by_value(&mut terms));
    }

    let n_iv = sched.n_intervals();
    let mut wit_interference = vec![vec![vec![0.0; n]; n]; n_iv];
    let mut wet_interference = vec![vec![vec![0.0; n]; n]; n_iv];
    for (iv, (wit_n, wet_n)) in wit_interference
        .iter_mut()
        .zip(wet_interference.iter_mut())
        .enumerate()
    {
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    let (a, b) = interference(&sched, gains, &p, beta, p_hap, iv, j, i)?;
                    wit_n[j][i] = a;
                    wet_n[j][i] = b;
                }
            }
        }
    }

    Ok(SlotOutcome {
        rates,
        rates_excl,
        energies,
        rewards,
        wit_interference,
        wet_interference,
    })
}
