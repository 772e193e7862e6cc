//! One per-cell decision agent: local state from sensed quantities,
//! discretized action sampling from the two-head actor, TD error, the
//! per-slot actor/critic updates, and the backhaul price exchange.
//!
//! Everything an agent consumes is measurable at its own H-AP: its own
//! previous action and rate, its own-link gain, per-interferer estimates
//! of harvested energy and of both interference kinds, and the rates
//! other H-APs forward over the backhaul. Nothing here reads another
//! agent's parameters or unsensed environment internals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::channel::LinkGains;
use crate::env::{self, SlotOutcome, SlotSchedule};
use crate::error::{Error, Result};
use crate::nn::{self, ActorCache, DenseNet, Direction, TwoHeadActorNet};

/// Discrete grids for the time and power actions.
///
/// Time index `k` maps to `tau = k (T - eps_tau) / (K_T - 1)`; power
/// index `k` maps to `p = k E / ((K_P - 1)(T - tau))`, so the top power
/// index spends exactly the harvested energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSpaces {
    pub k_time: usize,
    pub k_power: usize,
    pub slot_len: f64,
    pub eps_tau: f64,
}

impl ActionSpaces {
    pub fn new(k_time: usize, k_power: usize, slot_len: f64, eps_tau: f64) -> Result<Self> {
        if k_time < 2 || k_power < 2 {
            return Err(Error::InvalidArgument(format!(
                "quantization levels K_T = {k_time}, K_P = {k_power} must be >= 2"
            )));
        }
        if !(eps_tau > 0.0 && eps_tau < slot_len) {
            return Err(Error::InvalidArgument(format!("eps_tau = {eps_tau}")));
        }
        Ok(ActionSpaces {
            k_time,
            k_power,
            slot_len,
            eps_tau,
        })
    }

    /// WET duration of time index `k` in seconds.
    pub fn tau_value(&self, k: usize) -> f64 {
        debug_assert!(k < self.k_time);
        (k as f64 / (self.k_time - 1) as f64) * (self.slot_len - self.eps_tau)
    }

    /// Uplink power of power index `k` in watts, given the harvested
    /// energy and the already-fixed own WET duration.
    pub fn power_value(&self, k: usize, energy: f64, tau: f64) -> f64 {
        debug_assert!(k < self.k_power);
        (k as f64 / (self.k_power - 1) as f64) * energy / (self.slot_len - tau)
    }

    /// Physical `(tau, p)` pair of a joint index pair.
    pub fn realize(&self, k_time: usize, k_power: usize, energy: f64) -> (f64, f64) {
        let tau = self.tau_value(k_time);
        (tau, self.power_value(k_power, energy, tau))
    }
}

/// Number of state features for an `n_cells` network: five internal plus
/// an `(E, I, D)` estimate triple per interfering cell.
pub fn state_dim(n_cells: usize) -> usize {
    5 + 3 * (n_cells - 1)
}

/// Normalized local observation vector. Layout: `tau_prev/T`,
/// `p_prev`, `h_own_prev`, `h_own_curr` (log-scaled), `R_prev/R_max`,
/// then `(E_hat, I_hat, D_hat)` per interfering cell by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub vector: Vec<f64>,
}

/// All-zero state used at slot 0, before anything has been sensed.
pub fn zero_state(n_cells: usize) -> AgentState {
    AgentState {
        vector: vec![0.0; state_dim(n_cells)],
    }
}

/// Un-normalized feature vector in physical units, same layout as
/// [`AgentState`]. The interference and energy estimates accumulate the
/// previous slot's schedule against the current slot's gains.
#[allow(clippy::too_many_arguments)]
pub fn raw_features(
    i: usize,
    prev_action: (f64, f64),
    own_gain_prev: f64,
    own_gain_curr: f64,
    prev_rate: f64,
    prev_sched: &SlotSchedule,
    prev_powers: &[f64],
    gains: &LinkGains,
    p_hap: f64,
    eta: f64,
    beta: f64,
) -> Vec<f64> {
    let n = prev_sched.n_cells();
    let mut features = Vec::with_capacity(state_dim(n));
    features.push(prev_action.0);
    features.push(prev_action.1);
    features.push(own_gain_prev);
    features.push(own_gain_curr);
    features.push(prev_rate);
    for j in 0..n {
        if j == i {
            continue;
        }
        let mut e_hat = 0.0;
        let mut i_hat = 0.0;
        let mut d_hat = 0.0;
        for iv in 0..prev_sched.n_intervals() {
            let dur = prev_sched.duration(iv);
            if dur <= 0.0 {
                continue;
            }
            let wet_i = !prev_sched.wit[iv][i];
            let wet_j = !prev_sched.wit[iv][j];
            if wet_i && wet_j {
                e_hat += dur * gains.user_hap[i][j];
            }
            if !wet_j {
                i_hat += dur * gains.user_hap[j][i] * prev_powers[j];
            } else {
                d_hat += dur * gains.hap_hap[j][i];
            }
        }
        features.push(eta * p_hap * e_hat);
        features.push(i_hat);
        features.push(beta * d_hat);
    }
    features
}

/// Frozen per-feature normalization: wide-range features pass through
/// `log10(x + 1e-30)` and an affine map calibrated from warm-up slots;
/// the previous split and rate are divided by fixed maxima. Outputs are
/// clamped to `[-10, 10]` to keep tanh inputs in range.
#[derive(Debug, Clone, PartialEq)]
pub struct StateNormalizer {
    pub is_log: Vec<bool>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const LOG_FLOOR: f64 = 1e-30;
const CLAMP: f64 = 10.0;

/// Which features use the log-affine path: everything except the
/// previous split (index 0) and the previous rate (index 4).
fn log_feature_mask(dim: usize) -> Vec<bool> {
    (0..dim).map(|k| k != 0 && k != 4).collect()
}

impl StateNormalizer {
    /// Per-feature mean/deviation of the log-scaled features over warm-up
    /// samples. `rate_scale` is the fixed rate denominator
    /// `ln(1 + P h_max / sigma^2) * T` and `slot_len` the split
    /// denominator.
    pub fn calibrate(samples: &[Vec<f64>], slot_len: f64, rate_scale: f64) -> Result<Self> {
        let dim = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("no calibration samples".into()))?
            .len();
        let is_log = log_feature_mask(dim);
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for k in 0..dim {
            if !is_log[k] {
                continue;
            }
            let logs: Vec<f64> = samples.iter().map(|s| (s[k] + LOG_FLOOR).log10()).collect();
            let m = logs.iter().sum::<f64>() / logs.len() as f64;
            let var = logs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / logs.len() as f64;
            mean[k] = m;
            scale[k] = var.sqrt().max(1e-3);
        }
        mean[0] = 0.0;
        scale[0] = slot_len;
        mean[4] = 0.0;
        scale[4] = rate_scale;
        Ok(StateNormalizer { is_log, mean, scale })
    }

    /// Identity-like normalizer (log features centered at zero with unit
    /// scale), for tests and untrained sanity runs.
    pub fn uncalibrated(n_cells: usize, slot_len: f64, rate_scale: f64) -> Self {
        let dim = state_dim(n_cells);
        let is_log = log_feature_mask(dim);
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        mean[0] = 0.0;
        scale[0] = slot_len;
        mean[4] = 0.0;
        scale[4] = rate_scale;
        // Raw gains and energies sit around 1e-3..1e-9; keep their logs
        // roughly centered without warm-up statistics.
        for k in 0..dim {
            if is_log[k] {
                mean[k] = -6.0;
                scale[k] = 3.0;
            }
        }
        StateNormalizer { is_log, mean, scale }
    }

    pub fn normalize(&self, raw: &[f64]) -> AgentState {
        let vector = raw
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let v = if self.is_log[k] {
                    ((x + LOG_FLOOR).log10() - self.mean[k]) / self.scale[k]
                } else {
                    (x - self.mean[k]) / self.scale[k]
                };
                v.clamp(-CLAMP, CLAMP)
            })
            .collect();
        AgentState { vector }
    }
}

/// Normalized local state per Sec. state layout.
#[allow(clippy::too_many_arguments)]
pub fn build_state(
    i: usize,
    prev_action: (f64, f64),
    own_gain_prev: f64,
    own_gain_curr: f64,
    prev_rate: f64,
    prev_sched: &SlotSchedule,
    prev_powers: &[f64],
    gains: &LinkGains,
    p_hap: f64,
    eta: f64,
    beta: f64,
    normalizer: &StateNormalizer,
) -> AgentState {
    let raw = raw_features(
        i,
        prev_action,
        own_gain_prev,
        own_gain_curr,
        prev_rate,
        prev_sched,
        prev_powers,
        gains,
        p_hap,
        eta,
        beta,
    );
    normalizer.normalize(&raw)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Sampling record kept between the decision and the update of a slot.
#[derive(Debug, Clone)]
pub struct Decision {
    pub state: AgentState,
    pub cache: ActorCache,
    pub k_time: usize,
    pub k_power: usize,
    pub log_prob_time: f64,
    pub log_prob_power: f64,
}

/// Backhaul message carrying the rates H-AP `from` computed locally for
/// the price term of H-AP `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceMessage {
    pub from: usize,
    pub to: usize,
    /// `R_{from \ to}`: rate of user `from` without interference from
    /// cell `to`.
    pub rate_excl: f64,
    /// `R_from`: realized rate of user `from`.
    pub rate: f64,
    pub slot: u64,
}

/// All messages of one slot: every H-AP sends its pair of rates to every
/// other H-AP.
pub fn price_messages(outcome: &SlotOutcome, slot: u64) -> Vec<PriceMessage> {
    let n = outcome.rates.len();
    let mut messages = Vec::with_capacity(n * n.saturating_sub(1));
    for from in 0..n {
        for to in 0..n {
            if from != to {
                messages.push(PriceMessage {
                    from,
                    to,
                    rate_excl: outcome.rates_excl[from][to],
                    rate: outcome.rates[from],
                    slot,
                });
            }
        }
    }
    messages
}

/// Reward of agent `i` assembled from its own rate and the received
/// messages: `r_i = R_i - sum_{j != i} (R_{j\i} - R_j)`.
pub fn reward_from_messages(
    i: usize,
    n_cells: usize,
    own_rate: f64,
    messages: &[PriceMessage],
    slot: u64,
) -> Result<f64> {
    let mut terms = Vec::with_capacity(n_cells - 1);
    for j in 0..n_cells {
        if j == i {
            continue;
        }
        let msg = messages
            .iter()
            .find(|m| m.from == j && m.to == i && m.slot == slot)
            .ok_or_else(|| {
                Error::Protocol(format!("missing price message {j} -> {i} for slot {slot}"))
            })?;
        terms.push(msg.rate_excl - msg.rate);
    }
    Ok(own_rate - env::sum_by_value(&mut terms))
}

/// Distributes one slot's rates over the backhaul and rebuilds every
/// agent's reward from messages alone.
pub fn exchange_prices(outcome: &SlotOutcome, slot: u64) -> Result<Vec<f64>> {
    let n = outcome.rates.len();
    let messages = price_messages(outcome, slot);
    (0..n)
        .map(|i| reward_from_messages(i, n, outcome.rates[i], &messages, slot))
        .collect()
}

/// Result of one actor/critic update attempt.
#[derive(Debug, Clone, Copy)]
pub struct UpdateReport {
    pub td_error: f64,
}

/// One H-AP's decision entity: actor, critic, action grids, frozen state
/// normalizer and a private rng stream.
#[derive(Debug, Clone)]
pub struct Agent {
    pub index: usize,
    pub actor: TwoHeadActorNet,
    pub critic: DenseNet,
    pub spaces: ActionSpaces,
    pub normalizer: StateNormalizer,
    pub rng: ChaCha8Rng,
    decision: Option<Decision>,
}

impl Agent {
    pub fn new(
        index: usize,
        actor: TwoHeadActorNet,
        critic: DenseNet,
        spaces: ActionSpaces,
        normalizer: StateNormalizer,
        rng: ChaCha8Rng,
    ) -> Self {
        Agent {
            index,
            actor,
            critic,
            spaces,
            normalizer,
            rng,
            decision: None,
        }
    }

    /// Draws `(k_time, k_power)` from the two head distributions and
    /// caches the forward pass for the update of this slot.
    pub fn sample_action(&mut self, state: &AgentState) -> Result<(usize, usize)> {
        let cache = self.actor.forward(&state.vector)?;
        let k_time = sample_index(cache.time_probs(), &mut self.rng);
        let k_power = sample_index(cache.power_probs(), &mut self.rng);
        let log_prob_time = nn::log_softmax(&cache.time.pre[cache.time.pre.len() - 1])[k_time];
        let log_prob_power = nn::log_softmax(&cache.power.pre[cache.power.pre.len() - 1])[k_power];
        self.decision = Some(Decision {
            state: state.clone(),
            cache,
            k_time,
            k_power,
            log_prob_time,
            log_prob_power,
        });
        Ok((k_time, k_power))
    }

    /// Greedy variant used by evaluation when sampling is disabled.
    pub fn argmax_action(&mut self, state: &AgentState) -> Result<(usize, usize)> {
        let cache = self.actor.forward(&state.vector)?;
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        };
        let pair = (argmax(cache.time_probs()), argmax(cache.power_probs()));
        self.decision = None;
        Ok(pair)
    }

    pub fn last_decision(&self) -> Option<&Decision> {
        self.decision.as_ref()
    }

    /// TD error `r + gamma V(s') - V(s)` under the current critic.
    pub fn td_error(
        &self,
        state: &AgentState,
        next_state: &AgentState,
        reward: f64,
        gamma: f64,
    ) -> Result<f64> {
        let v = self.critic.forward(&state.vector)?.output()[0];
        let v_next = self.critic.forward(&next_state.vector)?.output()[0];
        Ok(reward + gamma * v_next - v)
    }

    /// One advantage actor-critic update for the cached decision. The TD
    /// error is computed with pre-update parameters, then the critic
    /// ascends `alpha_c * delta * grad V(s)` and the actor ascends
    /// `alpha_a * delta * grad log pi(a|s)` (both head log-probabilities
    /// summed). A non-finite TD error or gradient rejects the whole
    /// update and leaves every parameter untouched.
    pub fn update(
        &mut self,
        next_state: &AgentState,
        reward: f64,
        alpha_c: f64,
        alpha_a: f64,
        gamma: f64,
    ) -> Result<UpdateReport> {
        let decision = self
            .decision
            .take()
            .ok_or_else(|| Error::State("update without a sampled decision".into()))?;

        let critic_cache = self.critic.forward(&decision.state.vector)?;
        let v = critic_cache.output()[0];
        let v_next = self.critic.forward(&next_state.vector)?.output()[0];
        let delta = reward + gamma * v_next - v;
        if !delta.is_finite() {
            return Err(Error::Numeric(format!("TD error {delta}, update skipped")));
        }

        let critic_grads = self.critic.backward(&critic_cache, &[delta])?;

        let mut seed_time = nn::log_prob_grad_seed(decision.cache.time_probs(), decision.k_time)?;
        let mut seed_power =
            nn::log_prob_grad_seed(decision.cache.power_probs(), decision.k_power)?;
        for s in seed_time.iter_mut().chain(seed_power.iter_mut()) {
            *s *= delta;
        }
        let actor_grads = self.actor.backward(&decision.cache, &seed_time, &seed_power)?;

        if !critic_grads.is_finite() || !actor_grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient, update skipped".into()));
        }
        self.critic
            .sgd_step(&critic_grads, alpha_c, Direction::Ascent)?;
        self.actor.sgd_step(&actor_grads, alpha_a, Direction::Ascent)?;
        Ok(UpdateReport { td_error: delta })
    }
}
