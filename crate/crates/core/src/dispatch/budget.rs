//! Closed-form admission quantities: token budget, feasibility probability,
//! and worker maturity time.

use crate::latency::LatencyModel;
use crate::scalar::Scalar;
use crate::workload::SloSpec;

/// Maximum prompt tokens a worker may admit without breaking the tightest
/// SLO, given the estimated decode-iteration time `decode_estimate` of the
/// work already resident.
///
/// `floor((TTFT*TPOT - TTFT*E_d - a*TPOT) / (b*TPOT))`, zero once decoding
/// has no slack left, and `max_budget` when prompt tokens are free (`b = 0`).
pub fn compute_ntoken<T: Scalar>(
    tightest: SloSpec<T>,
    decode_estimate: T,
    model: &LatencyModel<T>,
    max_budget: u64,
) -> u64 {
    let SloSpec { ttft, tpot } = tightest;
    if tpot <= decode_estimate {
        return 0;
    }
    let numerator = ttft * tpot - ttft * decode_estimate - model.a * tpot;
    if numerator <= T::zero() {
        return 0;
    }
    if model.b <= T::zero() {
        return max_budget;
    }
    let raw = numerator / (model.b * tpot);
    // absorb rounding so exact quotients do not floor one short
    let slack = T::epsilon() * T::lit(64.0) * raw.abs().max(T::one());
    let n = (raw + slack).floor();
    match n.to_u64() {
        Some(n) => n.min(max_budget),
        None => max_budget,
    }
}

/// Probability-like admission score in `[0, 1]`.
///
/// Linear in the TTFT slack left after an optimistic prefill estimate,
/// discounted by `utilization_weight * utilization`.
pub fn calculate_p<T: Scalar>(
    arrival: T,
    ttft: T,
    now: T,
    expected_prefill: T,
    utilization: T,
    utilization_weight: T,
) -> T {
    let remaining = (arrival + ttft) - (now + expected_prefill);
    if remaining <= T::zero() {
        return T::zero();
    }
    let slack = (remaining / ttft).max(T::zero()).min(T::one());
    let discount = (T::one() - utilization_weight * utilization)
        .max(T::zero())
        .min(T::one());
    slack * discount
}

/// Next time a worker should be offered new requests.
///
/// After a prefill of `prefill_estimate` seconds the worker needs
/// `E_p / (TPOT_min - E_d)` decode iterations to win back the delay it
/// imposed on its decoding requests. With no slack the prefill alone is used.
pub fn maturity_time<T: Scalar>(now: T, prefill_estimate: T, decode_estimate: T, min_tpot: T) -> T {
    let relax = min_tpot - decode_estimate;
    if relax <= T::zero() {
        now + prefill_estimate
    } else {
        now + prefill_estimate + (prefill_estimate / relax) * decode_estimate
    }
}
