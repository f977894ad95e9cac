//! Online budget controller: grows the best-first tree one node at a time,
//! tracks the estimated speedup `Â·L_AR / Ĉ(N)` and stops at its first
//! strict decrease.

use std::fmt;

use crate::cost_model::{CycleLatencies, LatencyQuery, VerifyLatencyModel};
use crate::draft_tree::{BestFirstExpander, DraftTree};
use crate::error::{Error, Result};
use crate::lattice::CandidateLattice;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig<T: Real = f64> {
    pub n_max: usize,
    pub latencies: CycleLatencies<T>,
    /// Committed context length `c_t` at the start of the cycle.
    pub context_len: usize,
}

impl<T: Real> ControllerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::invalid("n_max must be >= 1"));
        }
        self.latencies.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    FirstDecrease,
    FrontierExhausted,
    BudgetCap,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FirstDecrease => "first-decrease",
            Self::FrontierExhausted => "frontier-exhausted",
            Self::BudgetCap => "budget-cap",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Budget choice plus the speedup estimates that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetTrace<T: Real = f64> {
    /// Chosen number of drafted nodes.
    pub budget: usize,
    /// `Ŝ(N)` for `N = 1..` up to and including the value that triggered the stop.
    pub s_hat_trace: Vec<T>,
    pub stop_reason: StopReason,
}

impl<T: Real> BudgetTrace<T> {
    /// `Ŝ` at the chosen budget, if any node was drafted.
    pub fn best_s_hat(&self) -> Option<T> {
        self.budget.checked_sub(1).map(|i| self.s_hat_trace[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerDecision<T: Real = f64> {
    pub tree: DraftTree<T>,
    pub trace: BudgetTrace<T>,
    /// Nodes popped from the frontier, including any expanded past the chosen budget.
    pub expanded: usize,
}

impl<T: Real> ControllerDecision<T> {
    pub fn budget(&self) -> usize {
        self.trace.budget
    }

    pub fn surrogate(&self) -> T {
        self.tree.surrogate()
    }
}

/// First-decrease stopping rule shared by the lattice and replay paths.
#[derive(Debug, Clone)]
struct StopRule<T: Real> {
    best: usize,
    best_s: T,
    trace: Vec<T>,
}

impl<T: Real> StopRule<T> {
    fn new() -> Self {
        Self {
            best: 0,
            best_s: T::neg_infinity(),
            trace: Vec::new(),
        }
    }

    /// Records `Ŝ(N)` for the next `N`; false once it dropped below its predecessor.
    fn observe(&mut self, s_hat: T) -> bool {
        self.trace.push(s_hat);
        if s_hat > self.best_s {
            self.best = self.trace.len();
            self.best_s = s_hat;
            true
        } else {
            s_hat == self.best_s
        }
    }

    fn finish(self, stop_reason: StopReason) -> BudgetTrace<T> {
        BudgetTrace {
            budget: self.best,
            s_hat_trace: self.trace,
            stop_reason,
        }
    }
}

fn s_hat<T: Real>(surrogate: T, cost: T, l_ar: T) -> Result<T> {
    if !(cost > T::zero()) {
        return Err(Error::invalid(format!("non-positive cycle cost {cost}")));
    }
    Ok(surrogate * l_ar / cost)
}

/// One planning cycle: expand best-first until the estimated speedup first drops,
/// the frontier runs dry, or `n_max` nodes are drafted.
pub fn run_cycle<T, M>(lattice: &CandidateLattice<T>, cfg: &ControllerConfig<T>, model: &M) -> Result<ControllerDecision<T>>
where
    T: Real,
    M: VerifyLatencyModel<T> + ?Sized,
{
    cfg.validate()?;
    let lat = cfg.latencies;
    let mut expander = BestFirstExpander::new(lattice);
    let mut rule = StopRule::new();
    let mut surrogate = T::one();
    let mut n = 0;
    let reason = loop {
        if n == cfg.n_max {
            break StopReason::BudgetCap;
        }
        let Some((_, rho)) = expander.step() else {
            break StopReason::FrontierExhausted;
        };
        n += 1;
        surrogate = surrogate + rho;
        let cost = lat.t_draft + model.verify_latency(LatencyQuery::for_budget(n, cfg.context_len)) + lat.t_aux;
        if !rule.observe(s_hat(surrogate, cost, lat.l_ar)?) {
            break StopReason::FirstDecrease;
        }
    };
    let trace = rule.finish(reason);
    let tree = expander.into_tree().truncated(trace.budget);
    Ok(ControllerDecision {
        tree,
        trace,
        expanded: n,
    })
}

/// The stopping rule on bare numbers: `gains[i]` is the path score added at
/// `N = i + 1` and `costs[i]` is `Ĉ(i + 1)`.
pub fn replay_trace<T: Real>(gains: &[T], costs: &[T], l_ar: T) -> Result<BudgetTrace<T>> {
    if gains.is_empty() || gains.len() != costs.len() {
        return Err(Error::invalid("gains and costs must be non-empty and equal length"));
    }
    if !(l_ar > T::zero()) {
        return Err(Error::invalid("l_ar must be > 0"));
    }
    if gains.iter().any(|g| !(*g >= T::zero())) || gains.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("gains must be non-negative and non-increasing"));
    }
    let mut rule = StopRule::new();
    let mut surrogate = T::one();
    for (g, c) in gains.iter().zip(costs) {
        surrogate = surrogate + *g;
        if !rule.observe(s_hat(surrogate, *c, l_ar)?) {
            return Ok(rule.finish(StopReason::FirstDecrease));
        }
    }
    Ok(rule.finish(StopReason::BudgetCap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::{roofline_latency, CostModelParams};
    use crate::draft_tree::{best_first_expand, surrogate_of};
    use crate::lattice::{top_k_truncate, LatticeEntry, MarginalBlock};
    use crate::oracle::scan_optimal_budget;
    use proptest::prelude::*;

    fn lattice_2x2() -> CandidateLattice<f64> {
        let e = |token, prob| LatticeEntry { token, prob };
        CandidateLattice::from_entries(vec![vec![e(0, 0.6), e(1, 0.3)], vec![e(2, 0.7), e(3, 0.2)]], 4).unwrap()
    }

    fn cfg(n_max: usize) -> ControllerConfig<f64> {
        ControllerConfig {
            n_max,
            latencies: CycleLatencies {
                t_draft: 0.0,
                t_aux: 0.0,
                l_ar: 1.0,
            },
            context_len: 0,
        }
    }

    fn cumulative(gains: &[f64]) -> Vec<f64> {
        gains
            .iter()
            .scan(1.0, |a, g| {
                *a += g;
                Some(*a)
            })
            .collect()
    }

    #[test]
    fn hand_trace_stops_at_three() {
        let gains = [0.60, 0.42, 0.30, 0.21, 0.12, 0.06];
        let costs: Vec<f64> = (1..=6).map(|n| 1.0 + 0.15 * n as f64).collect();
        let t = replay_trace(&gains, &costs, 1.0).unwrap();
        assert_eq!(t.budget, 3);
        assert_eq!(t.stop_reason, StopReason::FirstDecrease);
        assert_eq!(t.s_hat_trace.len(), 4);
        let want = [1.6 / 1.15, 2.02 / 1.3, 2.32 / 1.45, 2.53 / 1.6];
        for (a, b) in t.s_hat_trace.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(scan_optimal_budget(&cumulative(&gains), &costs, 1.0).unwrap(), 3);
    }

    #[test]
    fn constant_costs_run_to_the_end() {
        let t = replay_trace(&[0.5, 0.4, 0.4, 0.1], &[2.0; 4], 1.0).unwrap();
        assert_eq!((t.budget, t.stop_reason), (4, StopReason::BudgetCap));
    }

    #[test]
    fn plateau_keeps_smaller_budget_and_continues() {
        let t = replay_trace(&[0.0, 0.0, 0.0], &[1.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!((t.budget, t.stop_reason), (1, StopReason::FirstDecrease));
        assert_eq!(t.s_hat_trace, vec![1.0, 1.0, 0.5]);
    }

    #[test]
    fn tiny_first_gain_stops_at_one() {
        let t = replay_trace(&[0.01, 0.01], &[1.0, 3.0], 1.0).unwrap();
        assert_eq!((t.budget, t.stop_reason), (1, StopReason::FirstDecrease));
    }

    #[test]
    fn replay_rejects_bad_inputs() {
        assert!(replay_trace(&[0.1, 0.2], &[1.0, 1.0], 1.0).is_err());
        assert!(replay_trace(&[0.2, 0.1], &[1.0, 0.0], 1.0).is_err());
        assert!(replay_trace::<f64>(&[], &[], 1.0).is_err());
        assert!(replay_trace(&[0.2], &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn flat_cost_exhausts_frontier() {
        let lat = lattice_2x2();
        let d = run_cycle(&lat, &cfg(100), &|_q: LatencyQuery| 1.0).unwrap();
        assert_eq!(d.trace.stop_reason, StopReason::FrontierExhausted);
        assert_eq!(d.budget(), 6);
        assert!((d.surrogate() - 2.71).abs() < 1e-12);
    }

    #[test]
    fn linear_cost_matches_hand_trace() {
        let lat = lattice_2x2();
        let d = run_cycle(&lat, &cfg(100), &|q: LatencyQuery| 1.0 + 0.15 * (q.s - 1) as f64).unwrap();
        assert_eq!(d.budget(), 3);
        assert_eq!(d.trace.stop_reason, StopReason::FirstDecrease);
        assert_eq!(d.tree.budget(), 3);
        assert!((d.surrogate() - 2.32).abs() < 1e-12);
    }

    #[test]
    fn n_max_one_caps() {
        let d = run_cycle(&lattice_2x2(), &cfg(1), &|_q: LatencyQuery| 1.0).unwrap();
        assert_eq!((d.budget(), d.trace.stop_reason), (1, StopReason::BudgetCap));
        assert_eq!(d.tree.len(), 2);
        assert!(run_cycle(&lattice_2x2(), &cfg(0), &|_q: LatencyQuery| 1.0).is_err());
    }

    #[test]
    fn roofline_model_is_a_handle() {
        let p = CostModelParams::<f64>::preset("compute-bound").unwrap();
        let block = MarginalBlock::from_rows(vec![vec![0.9, 0.1]; 8]).unwrap();
        let lat = top_k_truncate(&block, 2).unwrap();
        let model = |q: LatencyQuery| roofline_latency(&p, q);
        let d = run_cycle(&lat, &cfg(64), &model).unwrap();
        assert!(d.budget() >= 1);
        assert_eq!(d.tree.budget(), d.budget());
    }

    proptest! {
        #[test]
        fn replay_matches_scan(
            raw in prop::collection::vec(0.0f64..1.0, 1..40),
            base in 0.1f64..2.0,
            slope in 0.0f64..0.5,
            curve in 0.0f64..0.05,
        ) {
            let mut gains = raw;
            gains.sort_by(|a, b| b.total_cmp(a));
            let costs: Vec<f64> = (1..=gains.len()).map(|n| base + slope * n as f64 + curve * (n * n) as f64).collect();
            let t = replay_trace(&gains, &costs, 1.0).unwrap();
            prop_assert_eq!(t.budget, scan_optimal_budget(&cumulative(&gains), &costs, 1.0).unwrap());
            let peak = t.s_hat_trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(t.best_s_hat().unwrap(), peak);
        }

        #[test]
        fn cycle_matches_scan_and_incremental_surrogate(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..6),
            slope in 0.0f64..0.4,
            n_max in 1usize..40,
        ) {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
            let lat = top_k_truncate(&MarginalBlock::from_rows(rows).unwrap(), 3).unwrap();
            let cost = |q: LatencyQuery| 1.0 + slope * (q.s - 1) as f64;
            let d = run_cycle(&lat, &cfg(n_max), &cost).unwrap();
            prop_assert_eq!(d.tree.budget(), d.budget());

            // from-scratch replay over the same expansion
            let full = best_first_expand(&lat, d.expanded).unwrap();
            let mut running = 1.0;
            let mut surrogates = Vec::new();
            for n in 1..=d.expanded {
                running += full.node(n).path_score;
                let fresh = surrogate_of(&full.truncated(n));
                prop_assert!((running - fresh).abs() <= 1e-9);
                surrogates.push(running);
            }
            let costs: Vec<f64> = (1..=d.expanded).map(|n| cost(LatencyQuery::for_budget(n, 0))).collect();
            prop_assert_eq!(d.budget(), scan_optimal_budget(&surrogates, &costs, 1.0).unwrap());
            prop_assert_eq!(d.clone(), run_cycle(&lat, &cfg(n_max), &cost).unwrap());
        }
    }
}
