//! Bridges between the optimized paths and the brute-force oracles, plus the
//! controller overhead timing. Each check returns its raw numbers; the pass
//! verdict is derived from them.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::controller::{replay_trace, run_cycle, ControllerConfig};
use crate::cost_model::{roofline_latency, CostModelParams, CycleLatencies, LatencyQuery};
use crate::draft_tree::{best_first_expand, marginal_gains, surrogate_of, DraftTree};
use crate::error::Result;
use crate::lattice::{top_k_truncate, CandidateLattice, MarginalBlock, SyntheticPair, SyntheticPairConfig, TokenId};
use crate::oracle::{enumerate_optimal_by_size, exact_expected_commit, monte_carlo_commit, scan_optimal_budget, MAX_ENUM_NODES};
use crate::verify_sim::target::mix2;
use crate::verify_sim::{ContextKey, Decoding};

fn rng_for(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix2(seed, i as u64))
}

/// Rows drawn from a flat Dirichlet; with `sparse`, some entries are zeroed.
pub fn random_block<R: Rng>(gamma: usize, vocab: usize, sparse: bool, rng: &mut R) -> MarginalBlock<f64> {
    let rows = (0..gamma)
        .map(|_| {
            let mut w: Vec<f64> = (0..vocab).map(|_| Exp1.sample(rng)).collect();
            if sparse {
                let keep = rng.random_range(0..vocab);
                for (v, x) in w.iter_mut().enumerate() {
                    if v != keep && rng.random_bool(0.2) {
                        *x = 0.0;
                    }
                }
            }
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    MarginalBlock::from_rows(rows).expect("normalized rows")
}

/// Random prefix-closed tree over the positive entries of `block`.
pub fn random_tree<R: Rng>(block: &MarginalBlock<f64>, max_nodes: usize, rng: &mut R) -> DraftTree<f64> {
    let mut tree = DraftTree::root();
    let target = rng.random_range(1..=max_nodes);
    for _ in 0..target * 4 {
        if tree.budget() >= target {
            break;
        }
        let parent = rng.random_range(0..tree.len());
        let depth = tree.node(parent).depth;
        if depth >= block.gamma() {
            continue;
        }
        let free = (0..block.vocab_size() as TokenId)
            .filter(|&t| block.prob(depth, t) > 0.0 && tree.child_with_token(parent, t).is_none())
            .choose(rng);
        if let Some(t) = free {
            tree.add_child(parent, t, block.prob(depth, t)).expect("fresh child");
        }
    }
    tree
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactnessReport {
    pub fixtures: usize,
    pub max_abs_err: f64,
    pub elapsed: Duration,
}

/// Exact enumeration of `E[A_self]` against `Σρ`.
pub fn surrogate_exactness(fixtures: usize, seed: u64) -> Result<ExactnessReport> {
    let start = Instant::now();
    let errs: Vec<f64> = (0..fixtures)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i);
            let vocab = rng.random_range(2..=6);
            let gamma = rng.random_range(1..=5);
            let block = random_block(gamma, vocab, i % 2 == 1, &mut rng);
            let tree = random_tree(&block, 20, &mut rng);
            Ok((exact_expected_commit(&tree, &block)? - surrogate_of(&tree)).abs())
        })
        .collect::<Result<_>>()?;
    Ok(ExactnessReport {
        fixtures,
        max_abs_err: errs.into_iter().fold(0.0, f64::max),
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    pub fixtures: usize,
    pub samples: usize,
    pub violations: usize,
    /// Fixtures whose Monte-Carlo mean lies within 3 standard errors of `Σρ`.
    pub within_three_se: usize,
    /// Trees discarded because their committed count could not vary.
    pub redrawn: usize,
}

impl ChainReport {
    pub fn within_fraction(&self) -> f64 {
        self.within_three_se as f64 / self.fixtures as f64
    }
}

/// True when every continuation covers the same number of nodes: each
/// internal node has a child for every positive token and all leaves share a depth.
pub fn has_constant_commit(tree: &DraftTree<f64>, block: &MarginalBlock<f64>) -> bool {
    let depth = tree.max_depth();
    tree.nodes().iter().all(|n| {
        let kids = tree.children(n.id).len();
        if kids == 0 {
            n.depth == depth
        } else {
            n.depth < block.gamma() && kids == (0..block.vocab_size()).filter(|&t| block.row(n.depth)[t] > 0.0).count()
        }
    })
}

/// Monte-Carlo draws of the drafter's own continuation; every covered set must be a root chain.
pub fn chain_structure(fixtures: usize, samples_per_fixture: usize, seed: u64) -> Result<ChainReport> {
    let rows: Vec<(bool, bool, usize)> = (0..fixtures)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed ^ 0x11, i);
            let vocab = rng.random_range(2..=8);
            let gamma = rng.random_range(1..=6);
            let block = random_block(gamma, vocab, false, &mut rng);
            let mut redrawn = 0;
            let mut tree = random_tree(&block, 24, &mut rng);
            while has_constant_commit(&tree, &block) {
                redrawn += 1;
                tree = random_tree(&block, 24, &mut rng);
            }
            match monte_carlo_commit(&tree, &block, samples_per_fixture, &mut rng) {
                Ok(est) => {
                    let within = (est.mean - surrogate_of(&tree)).abs() <= 3.0 * est.std_err;
                    (true, within, redrawn)
                }
                Err(_) => (false, false, redrawn),
            }
        })
        .collect();
    Ok(ChainReport {
        fixtures,
        samples: fixtures * samples_per_fixture,
        violations: rows.iter().filter(|r| !r.0).count(),
        within_three_se: rows.iter().filter(|r| r.1).count(),
        redrawn: rows.iter().map(|r| r.2).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub lattices: usize,
    pub comparisons: usize,
    pub max_abs_err: f64,
    pub nesting_failures: usize,
    pub elapsed: Duration,
}

pub fn random_small_lattice<R: Rng>(rng: &mut R) -> CandidateLattice<f64> {
    let gamma = rng.random_range(1..=4);
    let k = rng.random_range(1..=3);
    let block = random_block(gamma, k + 2, false, rng);
    top_k_truncate(&block, k).expect("k >= 1")
}

/// Best-first trees against exhaustive search for every budget up to 12.
pub fn best_first_optimality(lattices: usize, seed: u64) -> Result<OptimalityReport> {
    let start = Instant::now();
    let rows: Vec<(usize, f64, usize)> = (0..lattices)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed ^ 0x22, i);
            let lattice = random_small_lattice(&mut rng);
            let n_top = (lattice.reachable_size() as usize).min(MAX_ENUM_NODES);
            let optimum = enumerate_optimal_by_size(&lattice, n_top)?;
            let mut worst = 0.0f64;
            let mut nest = 0;
            let mut prev: Option<DraftTree<f64>> = None;
            for (n, best) in (1..=n_top).zip(optimum) {
                let (best, _) = best.expect("n within reachable size");
                let tree = best_first_expand(&lattice, n)?;
                worst = worst.max((tree.surrogate() - best).abs());
                if let Some(p) = &prev {
                    if tree.nodes()[..p.len()] != p.nodes()[..] {
                        nest += 1;
                    }
                }
                prev = Some(tree);
            }
            Ok((n_top, worst, nest))
        })
        .collect::<Result<_>>()?;
    Ok(OptimalityReport {
        lattices,
        comparisons: rows.iter().map(|r| r.0).sum(),
        max_abs_err: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        nesting_failures: rows.iter().map(|r| r.2).sum(),
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcavityReport {
    pub expansions: usize,
    pub gains_checked: usize,
    pub violations: usize,
}

/// Marginal gains of seeded best-first expansions, compared exactly.
pub fn concavity(expansions: usize, seed: u64) -> Result<ConcavityReport> {
    let rows: Vec<(usize, bool)> = (0..expansions)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed ^ 0x33, i);
            let gamma = rng.random_range(1..=16);
            let vocab = rng.random_range(2..=32);
            let k = rng.random_range(1..=vocab.min(8));
            let lattice = top_k_truncate(&random_block(gamma, vocab, i % 3 == 0, &mut rng), k)?;
            let tree = best_first_expand(&lattice, rng.random_range(1..=256))?;
            let ok = marginal_gains(&tree).is_ok()
                && tree.nodes()[1..].windows(2).all(|w| w[1].path_score <= w[0].path_score);
            Ok((tree.budget(), ok))
        })
        .collect::<Result<_>>()?;
    Ok(ConcavityReport {
        expansions,
        gains_checked: rows.iter().map(|r| r.0).sum(),
        violations: rows.iter().filter(|r| !r.1).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingReport {
    pub instances: usize,
    pub replay_mismatches: usize,
    pub cycle_mismatches: usize,
}

/// Concave gains with a convex cost curve: `c0 + a N + b N^2`.
pub fn random_concave_convex<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..=64);
    let mut gains: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    let (c0, a, b) = (rng.random_range(0.1..2.0), rng.random_range(0.0..0.3), rng.random_range(0.0..0.01));
    let costs = (1..=n).map(|k| c0 + a * k as f64 + b * (k * k) as f64).collect();
    (gains, costs)
}

/// First-decrease stop against the exhaustive argmax, on bare traces and on lattices.
pub fn controller_stopping(instances: usize, seed: u64) -> Result<StoppingReport> {
    let rows: Vec<(bool, bool)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed ^ 0x44, i);
            let (gains, costs) = random_concave_convex(&mut rng);
            let surrogates: Vec<f64> = gains
                .iter()
                .scan(1.0, |acc, g| {
                    *acc += g;
                    Some(*acc)
                })
                .collect();
            let replay_ok = replay_trace(&gains, &costs, 1.0)?.budget == scan_optimal_budget(&surrogates, &costs, 1.0)?;

            let gamma = rng.random_range(1..=8);
            let lattice = top_k_truncate(&random_block(gamma, 6, false, &mut rng), rng.random_range(1..=4))?;
            let (c0, a, b) = (rng.random_range(0.1..2.0), rng.random_range(0.0..0.3), rng.random_range(0.0..0.01));
            let model = |q: LatencyQuery| {
                let n = (q.s - 1) as f64;
                a * n + b * n * n
            };
            let cfg = ControllerConfig {
                n_max: 200,
                latencies: CycleLatencies {
                    t_draft: c0,
                    t_aux: 0.0,
                    l_ar: 1.0,
                },
                context_len: 0,
            };
            let d = run_cycle(&lattice, &cfg, &model)?;
            let full = best_first_expand(&lattice, d.expanded)?;
            let mut acc = 1.0;
            let mut sur = Vec::new();
            let mut cst = Vec::new();
            for n in 1..=d.expanded {
                acc += full.node(n).path_score;
                sur.push(acc);
                cst.push(c0 + model(LatencyQuery::for_budget(n, 0)) + 0.0);
            }
            let cycle_ok = d.budget() == scan_optimal_budget(&sur, &cst, 1.0)?;
            Ok((replay_ok, cycle_ok))
        })
        .collect::<Result<_>>()?;
    Ok(StoppingReport {
        instances,
        replay_mismatches: rows.iter().filter(|r| !r.0).count(),
        cycle_mismatches: rows.iter().filter(|r| !r.1).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub cycles: usize,
    pub nodes: usize,
    pub elapsed: Duration,
}

impl OverheadReport {
    pub fn micros_per_node(&self) -> f64 {
        self.elapsed.as_secs_f64() * 1e6 / self.nodes as f64
    }
}

/// Wall time of controller cycles (expansion, frontier, cost queries, stop rule) per expanded node.
///
/// Lattices come from a synthetic pair at block 16, vocabulary 64, top-8; half of
/// the cycles use the crossover roofline, half a flat cost so expansion runs to `n_max`.
pub fn controller_overhead(cycles: usize, seed: u64) -> Result<OverheadReport> {
    let pair = SyntheticPair::new(SyntheticPairConfig {
        seed,
        ..Default::default()
    })?;
    let lattices: Vec<CandidateLattice<f64>> = (0..cycles)
        .map(|c| top_k_truncate(&pair.draft(ContextKey::empty().push(c as TokenId), Decoding::Greedy), 8))
        .collect::<Result<_>>()?;
    let params = CostModelParams::<f64>::preset("crossover")?;
    let l_ar = roofline_latency(&params, LatencyQuery::new(1, 512)?);
    let cfg = ControllerConfig {
        n_max: 1024,
        latencies: CycleLatencies {
            t_draft: 0.1 * l_ar,
            t_aux: 0.0,
            l_ar,
        },
        context_len: 512,
    };
    let roofline = |q: LatencyQuery| roofline_latency(&params, q);
    let flat = |_q: LatencyQuery| l_ar;
    let mut nodes = 0;
    let start = Instant::now();
    for (i, lat) in lattices.iter().enumerate() {
        let d = if i % 2 == 0 {
            run_cycle(lat, &cfg, &roofline)?
        } else {
            run_cycle(lat, &cfg, &flat)?
        };
        nodes += d.expanded;
    }
    Ok(OverheadReport {
        cycles,
        nodes,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

pub const OVERHEAD_LIMIT_MICROS: f64 = 10.0;

/// The full bridge suite at acceptance sizes.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();

    let r = surrogate_exactness(200, seed)?;
    out.push(CheckLine {
        name: "surrogate-exactness",
        passed: r.max_abs_err <= 1e-9,
        detail: format!("{} fixtures, max |exact - sum rho| = {:.3e}, {:?}", r.fixtures, r.max_abs_err, r.elapsed),
    });

    let r = chain_structure(1000, 5000, seed)?;
    out.push(CheckLine {
        name: "chain-structure",
        passed: r.violations == 0 && r.within_fraction() >= 0.99,
        detail: format!(
            "{} samples over {} fixtures ({} constant-count trees redrawn), {} chain violations, {:.1}% within 3 se",
            r.samples,
            r.fixtures,
            r.redrawn,
            r.violations,
            100.0 * r.within_fraction()
        ),
    });

    let r = best_first_optimality(200, seed)?;
    out.push(CheckLine {
        name: "best-first-optimality",
        passed: r.max_abs_err <= 1e-12 && r.nesting_failures == 0,
        detail: format!(
            "{} lattices, {} budgets, max gap {:.3e}, {} nesting failures, {:?}",
            r.lattices, r.comparisons, r.max_abs_err, r.nesting_failures, r.elapsed
        ),
    });

    let r = concavity(1000, seed)?;
    out.push(CheckLine {
        name: "gain-concavity",
        passed: r.violations == 0,
        detail: format!("{} expansions, {} gains, {} violations", r.expansions, r.gains_checked, r.violations),
    });

    let r = controller_stopping(1000, seed)?;
    out.push(CheckLine {
        name: "controller-stopping",
        passed: r.replay_mismatches == 0 && r.cycle_mismatches == 0,
        detail: format!(
            "{} instances, {} replay and {} lattice mismatches against the exhaustive scan",
            r.instances, r.replay_mismatches, r.cycle_mismatches
        ),
    });

    let r = controller_overhead(200, seed)?;
    out.push(CheckLine {
        name: "controller-overhead",
        passed: r.micros_per_node() <= OVERHEAD_LIMIT_MICROS,
        detail: format!(
            "{:.3} us per expanded node over {} nodes in {} cycles",
            r.micros_per_node(),
            r.nodes,
            r.cycles
        ),
    });
    Ok(out)
}
