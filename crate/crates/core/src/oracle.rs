//! Brute-force references for the surrogate, best-first optimality and the
//! stopping rule.
//!
//! Nothing here calls into the optimized paths of `draft_tree` or
//! `controller`; trees are only read through their node table.

use rand::Rng;

use crate::draft_tree::{DraftTree, NodeId};
use crate::error::{Error, Result};
use crate::lattice::{sample_continuation, CandidateLattice, MarginalBlock, TokenId};
use crate::real::Real;

pub const MAX_OUTCOMES: u64 = 1_000_000;
pub const MAX_ENUM_GAMMA: usize = 4;
pub const MAX_ENUM_TOP_K: usize = 3;
pub const MAX_ENUM_NODES: usize = 12;

fn token_paths<T: Real>(tree: &DraftTree<T>) -> Vec<Vec<TokenId>> {
    let nodes = tree.nodes();
    let mut paths: Vec<Vec<TokenId>> = Vec::with_capacity(nodes.len());
    for n in nodes {
        let mut p = Vec::new();
        let mut cur = Some(n.id);
        while let Some(i) = cur {
            if let Some(t) = nodes[i].token {
                p.push(t);
            }
            cur = nodes[i].parent;
        }
        p.reverse();
        paths.push(p);
    }
    paths
}

/// Nodes whose token path is a prefix of `x`.
pub fn covered_nodes<T: Real>(tree: &DraftTree<T>, x: &[TokenId]) -> Vec<NodeId> {
    token_paths(tree)
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() <= x.len() && p[..] == x[..p.len()])
        .map(|(i, _)| i)
        .collect()
}

/// Covered set is ancestor-closed with at most one node per depth.
pub fn is_root_chain<T: Real>(tree: &DraftTree<T>, covered: &[NodeId]) -> bool {
    let nodes = tree.nodes();
    let mut per_depth = vec![0usize; tree.max_depth() + 1];
    for &i in covered {
        per_depth[nodes[i].depth] += 1;
        if let Some(p) = nodes[i].parent {
            if !covered.contains(&p) {
                return false;
            }
        }
    }
    per_depth.iter().all(|&c| c <= 1) && covered.contains(&0)
}

/// Exact `E[A_self]` by enumerating every continuation of the block.
pub fn exact_expected_commit<T: Real>(tree: &DraftTree<T>, block: &MarginalBlock<T>) -> Result<T> {
    let gamma = block.gamma();
    let v = block.vocab_size() as u64;
    let outcomes = (0..gamma).try_fold(1u64, |acc, _| acc.checked_mul(v).filter(|&n| n <= MAX_OUTCOMES));
    let Some(outcomes) = outcomes else {
        return Err(Error::TooLarge(format!(
            "{}^{} outcomes exceeds {MAX_OUTCOMES}",
            block.vocab_size(),
            gamma
        )));
    };
    let paths = token_paths(tree);
    if paths.iter().any(|p| p.len() > gamma) {
        return Err(Error::invalid("tree deeper than block"));
    }
    let mut x = vec![0 as TokenId; gamma];
    let mut total = T::zero();
    for _ in 0..outcomes {
        let prob = x
            .iter()
            .enumerate()
            .fold(T::one(), |acc, (k, &t)| acc * block.prob(k, t));
        let covered = paths
            .iter()
            .filter(|p| p[..] == x[..p.len()])
            .count();
        total = total + prob * T::from_count(covered);
        // mixed-radix increment
        for slot in x.iter_mut().rev() {
            *slot += 1;
            if u64::from(*slot) < v {
                break;
            }
            *slot = 0;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `E[A_self]`; fails if any sample's covered set is not a chain.
pub fn monte_carlo_commit<T: Real, R: Rng + ?Sized>(
    tree: &DraftTree<T>,
    block: &MarginalBlock<T>,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples < 1 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let x = sample_continuation(block, rng);
        let covered = covered_nodes(tree, &x);
        if !is_root_chain(tree, &covered) {
            return Err(Error::Invariant(format!(
                "covered set {covered:?} is not a root chain"
            )));
        }
        let a = covered.len() as f64;
        sum += a;
        sum_sq += a * a;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        samples: n_samples,
    })
}

#[derive(Debug, Clone, Copy)]
struct Pick<T> {
    parent: usize,
    depth: usize,
    rank: usize,
    score: T,
}

struct Enumerator<'a, T: Real> {
    lattice: &'a CandidateLattice<T>,
    max_nodes: usize,
    chosen: Vec<Pick<T>>,
    untried: Vec<Pick<T>>,
    best: Vec<Option<(T, Vec<Pick<T>>)>>,
}

impl<T: Real> Enumerator<'_, T> {
    fn push_children(&mut self, parent: usize, depth: usize, score: T) {
        if depth >= self.lattice.gamma() {
            return;
        }
        for (rank, e) in self.lattice.position(depth).iter().enumerate() {
            if e.prob > T::zero() {
                self.untried.push(Pick {
                    parent,
                    depth: depth + 1,
                    rank,
                    score: score * e.prob,
                });
            }
        }
    }

    // Each connected root subtree is generated once: a node is either taken
    // now or excluded from every later extension of this branch.
    fn extend(&mut self, start: usize, sum: T) {
        let end = self.untried.len();
        for i in start..end {
            let pick = self.untried[i];
            self.chosen.push(pick);
            let total = sum + pick.score;
            let size = self.chosen.len();
            let improves = self.best[size].as_ref().map_or(true, |(b, _)| total > *b);
            if improves {
                self.best[size] = Some((total, self.chosen.clone()));
            }
            if size < self.max_nodes {
                self.push_children(size, pick.depth, pick.score);
                self.extend(i + 1, total);
                self.untried.truncate(end);
            }
            self.chosen.pop();
        }
    }
}

fn check_enumerable<T: Real>(lattice: &CandidateLattice<T>, n: usize) -> Result<()> {
    if lattice.gamma() > MAX_ENUM_GAMMA || lattice.top_k() > MAX_ENUM_TOP_K || n > MAX_ENUM_NODES {
        return Err(Error::TooLarge(format!(
            "gamma {} / K {} / n {n} exceeds {MAX_ENUM_GAMMA} / {MAX_ENUM_TOP_K} / {MAX_ENUM_NODES}",
            lattice.gamma(),
            lattice.top_k()
        )));
    }
    Ok(())
}

fn witness_tree<T: Real>(lattice: &CandidateLattice<T>, picks: &[Pick<T>]) -> DraftTree<T> {
    let mut tree = DraftTree::root();
    for p in picks {
        let e = lattice.entry(p.depth - 1, p.rank);
        tree.add_child(p.parent, e.token, e.prob)
            .expect("enumerated subtrees are valid trees");
    }
    tree
}

/// Best surrogate and a witness for every size `1..=n_max` (non-root nodes);
/// `None` where the lattice has fewer reachable nodes.
pub fn enumerate_optimal_by_size<T: Real>(
    lattice: &CandidateLattice<T>,
    n_max: usize,
) -> Result<Vec<Option<(T, DraftTree<T>)>>> {
    check_enumerable(lattice, n_max)?;
    let mut e = Enumerator {
        lattice,
        max_nodes: n_max,
        chosen: Vec::with_capacity(n_max),
        untried: Vec::new(),
        best: vec![None; n_max + 1],
    };
    e.push_children(0, 0, T::one());
    e.extend(0, T::one());
    Ok(e.best
        .into_iter()
        .skip(1)
        .map(|b| b.map(|(s, picks)| (s, witness_tree(lattice, &picks))))
        .collect())
}

/// Maximum surrogate over all prefix-closed trees with exactly `n` non-root nodes.
pub fn enumerate_optimal_tree<T: Real>(lattice: &CandidateLattice<T>, n: usize) -> Result<(T, DraftTree<T>)> {
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    enumerate_optimal_by_size(lattice, n)?
        .pop()
        .flatten()
        .ok_or_else(|| Error::invalid(format!("lattice has fewer than {n} reachable nodes")))
}

/// Exhaustive `argmax_N surrogates[N] * l_ar / costs[N]`, 1-based, smaller `N` on ties.
pub fn scan_optimal_budget<T: Real>(surrogates: &[T], costs: &[T], l_ar: T) -> Result<usize> {
    if surrogates.is_empty() || surrogates.len() != costs.len() {
        return Err(Error::invalid("surrogates and costs must be non-empty and equal length"));
    }
    if let Some(c) = costs.iter().find(|c| !(**c > T::zero())) {
        return Err(Error::invalid(format!("non-positive cost {c}")));
    }
    let mut best = 0;
    let mut best_s = surrogates[0] * l_ar / costs[0];
    for (i, (a, c)) in surrogates.iter().zip(costs).enumerate().skip(1) {
        let s = *a * l_ar / *c;
        if s > best_s {
            best = i;
            best_s = s;
        }
    }
    Ok(best + 1)
}
