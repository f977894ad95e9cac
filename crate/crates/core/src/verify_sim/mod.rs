//! Simulated tree verification and the multi-cycle speculative decoding loop.
//!
//! Nothing here touches tensors. The target is a [`TargetRule`], latencies
//! come from the roofline model of a hardware profile, and a cycle's
//! acceptance is decided by walking the tree against the target's choices.

pub mod target;

use std::fmt;
use std::str::FromStr;

pub use target::{ContextKey, Decoding, TargetRule};

use crate::controller::{run_cycle, ControllerConfig};
use crate::cost_model::{
    roofline_latency, CalibrationFit, CostModelParams, CycleLatencies, EstimatorVariant, LatencyEstimator, LatencyQuery,
};
use crate::draft_tree::{beam_expand, best_first_expand, DraftTree, NodeId};
use crate::error::{Error, Result};
use crate::lattice::{top_k_truncate, SyntheticPair, TokenId};

/// Flattened tree ready for one verification pass.
///
/// Index 0 is the root, i.e. the position that produces the bonus token;
/// the rest follow expansion order, so every parent precedes its children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedTree {
    tokens: Vec<Option<TokenId>>,
    position_ids: Vec<usize>,
    parents: Vec<Option<usize>>,
    prefix_len: usize,
    words: usize,
    ancestors: Vec<u64>,
}

impl LinearizedTree {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn tokens(&self) -> &[Option<TokenId>] {
        &self.tokens
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.position_ids
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Whether tree node `i` attends to tree node `j`.
    pub fn tree_mask(&self, i: usize, j: usize) -> bool {
        self.ancestors[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    /// Attention over `prefix ++ tree`; `i` indexes tree nodes, `j` the full sequence.
    pub fn mask(&self, i: usize, j: usize) -> bool {
        j < self.prefix_len || self.tree_mask(i, j - self.prefix_len)
    }

    /// Full boolean mask, one row per tree node.
    pub fn dense_mask(&self) -> Vec<Vec<bool>> {
        (0..self.len())
            .map(|i| (0..self.prefix_len + self.len()).map(|j| self.mask(i, j)).collect())
            .collect()
    }

    /// Tree nodes visible from `i`, ascending (hence root first, `i` last).
    pub fn visible(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.ancestors[i * self.words..(i + 1) * self.words];
        row.iter().enumerate().flat_map(|(w, &bits)| {
            let mut bits = bits;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + b)
            })
        })
    }
}

pub fn linearize<T: crate::real::Real>(tree: &DraftTree<T>, prefix_len: usize) -> LinearizedTree {
    let n = tree.len();
    let words = n.div_ceil(64);
    let mut ancestors = vec![0u64; n * words];
    let mut parents = Vec::with_capacity(n);
    for node in tree.nodes() {
        let i = node.id;
        if let Some(p) = node.parent {
            let (before, row) = ancestors.split_at_mut(i * words);
            row[..words].copy_from_slice(&before[p * words..(p + 1) * words]);
        }
        ancestors[i * words + i / 64] |= 1 << (i % 64);
        parents.push(node.parent);
    }
    LinearizedTree {
        tokens: tree.nodes().iter().map(|n| n.token).collect(),
        position_ids: tree.nodes().iter().map(|n| n.depth).collect(),
        parents,
        prefix_len,
        words,
        ancestors,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceRecord {
    /// Node ids from the root down to the deepest accepted node.
    pub accepted_path: Vec<NodeId>,
    /// Draft tokens along the accepted path (root excluded).
    pub accepted_tokens: Vec<TokenId>,
    pub bonus_token: TokenId,
}

impl AcceptanceRecord {
    /// Committed tokens this cycle: accepted drafts plus the bonus.
    pub fn accepted_len(&self) -> usize {
        self.accepted_tokens.len() + 1
    }
}

/// Scores every node against the target in one pass and keeps the longest
/// root chain the target itself would have produced.
pub fn verify_tree(lin: &LinearizedTree, context: ContextKey, target: &TargetRule, decoding: Decoding) -> AcceptanceRecord {
    // target prediction at every node, from the prefix plus the node's visible tokens
    let predictions: Vec<TokenId> = (0..lin.len())
        .map(|i| {
            let ctx = lin
                .visible(i)
                .filter_map(|j| lin.tokens[j])
                .fold(context, ContextKey::push);
            target.choose(ctx, decoding)
        })
        .collect();

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); lin.len()];
    for (i, p) in lin.parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }

    let mut path = vec![0];
    let mut tokens = Vec::new();
    let mut cur = 0;
    while let Some(&next) = children[cur].iter().find(|&&c| lin.tokens[c] == Some(predictions[cur])) {
        path.push(next);
        tokens.push(predictions[cur]);
        cur = next;
    }
    AcceptanceRecord {
        accepted_path: path,
        accepted_tokens: tokens,
        bonus_token: predictions[cur],
    }
}

/// The target's committed context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimCache {
    tokens: Vec<TokenId>,
    key: ContextKey,
}

impl SimCache {
    pub fn new(prompt: &[TokenId]) -> Self {
        Self {
            tokens: prompt.to_vec(),
            key: ContextKey::empty().extend(prompt),
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn key(&self) -> ContextKey {
        self.key
    }
}

/// Keeps only the accepted chain and the bonus token.
pub fn commit<T: crate::real::Real>(cache: &SimCache, rec: &AcceptanceRecord, tree: &DraftTree<T>) -> Result<SimCache> {
    let path = &rec.accepted_path;
    if path.first() != Some(&0) || path.len() != rec.accepted_tokens.len() + 1 {
        return Err(Error::Contract("acceptance record is not a root chain".into()));
    }
    for (k, w) in path.windows(2).enumerate() {
        let ok = w[1] < tree.len()
            && tree.node(w[1]).parent == Some(w[0])
            && tree.node(w[1]).token == Some(rec.accepted_tokens[k]);
        if !ok {
            return Err(Error::Contract(format!("accepted node {} does not match the tree", w[1])));
        }
    }
    let mut next = cache.clone();
    for &t in rec.accepted_tokens.iter().chain(std::iter::once(&rec.bonus_token)) {
        next.tokens.push(t);
        next.key = next.key.push(t);
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Controller-chosen budget every cycle.
    Adaptive,
    /// Best-first tree with exactly `N` drafted nodes (fewer if the lattice runs out).
    FixedN(usize),
    /// Per-position argmax chain over the whole block.
    GreedyChain,
    Beam { width: usize, depth: usize },
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Adaptive => write!(f, "adaptive"),
            Policy::FixedN(n) => write!(f, "fixed-{n}"),
            Policy::GreedyChain => write!(f, "greedy-chain"),
            Policy::Beam { width, depth } => write!(f, "beam-{width}x{depth}"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("unknown policy `{s}`"));
        match s {
            "adaptive" => Ok(Policy::Adaptive),
            "greedy-chain" | "chain" => Ok(Policy::GreedyChain),
            _ => {
                if let Some(n) = s.strip_prefix("fixed-") {
                    let n: usize = n.parse().map_err(|_| bad())?;
                    if n == 0 {
                        return Err(Error::invalid("fixed budget must be >= 1"));
                    }
                    Ok(Policy::FixedN(n))
                } else if let Some(wd) = s.strip_prefix("beam-") {
                    let (w, d) = wd.split_once('x').ok_or_else(bad)?;
                    let width = w.parse().map_err(|_| bad())?;
                    let depth = d.parse().map_err(|_| bad())?;
                    if width == 0 || depth == 0 {
                        return Err(Error::invalid("beam width and depth must be >= 1"));
                    }
                    Ok(Policy::Beam { width, depth })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Ground-truth verification latency: `slope * roofline + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimClock {
    pub params: CostModelParams<f64>,
    pub slope: f64,
    pub intercept: f64,
}

impl SimClock {
    pub fn roofline(params: CostModelParams<f64>) -> Self {
        Self {
            params,
            slope: 1.0,
            intercept: 0.0,
        }
    }

    pub fn verify_latency(&self, q: LatencyQuery) -> f64 {
        self.slope * roofline_latency(&self.params, q) + self.intercept
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub policy: Policy,
    pub n_max: usize,
    pub top_k: usize,
    /// Stop once at least this many tokens have been committed after the prompt.
    pub run_length: usize,
    pub prompt: Vec<TokenId>,
    pub decoding: Decoding,
    pub clock: SimClock,
    pub t_draft: f64,
    pub t_aux: f64,
    pub l_ar: f64,
    pub estimator: EstimatorVariant,
    pub fit: CalibrationFit<f64>,
    pub ema_alpha: f64,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 || self.top_k < 1 || self.run_length < 1 {
            return Err(Error::invalid("n_max, top_k and run_length must be >= 1"));
        }
        self.clock.params.validate()?;
        self.latencies().validate()
    }

    pub fn latencies(&self) -> CycleLatencies<f64> {
        CycleLatencies {
            t_draft: self.t_draft,
            t_aux: self.t_aux,
            l_ar: self.l_ar,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub policy: Policy,
    /// Drafted nodes sent to verification.
    pub n: usize,
    pub accepted_len: usize,
    pub surrogate: f64,
    pub t_draft: f64,
    pub t_verify: f64,
    pub t_aux: f64,
    pub l_ar: f64,
    pub cum_tokens: usize,
    pub cum_time: f64,
}

impl CycleRecord {
    pub fn cycle_time(&self) -> f64 {
        self.t_draft + self.t_verify + self.t_aux
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub records: Vec<CycleRecord>,
    /// Prompt followed by every committed token.
    pub tokens: Vec<TokenId>,
}

/// Builds this cycle's tree for a fixed-topology policy.
pub fn plan_static_tree(policy: Policy, lattice: &crate::lattice::CandidateLattice<f64>) -> Result<DraftTree<f64>> {
    match policy {
        Policy::FixedN(n) => best_first_expand(lattice, n),
        Policy::GreedyChain => beam_expand(lattice, 1, lattice.gamma()),
        Policy::Beam { width, depth } => beam_expand(lattice, width, depth.min(lattice.gamma())),
        Policy::Adaptive => Err(Error::invalid("adaptive trees come from the controller")),
    }
}

pub fn decode(pair: &SyntheticPair, cfg: &DecodeConfig) -> Result<DecodeOutcome> {
    cfg.validate()?;
    let mut estimator = LatencyEstimator::new(cfg.estimator, cfg.clock.params.clone(), cfg.fit, cfg.ema_alpha)?;
    let mut cache = SimCache::new(&cfg.prompt);
    let mut records = Vec::new();
    let (mut cum_tokens, mut cum_time) = (0usize, 0.0f64);
    while cum_tokens < cfg.run_length {
        let block = pair.draft(cache.key(), cfg.decoding);
        let lattice = top_k_truncate(&block, cfg.top_k)?;
        let tree = match cfg.policy {
            Policy::Adaptive => {
                let ccfg = ControllerConfig {
                    n_max: cfg.n_max,
                    latencies: cfg.latencies(),
                    context_len: cache.len(),
                };
                run_cycle(&lattice, &ccfg, &estimator)?.tree
            }
            p => plan_static_tree(p, &lattice)?,
        };
        let lin = linearize(&tree, cache.len());
        let rec = verify_tree(&lin, cache.key(), pair.target(), cfg.decoding);
        let q = LatencyQuery::for_budget(tree.budget(), cache.len());
        let t_verify = cfg.clock.verify_latency(q);
        estimator.observe(q, t_verify)?;
        cache = commit(&cache, &rec, &tree)?;

        cum_tokens += rec.accepted_len();
        cum_time += cfg.t_draft + t_verify + cfg.t_aux;
        records.push(CycleRecord {
            cycle: records.len(),
            policy: cfg.policy,
            n: tree.budget(),
            accepted_len: rec.accepted_len(),
            surrogate: tree.surrogate(),
            t_draft: cfg.t_draft,
            t_verify,
            t_aux: cfg.t_aux,
            l_ar: cfg.l_ar,
            cum_tokens,
            cum_time,
        });
    }
    Ok(DecodeOutcome {
        records,
        tokens: cache.tokens,
    })
}

/// Committed tokens times `L_AR` over total simulated time.
pub fn realized_speedup(records: &[CycleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no cycle records"));
    }
    let gained: f64 = records.iter().map(|r| r.accepted_len as f64 * r.l_ar).sum();
    let spent: f64 = records.iter().map(CycleRecord::cycle_time).sum();
    if !(spent > 0.0) {
        return Err(Error::invalid("total cycle time must be positive"));
    }
    Ok(gained / spent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{MarginalBlock, SyntheticPairConfig};

    fn chain(depth: usize) -> DraftTree<f64> {
        let mut t = DraftTree::root();
        for d in 0..depth {
            t.add_child(d, d as TokenId, 1.0).unwrap();
        }
        t
    }

    fn six_node() -> DraftTree<f64> {
        // best-first order over (a .6, b .3) x (c .7, d .2): a, ac, b, bc, ad, bd
        let mut t = DraftTree::root();
        let a = t.add_child(0, 0, 0.6).unwrap();
        t.add_child(a, 2, 0.7).unwrap();
        let b = t.add_child(0, 1, 0.3).unwrap();
        t.add_child(b, 2, 0.7).unwrap();
        t.add_child(a, 3, 0.2).unwrap();
        t.add_child(b, 3, 0.2).unwrap();
        t
    }

    fn ancestor_walk(tree: &DraftTree<f64>, i: usize, j: usize) -> bool {
        let mut cur = Some(i);
        while let Some(c) = cur {
            if c == j {
                return true;
            }
            cur = tree.node(c).parent;
        }
        false
    }

    #[test]
    fn chain_mask_is_lower_triangular() {
        let lin = linearize(&chain(3), 2);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(lin.tree_mask(i, j), j <= i);
            }
            assert!(lin.mask(i, 0) && lin.mask(i, 1));
        }
        assert_eq!(lin.position_ids(), &[0, 1, 2, 3]);
    }

    #[test]
    fn siblings_do_not_see_each_other() {
        let mut t = DraftTree::<f64>::root();
        t.add_child(0, 4, 0.5).unwrap();
        t.add_child(0, 5, 0.5).unwrap();
        let m = linearize(&t, 3).dense_mask();
        assert_eq!(m[1], vec![true, true, true, true, true, false]);
        assert_eq!(m[2], vec![true, true, true, true, false, true]);
    }

    #[test]
    fn six_node_mask_matches_parent_walk() {
        let t = six_node();
        let lin = linearize(&t, 5);
        for i in 0..t.len() {
            for j in 0..5 + t.len() {
                let want = j < 5 || ancestor_walk(&t, i, j - 5);
                assert_eq!(lin.mask(i, j), want, "cell ({i}, {j})");
            }
        }
    }

    #[test]
    fn wide_tree_mask_crosses_word_boundary() {
        let mut t = DraftTree::<f64>::root();
        let mut last = 0;
        for k in 0..70 {
            last = t.add_child(if k % 2 == 0 { last } else { 0 }, k as TokenId, 0.5).unwrap();
        }
        let lin = linearize(&t, 0);
        for i in 0..t.len() {
            for j in 0..t.len() {
                assert_eq!(lin.tree_mask(i, j), ancestor_walk(&t, i, j));
            }
        }
    }

    fn target_path(target: &TargetRule, ctx: ContextKey, n: usize) -> Vec<TokenId> {
        let mut k = ctx;
        (0..n)
            .map(|_| {
                let t = target.choose(k, Decoding::Greedy);
                k = k.push(t);
                t
            })
            .collect()
    }

    #[test]
    fn mismatch_still_commits_bonus() {
        let target = TargetRule::new(1, 8);
        let ctx = ContextKey::empty();
        let want = target.choose(ctx, Decoding::Greedy);
        let mut t = DraftTree::<f64>::root();
        t.add_child(0, (want + 1) % 8, 1.0).unwrap();
        let rec = verify_tree(&linearize(&t, 0), ctx, &target, Decoding::Greedy);
        assert_eq!(rec.accepted_len(), 1);
        assert_eq!(rec.bonus_token, want);
        assert_eq!(rec.accepted_path, vec![0]);
    }

    #[test]
    fn full_chain_accepted() {
        let target = TargetRule::new(2, 16);
        let ctx = ContextKey::empty().push(3);
        let path = target_path(&target, ctx, 5);
        let block = MarginalBlock::one_hot(&path[..4], 16).unwrap();
        let tree = plan_static_tree(Policy::GreedyChain, &top_k_truncate(&block, 1).unwrap()).unwrap();
        let rec = verify_tree(&linearize(&tree, 1), ctx, &target, Decoding::Greedy);
        assert_eq!(rec.accepted_len(), 5);
        assert_eq!(rec.accepted_tokens, path[..4]);
        assert_eq!(rec.bonus_token, path[4]);
    }

    #[test]
    fn picks_the_target_branch() {
        // find a target whose greedy path from the empty context is (b, c) = (1, 2) over V = 4
        let ctx = ContextKey::empty();
        let target = (0..10_000)
            .map(|s| TargetRule::new(s, 4))
            .find(|t| target_path(t, ctx, 2) == [1, 2])
            .unwrap();
        let t = six_node();
        let rec = verify_tree(&linearize(&t, 0), ctx, &target, Decoding::Greedy);
        assert_eq!(rec.accepted_path, vec![0, 3, 4]);
        assert_eq!(rec.accepted_len(), 3);
        let cache = commit(&SimCache::new(&[]), &rec, &t).unwrap();
        assert_eq!(cache.tokens(), target.ar_decode(&[], 3, Decoding::Greedy).as_slice());
    }

    #[test]
    fn commit_checks_the_record() {
        let t = six_node();
        let bogus = AcceptanceRecord {
            accepted_path: vec![0, 2],
            accepted_tokens: vec![2],
            bonus_token: 0,
        };
        assert!(commit(&SimCache::new(&[7]), &bogus, &t).is_err());
        let bonus_only = AcceptanceRecord {
            accepted_path: vec![0],
            accepted_tokens: vec![],
            bonus_token: 3,
        };
        let c = commit(&SimCache::new(&[7]), &bonus_only, &t).unwrap();
        assert_eq!(c.tokens(), &[7, 3]);
        assert_eq!(c.key(), ContextKey::empty().extend(&[7, 3]));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [
            Policy::Adaptive,
            Policy::FixedN(64),
            Policy::GreedyChain,
            Policy::Beam { width: 4, depth: 15 },
        ] {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!("fixed-0".parse::<Policy>().is_err());
        assert!("wide".parse::<Policy>().is_err());
    }

    fn record(accepted_len: usize, time: f64) -> CycleRecord {
        CycleRecord {
            cycle: 0,
            policy: Policy::Adaptive,
            n: 1,
            accepted_len,
            surrogate: 1.0,
            t_draft: 0.0,
            t_verify: time,
            t_aux: 0.0,
            l_ar: 1.0,
            cum_tokens: 0,
            cum_time: 0.0,
        }
    }

    #[test]
    fn speedup_arithmetic() {
        assert_eq!(realized_speedup(&vec![record(1, 1.0); 3]).unwrap(), 1.0);
        assert_eq!(realized_speedup(&vec![record(5, 2.0); 4]).unwrap(), 2.5);
        assert!(realized_speedup(&[]).is_err());
    }

    fn decode_cfg(policy: Policy) -> DecodeConfig {
        let params = CostModelParams::preset("crossover").unwrap();
        let l_ar = roofline_latency(&params, LatencyQuery::new(1, 64).unwrap());
        DecodeConfig {
            policy,
            n_max: 256,
            top_k: 4,
            run_length: 200,
            prompt: (0..64).collect(),
            decoding: Decoding::Greedy,
            clock: SimClock::roofline(params),
            t_draft: 0.1 * l_ar,
            t_aux: 0.0,
            l_ar,
            estimator: EstimatorVariant::EmaCalib,
            fit: CalibrationFit::identity(),
            ema_alpha: 0.1,
        }
    }

    #[test]
    fn one_hot_drafter_commits_full_blocks() {
        let pair = SyntheticPair::new(SyntheticPairConfig {
            alignment: 1.0,
            gamma: 8,
            ..Default::default()
        })
        .unwrap();
        for policy in [Policy::Adaptive, Policy::GreedyChain, Policy::FixedN(16)] {
            let out = decode(&pair, &decode_cfg(policy)).unwrap();
            assert!(out.records.iter().all(|r| r.accepted_len == 9), "{policy}");
        }
    }

    #[test]
    fn decode_reproduces_ar_output() {
        let pair = SyntheticPair::new(SyntheticPairConfig {
            gamma: 8,
            ..Default::default()
        })
        .unwrap();
        for policy in [
            Policy::Adaptive,
            Policy::FixedN(32),
            Policy::GreedyChain,
            Policy::Beam { width: 2, depth: 6 },
        ] {
            let cfg = decode_cfg(policy);
            let out = decode(&pair, &cfg).unwrap();
            let gen = out.tokens.len() - cfg.prompt.len();
            assert!(gen >= cfg.run_length);
            assert_eq!(out.tokens, pair.target().ar_decode(&cfg.prompt, gen, Decoding::Greedy), "{policy}");
            assert_eq!(out.records.last().unwrap().cum_tokens, gen);
            assert!(out.records.iter().all(|r| r.accepted_len >= 1));
        }
    }
}
