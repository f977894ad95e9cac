//! Prefix-closed draft trees, best-first expansion and the beam baseline.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lattice::{CandidateLattice, TokenId};
use crate::real::Real;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode<T: Real = f64> {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub token: Option<TokenId>,
    /// Product of the marginals along the root-to-node path; 1 at the root.
    pub path_score: T,
}

/// How a tree was produced. `marginal_gains` only accepts best-first trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Construction {
    Manual,
    BestFirst,
    Beam { width: usize, depth: usize },
}

/// Candidate tree. Node ids are insertion order, the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree<T: Real = f64> {
    nodes: Vec<TreeNode<T>>,
    children: Vec<Vec<NodeId>>,
    surrogate: T,
    construction: Construction,
}

impl<T: Real> Default for DraftTree<T> {
    fn default() -> Self {
        Self::root()
    }
}

impl<T: Real> DraftTree<T> {
    pub fn root() -> Self {
        Self {
            nodes: vec![TreeNode {
                id: 0,
                parent: None,
                depth: 0,
                token: None,
                path_score: T::one(),
            }],
            children: vec![Vec::new()],
            surrogate: T::one(),
            construction: Construction::Manual,
        }
    }

    /// Appends `token` under `parent`, where `prob` is the marginal of `token`
    /// at the child's position.
    pub fn add_child(&mut self, parent: NodeId, token: TokenId, prob: T) -> Result<NodeId> {
        let score = self
            .nodes
            .get(parent)
            .ok_or_else(|| Error::invalid(format!("unknown parent {parent}")))?
            .path_score
            * prob;
        self.push_node(parent, token, score)
    }

    fn push_node(&mut self, parent: NodeId, token: TokenId, path_score: T) -> Result<NodeId> {
        if self.child_with_token(parent, token).is_some() {
            return Err(Error::Invariant(format!(
                "duplicate token {token} under node {parent}"
            )));
        }
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            depth,
            token: Some(token),
            path_score,
        });
        self.children.push(Vec::new());
        self.children[parent].push(id);
        self.surrogate = self.surrogate + path_score;
        Ok(id)
    }

    pub fn nodes(&self) -> &[TreeNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &TreeNode<T> {
        &self.nodes[id]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn child_with_token(&self, id: NodeId, token: TokenId) -> Option<NodeId> {
        self.children[id]
            .iter()
            .copied()
            .find(|&c| self.nodes[c].token == Some(token))
    }

    /// Total node count including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Verification budget `N`: non-root node count.
    pub fn budget(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Running surrogate `sum of path scores`, root included.
    pub fn surrogate(&self) -> T {
        self.surrogate
    }

    pub fn construction(&self) -> Construction {
        self.construction
    }

    /// Token path from the root to `id` (empty for the root).
    pub fn path_tokens(&self, id: NodeId) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.nodes[id].depth);
        let mut cur = id;
        while let Some(t) = self.nodes[cur].token {
            path.push(t);
            cur = self.nodes[cur].parent.expect("non-root has parent");
        }
        path.reverse();
        path
    }

    /// The first `budget` non-root nodes in insertion order. Always prefix-closed
    /// because parents are inserted before their children.
    pub fn truncated(&self, budget: usize) -> Self {
        let keep = (budget + 1).min(self.nodes.len());
        let nodes = self.nodes[..keep].to_vec();
        let children = self.children[..keep]
            .iter()
            .map(|c| c.iter().copied().filter(|&i| i < keep).collect())
            .collect();
        let surrogate = nodes.iter().map(|n| n.path_score).sum();
        Self {
            nodes,
            children,
            surrogate,
            construction: self.construction,
        }
    }

    /// Checks every structural invariant; with a lattice, also the path-score products.
    pub fn validate(&self, lattice: Option<&CandidateLattice<T>>) -> Result<()> {
        let root = &self.nodes[0];
        if root.parent.is_some() || root.depth != 0 || root.path_score != T::one() {
            return Err(Error::Invariant("malformed root".into()));
        }
        for n in &self.nodes[1..] {
            let parent = n
                .parent
                .filter(|&p| p < n.id)
                .ok_or_else(|| Error::Invariant(format!("node {} not prefix-closed", n.id)))?;
            let p = &self.nodes[parent];
            if n.depth != p.depth + 1 {
                return Err(Error::Invariant(format!("node {} depth mismatch", n.id)));
            }
            if !(n.path_score > T::zero()) || n.path_score > p.path_score {
                return Err(Error::Invariant(format!(
                    "node {} path score {} not in (0, parent]",
                    n.id, n.path_score
                )));
            }
            let token = n
                .token
                .ok_or_else(|| Error::Invariant(format!("node {} has no token", n.id)))?;
            if self.children[parent]
                .iter()
                .filter(|&&c| self.nodes[c].token == Some(token))
                .count()
                != 1
            {
                return Err(Error::Invariant(format!("duplicate token under {parent}")));
            }
            if let Some(l) = lattice {
                let k = n.depth - 1;
                if k >= l.gamma() {
                    return Err(Error::Invariant(format!("node {} deeper than lattice", n.id)));
                }
                let q = l
                    .position(k)
                    .iter()
                    .find(|e| e.token == token)
                    .ok_or_else(|| Error::Invariant(format!("token {token} not in lattice")))?
                    .prob;
                let expect = p.path_score * q;
                if (n.path_score - expect).abs() > T::lit(1e-12).max(T::epsilon() * T::lit(8.0)) * expect {
                    return Err(Error::Invariant(format!("node {} path score drift", n.id)));
                }
            }
        }
        let sum: T = self.nodes.iter().map(|n| n.path_score).sum();
        if (sum - self.surrogate).abs() > T::tolerance() {
            return Err(Error::Invariant("running surrogate drifted".into()));
        }
        Ok(())
    }

    /// Line format `id parent depth token path_score`; the root uses `-` for parent and token.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent.map_or("-".to_string(), |p| p.to_string());
            let token = n.token.map_or("-".to_string(), |t| t.to_string());
            let _ = writeln!(out, "{} {} {} {} {}", n.id, parent, n.depth, token, n.path_score);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tree = Self::root();
        for (idx, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let loc = || format!("line {}", idx + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::parse(loc(), "expected 5 fields"));
            }
            let id: usize = f[0].parse().map_err(|_| Error::parse(loc(), "bad id"))?;
            if id == 0 {
                if f[1] != "-" || f[3] != "-" {
                    return Err(Error::parse(loc(), "root must have no parent or token"));
                }
                continue;
            }
            if id != tree.len() {
                return Err(Error::parse(loc(), "ids must be consecutive"));
            }
            let parent: usize = f[1].parse().map_err(|_| Error::parse(loc(), "bad parent"))?;
            let depth: usize = f[2].parse().map_err(|_| Error::parse(loc(), "bad depth"))?;
            let token: TokenId = f[3].parse().map_err(|_| Error::parse(loc(), "bad token"))?;
            let score: f64 = f[4].parse().map_err(|_| Error::parse(loc(), "bad path score"))?;
            if parent >= id {
                return Err(Error::parse(loc(), "parent must precede child"));
            }
            tree.push_node(parent, token, T::lit(score))?;
            if tree.nodes[id].depth != depth {
                return Err(Error::parse(loc(), "depth disagrees with parent"));
            }
        }
        tree.validate(None)?;
        Ok(tree)
    }
}

/// Frontier entry: a lattice node whose parent is already in the tree.
#[derive(Debug, Clone, Copy)]
struct Candidate<T: Real> {
    score: T,
    depth: usize,
    token: TokenId,
    parent: NodeId,
    rank: usize,
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Candidate<T> {
    // max-heap: higher score, then shallower, then lower token, then lower parent
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .expect("path scores are not NaN")
            .then_with(|| other.depth.cmp(&self.depth))
            .then_with(|| other.token.cmp(&self.token))
            .then_with(|| other.parent.cmp(&self.parent))
    }
}

/// Lazy best-first frontier: each popped node contributes at most its best
/// child and its next sibling.
#[derive(Debug, Clone)]
pub struct ExpansionFrontier<T: Real> {
    heap: BinaryHeap<Candidate<T>>,
}

impl<T: Real> ExpansionFrontier<T> {
    fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
        }
    }

    fn offer(&mut self, lattice: &CandidateLattice<T>, parent: NodeId, parent_depth: usize, parent_score: T, rank: usize) {
        let position = parent_depth;
        if position >= lattice.gamma() || rank >= lattice.top_k() {
            return;
        }
        let entry = lattice.entry(position, rank);
        if entry.prob <= T::zero() {
            return;
        }
        self.heap.push(Candidate {
            score: parent_score * entry.prob,
            depth: parent_depth + 1,
            token: entry.token,
            parent,
            rank,
        });
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Incremental best-first expansion over a lattice. Each [`step`](Self::step)
/// adds the frontier node of largest path score.
#[derive(Debug, Clone)]
pub struct BestFirstExpander<'a, T: Real> {
    lattice: &'a CandidateLattice<T>,
    tree: DraftTree<T>,
    frontier: ExpansionFrontier<T>,
}

impl<'a, T: Real> BestFirstExpander<'a, T> {
    pub fn new(lattice: &'a CandidateLattice<T>) -> Self {
        let mut tree = DraftTree::root();
        tree.construction = Construction::BestFirst;
        let mut frontier = ExpansionFrontier::new();
        frontier.offer(lattice, 0, 0, T::one(), 0);
        Self {
            lattice,
            tree,
            frontier,
        }
    }

    /// Adds one node; returns its id and path score, or `None` when the frontier is empty.
    pub fn step(&mut self) -> Option<(NodeId, T)> {
        let c = self.frontier.heap.pop()?;
        let id = self
            .tree
            .push_node(c.parent, c.token, c.score)
            .expect("frontier never offers duplicates");
        debug_assert!(c.score <= self.tree.node(c.parent).path_score);
        // highest-probability child, then next sibling
        self.frontier.offer(self.lattice, id, c.depth, c.score, 0);
        let parent_score = self.tree.node(c.parent).path_score;
        self.frontier
            .offer(self.lattice, c.parent, c.depth - 1, parent_score, c.rank + 1);
        Some((id, c.score))
    }

    pub fn tree(&self) -> &DraftTree<T> {
        &self.tree
    }

    pub fn frontier(&self) -> &ExpansionFrontier<T> {
        &self.frontier
    }

    pub fn into_tree(self) -> DraftTree<T> {
        self.tree
    }
}

/// Nested surrogate-optimal tree with `min(n_max, reachable)` non-root nodes.
pub fn best_first_expand<T: Real>(lattice: &CandidateLattice<T>, n_max: usize) -> Result<DraftTree<T>> {
    if n_max < 1 {
        return Err(Error::invalid("n_max must be >= 1"));
    }
    if lattice.gamma() == 0 || lattice.positive_width(0) == 0 {
        return Err(Error::invalid("empty lattice"));
    }
    let mut ex = BestFirstExpander::new(lattice);
    while ex.tree.budget() < n_max && ex.step().is_some() {}
    Ok(ex.into_tree())
}

/// Width-by-depth beam over cumulative path scores.
pub fn beam_expand<T: Real>(lattice: &CandidateLattice<T>, width: usize, depth: usize) -> Result<DraftTree<T>> {
    if width < 1 || depth < 1 {
        return Err(Error::invalid("beam width and depth must be >= 1"));
    }
    if depth > lattice.gamma() {
        return Err(Error::invalid(format!(
            "beam depth {depth} exceeds block size {}",
            lattice.gamma()
        )));
    }
    let mut tree = DraftTree::root();
    tree.construction = Construction::Beam { width, depth };
    let mut level: Vec<NodeId> = vec![0];
    for position in 0..depth {
        let mut cands: Vec<Candidate<T>> = level
            .iter()
            .flat_map(|&p| {
                let score = tree.node(p).path_score;
                lattice
                    .position(position)
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.prob > T::zero())
                    .map(move |(rank, e)| Candidate {
                        score: score * e.prob,
                        depth: position + 1,
                        token: e.token,
                        parent: p,
                        rank,
                    })
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        cands.truncate(width);
        level = cands
            .iter()
            .map(|c| tree.push_node(c.parent, c.token, c.score))
            .collect::<Result<_>>()?;
        if level.is_empty() {
            break;
        }
    }
    Ok(tree)
}

/// `sum of path scores` including the root.
pub fn surrogate_of<T: Real>(tree: &DraftTree<T>) -> T {
    tree.surrogate()
}

/// Per-step surrogate increments of a best-first tree; non-increasing by construction.
pub fn marginal_gains<T: Real>(tree: &DraftTree<T>) -> Result<Vec<T>> {
    if tree.construction() != Construction::BestFirst {
        return Err(Error::Contract("marginal gains need a best-first tree".into()));
    }
    let gains: Vec<T> = tree.nodes()[1..].iter().map(|n| n.path_score).collect();
    if gains.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Contract("expansion order is not non-increasing".into()));
    }
    Ok(gains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{top_k_truncate, LatticeEntry, MarginalBlock};

    const A: TokenId = 0;
    const B: TokenId = 1;
    const C: TokenId = 2;
    const D: TokenId = 3;

    /// q_1 = {a: 0.6, b: 0.3}, q_2 = {c: 0.7, d: 0.2}
    fn small_lattice() -> CandidateLattice<f64> {
        let e = |token, prob| LatticeEntry { token, prob };
        CandidateLattice::from_entries(vec![vec![e(A, 0.6), e(B, 0.3)], vec![e(C, 0.7), e(D, 0.2)]], 4).unwrap()
    }

    fn labelled(tree: &DraftTree<f64>) -> Vec<(String, f64)> {
        let name = |t: TokenId| ["a", "b", "c", "d"][t as usize];
        tree.nodes()[1..]
            .iter()
            .map(|n| {
                let label: String = tree.path_tokens(n.id).into_iter().map(name).collect();
                (label, n.path_score)
            })
            .collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn expansion_order_on_small_lattice() {
        let tree = best_first_expand(&small_lattice(), 100).unwrap();
        let expect = [("a", 0.6), ("ac", 0.42), ("b", 0.3), ("bc", 0.21), ("ad", 0.12), ("bd", 0.06)];
        let got = labelled(&tree);
        assert_eq!(got.len(), expect.len());
        for ((gl, gs), (el, es)) in got.iter().zip(expect) {
            assert_eq!(gl, el);
            assert!(close(*gs, es), "{gl}: {gs} vs {es}");
        }
        tree.validate(Some(&small_lattice())).unwrap();
    }

    #[test]
    fn single_node_budget() {
        let tree = best_first_expand(&small_lattice(), 1).unwrap();
        assert_eq!(tree.budget(), 1);
        assert!(close(surrogate_of(&tree), 1.6));
    }

    #[test]
    fn one_hot_lattice_is_a_chain() {
        let block = MarginalBlock::<f64>::one_hot(&[3, 1, 4, 1], 5).unwrap();
        let lattice = top_k_truncate(&block, 3).unwrap();
        for n in 1..7 {
            let tree = best_first_expand(&lattice, n).unwrap();
            let len = n.min(4);
            assert_eq!(tree.budget(), len);
            assert_eq!(tree.max_depth(), len);
            assert!(tree.nodes().iter().all(|n| n.path_score == 1.0));
            assert_eq!(surrogate_of(&tree), 1.0 + len as f64);
            assert_eq!(marginal_gains(&tree).unwrap(), vec![1.0; len]);
        }
    }

    #[test]
    fn gains_follow_expansion_order() {
        let tree = best_first_expand(&small_lattice(), 6).unwrap();
        let gains = marginal_gains(&tree).unwrap();
        let expect = [0.6, 0.42, 0.3, 0.21, 0.12, 0.06];
        assert!(gains.iter().zip(expect).all(|(g, e)| close(*g, e)));
    }

    #[test]
    fn gains_require_best_first() {
        let tree = beam_expand(&small_lattice(), 2, 2).unwrap();
        assert!(matches!(marginal_gains(&tree), Err(Error::Contract(_))));
    }

    #[test]
    fn beam_keeps_top_width_per_level() {
        let tree = beam_expand(&small_lattice(), 2, 2).unwrap();
        let mut labels: Vec<String> = labelled(&tree).into_iter().map(|(l, _)| l).collect();
        labels.sort();
        assert_eq!(labels, ["a", "ac", "b", "bc"]);
        assert!(close(surrogate_of(&tree), 2.53));
    }

    #[test]
    fn width_one_beam_is_greedy_chain() {
        let tree = beam_expand(&small_lattice(), 1, 2).unwrap();
        assert_eq!(labelled(&tree).into_iter().map(|(l, _)| l).collect::<Vec<_>>(), ["a", "ac"]);
    }

    #[test]
    fn exhaustive_beam_is_full_lattice() {
        let tree = beam_expand(&small_lattice(), 2, 2).unwrap();
        let full = beam_expand(&small_lattice(), 4, 2).unwrap();
        assert_eq!(full.budget(), 6);
        assert!(tree.budget() < full.budget());
        assert!(beam_expand(&small_lattice(), 2, 3).is_err());
    }

    #[test]
    fn surrogate_of_small_trees() {
        let root = DraftTree::<f64>::root();
        assert_eq!(surrogate_of(&root), 1.0);

        let mut t = DraftTree::<f64>::root();
        let a = t.add_child(0, 0, 0.5).unwrap();
        t.add_child(0, 1, 0.3).unwrap();
        t.add_child(a, 0, 0.6).unwrap();
        assert!(close(surrogate_of(&t), 2.1));

        let mut chain = DraftTree::<f64>::root();
        let n = chain.add_child(0, 7, 0.5).unwrap();
        chain.add_child(n, 8, 0.4).unwrap();
        assert!(close(surrogate_of(&chain), 1.7));
    }

    #[test]
    fn duplicate_children_rejected() {
        let mut t = DraftTree::<f64>::root();
        t.add_child(0, 4, 0.5).unwrap();
        assert!(t.add_child(0, 4, 0.2).is_err());
    }

    #[test]
    fn truncation_keeps_prefix() {
        let tree = best_first_expand(&small_lattice(), 6).unwrap();
        let t3 = tree.truncated(3);
        assert_eq!(t3, best_first_expand(&small_lattice(), 3).unwrap());
        assert!(close(t3.surrogate(), 2.32));
    }

    #[test]
    fn text_round_trip() {
        let tree = best_first_expand(&small_lattice(), 6).unwrap();
        let back = DraftTree::<f64>::from_text(&tree.to_text()).unwrap();
        assert_eq!(back.nodes(), tree.nodes());
        assert!(DraftTree::<f64>::from_text("0 - 0 - 1\n1 3 1 0 0.5\n").is_err());
        assert!(DraftTree::<f64>::from_text("0 - 0 - 1\n1 0 1 0 0.5\n2 0 1 0 0.2\n").is_err());
    }

    #[test]
    fn zero_probability_entries_are_unreachable() {
        let block = MarginalBlock::from_rows(vec![vec![0.9, 0.1, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let lattice = top_k_truncate(&block, 3).unwrap();
        assert_eq!(lattice.reachable_size(), 4);
        let tree = best_first_expand(&lattice, 100).unwrap();
        assert_eq!(tree.budget(), 4);
        tree.validate(Some(&lattice)).unwrap();
    }
}
