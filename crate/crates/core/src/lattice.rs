//! Drafter marginals and the top-K candidate lattice derived from them.
//!
//! A block-diffusion drafter emits one distribution per future position in a
//! single pass. Positions are indexed from 0 here; a tree node at depth `d`
//! draws its token from position `d - 1`.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

pub mod synthetic;

pub use synthetic::{generate_synthetic_pair, SyntheticPair, SyntheticPairConfig};

pub type TokenId = u32;

/// Position-wise token distributions `q_1..q_gamma` over a vocabulary of `vocab_size` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBlock<T: Real = f64> {
    gamma: usize,
    vocab_size: usize,
    probs: Vec<T>,
}

impl<T: Real> MarginalBlock<T> {
    /// Builds a block from a row-major `gamma x vocab_size` table.
    pub fn new(gamma: usize, vocab_size: usize, probs: Vec<T>) -> Result<Self> {
        if gamma < 1 {
            return Err(Error::invalid("gamma must be >= 1"));
        }
        if vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2"));
        }
        if probs.len() != gamma * vocab_size {
            return Err(Error::invalid(format!(
                "expected {} probabilities, got {}",
                gamma * vocab_size,
                probs.len()
            )));
        }
        for (k, row) in probs.chunks(vocab_size).enumerate() {
            if let Some(p) = row.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
                return Err(Error::Invariant(format!(
                    "position {k}: probability {p} outside [0, 1]"
                )));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > T::tolerance() {
                return Err(Error::Invariant(format!(
                    "position {k}: row sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self {
            gamma,
            vocab_size,
            probs,
        })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let gamma = rows.len();
        let vocab_size = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vocab_size) {
            return Err(Error::invalid("ragged marginal rows"));
        }
        Self::new(gamma, vocab_size, rows.into_iter().flatten().collect())
    }

    /// Every position puts all mass on the given token.
    pub fn one_hot(tokens: &[TokenId], vocab_size: usize) -> Result<Self> {
        let mut probs = vec![T::zero(); tokens.len() * vocab_size];
        for (k, &t) in tokens.iter().enumerate() {
            if t as usize >= vocab_size {
                return Err(Error::invalid(format!("token {t} outside vocabulary")));
            }
            probs[k * vocab_size + t as usize] = T::one();
        }
        Self::new(tokens.len(), vocab_size, probs)
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, position: usize) -> &[T] {
        &self.probs[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn prob(&self, position: usize, token: TokenId) -> T {
        self.row(position)[token as usize]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.probs.chunks(self.vocab_size)
    }

    /// Highest-probability token at a position, lowest id on ties.
    pub fn argmax(&self, position: usize) -> TokenId {
        let row = self.row(position);
        let mut best = 0;
        for (v, p) in row.iter().enumerate().skip(1) {
            if *p > row[best] {
                best = v;
            }
        }
        best as TokenId
    }

    /// Plain-text form: `gamma vocab_size` header, then one row of decimals per position.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.gamma, self.vocab_size);
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "missing header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("header", e.to_string()))?;
        let [gamma, vocab_size] = dims[..] else {
            return Err(Error::parse("header", "expected `gamma vocab_size`"));
        };
        let mut probs = Vec::with_capacity(gamma * vocab_size);
        for (idx, line) in lines {
            let before = probs.len();
            for field in line.split_whitespace() {
                let p: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(format!("line {}", idx + 1), format!("bad number `{field}`")))?;
                probs.push(T::lit(p));
            }
            if probs.len() - before != vocab_size {
                return Err(Error::parse(
                    format!("line {}", idx + 1),
                    format!("expected {vocab_size} values"),
                ));
            }
        }
        Self::new(gamma, vocab_size, probs)
    }
}

/// Draws `X_k ~ q_k` independently for every position.
pub fn sample_continuation<T: Real, R: Rng + ?Sized>(
    block: &MarginalBlock<T>,
    rng: &mut R,
) -> Vec<TokenId> {
    block
        .rows()
        .map(|row| {
            let u = T::lit(rng.random::<f64>());
            let mut acc = T::zero();
            let mut last_positive = 0;
            for (v, &p) in row.iter().enumerate() {
                if p > T::zero() {
                    last_positive = v;
                    acc = acc + p;
                    if u < acc {
                        return v as TokenId;
                    }
                }
            }
            // rounding left the cumulative sum just below u
            last_positive as TokenId
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeEntry<T: Real = f64> {
    pub token: TokenId,
    pub prob: T,
}

/// Top-K tokens per position, sorted by probability descending with ties
/// broken by ascending token id.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLattice<T: Real = f64> {
    top_k: usize,
    vocab_size: usize,
    entries: Vec<Vec<LatticeEntry<T>>>,
}

fn rank_order<T: Real>(a: &LatticeEntry<T>, b: &LatticeEntry<T>) -> std::cmp::Ordering {
    b.prob
        .partial_cmp(&a.prob)
        .expect("probabilities are not NaN")
        .then(a.token.cmp(&b.token))
}

impl<T: Real> CandidateLattice<T> {
    /// Builds a lattice from explicit per-position entries, checking the rank order.
    pub fn from_entries(entries: Vec<Vec<LatticeEntry<T>>>, vocab_size: usize) -> Result<Self> {
        let top_k = entries.first().map_or(0, Vec::len);
        if entries.is_empty() || top_k == 0 {
            return Err(Error::invalid("empty lattice"));
        }
        if top_k > vocab_size {
            return Err(Error::invalid("top_k exceeds vocabulary"));
        }
        for (k, row) in entries.iter().enumerate() {
            if row.len() != top_k {
                return Err(Error::invalid(format!("position {k} has {} entries", row.len())));
            }
            for e in row {
                if e.token as usize >= vocab_size || !(e.prob >= T::zero() && e.prob <= T::one()) {
                    return Err(Error::invalid(format!("position {k}: bad entry {e:?}")));
                }
            }
            if row
                .windows(2)
                .any(|w| rank_order(&w[0], &w[1]) != std::cmp::Ordering::Less)
            {
                return Err(Error::invalid(format!("position {k} is not rank-ordered")));
            }
        }
        Ok(Self {
            top_k,
            vocab_size,
            entries,
        })
    }

    pub fn gamma(&self) -> usize {
        self.entries.len()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn position(&self, position: usize) -> &[LatticeEntry<T>] {
        &self.entries[position]
    }

    pub fn entry(&self, position: usize, rank: usize) -> LatticeEntry<T> {
        self.entries[position][rank]
    }

    /// Re-truncates to `k <= top_k`; equal in content to truncating the source block directly.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k < 1 || k > self.top_k {
            return Err(Error::invalid(format!("k = {k} outside 1..={}", self.top_k)));
        }
        Ok(Self {
            top_k: k,
            vocab_size: self.vocab_size,
            entries: self.entries.iter().map(|r| r[..k].to_vec()).collect(),
        })
    }

    /// Number of strictly positive entries per position.
    pub fn positive_width(&self, position: usize) -> usize {
        self.entries[position]
            .iter()
            .take_while(|e| e.prob > T::zero())
            .count()
    }

    /// Count of lattice nodes with nonzero path score (saturating).
    pub fn reachable_size(&self) -> u64 {
        let mut level = 1u64;
        let mut total = 0u64;
        for k in 0..self.gamma() {
            level = level.saturating_mul(self.positive_width(k) as u64);
            total = total.saturating_add(level);
        }
        total
    }
}

/// Keeps the `k` most probable tokens of every position.
pub fn top_k_truncate<T: Real>(block: &MarginalBlock<T>, k: usize) -> Result<CandidateLattice<T>> {
    if k < 1 || k > block.vocab_size() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            block.vocab_size()
        )));
    }
    let entries = block
        .rows()
        .map(|row| {
            let mut all: Vec<LatticeEntry<T>> = row
                .iter()
                .enumerate()
                .map(|(v, &prob)| LatticeEntry {
                    token: v as TokenId,
                    prob,
                })
                .collect();
            if k < all.len() {
                all.select_nth_unstable_by(k - 1, rank_order);
                all.truncate(k);
            }
            all.sort_by(rank_order);
            all
        })
        .collect();
    Ok(CandidateLattice {
        top_k: k,
        vocab_size: block.vocab_size(),
        entries,
    })
}
