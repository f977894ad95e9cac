//! Synthetic target model: a deterministic next-token rule over committed histories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::TokenId;

pub(crate) fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix2(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b))
}

/// Rolling digest of a committed token history.
///
/// Two histories with equal digests are treated as the same context; the
/// target and the drafter are pure functions of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContextKey(u64);

impl ContextKey {
    pub fn empty() -> Self {
        ContextKey(0x5EED_0F_C0_47E7)
    }

    pub fn push(self, token: TokenId) -> Self {
        ContextKey(mix2(self.0, u64::from(token) ^ 0xA5A5_0000_0000))
    }

    pub fn extend(self, tokens: &[TokenId]) -> Self {
        tokens.iter().fold(self, |k, &t| k.push(t))
    }

    pub fn digest(self) -> u64 {
        self.0
    }
}

/// How the target turns its next-token distribution into a token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Sampled at `temperature > 0`. One draw per context, reproducible.
    Sampled { temperature: f64 },
}

impl Decoding {
    pub fn from_temperature(temperature: f64) -> Result<Self> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature {temperature} must be >= 0")));
        }
        Ok(if temperature == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Sampled { temperature }
        })
    }

    pub fn temperature(self) -> f64 {
        match self {
            Decoding::Greedy => 0.0,
            Decoding::Sampled { temperature } => temperature,
        }
    }
}

/// Stand-in for the target LLM.
///
/// Its logits at a context are a seeded function of the context digest: the
/// greedy token carries `peak_logit`, all other tokens standard-normal logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRule {
    seed: u64,
    vocab_size: usize,
    peak_logit: f64,
}

impl TargetRule {
    pub fn new(seed: u64, vocab_size: usize) -> Self {
        Self {
            seed,
            vocab_size,
            peak_logit: 3.0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn greedy(&self, ctx: ContextKey) -> TokenId {
        (mix2(self.seed, ctx.digest()) % self.vocab_size as u64) as TokenId
    }

    /// Target distribution at `ctx` under the given temperature (> 0).
    pub fn distribution(&self, ctx: ContextKey, temperature: f64) -> Vec<f64> {
        let greedy = self.greedy(ctx) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(self.seed ^ 0x10_6175, ctx.digest()));
        let logits: Vec<f64> = (0..self.vocab_size)
            .map(|v| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                if v == greedy {
                    self.peak_logit
                } else {
                    z.min(self.peak_logit - 1e-3)
                }
            })
            .collect();
        let m = self.peak_logit / temperature;
        let w: Vec<f64> = logits.iter().map(|l| (l / temperature - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    /// The token the target commits after `ctx`.
    pub fn choose(&self, ctx: ContextKey, decoding: Decoding) -> TokenId {
        match decoding {
            Decoding::Greedy => self.greedy(ctx),
            Decoding::Sampled { temperature } => {
                let p = self.distribution(ctx, temperature);
                let mut rng = ChaCha8Rng::seed_from_u64(mix2(
                    self.seed ^ 0x5A_3F1E,
                    ctx.digest() ^ temperature.to_bits(),
                ));
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, q) in p.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        return v as TokenId;
                    }
                }
                (self.vocab_size - 1) as TokenId
            }
        }
    }

    /// Plain autoregressive decoding: `n` tokens after `prefix`.
    pub fn ar_decode(&self, prefix: &[TokenId], n: usize, decoding: Decoding) -> Vec<TokenId> {
        let mut ctx = ContextKey::empty().extend(prefix);
        let mut out = prefix.to_vec();
        for _ in 0..n {
            let t = self.choose(ctx, decoding);
            out.push(t);
            ctx = ctx.push(t);
        }
        out
    }
}
