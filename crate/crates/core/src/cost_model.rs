//! Roofline latency predictor for one verification pass, plus the static,
//! EMA and EMA+calibration estimators layered on top of it.
//!
//! FLOP and byte counts are integers and are computed exactly in `u128`; only
//! the conversion to seconds goes through the scalar type.

use std::path::Path;

use num_traits::Num;

use crate::error::{Error, Result};
use crate::real::Real;

/// Transformer dimensions and hardware peaks of the verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModelParams<T: Real = f64> {
    /// `L`
    pub layers: u64,
    /// `h`
    pub hidden: u64,
    /// `n_q`
    pub query_heads: u64,
    /// `n_kv`
    pub kv_heads: u64,
    /// `d`
    pub head_dim: u64,
    /// `h_ffn`
    pub ffn: u64,
    /// `V`
    pub vocab: u64,
    /// `bp`
    pub bytes_per_elem: u64,
    /// Operations per second.
    pub peak_flops: T,
    /// Bytes per second.
    pub bandwidth: T,
}

impl<T: Real> CostModelParams<T> {
    pub fn h_q(&self) -> u64 {
        self.query_heads * self.head_dim
    }

    pub fn h_kv(&self) -> u64 {
        self.kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("L", self.layers),
            ("h", self.hidden),
            ("n_q", self.query_heads),
            ("n_kv", self.kv_heads),
            ("d", self.head_dim),
            ("h_ffn", self.ffn),
            ("V", self.vocab),
            ("bp", self.bytes_per_elem),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.peak_flops > T::zero()) || !(self.bandwidth > T::zero()) {
            return Err(Error::invalid("peak_flops and bandwidth must be positive"));
        }
        Ok(())
    }

    /// Dense 8B-class decoder (36 layers, GQA 32/8, 152k vocabulary, bf16).
    pub fn reference_8b(peak_flops: T, bandwidth: T) -> Self {
        Self {
            layers: 36,
            hidden: 4096,
            query_heads: 32,
            kv_heads: 8,
            head_dim: 128,
            ffn: 12288,
            vocab: 151_936,
            bytes_per_elem: 2,
            peak_flops,
            bandwidth,
        }
    }

    /// Named synthetic hardware profiles used by the sweeps.
    pub fn preset(name: &str) -> Result<Self> {
        let (flops, bw) = match name {
            // compute and memory time cross near s = 150
            "crossover" => (312e12, 2.0e12),
            // compute dominates beyond s ~ 20
            "compute-bound" => (40e12, 2.0e12),
            // memory dominates up to s ~ 1000
            "memory-bound" => (2000e12, 2.0e12),
            other => return Err(Error::invalid(format!("unknown profile preset `{other}`"))),
        };
        Ok(Self::reference_8b(T::lit(flops), T::lit(bw)))
    }

    /// Flat `key = value` profile keyed by `L h n_q n_kv d h_ffn V bp peak_flops bandwidth`.
    pub fn from_profile_text(text: &str) -> Result<Self> {
        let mut fields: [Option<f64>; 10] = [None; 10];
        const KEYS: [&str; 10] = ["L", "h", "n_q", "n_kv", "d", "h_ffn", "V", "bp", "peak_flops", "bandwidth"];
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("line {}", idx + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&loc, "expected `key = value`"))?;
            let key = key.trim();
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::parse(&loc, format!("unknown key `{key}`")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad value for `{key}`")))?;
            fields[slot] = Some(v);
        }
        let get = |i: usize| fields[i].ok_or_else(|| Error::parse("profile", format!("missing key `{}`", KEYS[i])));
        let int = |i: usize| -> Result<u64> {
            let v = get(i)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::parse("profile", format!("`{}` must be a positive integer", KEYS[i])));
            }
            Ok(v as u64)
        };
        let params = Self {
            layers: int(0)?,
            hidden: int(1)?,
            query_heads: int(2)?,
            kv_heads: int(3)?,
            head_dim: int(4)?,
            ffn: int(5)?,
            vocab: int(6)?,
            bytes_per_elem: int(7)?,
            peak_flops: T::lit(get(8)?),
            bandwidth: T::lit(get(9)?),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_profile_text(&text)
    }

    pub fn to_profile_text(&self) -> String {
        format!(
            "L = {}\nh = {}\nn_q = {}\nn_kv = {}\nd = {}\nh_ffn = {}\nV = {}\nbp = {}\npeak_flops = {}\nbandwidth = {}\n",
            self.layers,
            self.hidden,
            self.query_heads,
            self.kv_heads,
            self.head_dim,
            self.ffn,
            self.vocab,
            self.bytes_per_elem,
            self.peak_flops,
            self.bandwidth
        )
    }
}

/// `s` newly verified tokens on top of `c` cached ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyQuery {
    pub s: u64,
    pub c: u64,
}

impl LatencyQuery {
    pub fn new(s: u64, c: u64) -> Result<Self> {
        if s < 1 {
            return Err(Error::invalid("s must be >= 1"));
        }
        Ok(Self { s, c })
    }

    /// Query for a tree with `budget` drafted nodes: the root/bonus position is verified too.
    pub fn for_budget(budget: usize, context: usize) -> Self {
        Self {
            s: budget as u64 + 1,
            c: context as u64,
        }
    }
}

/// Exact FLOP count of one verification pass.
pub fn flop_count<T: Real>(p: &CostModelParams<T>, q: LatencyQuery) -> u128 {
    let (s, c) = (u128::from(q.s), u128::from(q.c));
    let (h, hq, hkv, hffn, v, l) = (
        u128::from(p.hidden),
        u128::from(p.h_q()),
        u128::from(p.h_kv()),
        u128::from(p.ffn),
        u128::from(p.vocab),
        u128::from(p.layers),
    );
    l * (4 * s * h * hq + 4 * s * h * hkv + 4 * s * (c + s) * hq + 6 * s * h * hffn) + 2 * s * h * v
}

pub fn flops<T: Real>(p: &CostModelParams<T>, q: LatencyQuery) -> T {
    T::from_u128(flop_count(p, q)).expect("flop count fits scalar")
}

/// Memory traffic split into the three categories of the breakdown table (element counts times `bp`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteBreakdown {
    pub weights: u128,
    pub kv_cache: u128,
    pub activations: u128,
}

impl ByteBreakdown {
    pub fn total(&self) -> u128 {
        self.weights + self.kv_cache + self.activations
    }
}

/// Per-category traffic, summed row by row.
pub fn byte_breakdown<T: Real>(p: &CostModelParams<T>, q: LatencyQuery) -> ByteBreakdown {
    let (s, c) = (u128::from(q.s), u128::from(q.c));
    let (h, hq, hkv, hffn, v, l, nq, bp) = (
        u128::from(p.hidden),
        u128::from(p.h_q()),
        u128::from(p.h_kv()),
        u128::from(p.ffn),
        u128::from(p.vocab),
        u128::from(p.layers),
        u128::from(p.query_heads),
        u128::from(p.bytes_per_elem),
    );
    let embed_and_head = v * h + h * v;
    let attn_weights = 2 * h * hq + 2 * h * hkv;
    let ffn_weights = 3 * h * hffn;
    let weights = bp * (l * (attn_weights + ffn_weights) + embed_and_head);

    let kv_read = 2 * c * hkv;
    let kv_write = 2 * s * hkv;
    let kv_cache = bp * l * (kv_read + kv_write);

    let attn_io = 2 * s * h + 4 * s * hq + 2 * s * hkv + 2 * nq * s * (c + s);
    let ffn_io = 2 * s * h + 4 * s * hffn;
    let head_io = s * h + s * v;
    let activations = bp * (l * (attn_io + ffn_io) + head_io);

    ByteBreakdown {
        weights,
        kv_cache,
        activations,
    }
}

/// Closed-form total traffic.
pub fn byte_count<T: Real>(p: &CostModelParams<T>, q: LatencyQuery) -> u128 {
    let (s, c) = (u128::from(q.s), u128::from(q.c));
    let (h, hq, hkv, hffn, v, l, nq, bp) = (
        u128::from(p.hidden),
        u128::from(p.h_q()),
        u128::from(p.h_kv()),
        u128::from(p.ffn),
        u128::from(p.vocab),
        u128::from(p.layers),
        u128::from(p.query_heads),
        u128::from(p.bytes_per_elem),
    );
    bp * (2 * v * h
        + s * (h + v)
        + l * (2 * h * (hq + hkv) + 3 * h * hffn + 2 * hkv * (c + 2 * s) + 4 * s * (h + hq + hffn) + 2 * nq * s * (c + s)))
}

pub fn bytes<T: Real>(p: &CostModelParams<T>, q: LatencyQuery) -> T {
    T::from_u128(byte_count(p, q)).expect("byte count fits scalar")
}

/// `max(FLOPs / peak, Bytes / bandwidth)` in seconds.
pub fn roofline_latency<T: Real>(p: &CostModelParams<T>, q: LatencyQuery) -> T {
    (flops(p, q) / p.peak_flops).max(bytes(p, q) / p.bandwidth)
}

/// Linear correction `observed ~ slope * predicted + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFit<T: Real = f64> {
    pub slope: T,
    pub intercept: T,
    pub rmse_before: T,
    pub rmse_after: T,
}

impl<T: Real> CalibrationFit<T> {
    pub fn identity() -> Self {
        Self {
            slope: T::one(),
            intercept: T::zero(),
            rmse_before: T::zero(),
            rmse_after: T::zero(),
        }
    }

    pub fn apply(&self, predicted: T) -> T {
        self.slope * predicted + self.intercept
    }

    /// Relative RMSE reduction in percent; 0 when there was nothing to reduce.
    pub fn reduction_percent(&self) -> T {
        if self.rmse_before <= T::epsilon() {
            T::zero()
        } else {
            T::lit(100.0) * (self.rmse_before - self.rmse_after) / self.rmse_before
        }
    }
}

/// Ordinary least squares over `(predicted, observed)` pairs.
pub fn fit_static_calibration<T: Real>(pairs: &[(T, T)]) -> Result<CalibrationFit<T>> {
    if pairs.len() < 2 {
        return Err(Error::invalid("calibration needs at least two points"));
    }
    let n = T::from_count(pairs.len());
    let mean_x = pairs.iter().map(|p| p.0).sum::<T>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<T>() / n;
    let sxx: T = pairs.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: T = pairs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx <= T::zero() || pairs.iter().all(|p| p.0 == pairs[0].0) {
        return Err(Error::invalid("all predicted values are equal"));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rmse = |f: &dyn Fn(T) -> T| -> T {
        (pairs.iter().map(|p| (p.1 - f(p.0)) * (p.1 - f(p.0))).sum::<T>() / n).sqrt()
    };
    let rmse_before = rmse(&|x| x);
    let mut rmse_after = rmse(&|x| slope * x + intercept);
    // OLS is optimal over all lines, identity included; clamp rounding noise
    if rmse_after > rmse_before {
        rmse_after = rmse_before;
    }
    Ok(CalibrationFit {
        slope,
        intercept,
        rmse_before,
        rmse_after,
    })
}

/// Online multiplicative bias between observed and predicted latency.
///
/// Generic over any numeric type so the contraction can be checked in exact
/// rational arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaBias<T = f64> {
    pub ratio_bias: T,
    pub alpha: T,
}

pub const DEFAULT_EMA_ALPHA: f64 = 0.1;

impl<T: Num + Clone + PartialOrd> EmaBias<T> {
    pub fn new(alpha: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha <= T::one()) {
            return Err(Error::invalid("alpha must lie in (0, 1]"));
        }
        Ok(Self {
            ratio_bias: T::one(),
            alpha,
        })
    }
}

/// `c <- (1 - alpha) c + alpha (observed / predicted)`
pub fn ema_update<T: Num + Clone + PartialOrd>(bias: &EmaBias<T>, predicted: T, observed: T) -> Result<EmaBias<T>> {
    if !(predicted > T::zero()) || !(observed > T::zero()) {
        return Err(Error::invalid("predicted and observed latency must be positive"));
    }
    let a = bias.alpha.clone();
    let ratio = observed / predicted;
    Ok(EmaBias {
        ratio_bias: (T::one() - a.clone()) * bias.ratio_bias.clone() + a.clone() * ratio,
        alpha: a,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorVariant {
    /// Offline linear fit over the roofline.
    Static,
    /// Online multiplicative bias over the raw roofline.
    Ema,
    /// Online bias over the calibrated curve.
    EmaCalib,
}

impl std::str::FromStr for EstimatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Self::Static),
            "ema" => Ok(Self::Ema),
            "ema+calib" | "ema-calib" => Ok(Self::EmaCalib),
            other => Err(Error::invalid(format!("unknown estimator variant `{other}`"))),
        }
    }
}

pub fn estimate_verify_latency<T: Real>(
    variant: EstimatorVariant,
    params: &CostModelParams<T>,
    q: LatencyQuery,
    fit: Option<&CalibrationFit<T>>,
    bias: Option<&EmaBias<T>>,
) -> Result<T> {
    let raw = roofline_latency(params, q);
    match variant {
        EstimatorVariant::Static => Ok(fit.ok_or(Error::MissingComponent("calibration fit"))?.apply(raw)),
        EstimatorVariant::Ema => Ok(bias.ok_or(Error::MissingComponent("EMA bias"))?.ratio_bias * raw),
        EstimatorVariant::EmaCalib => {
            let fit = fit.ok_or(Error::MissingComponent("calibration fit"))?;
            let bias = bias.ok_or(Error::MissingComponent("EMA bias"))?;
            Ok(bias.ratio_bias * fit.apply(raw))
        }
    }
}

/// Anything that can predict verification latency for a query.
pub trait VerifyLatencyModel<T: Real> {
    fn verify_latency(&self, q: LatencyQuery) -> T;
}

impl<T: Real, F: Fn(LatencyQuery) -> T> VerifyLatencyModel<T> for F {
    fn verify_latency(&self, q: LatencyQuery) -> T {
        self(q)
    }
}

/// Stateful estimator owned by one decoding stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEstimator<T: Real = f64> {
    pub variant: EstimatorVariant,
    pub params: CostModelParams<T>,
    pub fit: CalibrationFit<T>,
    pub bias: EmaBias<T>,
}

impl<T: Real> LatencyEstimator<T> {
    pub fn new(variant: EstimatorVariant, params: CostModelParams<T>, fit: CalibrationFit<T>, alpha: T) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            variant,
            params,
            fit,
            bias: EmaBias::new(alpha)?,
        })
    }

    /// The prediction the EMA residual is measured against.
    fn baseline(&self, q: LatencyQuery) -> T {
        let raw = roofline_latency(&self.params, q);
        match self.variant {
            EstimatorVariant::Ema => raw,
            EstimatorVariant::Static | EstimatorVariant::EmaCalib => self.fit.apply(raw),
        }
    }

    /// Feeds back a measured verification latency. Static ignores feedback.
    pub fn observe(&mut self, q: LatencyQuery, observed: T) -> Result<()> {
        if self.variant == EstimatorVariant::Static {
            return Ok(());
        }
        self.bias = ema_update(&self.bias, self.baseline(q), observed)?;
        Ok(())
    }
}

impl<T: Real> VerifyLatencyModel<T> for LatencyEstimator<T> {
    fn verify_latency(&self, q: LatencyQuery) -> T {
        estimate_verify_latency(self.variant, &self.params, q, Some(&self.fit), Some(&self.bias))
            .expect("estimator carries every component")
    }
}

/// Per-cycle fixed latencies around the verification pass, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleLatencies<T: Real = f64> {
    pub t_draft: T,
    pub t_aux: T,
    /// One autoregressive target step.
    pub l_ar: T,
}

impl<T: Real> CycleLatencies<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_draft >= T::zero()) || !(self.t_aux >= T::zero()) {
            return Err(Error::invalid("t_draft and t_aux must be >= 0"));
        }
        if !(self.l_ar > T::zero()) {
            return Err(Error::invalid("l_ar must be > 0"));
        }
        Ok(())
    }
}

/// Reads a `s,c,observed_seconds` trace; a non-numeric first line is treated as a header.
pub fn read_latency_trace(path: &Path) -> Result<Vec<(LatencyQuery, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_latency_trace(&text)
}

pub fn parse_latency_trace(text: &str) -> Result<Vec<(LatencyQuery, f64)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let loc = format!("line {}", idx + 1);
        if f.len() != 3 {
            return Err(Error::parse(loc, "expected `s,c,observed_seconds`"));
        }
        if idx == 0 && f[0].parse::<f64>().is_err() {
            continue;
        }
        let s: u64 = f[0].parse().map_err(|_| Error::parse(&loc, "bad s"))?;
        let c: u64 = f[1].parse().map_err(|_| Error::parse(&loc, "bad c"))?;
        let obs: f64 = f[2].parse().map_err(|_| Error::parse(&loc, "bad observed_seconds"))?;
        out.push((LatencyQuery::new(s, c)?, obs));
    }
    Ok(out)
}
