//! 2D-to-3D weight transfer: temporal inflation, zero-init and STS-aware
//! initialization from a pre-trained image kernel.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sts::{StsConfig, StsParams};
use crate::tensor::{slice_leading, Element, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, AnyTensor, Checkpoint, FORMAT_VERSION, MAGIC};

/// Per-slice multipliers `(r0, r1, r2)` for a 3-tap temporal kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InflationRates {
    rates: [Ratio<u64>; 3],
}

impl InflationRates {
    pub fn new(rates: [Ratio<u64>; 3]) -> Result<Self> {
        if rates.iter().all(|r| *r.numer() == 0) {
            return Err(Error::config("at least one inflation rate must be positive"));
        }
        Ok(Self { rates })
    }

    pub fn from_fractions(rates: [(u64, u64); 3]) -> Result<Self> {
        if rates.iter().any(|&(_, d)| d == 0) {
            return Err(Error::config("zero denominator in inflation rate"));
        }
        Self::new(rates.map(|(n, d)| Ratio::new(n, d)))
    }

    /// `(0, 1, 0)`.
    pub fn zero_init() -> Self {
        Self::from_fractions([(0, 1), (1, 1), (0, 1)]).expect("valid")
    }

    /// I3D-style averaging, `(1/3, 1/3, 1/3)`.
    pub fn uniform() -> Self {
        Self::from_fractions([(1, 3), (1, 3), (1, 3)]).expect("valid")
    }

    pub fn rates(&self) -> [Ratio<u64>; 3] {
        self.rates
    }

    pub fn sum(&self) -> Ratio<u64> {
        self.rates.iter().copied().sum()
    }

    /// Rescales so the rates sum to one.
    pub fn normalized(&self) -> Self {
        let s = self.sum();
        Self {
            rates: self.rates.map(|r| r / s),
        }
    }

    fn apply<T: Element>(&self, slice: usize, v: T) -> T {
        let r = self.rates[slice];
        v * T::from_u64(*r.numer()).expect("rate numerator") / T::from_u64(*r.denom()).expect("rate denominator")
    }
}

impl fmt::Display for InflationRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.rates;
        write!(f, "{a},{b},{c}")
    }
}

fn parse_rate(s: &str) -> Result<Ratio<u64>> {
    let bad = || Error::config(format!("cannot parse inflation rate {s:?}"));
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let digits = frac.len() as u32;
        if digits > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let den = 10u64.pow(digits);
        return Ok(Ratio::new(int * den + frac_v, den));
    }
    Ok(Ratio::from_integer(s.parse().map_err(|_| bad())?))
}

impl FromStr for InflationRates {
    type Err = Error;

    /// `"r0,r1,r2"`, each an integer, decimal or `a/b` fraction.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!("expected three comma-separated rates, got {s:?}")));
        }
        Self::new([parse_rate(parts[0])?, parse_rate(parts[1])?, parse_rate(parts[2])?])
    }
}

fn expect_2d<T: Element>(w2d: &Tensor<T>) -> Result<()> {
    if w2d.rank() != 4 {
        return Err(Error::shape(format!(
            "2D kernel must be (C_out, C_in/g, Kh, Kw), got {:?}",
            w2d.dims()
        )));
    }
    Ok(())
}

/// `w3d[:, :, i] = rates[i] * w2d` for `i` in `0..3`.
pub fn inflate_2d_to_3d<T: Element>(w2d: &Tensor<T>, rates: &InflationRates) -> Result<Tensor<T>> {
    expect_2d(w2d)?;
    let d = w2d.dims();
    let plane = d[2] * d[3];
    let mut out = Vec::with_capacity(3 * w2d.len());
    if plane > 0 {
        for filt in w2d.data().chunks_exact(plane) {
            for slice in 0..3 {
                out.extend(filt.iter().map(|&v| rates.apply(slice, v)));
            }
        }
    }
    Ok(Tensor::from_parts(vec![d[0], d[1], 3, d[2], d[3]], out))
}

/// Pre-trained kernel in the centre temporal slice, zeros elsewhere.
pub fn zero_init_3d<T: Element>(w2d: &Tensor<T>) -> Result<Tensor<T>> {
    inflate_2d_to_3d(w2d, &InflationRates::zero_init())
}

/// STS parameters from a 2D kernel with `cfg.c_out` filters: the leading
/// static filters become `alpha1`, `alpha0`/`alpha2` start at zero, and the
/// trailing dynamic filters are zero-initialized into `beta`.
pub fn init_sts_from_2d<T: Element>(w2d: &Tensor<T>, cfg: &StsConfig) -> Result<StsParams<T>> {
    expect_2d(w2d)?;
    cfg.validate()?;
    let expected = cfg.baseline_dims();
    let d = w2d.dims();
    if d[0] != expected[0] || d[1] != expected[1] || d[2] != expected[3] || d[3] != expected[4] {
        return Err(Error::shape(format!(
            "2D kernel {d:?} does not fit STS layer with baseline {expected:?}"
        )));
    }
    let so = cfg.static_out();
    let alpha1 = slice_leading(w2d, 0, so)?;
    let beta = zero_init_3d(&slice_leading(w2d, so, cfg.c_out)?)?;
    Ok(StsParams {
        alpha0: Tensor::zeros(alpha1.dims()),
        alpha2: Tensor::zeros(alpha1.dims()),
        alpha1,
        beta,
    })
}

/// How a 3D network is initialized from (or without) a 2D checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    Scratch,
    ZeroInit,
    Inflate([(u64, u64); 3]),
    /// Zero-init for plain 3D layers, [`init_sts_from_2d`] for STS layers.
    Sts2d,
}

impl InitStrategy {
    pub fn rates(&self) -> Option<InflationRates> {
        match self {
            InitStrategy::Scratch => None,
            InitStrategy::ZeroInit | InitStrategy::Sts2d => Some(InflationRates::zero_init()),
            InitStrategy::Inflate(r) => InflationRates::from_fractions(*r).ok(),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(InitStrategy::Scratch),
            "zero-init" => Ok(InitStrategy::ZeroInit),
            "sts-2d" => Ok(InitStrategy::Sts2d),
            _ => {
                let rates = s
                    .strip_prefix("inflate:")
                    .ok_or_else(|| Error::config(format!("unknown init strategy {s:?}")))?;
                let r: InflationRates = rates.parse()?;
                Ok(InitStrategy::Inflate(r.rates().map(|q| (*q.numer(), *q.denom()))))
            }
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::Scratch => f.write_str("scratch"),
            InitStrategy::ZeroInit => f.write_str("zero-init"),
            InitStrategy::Sts2d => f.write_str("sts-2d"),
            InitStrategy::Inflate(r) => {
                write!(f, "inflate:")?;
                let parts: Vec<_> = r.iter().map(|(n, d)| format!("{n}/{d}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}
