//! Central finite-difference checks of the analytic backward passes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv1d, conv1d_backward, conv2d, conv2d_backward, conv3d, conv3d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::sts::{sts_backward, sts_forward, StsConfig, StsParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradOp {
    Conv1d,
    Conv2d,
    Conv3d,
    Sts,
}

impl GradOp {
    pub const ALL: [GradOp; 4] = [GradOp::Conv1d, GradOp::Conv2d, GradOp::Conv3d, GradOp::Sts];
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1d" => Ok(GradOp::Conv1d),
            "conv2d" => Ok(GradOp::Conv2d),
            "conv3d" => Ok(GradOp::Conv3d),
            "sts" => Ok(GradOp::Sts),
            _ => Err(Error::config(format!("unknown op {s:?}; expected conv1d, conv2d, conv3d or sts"))),
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradOp::Conv1d => "conv1d",
            GradOp::Conv2d => "conv2d",
            GradOp::Conv3d => "conv3d",
            GradOp::Sts => "sts",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: GradOp,
    pub instances: usize,
    /// Largest `|a - n| / max(1, |a|, |n|)` over every input and weight
    /// coordinate.
    pub max_rel_err: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn probe<T: Element>(
    param: &Tensor<T>,
    analytic: &Tensor<T>,
    h: f64,
    mut loss: impl FnMut(&Tensor<T>) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut p = param.clone();
    for i in 0..p.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + T::from_f64_lossy(h);
        let up = loss(&p)?;
        p.data_mut()[i] = orig - T::from_f64_lossy(h);
        let down = loss(&p)?;
        p.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i].as_f64(), (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// `sum(y * r)` accumulated in f64.
fn contract<T: Element>(y: &Tensor<T>, r: &Tensor<T>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

fn conv_check<T: Element>(rank: usize, rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let groups = rng.gen_range(1..=2);
    let cin = groups * rng.gen_range(1..=2);
    let cout = groups * rng.gen_range(1..=2);
    let kernel: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=3)).collect();
    let stride: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=2)).collect();
    let spec = ConvSpec::new(&kernel).with_stride(&stride).with_groups(groups);
    let mut xd = vec![1, cin];
    xd.extend((0..rank).map(|_| rng.gen_range(2..=5)));
    let mut wd = vec![cout, cin / groups];
    wd.extend(&kernel);
    let x = Tensor::<T>::random_uniform(&xd, -1.0, 1.0, rng);
    let w = Tensor::<T>::random_uniform(&wd, -1.0, 1.0, rng);
    let fwd = |x: &Tensor<T>, w: &Tensor<T>| match rank {
        1 => conv1d(x, w, &spec),
        2 => conv2d(x, w, &spec),
        _ => conv3d(x, w, &spec),
    };
    let y = fwd(&x, &w)?;
    let r = Tensor::<T>::random_uniform(y.dims(), -1.0, 1.0, rng);
    let (gx, gw) = match rank {
        1 => conv1d_backward(&x, &w, &spec, &r),
        2 => conv2d_backward(&x, &w, &spec, &r),
        _ => conv3d_backward(&x, &w, &spec, &r),
    }?;
    let ex = probe(&x, &gx, h, |xp| Ok(contract(&fwd(xp, &w)?, &r)))?;
    let ew = probe(&w, &gw, h, |wp| Ok(contract(&fwd(&x, wp)?, &r)))?;
    Ok(ex.max(ew))
}

fn sts_check<T: Element>(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let groups = rng.gen_range(1..=2);
    let c = 2 * groups;
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let cfg = StsConfig::new(c, c, k, 3)?.with_groups(groups)?;
    let mut u = |dims: &[usize]| Tensor::<T>::random_uniform(dims, -1.0, 1.0, rng);
    let p = StsParams {
        alpha0: u(&cfg.alpha_dims()),
        alpha1: u(&cfg.alpha_dims()),
        alpha2: u(&cfg.alpha_dims()),
        beta: u(&cfg.beta_dims()),
    };
    let x = u(&[1, c, 3, 3, 4]);
    let y = sts_forward(&x, &p, &cfg)?;
    let r = u(y.dims());
    let (gx, gp) = sts_backward(&x, &p, &cfg, &r)?;
    let f = |x: &Tensor<T>, p: &StsParams<T>| Ok(contract(&sts_forward(x, p, &cfg)?, &r));
    let mut worst = probe(&x, &gx, h, |xp| f(xp, &p))?;
    worst = worst.max(probe(&p.alpha0, &gp.alpha0, h, |a| {
        f(&x, &StsParams { alpha0: a.clone(), ..p.clone() })
    })?);
    worst = worst.max(probe(&p.alpha1, &gp.alpha1, h, |a| {
        f(&x, &StsParams { alpha1: a.clone(), ..p.clone() })
    })?);
    worst = worst.max(probe(&p.alpha2, &gp.alpha2, h, |a| {
        f(&x, &StsParams { alpha2: a.clone(), ..p.clone() })
    })?);
    worst = worst.max(probe(&p.beta, &gp.beta, h, |b| f(&x, &StsParams { beta: b.clone(), ..p.clone() }))?);
    Ok(worst)
}

/// Checks `instances` random problems of `op` with step `h`.
pub fn gradcheck<T: Element>(op: GradOp, instances: usize, seed: u64, h: f64) -> Result<GradReport> {
    if instances == 0 || !(h > 0.0) {
        return Err(Error::config("need at least one instance and a positive step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let e = match op {
            GradOp::Conv1d => conv_check::<T>(1, &mut rng, h)?,
            GradOp::Conv2d => conv_check::<T>(2, &mut rng, h)?,
            GradOp::Conv3d => conv_check::<T>(3, &mut rng, h)?,
            GradOp::Sts => sts_check::<T>(&mut rng, h)?,
        };
        worst = worst.max(e);
    }
    Ok(GradReport {
        op,
        instances,
        max_rel_err: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_backward_passes_agree_with_differences() {
        for op in GradOp::ALL {
            let r = gradcheck::<f64>(op, 3, 1, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-6, "{op}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn parse_and_reject() {
        assert_eq!("sts".parse::<GradOp>().unwrap(), GradOp::Sts);
        assert!("conv4d".parse::<GradOp>().is_err());
        assert!(gradcheck::<f64>(GradOp::Sts, 0, 0, 1e-5).is_err());
    }
}
