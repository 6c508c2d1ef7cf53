//! Symbolic receptive-field accounting for spatial convolution stacks.

use std::fmt;
use std::str::FromStr;

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::sts::StsConfig;
use crate::tensor::Tensor;

/// Spatial extent `height x width`, rendered as `"HxW"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RfTerm {
    pub height: usize,
    pub width: usize,
}

impl RfTerm {
    pub fn new(height: usize, width: usize) -> Self {
        debug_assert!(height >= 1 && width >= 1);
        Self { height, width }
    }

    pub fn square(k: usize) -> Self {
        Self::new(k, k)
    }
}

impl fmt::Display for RfTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A layer as far as spatial receptive field is concerned.
#[derive(Debug, Clone, PartialEq)]
pub enum RfLayer {
    /// Plain convolution; a 3D spec contributes its two spatial axes.
    Conv(ConvSpec),
    /// Channels split between a plain `k x k` convolution and the same
    /// kernel at dilation `rate`.
    DilatedSplit { kernel: usize, rate: usize },
    Sts(StsConfig),
}

/// Receptive-field terms of one layer, one list per channel group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRf {
    pub groups: Vec<Vec<RfTerm>>,
    /// Spatial stride of the layer, `(h, w)`.
    pub stride: (usize, usize),
}

impl LayerRf {
    /// Distinct terms in order of first appearance.
    pub fn terms(&self) -> Vec<RfTerm> {
        let mut out: Vec<RfTerm> = Vec::new();
        for t in self.groups.iter().flatten() {
            if !out.contains(t) {
                out.push(*t);
            }
        }
        out
    }

    /// Bounding extent over every group.
    pub fn extent(&self) -> RfTerm {
        let all = self.groups.iter().flatten();
        let h = all.clone().map(|t| t.height).max().unwrap_or(1);
        let w = all.map(|t| t.width).max().unwrap_or(1);
        RfTerm::new(h, w)
    }

    /// `"a+b+..."` over the distinct terms, e.g. `"1x9+3x3+9x1"`.
    pub fn render(&self) -> String {
        self.terms().iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
    }
}

fn dilated(k: usize, d: usize) -> usize {
    k + (k - 1) * (d - 1)
}

pub fn rf_of_layer(layer: &RfLayer) -> Result<LayerRf> {
    match layer {
        RfLayer::Conv(spec) => {
            spec.validate()?;
            let r = spec.rank();
            let (h, w) = if r == 1 {
                (1, spec.effective_kernel(0))
            } else {
                (spec.effective_kernel(r - 2), spec.effective_kernel(r - 1))
            };
            let stride = if r == 1 {
                (1, spec.stride[0])
            } else {
                (spec.stride[r - 2], spec.stride[r - 1])
            };
            Ok(LayerRf {
                groups: vec![vec![RfTerm::new(h, w)]],
                stride,
            })
        }
        RfLayer::DilatedSplit { kernel, rate } => {
            if *kernel == 0 || *rate == 0 {
                return Err(Error::config("kernel and dilation rate must be positive"));
            }
            Ok(LayerRf {
                groups: vec![vec![RfTerm::square(*kernel)], vec![RfTerm::square(dilated(*kernel, *rate))]],
                stride: (1, 1),
            })
        }
        RfLayer::Sts(cfg) => {
            cfg.validate()?;
            let (kh, kw) = (cfg.kernel[1], cfg.kernel[2]);
            let l = kh * kw;
            Ok(LayerRf {
                groups: vec![
                    vec![RfTerm::new(1, l), RfTerm::new(kh, kw), RfTerm::new(l, 1)],
                    vec![RfTerm::new(kh, kw)],
                ],
                stride: (1, 1),
            })
        }
    }
}

/// Composed bounding extent of a stack: `r += (k_eff - 1) * jump`, where
/// `jump` is the product of the strides of earlier layers.
pub fn rf_of_stack(layers: &[LayerRf]) -> RfTerm {
    let (mut rh, mut rw) = (1usize, 1usize);
    let (mut jh, mut jw) = (1usize, 1usize);
    for l in layers {
        let e = l.extent();
        rh += (e.height - 1) * jh;
        rw += (e.width - 1) * jw;
        jh *= l.stride.0;
        jw *= l.stride.1;
    }
    RfTerm::new(rh, rw)
}

/// Measures the input footprint of one output element of a 2D conv stack:
/// back-propagates a unit impulse from output `(row, col)` of the last
/// layer and returns the bounding box of the nonzero input gradient.
/// Weights are the caller's; strictly positive weights rule out
/// cancellation.
pub fn impulse_footprint(
    specs: &[ConvSpec],
    weights: &[Tensor<f64>],
    input_hw: (usize, usize),
    out_pos: (usize, usize),
) -> Result<RfTerm> {
    if specs.len() != weights.len() || specs.is_empty() {
        return Err(Error::config("need one weight tensor per layer"));
    }
    let c0 = weights[0].dims()[1] * specs[0].groups;
    let mut acts = vec![Tensor::<f64>::zeros(&[1, c0, input_hw.0, input_hw.1])];
    for (s, w) in specs.iter().zip(weights) {
        let y = conv2d(acts.last().expect("non-empty"), w, s)?;
        acts.push(y);
    }
    let last = acts.last().expect("non-empty");
    let d = last.dims().to_vec();
    if out_pos.0 >= d[2] || out_pos.1 >= d[3] {
        return Err(Error::Index {
            index: out_pos.0.max(out_pos.1),
            len: d[2].min(d[3]),
        });
    }
    let mut grad = Tensor::from_fn(&d, |i| {
        if i[1] == 0 && i[2] == out_pos.0 && i[3] == out_pos.1 {
            1.0
        } else {
            0.0
        }
    });
    for (i, (s, w)) in specs.iter().zip(weights).enumerate().rev() {
        let (gx, _) = conv2d_backward(&acts[i], w, s, &grad)?;
        grad = gx;
    }
    let gd = grad.dims().to_vec();
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..gd[1] {
        for r in 0..gd[2] {
            for q in 0..gd[3] {
                if grad.get(&[0, c, r, q])? != 0.0 {
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(q);
                    cmax = cmax.max(q);
                }
            }
        }
    }
    if rmin == usize::MAX {
        return Err(Error::config("impulse response vanished"));
    }
    Ok(RfTerm::new(rmax - rmin + 1, cmax - cmin + 1))
}

/// One row of the dilated-vs-STS comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct RfTableRow {
    pub label: &'static str,
    pub rate: Option<usize>,
    pub rf: String,
}

/// Baseline `3x3`, two dilated splits and the STS layer, all with a `3x3`
/// spatial kernel.
pub fn comparison_table() -> Vec<RfTableRow> {
    let base = rf_of_layer(&RfLayer::Conv(ConvSpec::new(&[3, 3]))).expect("valid");
    let mut rows = vec![RfTableRow {
        label: "Baseline",
        rate: None,
        rf: base.render(),
    }];
    for rate in [2, 3] {
        let l = rf_of_layer(&RfLayer::DilatedSplit { kernel: 3, rate }).expect("valid");
        rows.push(RfTableRow {
            label: "w/ dilated conv",
            rate: Some(rate),
            rf: l.render(),
        });
    }
    let sts = StsConfig::new(2, 2, 3, 3).expect("valid");
    rows.push(RfTableRow {
        label: "w/ two orthogonal 1D convs",
        rate: None,
        rf: rf_of_layer(&RfLayer::Sts(sts)).expect("valid").render(),
    });
    rows
}

impl FromStr for RfLayer {
    type Err = Error;

    /// `conv:K`, `conv:K,D` (dilation), `dilated:K,D` or `sts:K`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse layer {s:?}; expected conv:K[,D], dilated:K,D or sts:K"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (kind, nums.as_slice()) {
            ("conv", [k]) => Ok(RfLayer::Conv(ConvSpec::new(&[*k, *k]))),
            ("conv", [k, d]) if *d > 0 => Ok(RfLayer::Conv(ConvSpec::new(&[*k, *k]).with_dilation(&[*d, *d]))),
            ("dilated", [k, d]) => Ok(RfLayer::DilatedSplit { kernel: *k, rate: *d }),
            ("sts", [k]) => Ok(RfLayer::Sts(StsConfig::new(2, 2, *k, *k)?)),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilated_extent_is_two_d_plus_one() {
        for d in 1..10 {
            assert_eq!(dilated(3, d), 2 * d + 1);
        }
    }

    #[test]
    fn dilated_split_rows() {
        let r2 = rf_of_layer(&RfLayer::DilatedSplit { kernel: 3, rate: 2 }).unwrap();
        assert_eq!(r2.render(), "3x3+5x5");
        let r3 = rf_of_layer(&RfLayer::DilatedSplit { kernel: 3, rate: 3 }).unwrap();
        assert_eq!(r3.render(), "3x3+7x7");
        assert_eq!(r3.extent(), RfTerm::square(7));
    }

    #[test]
    fn sts_terms() {
        let cfg = StsConfig::new(4, 4, 3, 3).unwrap();
        let l = rf_of_layer(&RfLayer::Sts(cfg)).unwrap();
        assert_eq!(l.render(), "1x9+3x3+9x1");
        assert_eq!(l.extent(), RfTerm::square(9));
    }

    #[test]
    fn stack_composition() {
        let l3 = |s: usize| rf_of_layer(&RfLayer::Conv(ConvSpec::new(&[3, 3]).with_stride(&[s, s]))).unwrap();
        assert_eq!(rf_of_stack(&[l3(1)]), RfTerm::square(3));
        assert_eq!(rf_of_stack(&[l3(1), l3(1)]), RfTerm::square(5));
        assert_eq!(rf_of_stack(&[l3(2), l3(1)]), RfTerm::square(7));
        assert_eq!(rf_of_stack(&[]), RfTerm::square(1));
    }

    #[test]
    fn parse_layers() {
        assert_eq!("dilated:3,2".parse::<RfLayer>().unwrap(), RfLayer::DilatedSplit { kernel: 3, rate: 2 });
        let l = rf_of_layer(&"conv:3,3".parse().unwrap()).unwrap();
        assert_eq!(l.render(), "7x7");
        assert!("conv:".parse::<RfLayer>().is_err());
        assert!("pool:3".parse::<RfLayer>().is_err());
    }

    #[test]
    fn table_rows() {
        let rows: Vec<_> = comparison_table().into_iter().map(|r| r.rf).collect();
        assert_eq!(rows, ["3x3", "3x3+5x5", "3x3+7x7", "1x9+3x3+9x1"]);
    }

    #[test]
    fn footprint_of_two_layers() {
        let specs = [ConvSpec::new(&[3, 3]), ConvSpec::new(&[3, 3]).with_stride(&[2, 2])];
        let w = vec![Tensor::full(&[1, 1, 3, 3], 0.5), Tensor::full(&[1, 1, 3, 3], 0.5)];
        let fp = impulse_footprint(&specs, &w, (15, 15), (3, 3)).unwrap();
        assert_eq!(fp, RfTerm::square(5));
    }
}
