use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ConvLayer, Layer, NetworkSpec};
use crate::sts::{StaticRatio, StsConfig};

/// Bottleneck flavour of the miniature residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `3x1x1` first conv in the second stage, spatial-only elsewhere.
    #[serde(rename = "3x1x1")]
    Temporal,
    /// Channel-wise `3x3x3` middle conv.
    #[serde(rename = "3x3x3")]
    Full,
    /// Channel-wise STS middle conv.
    #[serde(rename = "sts-3x3x3")]
    Sts,
    /// Every temporal extent 1.
    #[serde(rename = "2d")]
    TwoD,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3x1x1" => Ok(Variant::Temporal),
            "3x3x3" => Ok(Variant::Full),
            "sts-3x3x3" => Ok(Variant::Sts),
            "2d" => Ok(Variant::TwoD),
            _ => Err(Error::config(format!(
                "unknown variant {s:?}; expected 3x1x1, 3x3x3, sts-3x3x3 or 2d"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Temporal => "3x1x1",
            Variant::Full => "3x3x3",
            Variant::Sts => "sts-3x3x3",
            Variant::TwoD => "2d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyNetConfig {
    pub variant: Variant,
    pub input_channels: usize,
    /// Stem width; stage `s` has bottleneck width `width * 2^s` and output
    /// width twice that.
    pub width: usize,
    pub num_classes: usize,
    pub ratio: StaticRatio,
}

pub fn build_tiny_net(variant: Variant, channels: usize, num_classes: usize) -> Result<NetworkSpec> {
    build_tiny_net_with(&TinyNetConfig {
        variant,
        input_channels: 1,
        width: channels,
        num_classes,
        ratio: StaticRatio::OneToOne,
    })
}

/// Stem, two stages of two bottleneck blocks, global pool and linear head.
/// The second stage halves the spatial size in its first block. Every
/// `3x3` spatial conv is channel-wise, so all variants share one 2D twin.
pub fn build_tiny_net_with(cfg: &TinyNetConfig) -> Result<NetworkSpec> {
    let w = cfg.width;
    if w < 2 || w % 2 != 0 || cfg.num_classes == 0 || cfg.input_channels == 0 {
        return Err(Error::config("tiny net needs an even width of at least 2 and a positive class count"));
    }
    let mut layers = vec![
        Layer::Conv(ConvLayer::new("stem.conv", cfg.input_channels, w, [1, 3, 3])),
        Layer::batch_norm("stem.bn", w),
        Layer::Relu,
    ];
    let mut c_in = w;
    for stage in 0..2 {
        let mid = w << stage;
        let out = 2 * mid;
        for block in 0..2 {
            let p = format!("s{}.b{block}", stage + 1);
            let stride = if stage == 1 && block == 0 { 2 } else { 1 };
            let kt1 = if cfg.variant == Variant::Temporal && stage == 1 { 3 } else { 1 };
            let conv1 = ConvLayer::new(format!("{p}.conv1"), c_in, mid, [kt1, 1, 1]).with_stride([1, stride, stride]);
            let conv2 = match cfg.variant {
                Variant::Full => Layer::Conv(ConvLayer::new(format!("{p}.conv2"), mid, mid, [3, 3, 3]).with_groups(mid)),
                Variant::Sts => Layer::Sts {
                    name: format!("{p}.conv2"),
                    config: StsConfig::new(mid, mid, 3, 3)?.with_groups(mid)?.with_ratio(cfg.ratio)?,
                },
                Variant::Temporal | Variant::TwoD => {
                    Layer::Conv(ConvLayer::new(format!("{p}.conv2"), mid, mid, [1, 3, 3]).with_groups(mid))
                }
            };
            let body = vec![
                Layer::Conv(conv1),
                Layer::batch_norm(format!("{p}.bn1"), mid),
                Layer::Relu,
                conv2,
                Layer::batch_norm(format!("{p}.bn2"), mid),
                Layer::Relu,
                Layer::Conv(ConvLayer::new(format!("{p}.conv3"), mid, out, [1, 1, 1])),
                Layer::batch_norm(format!("{p}.bn3"), out),
            ];
            let shortcut = if c_in != out || stride != 1 {
                vec![
                    Layer::Conv(ConvLayer::new(format!("{p}.down"), c_in, out, [1, 1, 1]).with_stride([1, stride, stride])),
                    Layer::batch_norm(format!("{p}.down_bn"), out),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual { body, shortcut });
            layers.push(Layer::Relu);
            c_in = out;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear {
        name: "head".into(),
        c_in,
        c_out: cfg.num_classes,
    });
    NetworkSpec::new(cfg.input_channels, layers)
}
