use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::sts::StsConfig;

/// Convolution without bias. Weights are stored 4D when `kernel[0] == 1`
/// and 5D otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    /// `(Kt, Kh, Kw)`.
    pub kernel: [usize; 3],
    #[serde(default = "unit3")]
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    #[serde(default = "one")]
    pub groups: usize,
}

fn unit3() -> [usize; 3] {
    [1, 1, 1]
}

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

impl ConvLayer {
    /// Same-padded, unit-stride layer.
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: [usize; 3]) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride: [1, 1, 1],
            padding: kernel.map(|k| k.saturating_sub(1) / 2),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn is_temporal(&self) -> bool {
        self.kernel[0] != 1
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::new(&self.kernel)
            .with_stride(&self.stride)
            .with_padding(&self.padding)
            .with_groups(self.groups)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        let [kt, kh, kw] = self.kernel;
        let cg = self.c_in / self.groups.max(1);
        if kt == 1 {
            vec![self.c_out, cg, kh, kw]
        } else {
            vec![self.c_out, cg, kt, kh, kw]
        }
    }

    fn validate(&self) -> Result<()> {
        self.conv_spec().validate()?;
        if self.c_in == 0 || self.c_out == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::config(format!(
                "layer {}: channels {}->{} not divisible into {} groups",
                self.name, self.c_in, self.c_out, self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv(ConvLayer),
    Sts {
        name: String,
        config: StsConfig,
    },
    /// A 2D cut through an STS layer at temporal index `t`: the static block
    /// applies `alpha_t`, the dynamic block slice `t` of `beta`.
    StsSlice {
        name: String,
        t: usize,
        config: StsConfig,
    },
    BatchNorm {
        name: String,
        channels: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Relu,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        #[serde(default)]
        shortcut: Vec<Layer>,
    },
    /// Mean over `(T, H, W)`, giving `(N, C)`.
    GlobalAvgPool,
    Linear {
        name: String,
        c_in: usize,
        c_out: usize,
    },
}

impl Layer {
    pub fn batch_norm(name: impl Into<String>, channels: usize) -> Self {
        Layer::BatchNorm {
            name: name.into(),
            channels,
            eps: default_eps(),
        }
    }
}

/// Whether a parameter is updated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy)]
enum Flow {
    Map(usize),
    Flat(usize),
}

impl NetworkSpec {
    pub fn new(input_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let s = Self { input_channels, layers };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    /// Checks channel flow, parameter name uniqueness and returns the class
    /// (or feature) count at the output.
    pub fn validate(&self) -> Result<usize> {
        let mut names = HashSet::new();
        match walk(&self.layers, Flow::Map(self.input_channels), &mut names)? {
            Flow::Map(c) | Flow::Flat(c) => Ok(c),
        }
    }

    pub fn output_size(&self) -> Result<usize> {
        self.validate()
    }

    /// Parameters in a fixed traversal order.
    pub fn params(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        collect(&self.layers, &mut out);
        out
    }

    /// True when no layer mixes frames.
    pub fn is_2d(&self) -> bool {
        fn any_temporal(layers: &[Layer]) -> bool {
            layers.iter().any(|l| match l {
                Layer::Conv(c) => c.is_temporal(),
                Layer::Sts { .. } => true,
                Layer::Residual { body, shortcut } => any_temporal(body) || any_temporal(shortcut),
                _ => false,
            })
        }
        !any_temporal(&self.layers)
    }

    /// The same network with every temporal extent set to 1; STS layers
    /// become plain convolutions with their grouping.
    pub fn twin_2d(&self) -> NetworkSpec {
        fn flatten(layers: &[Layer]) -> Vec<Layer> {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => {
                        let mut c = c.clone();
                        c.kernel[0] = 1;
                        c.stride[0] = 1;
                        c.padding[0] = 0;
                        Layer::Conv(c)
                    }
                    Layer::Sts { name, config } | Layer::StsSlice { name, config, .. } => {
                        Layer::Conv(
                            ConvLayer::new(name.clone(), config.c_in, config.c_out, [1, config.kernel[1], config.kernel[2]])
                                .with_groups(config.groups),
                        )
                    }
                    Layer::Residual { body, shortcut } => Layer::Residual {
                        body: flatten(body),
                        shortcut: flatten(shortcut),
                    },
                    other => other.clone(),
                })
                .collect()
        }
        NetworkSpec {
            input_channels: self.input_channels,
            layers: flatten(&self.layers),
        }
    }
}

fn unique(names: &mut HashSet<String>, name: &str) -> Result<()> {
    if !names.insert(name.to_string()) {
        return Err(Error::config(format!("duplicate layer name {name:?}")));
    }
    Ok(())
}

fn expect_map(flow: Flow, want: usize, what: &str) -> Result<()> {
    match flow {
        Flow::Map(c) if c == want => Ok(()),
        Flow::Map(c) => Err(Error::config(format!("{what} expects {want} channels, gets {c}"))),
        Flow::Flat(_) => Err(Error::config(format!("{what} needs a feature map, gets pooled features"))),
    }
}

fn walk(layers: &[Layer], mut flow: Flow, names: &mut HashSet<String>) -> Result<Flow> {
    for l in layers {
        flow = match l {
            Layer::Conv(c) => {
                c.validate()?;
                unique(names, &c.name)?;
                expect_map(flow, c.c_in, &c.name)?;
                Flow::Map(c.c_out)
            }
            Layer::Sts { name, config } => {
                config.validate()?;
                unique(names, name)?;
                expect_map(flow, config.c_in, name)?;
                Flow::Map(config.c_out)
            }
            Layer::StsSlice { name, t, config } => {
                config.validate()?;
                if *t > 2 {
                    return Err(Error::config(format!("{name}: temporal index {t} out of range 0..3")));
                }
                unique(names, name)?;
                expect_map(flow, config.c_in, name)?;
                Flow::Map(config.c_out)
            }
            Layer::BatchNorm { name, channels, eps } => {
                unique(names, name)?;
                if !(*eps > 0.0) {
                    return Err(Error::config(format!("{name}: eps must be positive")));
                }
                expect_map(flow, *channels, name)?;
                flow
            }
            Layer::Relu => flow,
            Layer::Residual { body, shortcut } => {
                let a = walk(body, flow, names)?;
                let b = walk(shortcut, flow, names)?;
                match (a, b) {
                    (Flow::Map(x), Flow::Map(y)) if x == y => Flow::Map(x),
                    _ => return Err(Error::config("residual branches disagree in shape")),
                }
            }
            Layer::GlobalAvgPool => match flow {
                Flow::Map(c) => Flow::Flat(c),
                Flow::Flat(_) => return Err(Error::config("pooling applied twice")),
            },
            Layer::Linear { name, c_in, c_out } => {
                unique(names, name)?;
                match flow {
                    Flow::Flat(c) if c == *c_in && *c_out > 0 => Flow::Flat(*c_out),
                    _ => return Err(Error::config(format!("{name}: linear layer needs {c_in} pooled features"))),
                }
            }
        };
    }
    Ok(flow)
}

fn push(out: &mut Vec<ParamInfo>, name: String, dims: Vec<usize>, role: ParamRole) {
    out.push(ParamInfo { name, dims, role });
}

fn collect(layers: &[Layer], out: &mut Vec<ParamInfo>) {
    use ParamRole::{Buffer, Trainable};
    for l in layers {
        match l {
            Layer::Conv(c) => push(out, c.weight_name(), c.weight_dims(), Trainable),
            Layer::Sts { name, config } => {
                let a = config.alpha_dims().to_vec();
                for k in ["alpha0", "alpha1", "alpha2"] {
                    push(out, format!("{name}.{k}"), a.clone(), Trainable);
                }
                push(out, format!("{name}.beta"), config.beta_dims().to_vec(), Trainable);
            }
            Layer::StsSlice { name, config, .. } => {
                push(out, format!("{name}.static"), config.alpha_dims().to_vec(), Trainable);
                let [d, c, _, h, w] = config.beta_dims();
                push(out, format!("{name}.dynamic"), vec![d, c, h, w], Trainable);
            }
            Layer::BatchNorm { name, channels, .. } => {
                push(out, format!("{name}.weight"), vec![*channels], Trainable);
                push(out, format!("{name}.bias"), vec![*channels], Trainable);
                push(out, format!("{name}.running_mean"), vec![*channels], Buffer);
                push(out, format!("{name}.running_var"), vec![*channels], Buffer);
            }
            Layer::Linear { name, c_in, c_out } => {
                push(out, format!("{name}.weight"), vec![*c_out, *c_in], Trainable);
                push(out, format!("{name}.bias"), vec![*c_out], Trainable);
            }
            Layer::Residual { body, shortcut } => {
                collect(body, out);
                collect(shortcut, out);
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
}
