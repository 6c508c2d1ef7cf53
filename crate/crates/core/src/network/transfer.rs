use indexmap::IndexMap;
use rand::Rng;

use super::{Layer, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::init::{inflate_2d_to_3d, init_sts_from_2d, Checkpoint, InitStrategy};
use crate::sts::split_baseline_weights;
use crate::tensor::{Element, Tensor};

fn fetch<T: Element>(ckpt: &Checkpoint, name: &str, dims: &[usize]) -> Result<Tensor<T>> {
    let t = ckpt
        .tensor::<T>(name)
        .map_err(|_| Error::config(format!("2D checkpoint lacks {name}")))?;
    if t.dims() != dims {
        return Err(Error::shape(format!(
            "{name}: 2D checkpoint has dims {:?}, 3D layer needs {dims:?}",
            t.dims()
        )));
    }
    Ok(t)
}

fn apply<T: Element>(
    layers: &[Layer],
    ckpt: &Checkpoint,
    strategy: &InitStrategy,
    params: &mut IndexMap<String, Tensor<T>>,
) -> Result<()> {
    let rates = strategy.rates().ok_or_else(|| Error::config("invalid inflation rates"))?;
    for l in layers {
        match l {
            Layer::Conv(c) => {
                let name = c.weight_name();
                let [_, kh, kw] = c.kernel;
                let w2 = fetch::<T>(ckpt, &name, &[c.c_out, c.c_in / c.groups, kh, kw])?;
                let w = match c.kernel[0] {
                    1 => w2,
                    3 => inflate_2d_to_3d(&w2, &rates)?,
                    kt => return Err(Error::config(format!("{}: cannot inflate to temporal extent {kt}", c.name))),
                };
                params.insert(name, w);
            }
            Layer::Sts { name, config } => {
                let [co, cg, _, kh, kw] = config.baseline_dims();
                let w2 = fetch::<T>(ckpt, &format!("{name}.weight"), &[co, cg, kh, kw])?;
                let p = match strategy {
                    InitStrategy::Sts2d => init_sts_from_2d(&w2, config)?,
                    _ => split_baseline_weights(&inflate_2d_to_3d(&w2, &rates)?, config)?,
                };
                params.insert(format!("{name}.alpha0"), p.alpha0);
                params.insert(format!("{name}.alpha1"), p.alpha1);
                params.insert(format!("{name}.alpha2"), p.alpha2);
                params.insert(format!("{name}.beta"), p.beta);
            }
            Layer::StsSlice { name, .. } => {
                return Err(Error::config(format!("{name}: sliced STS layers are not transfer targets")));
            }
            Layer::BatchNorm { name, channels, .. } => {
                for k in ["weight", "bias", "running_mean", "running_var"] {
                    let key = format!("{name}.{k}");
                    params.insert(key.clone(), fetch(ckpt, &key, &[*channels])?);
                }
            }
            Layer::Linear { name, c_in, c_out } => {
                // A head for a different class count keeps its fresh weights.
                let (wk, bk) = (format!("{name}.weight"), format!("{name}.bias"));
                if let (Ok(w), Ok(b)) = (fetch(ckpt, &wk, &[*c_out, *c_in]), fetch(ckpt, &bk, &[*c_out])) {
                    params.insert(wk, w);
                    params.insert(bk, b);
                }
            }
            Layer::Residual { body, shortcut } => {
                apply(body, ckpt, strategy, params)?;
                apply(shortcut, ckpt, strategy, params)?;
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
    Ok(())
}

/// Builds the 3D network `spec3d` from the checkpoint of its 2D twin.
///
/// Spatial-only layers and normalization are copied verbatim, temporal
/// convolutions are inflated with the strategy's rates and STS layers are
/// either re-sliced from the inflated kernel or, for
/// [`InitStrategy::Sts2d`], built by [`init_sts_from_2d`]. Parameters are
/// first drawn fresh from `rng`, so `Scratch` ignores the checkpoint and a
/// head with a different class count stays random.
pub fn transfer_2d_to_3d<T: Element>(
    ckpt2d: &Checkpoint,
    spec3d: &NetworkSpec,
    strategy: &InitStrategy,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    let fresh = Network::<T>::init(spec3d.clone(), rng)?;
    if *strategy == InitStrategy::Scratch {
        return Ok(fresh);
    }
    let mut params = fresh.params.clone();
    apply(&spec3d.layers, ckpt2d, strategy, &mut params)?;
    Network::from_params(spec3d.clone(), params)
}
