//! Network checkpoints: layer specs, neuron id map and every parameter array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormConfig, RunningStats};
use crate::container;
use crate::error::{Error, Result};
use crate::model::{Conv, Dense, Layer, LayerKind, LayerSpec, NetworkState, Norm, Residual};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    residuals: Vec<Residual>,
    ids: Vec<Vec<u64>>,
    next_id: u64,
    norm_eps: f64,
    norm_momentum: f64,
}

const KIND: &str = "network";

fn arrays(net: &NetworkState) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for layer in net.layers() {
        for p in layer.params() {
            out.push(p.data());
        }
        if let Layer::Norm(n) = layer {
            out.push(&n.stats.mean[..]);
            out.push(&n.stats.var[..]);
        }
    }
    out
}

pub fn encode(net: &NetworkState) -> Result<Vec<u8>> {
    let header = Header {
        kind: KIND.into(),
        input_shape: net.input_shape().to_vec(),
        num_classes: net.num_classes(),
        layers: net.specs(),
        residuals: net.residuals().to_vec(),
        ids: net.ids.clone(),
        next_id: net.next_id,
        norm_eps: net.norm_cfg.eps,
        norm_momentum: net.norm_cfg.momentum,
    };
    container::encode(&header, &arrays(net))
}

fn rebuild(specs: &[LayerSpec], next: &mut dyn FnMut(Vec<usize>) -> Result<Tensor>) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let layer = match spec.kind {
            LayerKind::Dense => Layer::Dense(Dense {
                weight: next(vec![spec.width, spec.fan_in])?.parameter(),
                bias: next(vec![spec.width])?.parameter(),
                mutable: spec.mutable,
            }),
            LayerKind::Conv => Layer::Conv(Conv {
                weight: next(vec![spec.width, spec.fan_in, spec.kernel, spec.kernel])?.parameter(),
                bias: next(vec![spec.width])?.parameter(),
                stride: spec.stride,
                padding: spec.padding,
                mutable: spec.mutable,
            }),
            LayerKind::Norm => Layer::Norm(Norm {
                gamma: next(vec![spec.width])?.parameter(),
                beta: next(vec![spec.width])?.parameter(),
                stats: RunningStats {
                    mean: next(vec![spec.width])?.into_data(),
                    var: next(vec![spec.width])?.into_data(),
                },
            }),
            LayerKind::Activation => Layer::Relu,
            LayerKind::Pool => Layer::MaxPool { size: spec.kernel },
            LayerKind::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    Ok(layers)
}

pub fn decode(bytes: &[u8]) -> Result<NetworkState> {
    let (header, arrays): (Header, _) = container::decode(bytes)?;
    if header.kind != KIND {
        return Err(Error::Format {
            offset: 0,
            message: format!("container holds `{}`, not a network", header.kind),
        });
    }
    let mut arrays = arrays.into_iter();
    let layers = rebuild(&header.layers, &mut |shape| {
        let data = arrays
            .next()
            .ok_or_else(|| Error::state("checkpoint is missing parameter arrays"))?;
        Tensor::new(shape, data)
    })?;
    if arrays.next().is_some() {
        return Err(Error::state("checkpoint has surplus arrays"));
    }
    let net = NetworkState {
        input_shape: header.input_shape,
        num_classes: header.num_classes,
        layers,
        residuals: header.residuals,
        ids: header.ids,
        next_id: header.next_id,
        norm_cfg: NormConfig {
            eps: header.norm_eps,
            momentum: header.norm_momentum,
        },
    };
    net.validate()?;
    Ok(net)
}

pub fn save(net: &NetworkState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for net in [
            NetworkState::build_mlp(5, &[7, 3], 4, &mut rng).unwrap(),
            NetworkState::build_small_cnn([2, 8, 8], &[3, 2], 3, true, &mut rng).unwrap(),
        ] {
            let back = decode(&encode(&net).unwrap()).unwrap();
            assert_eq!(back, net);
            assert_eq!(encode(&back).unwrap(), encode(&net).unwrap());
        }
    }

    #[test]
    fn surgery_state_survives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = NetworkState::build_mlp(3, &[4], 2, &mut rng).unwrap();
        net.remove_neurons(0, &[1]).unwrap();
        let back = decode(&encode(&net).unwrap()).unwrap();
        assert_eq!(back.live_ids(), net.live_ids());
        assert_eq!(back.next_id(), net.next_id());
    }
}
