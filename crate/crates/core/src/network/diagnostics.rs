//! Feature-map inspection: dead-filter counts and per-filter image export.

use std::path::{Path, PathBuf};

use image::GrayImage;

use super::{ForwardPass, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeadFilterReport {
    pub dead: usize,
    pub total: usize,
    pub fraction: f64,
}

/// For every convolution, the index of the layer holding its activated
/// feature map (the activation right after it, or the convolution itself).
/// Position `k` in the result is convolution stage `k + 1`.
pub fn conv_stage_layers<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    let layers = net.layers();
    layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv3x3 { .. }))
        .map(|(i, _)| match layers.get(i + 1) {
            Some(LayerSpec::Activation(_)) => i + 1,
            _ => i,
        })
        .collect()
}

fn is_conv_map<T: Scalar>(net: &Network<T>, layer_index: usize) -> bool {
    let layers = net.layers();
    match layers.get(layer_index) {
        Some(LayerSpec::Conv3x3 { .. }) => true,
        Some(LayerSpec::Activation(_)) => {
            layer_index > 0 && matches!(layers[layer_index - 1], LayerSpec::Conv3x3 { .. })
        }
        _ => false,
    }
}

/// Counts filters whose map at `layer_index` is exactly zero for every
/// sample in the batch.
pub fn dead_filter_report<T: Scalar>(
    net: &Network<T>,
    pass: &ForwardPass<T>,
    layer_index: usize,
) -> Result<DeadFilterReport> {
    if !is_conv_map(net, layer_index) {
        return Err(Error::Usage(format!(
            "layer {layer_index} is not a convolutional feature map"
        )));
    }
    if layer_index >= pass.depth() {
        return Err(Error::Usage(format!(
            "forward pass stopped before layer {layer_index}"
        )));
    }
    let maps = pass.layer_output(layer_index);
    let (n, c) = (maps.shape()[0], maps.shape()[1]);
    let plane = maps.item_len() / c;
    let dead = (0..c)
        .filter(|&f| {
            (0..n).all(|s| {
                let start = s * c * plane + f * plane;
                maps.data()[start..start + plane].iter().all(|v| *v == T::zero())
            })
        })
        .count();
    Ok(DeadFilterReport {
        dead,
        total: c,
        fraction: dead as f64 / c as f64,
    })
}

/// Min-max normalises one map to 8-bit grey. Constant maps become black.
fn map_to_image<T: Scalar>(values: &[T], h: usize, w: usize) -> GrayImage {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let v = v.as_f64();
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    let pixels = values
        .iter()
        .map(|v| {
            if range > 0.0 {
                ((v.as_f64() - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches extents")
}

/// Writes `layer{L}_filter{F}.png` for each requested convolution stage
/// (1-based) using sample `sample` of the pass. Returns the written paths.
pub fn export_activation_maps<T: Scalar>(
    net: &Network<T>,
    pass: &ForwardPass<T>,
    stages: &[usize],
    sample: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let stage_layers = conv_stage_layers(net);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &stage in stages {
        let layer = *stage
            .checked_sub(1)
            .and_then(|k| stage_layers.get(k))
            .ok_or_else(|| {
                Error::Usage(format!(
                    "convolution stage {stage} does not exist (network has {})",
                    stage_layers.len()
                ))
            })?;
        if layer >= pass.depth() {
            return Err(Error::Usage(format!("forward pass stopped before stage {stage}")));
        }
        let maps: &Tensor<T> = pass.layer_output(layer);
        if sample >= maps.shape()[0] {
            return Err(Error::Usage(format!("batch has no sample {sample}")));
        }
        let (c, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
        let item = maps.item(sample);
        for f in 0..c {
            let img = map_to_image(&item[f * h * w..(f + 1) * h * w], h, w);
            let path = dir.join(format!("layer{stage}_filter{f}.png"));
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_paper_net, Activation, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_net(act: Activation) -> Network<f64> {
        Network::new(
            &[1, 6, 6],
            vec![
                LayerSpec::Conv3x3 { out_channels: 3, pad: 0 },
                LayerSpec::Activation(act),
                LayerSpec::MaxPool2x2,
            ],
        )
        .unwrap()
    }

    fn random_input(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[2, 1, 6, 6], (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forced_dead_filters() {
        let mut net = conv_net(Activation::Relu);
        // Zero kernels with negative bias: every pre-activation is negative.
        net.layer_params_mut(0).unwrap().1.data_mut().fill(-1.0);
        let pass = net.forward(&random_input(1), Mode::Eval).unwrap();
        let report = dead_filter_report(&net, &pass, 1).unwrap();
        assert_eq!(report, DeadFilterReport { dead: 3, total: 3, fraction: 1.0 });
    }

    #[test]
    fn leaky_filters_stay_alive() {
        let mut net = conv_net(Activation::LeakyRelu { alpha: 0.1 });
        net.init_xavier(&mut ChaCha8Rng::seed_from_u64(3));
        net.layer_params_mut(0).unwrap().1.data_mut().fill(-1.0);
        let pass = net.forward(&random_input(2), Mode::Eval).unwrap();
        assert_eq!(dead_filter_report(&net, &pass, 1).unwrap().fraction, 0.0);
    }

    #[test]
    fn non_conv_layer_is_a_usage_error() {
        let net = conv_net(Activation::Relu);
        let pass = net.forward(&random_input(1), Mode::Eval).unwrap();
        assert!(matches!(dead_filter_report(&net, &pass, 2), Err(Error::Usage(_))));
        assert!(dead_filter_report(&net, &pass, 0).is_ok());
    }

    #[test]
    fn stage_layers_of_full_net() {
        assert_eq!(conv_stage_layers(&build_paper_net()), [1, 4, 7, 10]);
    }

    #[test]
    fn export_writes_one_png_per_filter() {
        let mut net = conv_net(Activation::Relu);
        net.init_xavier(&mut ChaCha8Rng::seed_from_u64(5));
        let pass = net.forward(&random_input(3), Mode::Eval).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_activation_maps(&net, &pass, &[1], 0, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let img = image::open(dir.path().join("layer1_filter0.png")).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (4, 4));
        assert!(export_activation_maps(&net, &pass, &[2], 0, dir.path()).is_err());
    }
}
