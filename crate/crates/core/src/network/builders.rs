use super::{Activation, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Slope used by the leaky variants.
pub const LEAKY_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActivationVariant {
    #[default]
    Relu,
    Leaky,
}

impl ActivationVariant {
    fn hidden(self) -> LayerSpec {
        match self {
            ActivationVariant::Relu => LayerSpec::Activation(Activation::Relu),
            ActivationVariant::Leaky => LayerSpec::Activation(Activation::LeakyRelu { alpha: LEAKY_ALPHA }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DropoutVariant {
    None,
    /// 50% dropout before the fully connected block.
    #[default]
    Dense,
    /// 25% dropout after every pooling layer plus the 50% dense dropout.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetVariant {
    pub activation: ActivationVariant,
    pub dropout: DropoutVariant,
}

fn conv_stack(blocks: &[(usize, usize)], pad: usize, variant: NetVariant) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &(convs, channels) in blocks {
        for _ in 0..convs {
            layers.push(LayerSpec::Conv3x3 {
                out_channels: channels,
                pad,
            });
            layers.push(variant.activation.hidden());
        }
        layers.push(LayerSpec::MaxPool2x2);
        if variant.dropout == DropoutVariant::Full {
            layers.push(LayerSpec::Dropout { rate: 0.25 });
        }
    }
    layers
}

fn dense_head(variant: NetVariant) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Flatten];
    if variant.dropout != DropoutVariant::None {
        layers.push(LayerSpec::Dropout { rate: 0.5 });
    }
    layers.extend([
        LayerSpec::Dense { out_units: 512 },
        variant.activation.hidden(),
        LayerSpec::Dense { out_units: 1 },
        LayerSpec::Activation(Activation::Sigmoid),
    ]);
    layers
}

/// The four-block custom network on `3×150×150` input with ReLU and 50% dense dropout.
pub fn build_paper_net() -> Network<f32> {
    build_paper_net_variant(NetVariant::default())
}

pub fn build_paper_net_variant<T: Scalar>(variant: NetVariant) -> Network<T> {
    let mut layers = conv_stack(&[(1, 32), (1, 64), (1, 128), (1, 128)], 0, variant);
    layers.extend(dense_head(variant));
    Network::new(&[3, 150, 150], layers).expect("the custom architecture is well formed")
}

/// Thirteen same-padded 3×3 convolutions in 2-2-3-3-3 blocks of
/// 64/128/256/512/512 channels, five pools, then the dense-512/dense-1 head.
/// Parameters start at zero; call [`Network::init_xavier`].
pub fn build_vgg16_shaped(input_shape: &[usize]) -> Result<Network<f32>> {
    build_vgg16_shaped_variant(input_shape, NetVariant::default())
}

pub fn build_vgg16_shaped_variant<T: Scalar>(input_shape: &[usize], variant: NetVariant) -> Result<Network<T>> {
    let &[_, h, w] = input_shape else {
        return Err(Error::shape(format!("VGG-16 input must be C×H×W, got {input_shape:?}")));
    };
    if h < 32 || w < 32 {
        return Err(Error::shape(format!(
            "{h}×{w} input does not survive five 2×2 pooling stages (need at least 32×32)"
        )));
    }
    let mut layers = conv_stack(&[(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)], 1, variant);
    layers.extend(dense_head(variant));
    Network::new(input_shape, layers)
}

/// Logistic regression on a flat feature vector: dense(1) then sigmoid.
pub fn build_logistic_head<T: Scalar>(features: usize) -> Network<T> {
    Network::new(
        &[features],
        vec![LayerSpec::Dense { out_units: 1 }, LayerSpec::Activation(Activation::Sigmoid)],
    )
    .expect("feature count is positive")
}

/// Joins the convolutional part of `extractor` (everything up to and
/// including its flatten layer) with `head`, keeping both parameter sets.
pub fn compose_feature_head<T: Scalar>(extractor: &Network<T>, head: &Network<T>) -> Result<Network<T>> {
    let flatten = extractor
        .layers()
        .iter()
        .position(|l| *l == LayerSpec::Flatten)
        .ok_or_else(|| Error::Usage("feature extractor has no flatten layer".into()))?;
    if extractor.shape_trace()[flatten] != head.input_shape() {
        return Err(Error::shape(format!(
            "head expects {:?} features but the extractor yields {:?}",
            head.input_shape(),
            extractor.shape_trace()[flatten]
        )));
    }
    let mut layers = extractor.layers()[..=flatten].to_vec();
    layers.extend_from_slice(head.layers());
    let mut net = Network::new(extractor.input_shape(), layers)?;
    let mut params: Vec<_> = (0..=flatten)
        .filter_map(|i| extractor.layer_params(i))
        .flat_map(|(w, b)| [w.clone(), b.clone()])
        .collect();
    params.extend(head.params().iter().cloned());
    net.set_params(params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn full_net_matches_architecture_table() {
        let net = build_paper_net();
        let rows = net.summary();
        let counts: Vec<usize> = rows.iter().map(|r| r.param_count).collect();
        assert_eq!(
            counts,
            [896, 0, 18_496, 0, 73_856, 0, 147_584, 0, 0, 0, 3_211_776, 513]
        );
        assert_eq!(net.param_count(), 3_453_121);
        let shapes: Vec<Vec<usize>> = rows.iter().map(|r| r.output_shape.clone()).collect();
        let expected: Vec<Vec<usize>> = vec![
            vec![32, 148, 148],
            vec![32, 74, 74],
            vec![64, 72, 72],
            vec![64, 36, 36],
            vec![128, 34, 34],
            vec![128, 17, 17],
            vec![128, 15, 15],
            vec![128, 7, 7],
            vec![6272],
            vec![6272],
            vec![512],
            vec![1],
        ];
        assert_eq!(shapes, expected);
    }

    #[test]
    fn variants_change_layers_not_parameters() {
        let full = build_paper_net_variant::<f32>(NetVariant {
            activation: ActivationVariant::Leaky,
            dropout: DropoutVariant::Full,
        });
        assert_eq!(full.param_count(), 3_453_121);
        let dropouts: Vec<f64> = full
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dropout { rate } => Some(*rate),
                _ => None,
            })
            .collect();
        assert_eq!(dropouts, [0.25, 0.25, 0.25, 0.25, 0.5]);
        let leaky = full
            .layers()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Activation(Activation::LeakyRelu { alpha }) if *alpha == 0.1))
            .count();
        assert_eq!(leaky, 5);

        let none = build_paper_net_variant::<f32>(NetVariant {
            activation: ActivationVariant::Relu,
            dropout: DropoutVariant::None,
        });
        assert!(!none.layers().iter().any(|l| matches!(l, LayerSpec::Dropout { .. })));
    }

    #[test]
    fn vgg16_shape_and_size() {
        let net = build_vgg16_shaped(&[3, 150, 150]).unwrap();
        let convs = net
            .layers()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv3x3 { .. }))
            .count();
        assert_eq!(convs, 13);
        assert!(net.shape_trace().iter().flatten().all(|&e| e > 0));
        let conv_params: usize = (0..net.layers().len())
            .filter(|&i| matches!(net.layers()[i], LayerSpec::Conv3x3 { .. }))
            .map(|i| net.layer_param_count(i))
            .sum();
        assert_eq!(conv_params, 14_714_688);
        assert!(conv_params > 13_000_000 && conv_params < 17_000_000);
        // 150 → 75 → 37 → 18 → 9 → 4 after the pools.
        let flatten = net.layers().iter().position(|l| *l == LayerSpec::Flatten).unwrap();
        assert_eq!(net.shape_trace()[flatten], vec![512 * 4 * 4]);

        assert!(matches!(build_vgg16_shaped(&[3, 31, 150]), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_head_composition_keeps_parameters() {
        let extractor = build_paper_net_variant::<f64>(NetVariant::default());
        let mut head = build_logistic_head::<f64>(6272);
        head.params_mut()[1].data_mut()[0] = 0.75;
        let net = compose_feature_head(&extractor, &head).unwrap();
        assert_eq!(net.param_count(), 896 + 18_496 + 73_856 + 147_584 + 6273);
        assert_eq!(net.params().last().unwrap().data(), &[0.75]);
        let x = Tensor::<f64>::zeros(&[1, 3, 150, 150]).unwrap();
        let p = net.predict(&x).unwrap();
        let expected = 1.0 / (1.0 + (-0.75f64).exp());
        assert!((p.data()[0] - expected).abs() < 1e-15);

        let wrong = build_logistic_head::<f64>(10);
        assert!(compose_feature_head(&extractor, &wrong).is_err());
    }
}
