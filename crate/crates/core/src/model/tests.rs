use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis, Ix2, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::autograd::Graph;

fn labels(n: usize) -> LabelMap {
    LabelMap::new((0..n).map(|i| format!("c{i}"))).unwrap()
}

fn tiny_config(hidden: Vec<usize>, classes: usize, context: bool) -> ModelConfig {
    ModelConfig {
        crop: BackboneSpec::new(BackboneFamily::TinyTest, 16),
        context: context.then(|| BackboneSpec::new(BackboneFamily::TinyTest, 16)),
        head: FusionHeadConfig { hidden_dims: hidden, ..Default::default() },
        num_classes: classes,
    }
}

fn tiny(seed: u64) -> TwoStreamModel {
    build_model(&tiny_config(vec![64, 64, 32], 6, true), labels(6), seed).unwrap()
}

fn image(n: usize, size: usize, phase: f32) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[n, 3, size, size]), |d| {
        ((d[0] * 7 + d[1] * 3 + d[2] * size + d[3]) as f32 * 0.13 + phase).sin()
    })
}

fn rows(t: &Tensor) -> Array2<f32> {
    t.clone().into_dimensionality::<Ix2>().unwrap()
}

#[test]
fn head_widths_follow_config() {
    let m = tiny(0);
    assert_eq!(m.head.widths(), vec![64, 64, 64, 32, 6]);
    assert_eq!(m.head.layers.len(), 4);
    let logits = m.predict_logits(&image(3, 16, 0.0), Some(&image(3, 16, 1.0)), Variant::WithContext).unwrap();
    assert_eq!(logits.shape(), [3, 6]);
}

#[test]
fn head_needs_three_hidden_widths() {
    let cfg = tiny_config(vec![64, 32], 6, true);
    assert!(matches!(build_model(&cfg, labels(6), 0), Err(ModelError::InvalidConfig(_))));
    let cfg = tiny_config(vec![64, 0, 32], 6, true);
    assert!(matches!(build_model(&cfg, labels(6), 0), Err(ModelError::InvalidConfig(_))));
    let cfg = tiny_config(vec![64, 64, 32], 5, true);
    assert!(matches!(build_model(&cfg, labels(6), 0), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn resnet50_pair_feeds_4096_wide_head() {
    let cfg = ModelConfig {
        crop: BackboneSpec::new(BackboneFamily::Resnet50, 64),
        context: Some(BackboneSpec::new(BackboneFamily::Resnet50, 64)),
        head: FusionHeadConfig::default(),
        num_classes: 6,
    };
    let m = build_model(&cfg, labels(6), 0).unwrap();
    assert_eq!(m.head.input_dim(), 4096);
    assert_eq!(m.head.widths(), vec![4096, 1024, 512, 256, 6]);
    let g = Graph::inference();
    let (fp, fc) = m.extract_features(&g, &g.constant(image(1, 64, 0.0)), Some(&g.constant(image(1, 64, 0.5)))).unwrap();
    assert_eq!(fp.shape(), [1, 2048]);
    assert_eq!(fc.unwrap().shape(), [1, 2048]);
}

#[test]
fn projection_changes_feature_width() {
    let mut cfg = tiny_config(vec![8, 8, 8], 3, true);
    cfg.crop.feature_dim = Some(10);
    let m = build_model(&cfg, labels(3), 0).unwrap();
    assert_eq!(m.head.input_dim(), 10 + TinyNet::FEATURES);
    assert!(m.named_params().iter().any(|(n, _)| n.starts_with("crop.proj.")));
}

#[test]
fn unknown_backbone_names_are_listed() {
    let err = "resnet18".parse::<BackboneFamily>().unwrap_err();
    assert!(matches!(err, ModelError::UnknownBackbone { .. }));
    assert!(err.to_string().contains("hrnet_w32"));
    assert_eq!("SwinV2".parse::<BackboneFamily>().unwrap(), BackboneFamily::SwinV2);
    assert_eq!("ResNet-50".parse::<BackboneFamily>().unwrap(), BackboneFamily::Resnet50);
}

#[test]
fn invalid_input_sizes_rejected() {
    let mut spec = BackboneSpec::new(BackboneFamily::SwinV2, 100);
    assert!(spec.validate().is_err());
    spec.input_size = 224;
    assert!(spec.validate().is_ok());
    assert!(BackboneSpec::new(BackboneFamily::HrnetW32, 48).validate().is_err());
}

#[test]
fn branches_share_no_parameters() {
    let m = tiny(1);
    let ids = |prefix: &str| -> HashSet<_> {
        m.named_params().into_iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, p)| p.id()).collect()
    };
    let (crop, ctx, head) = (ids("crop."), ids("context."), ids("head."));
    assert!(!crop.is_empty() && !ctx.is_empty());
    assert!(crop.is_disjoint(&ctx) && crop.is_disjoint(&head) && ctx.is_disjoint(&head));
}

#[test]
fn person_features_ignore_context_input() {
    let m = tiny(2);
    let crop = image(2, 16, 0.0);
    let g = Graph::inference();
    let (a, _) = m.extract_features(&g, &g.constant(crop.clone()), Some(&g.constant(image(2, 16, 1.0)))).unwrap();
    let (b, _) = m.extract_features(&g, &g.constant(crop), Some(&g.constant(image(2, 16, 2.5)))).unwrap();
    assert_eq!(a.value(), b.value());
}

#[test]
fn fusion_is_order_sensitive() {
    let m = tiny(3);
    let g = Graph::inference();
    let a = g.constant(Tensor::from_shape_fn(IxDyn(&[2, 32]), |d| (d[1] as f32 * 0.3).sin() + 0.5));
    let b = g.constant(Tensor::from_shape_fn(IxDyn(&[2, 32]), |d| (d[1] as f32 * 0.7).cos() + 0.5));
    let ab = m.fuse_and_classify(&g, &a, Some(&b)).unwrap();
    let ba = m.fuse_and_classify(&g, &b, Some(&a)).unwrap();
    assert_ne!(ab.value(), ba.value());
}

#[test]
fn zero_features_give_bias_chain() {
    let mut m = tiny(4);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for layer in &mut m.head.layers {
        let b = layer.bias.as_mut().unwrap();
        let shape = b.shape().to_vec();
        b.set(Tensor::from_shape_fn(IxDyn(&shape), |_| rand::Rng::random_range(&mut rng, -0.5..0.5)));
    }
    let g = Graph::inference();
    let zeros = g.constant(Tensor::zeros(IxDyn(&[1, 32])));
    let logits = rows(m.fuse_and_classify(&g, &zeros, Some(&zeros)).unwrap().value());

    // Scalar oracle: x = relu(W x + b) layer by layer, starting from b0.
    let mut x: Array1<f32> = Array1::zeros(64);
    for (i, layer) in m.head.layers.iter().enumerate() {
        let w = rows(layer.weight.value());
        let b = layer.bias.as_ref().unwrap().value().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array1::zeros(w.nrows());
        for r in 0..w.nrows() {
            y[r] = (0..w.ncols()).map(|c| w[[r, c]] * x[c]).sum::<f32>() + b[r];
        }
        x = if i < 3 { y.mapv(|v| v.max(0.0)) } else { y };
    }
    for (got, want) in logits.row(0).iter().zip(&x) {
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn gradients_reach_every_stage() {
    let m = tiny(5);
    let g = Graph::training(0);
    let crop = g.input(image(4, 16, 0.0));
    let ctx = g.input(image(4, 16, 1.3));
    let logits = m.forward(&g, &crop, Some(&ctx), Variant::WithContext).unwrap();
    let loss = g.weighted_cross_entropy(&logits, &[0, 1, 2, 3], &[1.0; 6], 0.1);
    let grads = g.backward(&loss);
    let nonzero = |t: Option<&Tensor>| t.is_some_and(|t| t.iter().any(|v| *v != 0.0));
    assert!(nonzero(grads.of(&crop)));
    assert!(nonzero(grads.of(&ctx)));
    let params = m.named_params();
    for prefix in ["crop.body.", "context.body.", "head.layers.0.", "head.layers.1.", "head.layers.2.", "head.layers.3."] {
        assert!(
            params.iter().any(|(n, p)| n.starts_with(prefix) && p.is_trainable() && nonzero(grads.param(p.id()))),
            "no gradient under {prefix}"
        );
    }
}

#[test]
fn without_context_variant() {
    let m = tiny(6);
    let crop = image(2, 16, 0.0);
    let a = m.predict_logits(&crop, Some(&image(2, 16, 1.0)), Variant::WithoutContext).unwrap();
    let b = m.predict_logits(&crop, None, Variant::WithoutContext).unwrap();
    assert_eq!(a, b);

    let g = Graph::inference();
    let (fp, _) = m.extract_features(&g, &g.constant(crop.clone()), Some(&g.constant(image(2, 16, 1.0)))).unwrap();
    let zeros = g.constant(Tensor::zeros(IxDyn(&[2, 32])));
    assert_eq!(m.fuse_and_classify(&g, &fp, Some(&zeros)).unwrap().into_value(), a);

    let solo = build_model(&tiny_config(vec![8, 8, 8], 6, false), labels(6), 0).unwrap();
    assert_eq!(solo.head.input_dim(), 32);
    assert_eq!(solo.default_variant(), Variant::WithoutContext);
    assert!(matches!(solo.predict_logits(&crop, None, Variant::WithContext), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn wrong_input_shapes_are_reported() {
    let m = tiny(7);
    let err = m.predict_logits(&image(2, 20, 0.0), Some(&image(2, 16, 0.0)), Variant::WithContext);
    assert!(matches!(err, Err(ModelError::ShapeMismatch(_))));
    let err = m.predict_logits(&image(2, 16, 0.0), Some(&image(3, 16, 0.0)), Variant::WithContext);
    assert!(matches!(err, Err(ModelError::ShapeMismatch(_))));
    let err = m.predict_logits(&image(2, 16, 0.0), None, Variant::WithContext);
    assert!(matches!(err, Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn same_seed_same_weights() {
    let (a, b, c) = (tiny(11), tiny(11), tiny(12));
    let values = |m: &TwoStreamModel| m.named_params().into_iter().map(|(_, p)| p.value().clone()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn hrnet_and_swin_pool_to_native_width() {
    for (family, width) in [(BackboneFamily::HrnetW32, 2048), (BackboneFamily::SwinV2, 768)] {
        let spec = BackboneSpec::new(family, 64);
        let b = Backbone::new(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Graph::inference();
        let y = b.forward(&g, &g.constant(image(1, 64, 0.0)));
        assert_eq!(y.shape(), [1, width]);
        assert!(y.value().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn pretrained_state_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = BackboneSpec::new(BackboneFamily::TinyTest, 16);
    let src = Backbone::new(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tensors = std::collections::BTreeMap::new();
    src.visit("model", &mut |name, p| {
        tensors.insert(name.replacen("model.body.", "model.", 1), p.value().clone());
    });
    tensors.insert("model.fc.weight".into(), Tensor::zeros(IxDyn(&[10, 32])));
    let path = dir.path().join("tiny_test.safetensors");
    pretrained::write_safetensors(&path, &tensors).unwrap();

    let mut dst = Backbone::new(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2)).unwrap();
    let read = pretrained::read_safetensors(&path).unwrap();
    assert_eq!(pretrained::apply_state(&mut dst, &read).unwrap(), 4);
    let x = image(2, 16, 0.0);
    let g = Graph::inference();
    assert_eq!(src.forward(&g, &g.constant(x.clone())).value(), dst.forward(&g, &g.constant(x)).value());

    let mut wrong = read.clone();
    wrong.insert("model.conv1.weight".into(), Tensor::zeros(IxDyn(&[16, 3, 5, 5])));
    assert!(pretrained::apply_state(&mut dst, &wrong).unwrap_err().contains("conv1.weight"));
    wrong.remove("model.conv1.weight");
    assert!(pretrained::apply_state(&mut dst, &wrong).unwrap_err().contains("missing"));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn batch_permutation_permutes_logits(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(), phase in -3.0f32..3.0) {
        let m = tiny(8);
        let crop = image(5, 16, phase);
        let ctx = image(5, 16, phase + 0.7);
        let base = rows(&m.predict_logits(&crop, Some(&ctx), Variant::WithContext).unwrap());
        let permuted = m
            .predict_logits(&crop.select(Axis(0), &perm), Some(&ctx.select(Axis(0), &perm)), Variant::WithContext)
            .unwrap();
        let expect = base.select(Axis(0), &perm).into_dyn();
        for (a, b) in permuted.iter().zip(expect.iter()) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }
}
