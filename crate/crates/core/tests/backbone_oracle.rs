//! Backbones filled with a closed-form weight pattern and compared with
//! torchvision / timm run on the same pattern (values frozen below).
//! Parameter names go through `apply_state`, so a naming drift from the
//! reference implementations fails here too.

use std::collections::BTreeMap;

use artgesture_core::autograd::{Graph, Tensor};
use artgesture_core::model::{pretrained, Backbone, BackboneFamily, BackboneSpec};
use artgesture_core::nn::Module;
use ndarray::{Ix2, IxDyn};
use rand::SeedableRng;

fn name_hash(name: &str) -> f64 {
    (name.bytes().map(u64::from).sum::<u64>() % 97) as f64
}

fn pattern(name: &str, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let h = name_hash(name);
    let last = name.rsplit('.').next().unwrap();
    let values = (0..n)
        .map(|j| {
            let s = (0.1 * j as f64 + 0.7 * h).sin();
            let v = match last {
                "running_var" => 1.0 + 0.2 * s * s,
                "logit_scale" => 10f64.ln() + 0.1 * s,
                _ if shape.len() >= 2 => s * (1.0 / (n / shape[0]) as f64).sqrt(),
                "weight" => 1.0 + 0.1 * s,
                _ => 0.05 * s,
            };
            v as f32
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), values).unwrap()
}

fn features(family: BackboneFamily) -> ndarray::Array2<f32> {
    let spec = BackboneSpec::new(family, 64);
    let mut backbone = Backbone::new(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut state = BTreeMap::new();
    backbone.visit("", &mut |name, p| {
        let name = name.strip_prefix("body.").unwrap();
        state.insert(name.to_string(), pattern(name, p.shape()));
    });
    let loaded = pretrained::apply_state(&mut backbone, &state).unwrap();
    assert_eq!(loaded, state.len());

    let x = Tensor::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |d| {
        let j = ((d[0] * 3 + d[1]) * 64 + d[2]) * 64 + d[3];
        (0.05 * j as f64).sin() as f32
    });
    let g = Graph::inference();
    let y = backbone.forward(&g, &g.constant(x)).into_value();
    y.into_dimensionality::<Ix2>().unwrap()
}

fn check(family: BackboneFamily, width: usize, first: [f64; 6], row1_tail: [f64; 4], sum: f64) {
    let y = features(family);
    assert_eq!(y.shape(), [2, width]);
    let scale = first.iter().chain(&row1_tail).fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 2e-5 * scale;
    for (k, want) in first.iter().enumerate() {
        let got = y[[0, k]] as f64;
        assert!((got - want).abs() <= tol, "{family} [0,{k}]: {got} vs {want}");
    }
    for (k, want) in row1_tail.iter().enumerate() {
        let got = y[[1, width - 4 + k]] as f64;
        assert!((got - want).abs() <= tol, "{family} [1,{}]: {got} vs {want}", width - 4 + k);
    }
    let got: f64 = y.iter().map(|&v| v as f64).sum();
    assert!((got - sum).abs() <= 1e-5 * sum.abs().max(1.0) + 1e-3, "{family} sum {got} vs {sum}");
}

#[test]
fn resnet50_matches_torchvision() {
    check(
        BackboneFamily::Resnet50,
        2048,
        [0.20580193400382996, 1.9328041076660156, 1.1051232814788818, 0.0, 0.0, 0.0],
        [0.27137768268585205, 1.8573710918426514, 0.944166362285614, 0.01294623501598835],
        1884.3322491377621,
    );
}

#[test]
fn resnet101_matches_torchvision() {
    check(
        BackboneFamily::Resnet101,
        2048,
        [0.8087667226791382, 2.887885808944702, 0.517020046710968, 0.0, 1.1870886087417603, 0.0],
        [1.112600326538086, 2.453244209289551, 0.4960242509841919, 0.007466841489076614],
        3012.6223348289423,
    );
}

#[test]
fn hrnet_w32_matches_timm() {
    check(
        BackboneFamily::HrnetW32,
        2048,
        [0.0, 360345.3125, 318291.6875, 0.0, 5216.841796875, 551776.5625],
        [0.0, 508479.25, 306406.34375, 0.0],
        793430859.2631226,
    );
}

#[test]
fn swin_v2_tiny_matches_timm() {
    check(
        BackboneFamily::SwinV2,
        768,
        [-1.5667338371276855, 0.7078379988670349, 0.32954707741737366, 0.2126809060573578, 0.0782540962100029, 1.151175856590271],
        [0.25153616070747375, 0.15755832195281982, 0.04132366180419922, 1.1658885478973389],
        -0.8311813283362426,
    );
}
