use mltr::embedder::{BackboneSpec, ConvStage, LatentEmbedder, BACKBONE_PREFIX};
use mltr::model::{ModelConfig, ParamStore};
use mltr::{rng, Tape, Tensor};

fn micro_spec() -> BackboneSpec {
    ModelConfig::micro().backbone
}

fn build(spec: &BackboneSpec, dim: usize, seed: u64) -> (ParamStore<f64>, LatentEmbedder) {
    let mut store = ParamStore::new();
    let emb = LatentEmbedder::build(spec, dim, &mut store, &mut rng::stream(seed, &[])).unwrap();
    (store, emb)
}

fn embed(store: &ParamStore<f64>, emb: &LatentEmbedder, x: Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(x);
    let z = emb.forward(&mut tape, &bound, x).unwrap().0;
    assert_eq!(tape.shape(z)[0], 1);
    tape.value(z).data().to_vec()
}

#[test]
fn same_seed_same_weights() {
    let (a, _) = build(&micro_spec(), 32, 9);
    let (b, _) = build(&micro_spec(), 32, 9);
    let (c, _) = build(&micro_spec(), 32, 10);
    let values = |s: &ParamStore<f64>| s.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn stage_shapes_follow_stride_and_padding() {
    assert_eq!(micro_spec().stage_shapes(64, 64).unwrap(), vec![(16, 32, 32), (32, 16, 16), (64, 8, 8)]);
    assert_eq!(micro_spec().stage_shapes(65, 33).unwrap(), vec![(16, 33, 17), (32, 17, 9), (64, 9, 5)]);
}

#[test]
fn output_is_one_token_for_any_input_size() {
    let (store, emb) = build(&micro_spec(), 24, 1);
    for &(h, w) in &[(32, 32), (64, 64), (48, 80), (512, 512)] {
        let x = Tensor::full(&[1, h, w], 0.5);
        let z = embed(&store, &emb, x);
        assert_eq!(z.len(), 24, "{h}x{w}");
        assert!(z.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn zero_image_yields_embedding_bias() {
    let (mut store, emb) = build(&micro_spec(), 8, 2);
    let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    let id = store.find("embedder.embed.b").unwrap();
    store.get_mut(id).value = Tensor::new(vec![8], bias.clone()).unwrap();
    assert_eq!(embed(&store, &emb, Tensor::zeros(&[1, 16, 16])), bias);
}

#[test]
fn unit_pointwise_conv_reduces_to_mean_of_gelu() {
    let spec = BackboneSpec {
        stages: vec![ConvStage { out_channels: 1, kernel: 1, stride: 1 }],
        input_channels: 1,
        pretrained: None,
        freeze: false,
    };
    let (mut store, emb) = build(&spec, 3, 4);
    let w = store.find(&format!("{BACKBONE_PREFIX}0.w")).unwrap();
    store.get_mut(w).value = Tensor::full(&[1, 1, 1, 1], 1.0);
    let ew = store.find("embedder.embed.w").unwrap();
    store.get_mut(ew).value = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();

    let pixels: Vec<f64> = (0..20).map(|i| (i as f64 - 7.0) / 5.0).collect();
    let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let mean = pixels.iter().map(|&x| gelu(x)).sum::<f64>() / 20.0;
    let z = embed(&store, &emb, Tensor::new(vec![1, 4, 5], pixels).unwrap());
    for (got, scale) in z.iter().zip([1.0, -2.0, 0.5]) {
        assert!((got - mean * scale).abs() < 1e-12, "{got} vs {}", mean * scale);
    }
}

#[test]
fn frozen_backbone_gets_no_gradients() {
    let spec = BackboneSpec { freeze: true, ..micro_spec() };
    let (store, emb) = build(&spec, 8, 3);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let x = tape.constant(Tensor::full(&[1, 16, 16], 0.3));
    let z = emb.forward(&mut tape, &bound, x).unwrap().0;
    let loss = tape.sum(z);
    tape.backward(loss).unwrap();
    for (id, p) in store.iter() {
        let grad = tape.grad(bound.var(id));
        if p.name.starts_with(BACKBONE_PREFIX) {
            assert!(!p.trainable && grad.is_none(), "{}", p.name);
        } else {
            assert!(grad.is_some(), "{}", p.name);
        }
    }
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let (store, emb) = build(&micro_spec(), 8, 0);
    let mut tape = Tape::<f64>::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
    assert!(matches!(emb.forward(&mut tape, &bound, x), Err(mltr::Error::Shape(_))));
}

#[test]
fn invalid_specs_are_config_errors() {
    let mut spec = micro_spec();
    spec.stages[1].stride = 0;
    assert!(matches!(spec.validate(), Err(mltr::Error::Config(_))));
    spec.stages.clear();
    assert!(matches!(spec.validate(), Err(mltr::Error::Config(_))));
}
