use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck;
use crate::slim::WidthList;

fn batch<T: Scalar>(seed: u64, spec: &ModelSpec, n: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, spec.frames, spec.mel_bins], |_| T::of(rng.random_range(-2.0..2.0))).unwrap()
}

fn tiny_cnn() -> ModelSpec {
    ModelSpec {
        arch: Architecture::Cnn {
            rows: vec![
                ConvRow::new((3, 2), 6, (1, 1), (2, 1)),
                ConvRow::new((2, 2), 8, (1, 1), (1, 1)),
            ],
            slim_last_output: true,
        },
        frames: 9,
        mel_bins: 5,
        num_classes: 3,
        widths: WidthList::new(vec![1.0, 0.5]).unwrap(),
    }
}

fn tiny_transformer(layers: usize) -> ModelSpec {
    ModelSpec {
        arch: Architecture::Transformer(TransformerSpec {
            dim: 8,
            mlp_dim: 6,
            heads: 2,
            layers,
            embed_dim: 6,
        }),
        frames: 4,
        mel_bins: 3,
        num_classes: 3,
        widths: WidthList::new(vec![1.0, 0.5]).unwrap(),
    }
}

fn count_at(spec: &ModelSpec, w: f64) -> usize {
    let mut m = Model::<f32>::build(spec, 0).unwrap();
    m.set_active_width(w).unwrap();
    m.active_param_count().unwrap()
}

#[test]
fn one_layer_toy_conv_has_forty_params() {
    let spec = ModelSpec {
        arch: Architecture::Cnn {
            rows: vec![ConvRow::new((3, 3), 4, (1, 1), (1, 1))],
            slim_last_output: true,
        },
        frames: 5,
        mel_bins: 5,
        num_classes: 2,
        widths: WidthList::full(),
    };
    let m = Model::<f32>::build(&spec, 0).unwrap();
    let w = m.store().by_name("conv1.weight").unwrap().len();
    let b = m.store().by_name("conv1.bias").unwrap().len();
    assert_eq!(w + b, 40);
}

#[test]
fn preset_parameter_totals() {
    // Hand-summed layer by layer: conv weights and biases, the active
    // width's norm affine parameters, and the classifier.
    let cnn = ModelSpec::baseline_cnn(2);
    let expect = [(1.0, 198_746), (0.75, 112_196), (0.5, 50_222), (0.25, 12_824)];
    for (w, n) in expect {
        assert_eq!(count_at(&cnn, w), n, "cnn width {w}");
    }
    let gsc = ModelSpec::transformer_speech_commands();
    for (w, n) in [(1.0, 71_715), (0.75, 46_451), (0.5, 27_843), (0.25, 15_891)] {
        assert_eq!(count_at(&gsc, w), n, "speech commands transformer width {w}");
    }
    let wakeword = ModelSpec::transformer_wakeword();
    for (w, n) in [(1.0, 129_090), (0.75, 80_834), (0.5, 45_890), (0.25, 24_258)] {
        assert_eq!(count_at(&wakeword, w), n, "wakeword transformer width {w}");
    }
}

#[test]
fn counts_strictly_increase_with_width() {
    for spec in [ModelSpec::desk_cnn(4), ModelSpec::transformer_wakeword(), tiny_cnn()] {
        let counts: Vec<usize> = spec.widths.iter().map(|w| count_at(&spec, w)).collect();
        assert!(counts.windows(2).all(|p| p[0] > p[1]), "{counts:?}");
    }
}

#[test]
fn logits_extent_is_fixed_across_widths() {
    for spec in [ModelSpec::desk_cnn(4), tiny_transformer(2), tiny_cnn()] {
        let mut m = Model::<f32>::build(&spec, 1).unwrap();
        let x = batch::<f32>(2, &spec, 3);
        for w in spec.widths.iter() {
            m.set_active_width(w).unwrap();
            let y = m.infer(&x).unwrap();
            assert_eq!(y.shape(), &[3, spec.num_classes]);
        }
    }
}

#[test]
fn duplicated_rows_give_identical_logits() {
    for spec in [tiny_cnn(), tiny_transformer(1)] {
        let m = Model::<f32>::build(&spec, 3).unwrap();
        let one = batch::<f32>(4, &spec, 1);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(&[2, spec.frames, spec.mel_bins], data).unwrap();
        let y = m.infer(&two).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }
}

#[test]
fn input_shape_is_checked() {
    let spec = tiny_cnn();
    let m = Model::<f32>::build(&spec, 0).unwrap();
    let bad = Tensor::<f32>::ones(&[2, spec.frames + 1, spec.mel_bins]).unwrap();
    assert!(matches!(m.infer(&bad), Err(Error::Shape { .. })));
}

#[test]
fn spatial_underflow_fails_building() {
    let mut spec = ModelSpec::baseline_cnn(2);
    spec.frames = 30;
    let err = Model::<f32>::build(&spec, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("conv layer"), "{err}");
}

#[test]
fn width_switching_is_stateless_in_eval() {
    let spec = tiny_cnn();
    let fresh = Model::<f32>::build(&spec, 5).unwrap();
    let mut m = fresh.clone();
    let x = batch::<f32>(6, &spec, 4);
    m.set_active_width(0.5).unwrap();
    m.infer(&x).unwrap();
    m.set_active_width(1.0).unwrap();
    assert!(m.infer(&x).unwrap().bit_eq(&fresh.infer(&x).unwrap()));
    assert!(matches!(m.set_active_width(0.3), Err(Error::Config(_))));
}

#[test]
fn build_is_deterministic_per_seed() {
    let spec = tiny_transformer(2);
    let a = Model::<f32>::build(&spec, 11).unwrap();
    let b = Model::<f32>::build(&spec, 11).unwrap();
    let c = Model::<f32>::build(&spec, 12).unwrap();
    assert!(a.store().bit_eq(b.store()));
    assert!(!a.store().bit_eq(c.store()));
}

/// Trains a few steps so running statistics differ across widths.
fn warmed_up(spec: &ModelSpec, seed: u64) -> Model<f32> {
    let mut m = Model::<f32>::build(spec, seed).unwrap();
    for (i, w) in spec.widths.widths().to_vec().into_iter().enumerate() {
        m.set_active_width(w).unwrap();
        m.forward(&batch(seed + i as u64, spec, 4), Mode::Train).unwrap();
    }
    m
}

#[test]
fn extracted_subnetworks_reproduce_logits_bitwise() {
    for spec in [ModelSpec::desk_cnn(4), tiny_cnn(), tiny_transformer(2), tiny_transformer(0)] {
        let mut m = warmed_up(&spec, 21);
        for w in spec.widths.iter() {
            let sub = m.extract_subnetwork(w).unwrap();
            m.set_active_width(w).unwrap();
            for k in 0..5 {
                let x = batch::<f32>(100 + k, &spec, 2);
                let a = m.infer(&x).unwrap();
                let b = sub.infer(&x).unwrap();
                assert!(a.bit_eq(&b), "width {w} input {k}");
            }
            assert_eq!(sub.store().trainable_count(), m.active_param_count().unwrap());
        }
    }
}

#[test]
fn extraction_leaves_source_width_untouched() {
    let spec = tiny_cnn();
    let mut m = Model::<f32>::build(&spec, 0).unwrap();
    m.set_active_width(1.0).unwrap();
    m.extract_subnetwork(0.5).unwrap();
    assert_eq!(m.active_width(), 1.0);
    assert!(m.extract_subnetwork(0.25).is_err());
}

#[test]
fn zero_layer_transformer_is_embedding_plus_head() {
    let spec = tiny_transformer(0);
    let m = Model::<f64>::build(&spec, 7).unwrap();
    // embed 3->6 with bias, pos 5x6, class token 6, head 6->3 with bias
    assert_eq!(m.store().trainable_count(), 24 + 30 + 6 + 21);
    let x = batch::<f64>(8, &spec, 2);
    let y = m.infer(&x).unwrap();
    let s = m.store();
    let cls = s.by_name("class_token").unwrap().data();
    let pos = s.by_name("pos_embedding").unwrap().data();
    let hw = s.by_name("classifier.weight").unwrap().data();
    let hb = s.by_name("classifier.bias").unwrap().data();
    for n in 0..2 {
        for k in 0..3 {
            let mut acc = hb[k];
            for e in 0..6 {
                acc += (cls[e] + pos[e]) * hw[k * 6 + e];
            }
            assert!((y.row(n)[k] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    let cases = [(tiny_cnn(), Mode::Train), (tiny_transformer(2), Mode::Eval)];
    for (spec, mode) in cases {
        for w in spec.widths.iter() {
            let mut m = Model::<f64>::build(&spec, 31).unwrap();
            m.set_active_width(w).unwrap();
            let x = batch::<f64>(32, &spec, 3);
            let labels = [0usize, 2, 1];
            let probe = m.clone();
            let report = gradcheck::check(m.store_mut(), None, |g, s| {
                let mut local = probe.clone();
                local.store = s.clone();
                let xi = g.input(x.clone())?;
                let y = local.forward_graph(g, xi, mode)?;
                g.cross_entropy(y, &labels)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{:?} width {w}: {report:?}", spec.arch);
        }
    }
}
