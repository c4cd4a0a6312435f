use super::*;
use crate::models::{Model, ModelSpec, PRESETS};
use crate::slim::ac;

fn presets() -> Vec<ModelSpec> {
    PRESETS.iter().map(|p| ModelSpec::preset(p, None).unwrap()).collect()
}

#[test]
fn analytic_params_match_model_and_extracted_tensors() {
    for spec in presets() {
        let model = Model::<f32>::build(&spec, 0).unwrap();
        for w in spec.widths.iter() {
            let analytic = count_params(&spec, w, NormSets::Active).unwrap();
            let mut m = model.clone();
            m.set_active_width(w).unwrap();
            assert_eq!(analytic, m.active_param_count().unwrap(), "{} @ {w}", spec.hash());
            let sub = model.extract_subnetwork(w).unwrap();
            let enumerated: usize = sub
                .store()
                .iter()
                .filter(|(_, _, t)| t.requires_grad())
                .map(|(_, _, t)| t.len())
                .sum();
            assert_eq!(analytic, enumerated);
        }
        assert_eq!(
            count_params(&spec, 1.0, NormSets::All).unwrap(),
            model.store().trainable_count()
        );
    }
}

#[test]
fn params_strictly_increase_with_width() {
    for spec in presets() {
        let counts: Vec<usize> = spec
            .widths
            .iter()
            .map(|w| count_params(&spec, w, NormSets::Active).unwrap())
            .collect();
        assert!(counts.windows(2).all(|p| p[0] > p[1]), "{counts:?}");
    }
}

#[test]
fn last_baseline_conv_is_a_one_by_one_on_one_pixel() {
    let b = cost_breakdown(&ModelSpec::baseline_cnn(12), 1.0, NormSets::Active).unwrap();
    let c = b.layer("conv5").unwrap();
    assert_eq!(c.output_hw, Some((1, 1)));
    assert_eq!(c.multiplies, 20_480);
    assert_eq!(b.layer("conv4").unwrap().output_hw, Some((1, 1)));
}

#[test]
fn per_layer_width_laws_hold_exactly() {
    for spec in presets() {
        let full = cost_breakdown(&spec, 1.0, NormSets::Active).unwrap();
        for w in spec.widths.iter() {
            let b = cost_breakdown(&spec, w, NormSets::Active).unwrap();
            for (l, f) in b.layers.iter().zip(&full.layers) {
                let (ci, co) = (f.full_in as u64, f.full_out as u64);
                let (ai, ao) = (ac(f.full_in, w) as u64, ac(f.full_out, w) as u64);
                match (l.kind, l.slim_in, l.slim_out) {
                    (LayerKind::Conv | LayerKind::Dense, true, true) => {
                        assert_eq!(l.multiplies * ci * co, f.multiplies * ai * ao, "{} @ {w}", l.name)
                    }
                    (LayerKind::Conv | LayerKind::Dense, true, false) => {
                        assert_eq!(l.multiplies * ci, f.multiplies * ai, "{} @ {w}", l.name)
                    }
                    (LayerKind::Conv | LayerKind::Dense, false, true) => {
                        assert_eq!(l.multiplies * co, f.multiplies * ao, "{} @ {w}", l.name)
                    }
                    (LayerKind::AttentionProducts, ..) => {
                        assert_eq!(l.multiplies * ci, f.multiplies * ai, "{} @ {w}", l.name)
                    }
                    _ => {}
                }
            }
        }
    }
}

#[test]
fn instrumented_forward_agrees_with_analytic_count() {
    for spec in presets() {
        let model = Model::<f32>::build(&spec, 1).unwrap();
        for w in spec.widths.iter() {
            assert_eq!(
                instrumented_multiplies(&model, w).unwrap(),
                count_multiplies(&spec, w).unwrap(),
                "{} @ {w}",
                spec.hash()
            );
        }
    }
}

#[test]
fn counting_rejects_unknown_width() {
    let spec = ModelSpec::desk_cnn(4);
    assert!(count_params(&spec, 0.6, NormSets::Active).is_err());
    assert!(count_multiplies(&spec, 0.6).is_err());
}
