use cdfnet::layers::Mode;
use cdfnet::network::{Model, Variant, VariantSpec};
use cdfnet::{Rng, Tensor};

fn composite(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + c_out + 2 * c_out
}

fn vanilla_block(c_in: usize, w: usize, k: usize) -> usize {
    composite(c_in, w, k) + composite(c_in + w, w, k) + composite(c_in + 2 * w, w, k)
}

fn competitive_block(c_in: usize, w: usize, k: usize) -> usize {
    2 * composite(c_in, c_in, k) + composite(c_in, w, k)
}

/// Parameter total counted by hand from the block layout.
fn expected_total(spec: &VariantSpec) -> usize {
    let (w, k) = (spec.base_width, spec.kernel_size);
    let stem = spec.input_channels * w * k * k + w;
    let classifier = w * spec.num_classes + spec.num_classes;
    let (joint, dec_in) = if spec.variant.global_competition() {
        (2 * w * w + w, w)
    } else {
        (0, 2 * w)
    };
    let block = |c_in| {
        if spec.variant.local_competition() {
            competitive_block(c_in, w, k)
        } else {
            vanilla_block(c_in, w, k)
        }
    };
    stem + 5 * block(w) + 4 * (joint + block(dec_in)) + classifier
}

#[test]
fn parameter_totals_match_hand_count() {
    for w in [2, 4, 8, 16] {
        for k in [1, 3, 5] {
            for classes in [2, 5] {
                for v in Variant::ALL {
                    let spec = VariantSpec {
                        base_width: w,
                        kernel_size: k,
                        num_classes: classes,
                        ..VariantSpec::new(v)
                    };
                    let model = Model::<f32>::build(spec, &mut Rng::new(0)).unwrap();
                    let counts = model.param_counts();
                    assert_eq!(counts.total, expected_total(&spec), "{spec:?}");
                    assert_eq!(
                        counts.modules.iter().map(|m| m.1).sum::<usize>(),
                        counts.total
                    );
                }
            }
        }
    }
}

#[test]
fn cdfnet_never_exceeds_bl0() {
    for w in [2, 4, 8, 16, 32] {
        let total = |v| {
            let spec = VariantSpec {
                base_width: w,
                ..VariantSpec::new(v)
            };
            Model::<f32>::build(spec, &mut Rng::new(0))
                .unwrap()
                .param_counts()
                .total
        };
        assert!(total(Variant::CdfNet) <= total(Variant::Bl0), "width {w}");
    }
}

#[test]
fn reference_totals_at_width_eight() {
    let totals: Vec<usize> = Variant::ALL
        .iter()
        .map(|&v| {
            Model::<f32>::build(VariantSpec::new(v), &mut Rng::new(0))
                .unwrap()
                .param_counts()
                .total
        })
        .collect();
    assert_eq!(totals, vec![38789, 32645, 32421, 16869]);
}

#[test]
fn dense_block_input_widths() {
    let spec = VariantSpec {
        base_width: 6,
        ..VariantSpec::new(Variant::Bl0)
    };
    let m = Model::<f64>::build(spec, &mut Rng::new(0)).unwrap();
    assert_eq!(m.encoders[0].input_widths(), [6, 12, 18]);
    assert_eq!(m.decoders[0].input_widths(), [12, 18, 24]);
    let spec = VariantSpec {
        base_width: 6,
        ..VariantSpec::new(Variant::CdfNet)
    };
    let m = Model::<f64>::build(spec, &mut Rng::new(0)).unwrap();
    assert_eq!(m.encoders[0].input_widths(), [6, 6, 6]);
    assert_eq!(m.decoders[3].input_widths(), [6, 6, 6]);
}

#[test]
fn eval_mode_treats_samples_independently() {
    for v in Variant::ALL {
        let spec = VariantSpec {
            base_width: 4,
            num_classes: 3,
            ..VariantSpec::new(v)
        };
        let mut m = Model::<f64>::build(spec, &mut Rng::new(1)).unwrap();
        let x = Tensor::<f64>::normal([3, 1, 16, 32], 1.0, &mut Rng::new(2));
        let (all, _) = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(all.dims(), [3, 3, 16, 32]);
        let (one, _) = m
            .forward(&x.slice_batch(1, 2).unwrap(), Mode::Eval)
            .unwrap();
        let diff = one
            .data()
            .iter()
            .zip(all.slice_batch(1, 2).unwrap().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{v:?}: {diff:e}");
    }
}

#[test]
fn construction_is_seeded() {
    let spec = VariantSpec::new(Variant::Bl2);
    let a = Model::<f32>::build(spec, &mut Rng::new(5)).unwrap();
    let b = Model::<f32>::build(spec, &mut Rng::new(5)).unwrap();
    let c = Model::<f32>::build(spec, &mut Rng::new(6)).unwrap();
    assert_eq!(a.named_tensors(), b.named_tensors());
    assert_ne!(a.named_tensors(), c.named_tensors());
}

#[test]
fn unaligned_input_is_rejected() {
    let mut m = Model::<f32>::build(VariantSpec::new(Variant::CdfNet), &mut Rng::new(0)).unwrap();
    assert!(m
        .forward(&Tensor::zeros([1, 1, 24, 32]), Mode::Eval)
        .is_err());
    assert!(m
        .forward(&Tensor::zeros([1, 2, 32, 32]), Mode::Eval)
        .is_err());
}
