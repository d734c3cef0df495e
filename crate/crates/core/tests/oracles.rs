//! Layer and loss results against brute-force references.

use cdfnet::layers::{conv2d_backward, conv2d_forward, maxpool2x2_forward, softmax_channels};
use cdfnet::loss::{
    composite_loss, compute_class_weights, soft_dice_loss, weighted_logistic_loss, ClassWeights,
    DICE_EPSILON,
};
use cdfnet::metrics::{hard_dice, predict_labels};
use cdfnet::tensor::{elementwise_max, elementwise_max_backward};
use cdfnet::{LabelMap, Rng, Tensor};

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, c_in, h, wd] = x.dims();
    let [c_out, _, k, _] = w.dims();
    let r = (k / 2) as isize;
    let mut y = Tensor::zeros([n, c_out, h, wd]);
    for s in 0..n {
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.at(0, o, 0, 0);
                    for c in 0..c_in {
                        for u in 0..k {
                            for v in 0..k {
                                let ii = i as isize + u as isize - r;
                                let jj = j as isize + v as isize - r;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, c, u, v) * x.at(s, c, ii as usize, jj as usize);
                            }
                        }
                    }
                    *y.at_mut(s, o, i, j) = acc;
                }
            }
        }
    }
    y
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_matches_direct_sum_over_small_shapes() {
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for k in [1, 3] {
        for n in 1..=2 {
            for c_in in 1..=4 {
                for c_out in 1..=4 {
                    for h in 1..=4 {
                        for w in [1, 2, 4] {
                            let x = Tensor::<f64>::normal([n, c_in, h, w], 1.0, &mut rng);
                            let wt = Tensor::<f64>::normal([c_out, c_in, k, k], 1.0, &mut rng);
                            let b = Tensor::<f64>::normal([1, c_out, 1, 1], 1.0, &mut rng);
                            let fast = conv2d_forward(&x, &wt, &b).unwrap();
                            worst = worst.max(max_abs_diff(&fast, &naive_conv(&x, &wt, &b)));
                        }
                    }
                }
            }
        }
    }
    assert!(worst <= 1e-12, "conv differs from direct sum by {worst:e}");
}

#[test]
fn conv_backward_is_the_exact_adjoint() {
    // The map is linear in x and in w, so unit perturbations give exact partials.
    let mut rng = Rng::new(3);
    for k in [1, 3] {
        let x = Tensor::<f64>::normal([2, 3, 4, 3], 1.0, &mut rng);
        let wt = Tensor::<f64>::normal([2, 3, k, k], 1.0, &mut rng);
        let zero_b = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let g = Tensor::<f64>::normal([2, 2, 4, 3], 1.0, &mut rng);
        let grads = conv2d_backward(&x, &wt, &g).unwrap();

        for e in 0..x.len() {
            let mut unit = Tensor::<f64>::zeros(x.dims());
            unit.data_mut()[e] = 1.0;
            let want = dot(&naive_conv(&unit, &wt, &zero_b), &g);
            assert!((grads.x.data()[e] - want).abs() <= 1e-12);
        }
        for e in 0..wt.len() {
            let mut unit = Tensor::<f64>::zeros(wt.dims());
            unit.data_mut()[e] = 1.0;
            let want = dot(&naive_conv(&x, &unit, &zero_b), &g);
            assert!((grads.weight.data()[e] - want).abs() <= 1e-12);
        }
        for o in 0..2 {
            let want: f64 = (0..2).map(|s| g.plane(s, o).iter().sum::<f64>()).sum();
            assert!((grads.bias.data()[o] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn elementwise_max_agrees_with_brute_force() {
    let mut rng = Rng::new(17);
    for case in 0..1000 {
        let l = 2 + rng.below(3);
        let dims = [
            1 + rng.below(2),
            1 + rng.below(3),
            1 + rng.below(4),
            1 + rng.below(4),
        ];
        // Coarse values so that ties occur regularly.
        let inputs: Vec<Tensor<f64>> = (0..l)
            .map(|_| {
                let t = Tensor::<f64>::uniform(dims, -2.0, 2.0, &mut rng);
                t.map(|v| (v * 2.0).round() / 2.0)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let (out, arg) = elementwise_max(&refs).unwrap();
        let g = Tensor::<f64>::normal(dims, 1.0, &mut rng);
        let grads = elementwise_max_backward(&arg, &g).unwrap();
        for e in 0..out.len() {
            let mut best = 0;
            for (i, t) in inputs.iter().enumerate() {
                if t.data()[e] > inputs[best].data()[e] {
                    best = i;
                }
            }
            assert_eq!(out.data()[e], inputs[best].data()[e], "case {case}");
            assert_eq!(arg.winners()[e] as usize, best, "case {case}");
            let routed: f64 = grads.iter().map(|t| t.data()[e]).sum();
            assert_eq!(
                routed,
                g.data()[e],
                "case {case}: gradient mass not conserved"
            );
            for (i, gt) in grads.iter().enumerate() {
                if i != best {
                    assert_eq!(gt.data()[e], 0.0);
                }
            }
        }
    }
}

#[test]
fn maxpool_matches_window_maximum() {
    let mut rng = Rng::new(4);
    let x = Tensor::<f64>::normal([2, 3, 6, 4], 1.0, &mut rng);
    let (y, _) = maxpool2x2_forward(&x).unwrap();
    for s in 0..2 {
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| x.at(s, c, 2 * i + a, 2 * j + b))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.at(s, c, i, j), m);
                }
            }
        }
    }
}

fn random_problem(seed: u64, k: usize) -> (Tensor<f64>, LabelMap) {
    let mut rng = Rng::new(seed);
    let logits = Tensor::<f64>::normal([2, k, 4, 5], 1.5, &mut rng);
    let data = (0..2 * 4 * 5).map(|_| rng.below(k - 1) as u32).collect();
    (logits, LabelMap::from_vec([2, 4, 5], data).unwrap())
}

fn central_difference(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let h = 1e-5;
    let mut g = Tensor::zeros(x.dims());
    for e in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[e] += h;
        let mut m = x.clone();
        m.data_mut()[e] -= h;
        g.data_mut()[e] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn max_rel_err(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(n.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn logistic_loss_gradient_matches_finite_differences() {
    let (logits, labels) = random_problem(1, 4);
    let weights = compute_class_weights([&labels], 4).unwrap();
    assert!(weights.absent.contains(&3));
    let (_, grad) = weighted_logistic_loss(&logits, &labels, &weights).unwrap();
    let fd = central_difference(&logits, |z| {
        weighted_logistic_loss(z, &labels, &weights).unwrap().0
    });
    let err = max_rel_err(&grad, &fd);
    assert!(err <= 1e-6, "relative error {err:e}");
}

#[test]
fn soft_dice_gradient_matches_finite_differences() {
    let (logits, labels) = random_problem(2, 4);
    let probs = softmax_channels(&logits);
    let (_, grad) = soft_dice_loss(&probs, &labels).unwrap();
    let fd = central_difference(&probs, |p| soft_dice_loss(p, &labels).unwrap().0);
    let err = max_rel_err(&grad, &fd);
    assert!(err <= 1e-5, "relative error {err:e}");
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let (logits, labels) = random_problem(3, 5);
    let weights = compute_class_weights([&labels], 5).unwrap();
    let (_, grad) = composite_loss(&logits, &labels, &weights).unwrap();
    let fd = central_difference(&logits, |z| {
        composite_loss(z, &labels, &weights).unwrap().0.total()
    });
    let err = max_rel_err(&grad, &fd);
    assert!(err <= 1e-5, "relative error {err:e}");
}

#[test]
fn uniform_logits_give_log_k_and_closed_form_dice() {
    let k = 4;
    let (_, labels) = random_problem(4, k);
    let logits = Tensor::<f64>::full([2, k, 4, 5], 0.3);
    let (parts, _) = composite_loss(&logits, &labels, &ClassWeights::uniform(k)).unwrap();
    assert!((parts.logistic - (k as f64).ln()).abs() <= 1e-10);

    // Every probability is 1/K, so P_c = pixels/K and I_c = T_c/K.
    let pixels = labels.len() as f64;
    let mut sum = 0.0;
    let mut present = 0.0;
    for c in 0..k as u32 {
        let t = labels.data().iter().filter(|&&y| y == c).count() as f64;
        if t > 0.0 {
            sum += 2.0 * (t / k as f64) / (pixels / k as f64 + t + DICE_EPSILON);
            present += 1.0;
        }
    }
    assert!((parts.dice - (1.0 - sum / present)).abs() <= 1e-10);
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let mut data = vec![0u32; 16 * 16];
    for i in 4..12 {
        for j in 3..10 {
            data[i * 16 + j] = 1;
        }
    }
    let labels = LabelMap::from_vec([1, 16, 16], data).unwrap();
    let mut logits = Tensor::<f64>::zeros([1, 2, 16, 16]);
    for e in 0..256 {
        let y = labels.data()[e] as usize;
        logits.plane_mut(0, y)[e] = 20.0;
    }
    let weights = compute_class_weights([&labels], 2).unwrap();
    let (parts, _) = composite_loss(&logits, &labels, &weights).unwrap();
    assert!(parts.total() < 1e-3, "loss {parts:?}");
}

#[test]
fn soft_dice_on_one_hot_is_one_minus_hard_dice() {
    let mut rng = Rng::new(8);
    for _ in 0..20 {
        let k = 4;
        let truth =
            LabelMap::from_vec([2, 5, 6], (0..60).map(|_| rng.below(k) as u32).collect()).unwrap();
        let pred =
            LabelMap::from_vec([2, 5, 6], (0..60).map(|_| rng.below(k) as u32).collect()).unwrap();
        let mut onehot = Tensor::<f64>::zeros([2, k, 5, 6]);
        for s in 0..2 {
            for e in 0..30 {
                onehot.plane_mut(s, pred.data()[s * 30 + e] as usize)[e] = 1.0;
            }
        }
        let (soft, _) = soft_dice_loss(&onehot, &truth).unwrap();
        let hard = hard_dice(&pred, &truth, k).unwrap();
        let in_truth: Vec<f64> = (0..k)
            .filter(|&c| truth.data().contains(&(c as u32)))
            .map(|c| hard[c].unwrap())
            .collect();
        let mean = in_truth.iter().sum::<f64>() / in_truth.len() as f64;
        assert!((soft - (1.0 - mean)).abs() <= 1e-6);
    }
}

#[test]
fn hard_dice_is_symmetric_and_permutation_invariant() {
    let mut rng = Rng::new(9);
    let k = 5;
    let a = LabelMap::from_vec([3, 4, 4], (0..48).map(|_| rng.below(k) as u32).collect()).unwrap();
    let b = LabelMap::from_vec([3, 4, 4], (0..48).map(|_| rng.below(k) as u32).collect()).unwrap();
    assert_eq!(hard_dice(&a, &b, k).unwrap(), hard_dice(&b, &a, k).unwrap());

    let mut order: Vec<usize> = (0..48).collect();
    rng.shuffle(&mut order);
    let pa = LabelMap::from_vec([3, 4, 4], order.iter().map(|&i| a.data()[i]).collect()).unwrap();
    let pb = LabelMap::from_vec([3, 4, 4], order.iter().map(|&i| b.data()[i]).collect()).unwrap();
    let before = hard_dice(&a, &b, k).unwrap();
    let after = hard_dice(&pa, &pb, k).unwrap();
    for (x, y) in before.iter().zip(&after) {
        match (x, y) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12),
            (None, None) => {}
            _ => panic!("presence changed under permutation"),
        }
    }
    assert!(hard_dice(&a, &a, k)
        .unwrap()
        .iter()
        .flatten()
        .all(|&d| d == 1.0));
}

#[test]
fn predicted_labels_break_ties_towards_the_lowest_class() {
    let logits = Tensor::<f64>::from_vec([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
    assert_eq!(predict_labels(&logits).data(), &[0, 1]);
}

#[test]
fn median_frequency_weights_by_hand() {
    let l = LabelMap::from_vec([1, 2, 2], vec![0, 0, 1, 2]).unwrap();
    assert_eq!(
        compute_class_weights([&l], 3).unwrap().weights,
        vec![0.5, 1.0, 1.0]
    );

    // Background 600 px, dominant organ 225 px, rare organ 1 px.
    let mut data = vec![0u32; 826];
    data[600..825].fill(1);
    data[825] = 2;
    let l = LabelMap::from_vec([1, 1, 826], data).unwrap();
    let w = compute_class_weights([&l], 3).unwrap();
    assert!((w.weights[2] / w.weights[1] - 225.0).abs() <= 1e-9);
}
