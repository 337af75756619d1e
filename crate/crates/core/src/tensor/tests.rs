use super::gradcheck::{check_gradients, finite_difference_grad};
use super::ops::concat;
use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn p64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::param(shape, data.to_vec()).unwrap()
}

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: got {a}, expected {e} (tol {tol})"
        );
    }
}

#[test]
fn matmul_identity() {
    let eye = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let a = t64(&[2, 2], &[3.0, -1.0, 2.5, 7.0]);
    let out = eye.matmul(&a).unwrap();
    assert_close(&out.data_clone(), &a.data_clone(), 0.0);
}

#[test]
fn matmul_hand_product() {
    let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t64(&[2, 1], &[1.0, 1.0]);
    let out = a.matmul(&b).unwrap();
    assert_close(&out.data_clone(), &[3.0, 7.0], 0.0);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let a = t64(&[2, 3], &[0.0; 6]);
    let b = t64(&[2, 2], &[0.0; 4]);
    assert!(matches!(
        a.matmul(&b),
        Err(TensorError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let a = p64(&[3, 4], &a.data_clone());
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
    let b = p64(&[4, 2], &b.data_clone());
    let loss = a.matmul(&b).unwrap().sum_all();
    loss.backward().unwrap();
    let named = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
    let mut eval = || a.matmul(&b).unwrap().sum_all().item();
    let report = check_gradients(&named, 1e-6, 1e-5, 1e-9, &mut eval);
    assert!(report.ok(), "mismatches: {:?}", report.mismatches);
}

#[test]
fn softmax_symmetry_and_shift() {
    let x = t64(&[2], &[0.0, 0.0]);
    assert_close(&x.softmax(0).unwrap().data_clone(), &[0.5, 0.5], 1e-12);
    let big = t64(&[2], &[1000.0, 1000.0]);
    let out = big.softmax(0).unwrap();
    assert!(out.all_finite());
    assert_close(&out.data_clone(), &[0.5, 0.5], 1e-12);
}

#[test]
fn softmax_closed_form() {
    let x = t64(&[2], &[0.0, 3.0f64.ln()]);
    assert_close(&x.softmax(0).unwrap().data_clone(), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::randn(&[4, 7], 3.0, &mut rng);
    let y = x.softmax(1).unwrap();
    for row in y.data_clone().chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let shifted = x.add_scalar(42.0).softmax(1).unwrap();
    assert_close(&y.data_clone(), &shifted.data_clone(), 1e-9);
}

#[test]
fn layer_norm_zero_variance_limit() {
    let x = t64(&[4], &[5.0; 4]);
    let gain = t64(&[4], &[1.0; 4]);
    let bias = t64(&[4], &[0.0; 4]);
    let out = x.layer_norm(&gain, &bias, 1e-5).unwrap();
    assert_close(&out.data_clone(), &[0.0; 4], 1e-9);
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 64;
    let x = Tensor::<f64>::randn(&[d], 2.0, &mut rng);
    let gain = t64(&[d], &vec![1.0; d]);
    let bias = t64(&[d], &vec![0.0; d]);
    let out = x.layer_norm(&gain, &bias, 1e-9).unwrap().data_clone();
    let mean: f64 = out.iter().sum::<f64>() / d as f64;
    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-6, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-3, "var {var}");
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = p64(&[2, 5], &Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng).data_clone());
    let gain = p64(&[5], &Tensor::<f64>::randn(&[5], 0.3, &mut rng).data_clone());
    let bias = p64(&[5], &Tensor::<f64>::randn(&[5], 0.3, &mut rng).data_clone());
    let weights = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
    let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
        x.layer_norm(g, b, 1e-5)
            .unwrap()
            .mul(&weights)
            .unwrap()
            .sum_all()
    };
    f(&x, &gain, &bias).backward().unwrap();
    let named = vec![
        ("x".to_string(), x.clone()),
        ("gain".to_string(), gain.clone()),
        ("bias".to_string(), bias.clone()),
    ];
    let mut eval = || f(&x, &gain, &bias).item();
    let report = check_gradients(&named, 1e-6, 1e-4, 1e-9, &mut eval);
    assert!(report.ok(), "mismatches: {:?}", report.mismatches);
}

#[test]
fn cross_entropy_uniform_and_peaked() {
    let logits = t64(&[1, 2], &[0.0, 0.0]);
    let loss = logits.cross_entropy_logits(&[0], u32::MAX).unwrap();
    assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);

    let peaked = t64(&[1, 3], &[100.0, 0.0, 0.0]);
    let loss = peaked.cross_entropy_logits(&[0], u32::MAX).unwrap();
    assert!(loss.item() < 1e-9);
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let logits = p64(&[2, 3], &[0.5, -0.5, 0.1, 0.2, 0.3, 0.4]);
    let loss = logits.cross_entropy_logits(&[9, 9], 9).unwrap();
    assert_eq!(loss.item(), 0.0);
    loss.backward().unwrap();
    assert_close(&logits.grad().unwrap(), &[0.0; 6], 0.0);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let logits = t64(&[1, 2], &[0.0, 0.0]);
    assert!(matches!(
        logits.cross_entropy_logits(&[5], u32::MAX),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let x = p64(&[3], &[1.0, 2.0, 3.0]);
    x.sum_all().backward().unwrap();
    assert_close(&x.grad().unwrap(), &[1.0, 1.0, 1.0], 0.0);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let x = p64(&[3], &[1.0, -2.0, 3.0]);
    x.mul(&x).unwrap().sum_all().backward().unwrap();
    assert_close(&x.grad().unwrap(), &[2.0, -4.0, 6.0], 1e-12);
}

#[test]
fn backward_requires_scalar() {
    let x = p64(&[2], &[1.0, 2.0]);
    let y = x.mul_scalar(2.0);
    assert!(matches!(
        y.backward(),
        Err(TensorError::NonScalarBackward(_))
    ));
}

#[test]
fn backward_twice_is_error() {
    let x = p64(&[2], &[1.0, 2.0]);
    let loss = x.sum_all();
    loss.backward().unwrap();
    assert!(matches!(loss.backward(), Err(TensorError::DoubleBackward)));
}

#[test]
fn backward_is_linear() {
    let build = |x: &Tensor<f64>| {
        let l1 = x.mul(x).unwrap().sum_all();
        let l2 = x.gelu().sum_all();
        (l1, l2)
    };
    let (a, b) = (2.5f64, -1.25f64);

    let x1 = p64(&[4], &[0.3, -0.7, 1.1, 0.05]);
    let (l1, _) = build(&x1);
    l1.backward().unwrap();
    let g1 = x1.grad().unwrap();

    let x2 = p64(&[4], &[0.3, -0.7, 1.1, 0.05]);
    let (_, l2) = build(&x2);
    l2.backward().unwrap();
    let g2 = x2.grad().unwrap();

    let x3 = p64(&[4], &[0.3, -0.7, 1.1, 0.05]);
    let (l1, l2) = build(&x3);
    let combo = l1.mul_scalar(a).add(&l2.mul_scalar(b)).unwrap();
    combo.backward().unwrap();
    let g3 = x3.grad().unwrap();

    let expected: Vec<f64> = g1.iter().zip(&g2).map(|(u, v)| a * u + b * v).collect();
    assert_close(&g3, &expected, 1e-9);
}

#[test]
fn broadcast_suffix_and_scalar() {
    let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let bias = t64(&[3], &[10.0, 20.0, 30.0]);
    let out = x.add(&bias).unwrap();
    assert_close(
        &out.data_clone(),
        &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0],
        0.0,
    );
    let s = Tensor::scalar(2.0);
    assert_close(&x.mul(&s).unwrap().data_clone(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0], 0.0);
    // anything else is a hard error
    let bad = t64(&[2], &[1.0, 2.0]);
    assert!(x.add(&bad).is_err());
}

#[test]
fn broadcast_backward_sums_over_leading() {
    let x = p64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = p64(&[2], &[0.5, -0.5]);
    x.add(&b).unwrap().sum_all().backward().unwrap();
    assert_close(&b.grad().unwrap(), &[2.0, 2.0], 0.0);
    assert_close(&x.grad().unwrap(), &[1.0; 4], 0.0);
}

#[test]
fn structural_ops_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = p64(
        &[2, 3, 4],
        &Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng).data_clone(),
    );
    let y = p64(
        &[2, 1, 4],
        &Tensor::<f64>::randn(&[2, 1, 4], 1.0, &mut rng).data_clone(),
    );
    let weights = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
    let f = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let cat = concat(&[y.clone(), x.clone()], 1).unwrap();
        let cut = cat.narrow(1, 0, 4).unwrap();
        let perm = cut.permute(&[0, 2, 1]).unwrap();
        let back = perm.transpose_last2().unwrap();
        back.mul(&weights).unwrap().gelu().sum_all()
    };
    f(&x, &y).backward().unwrap();
    let named = vec![("x".to_string(), x.clone()), ("y".to_string(), y.clone())];
    let mut eval = || f(&x, &y).item();
    let report = check_gradients(&named, 1e-6, 1e-4, 1e-9, &mut eval);
    assert!(report.ok(), "mismatches: {:?}", report.mismatches);
}

#[test]
fn select_rows_gradient_scatter_adds() {
    let table = p64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let picked = table.select_rows(&[2, 0, 2]).unwrap();
    picked.sum_all().backward().unwrap();
    assert_close(&table.grad().unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 0.0);
    assert!(table.select_rows(&[3]).is_err());
}

#[test]
fn masked_softmax_zeroes_masked_and_survives_full_mask() {
    let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]);
    let mask = [true, false, true, false, false, false];
    let y = x.masked_softmax(&mask).unwrap();
    let d = y.data_clone();
    assert_eq!(d[1], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    assert_close(&d[3..], &[0.0, 0.0, 0.0], 0.0);
    assert!(y.all_finite());
}

#[test]
fn masked_softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = p64(&[2, 4], &Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng).data_clone());
    let mask = [true, true, false, true, true, false, true, true];
    let weights = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
    let f = |x: &Tensor<f64>| {
        x.masked_softmax(&mask)
            .unwrap()
            .mul(&weights)
            .unwrap()
            .sum_all()
    };
    f(&x).backward().unwrap();
    let named = vec![("x".to_string(), x.clone())];
    let mut eval = || f(&x).item();
    let report = check_gradients(&named, 1e-6, 1e-4, 1e-9, &mut eval);
    assert!(report.ok(), "mismatches: {:?}", report.mismatches);
}

#[test]
fn no_grad_detaches() {
    let x = p64(&[2], &[1.0, 2.0]);
    let y = no_grad(|| x.mul_scalar(3.0));
    assert!(!y.requires_grad());
}

#[test]
fn adamw_zero_grad_no_decay_keeps_params() {
    let p = p64(&[2], &[1.0, -1.0]);
    let mut opt = AdamW::new(
        vec![("p".into(), p.clone())],
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    opt.step(0.1).unwrap();
    assert_close(&p.data_clone(), &[1.0, -1.0], 0.0);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_single_step_hand_value() {
    // one step with g = 1: m_hat = 1, v_hat = 1, update = -lr / (1 + eps)
    let p = p64(&[1], &[0.0]);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(vec![("p".into(), p.clone())], cfg);
    let loss = p.sum_all();
    loss.backward().unwrap();
    let lr = 0.01;
    opt.step(lr).unwrap();
    let expected = -lr / (1.0 + cfg.eps);
    assert!((p.data_clone()[0] - expected).abs() < 1e-15);
}

#[test]
fn adamw_decoupled_decay_shrinks() {
    let p = p64(&[1], &[2.0]);
    let mut opt = AdamW::new(
        vec![("p".into(), p.clone())],
        AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        },
    );
    let lr = 0.5;
    opt.step(lr).unwrap();
    assert!((p.data_clone()[0] - 2.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
}

#[test]
fn clip_grad_norm_scales() {
    let p = p64(&[2], &[0.0, 0.0]);
    let loss = p.mul_scalar(3.0).sum_all();
    loss.backward().unwrap();
    let named = vec![("p".to_string(), p.clone())];
    let norm = clip_grad_norm(&named, 1.0);
    assert!((norm - (9.0f64 + 9.0).sqrt()).abs() < 1e-12);
    let g = p.grad().unwrap();
    let clipped: f64 = g.iter().map(|v| v * v).sum::<f64>();
    assert!((clipped.sqrt() - 1.0).abs() < 1e-9);
}

#[test]
fn randn_is_deterministic_per_seed() {
    let mut r1 = ChaCha8Rng::seed_from_u64(99);
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    let a = Tensor::<f32>::randn(&[16], 1.0, &mut r1);
    let b = Tensor::<f32>::randn(&[16], 1.0, &mut r2);
    assert_eq!(a.data_clone(), b.data_clone());
}

#[test]
fn param_store_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = Tensor::<f32>::randn(&[3, 5], 0.37, &mut rng);
    let a = Tensor::param(&[3, 5], a.data_clone()).unwrap();
    let b = Tensor::<f32>::randn(&[7], 1.3, &mut rng);
    let b = Tensor::param(&[7], b.data_clone()).unwrap();
    let named = vec![("enc.w".to_string(), a), ("enc.b".to_string(), b)];
    let store = ParamStore::from_named(&named);
    let mut buf = Vec::new();
    store.write_to(&mut buf).unwrap();
    let restored = ParamStore::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(restored.version, store.version);

    let fresh: Vec<(String, Tensor<f32>)> = named
        .iter()
        .map(|(p, t)| (p.clone(), Tensor::param(t.shape(), vec![0.0; t.numel()]).unwrap()))
        .collect();
    restored.apply_to(&fresh).unwrap();
    for ((_, orig), (_, new)) in named.iter().zip(&fresh) {
        let ob: Vec<u32> = orig.data_clone().iter().map(|v| v.to_bits()).collect();
        let nb: Vec<u32> = new.data_clone().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ob, nb);
    }
}

#[test]
fn finite_difference_oracle_restores_parameter() {
    let p = p64(&[2], &[1.5, -0.5]);
    let mut eval = || p.data_clone().iter().map(|v| v * v).sum::<f64>();
    let g = finite_difference_grad(&p, 1e-6, &mut eval);
    assert_close(&g, &[3.0, -1.0], 1e-6);
    assert_close(&p.data_clone(), &[1.5, -0.5], 0.0);
}

mod gradient_properties {
    use super::*;
    use proptest::prelude::*;

    fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn elementwise_chain_gradients(xs in small_vec(6), ys in small_vec(6)) {
            let x = p64(&[2, 3], &xs);
            let y = p64(&[2, 3], &ys);
            let f = |x: &Tensor<f64>, y: &Tensor<f64>| {
                x.mul(y).unwrap().add(x).unwrap().gelu().mean_all()
            };
            f(&x, &y).backward().unwrap();
            let named = vec![("x".to_string(), x.clone()), ("y".to_string(), y.clone())];
            let mut eval = || f(&x, &y).item();
            let report = check_gradients(&named, 1e-6, 1e-4, 1e-8, &mut eval);
            prop_assert!(report.ok(), "mismatches: {:?}", report.mismatches);
        }

        #[test]
        fn softmax_gradients(xs in small_vec(8)) {
            let x = p64(&[2, 4], &xs);
            let w = t64(&[2, 4], &[0.3, -1.0, 0.7, 0.2, 1.5, -0.4, 0.9, -0.8]);
            let f = |x: &Tensor<f64>| x.softmax(1).unwrap().mul(&w).unwrap().sum_all();
            f(&x).backward().unwrap();
            let named = vec![("x".to_string(), x.clone())];
            let mut eval = || f(&x).item();
            let report = check_gradients(&named, 1e-6, 1e-4, 1e-8, &mut eval);
            prop_assert!(report.ok(), "mismatches: {:?}", report.mismatches);
        }

        #[test]
        fn cross_entropy_gradients(xs in small_vec(12), t0 in 0u32..4, t1 in 0u32..4) {
            let x = p64(&[3, 4], &xs);
            let targets = [t0, t1, 9]; // last row ignored
            let f = |x: &Tensor<f64>| x.cross_entropy_logits(&targets, 9).unwrap();
            f(&x).backward().unwrap();
            let named = vec![("x".to_string(), x.clone())];
            let mut eval = || f(&x).item();
            let report = check_gradients(&named, 1e-6, 1e-4, 1e-8, &mut eval);
            prop_assert!(report.ok(), "mismatches: {:?}", report.mismatches);
        }
    }
}
