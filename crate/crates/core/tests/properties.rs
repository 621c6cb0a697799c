mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use rcl::autodiff::{Graph, Var};
use rcl::evalsuite::{
    abnormal_gradient_probe, export_features, fgsm, landscape_slice, layer_normalize, random_projection,
    worst_case_flatness, FlatnessProbe,
};
use rcl::gpm::{project_gradient, projection_residual, residual, select_k, update_gpm, ProjectionMemory};
use rcl::harness::{encode_images, encode_labels, parse_images, parse_labels, read_acc_matrix, write_acc_matrix};
use rcl::losses::{alignment_value, uniformity_value, LossParams};
use rcl::model::{ParamGroup, ParamTensors};
use rcl::perturbation::{
    joint_perturbations, mixup, mixup_batch, robust_pretrain_phi, worst_case_gamma, worst_case_weight, PerturbConfig,
};
use rcl::tensor::Tensor;
use rcl::trainer::{run_sequence, train_task_naive, AccuracyMatrix, Method, TrainConfig};

fn cfg() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

/// Applies unary op `which` to `x`.
fn unary(g: &mut Graph, which: u8, x: Var, w: Var) -> Var {
    match which % 6 {
        0 => g.exp(x),
        1 => g.square(x),
        2 => {
            let y = g.matmul(x, w).unwrap();
            g.scale(y, 0.7)
        }
        3 => g.log_softmax_rows(x),
        4 => g.l2_normalize_rows(x).unwrap(),
        _ => {
            let t = g.transpose(x);
            g.transpose(t)
        }
    }
}

fn sum_weighted(g: &mut Graph, y: Var, c: Var) -> Var {
    let p = g.mul(y, c).unwrap();
    g.sum(p)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn tensor_length_matches_shape(rows in 1usize..6, cols in 1usize..6, extra in 1usize..3) {
        let t = Tensor::new(vec![rows, cols], vec![0.5; rows * cols]).unwrap();
        prop_assert_eq!(t.numel(), t.shape().iter().product::<usize>());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + extra]).is_err());
    }

    #[test]
    fn composed_backward_is_chain_of_vector_jacobian_products(seed in any::<u64>(), a in 0u8..6, b in 0u8..6) {
        let mut r = rng(seed);
        let x0 = random_tensor(&mut r, &[3, 3], 1.0);
        let w0 = random_tensor(&mut r, &[3, 3], 1.0);
        let c0 = random_tensor(&mut r, &[3, 3], 1.0);

        let mut g = Graph::new();
        let (x, w, c) = (g.param(x0.clone()), g.constant(w0.clone()), g.constant(c0.clone()));
        let y = unary(&mut g, a, x, w);
        let z = unary(&mut g, b, y, w);
        let out = sum_weighted(&mut g, z, c);
        g.backward(out).unwrap();
        let composed = g.grad(x);
        let y_val = g.value(y).clone();

        // Outer VJP: gradient of the scalar with respect to the intermediate.
        let mut g2 = Graph::new();
        let (yv, w2, c2) = (g2.param(y_val), g2.constant(w0.clone()), g2.constant(c0.clone()));
        let z2 = unary(&mut g2, b, yv, w2);
        let out2 = sum_weighted(&mut g2, z2, c2);
        g2.backward(out2).unwrap();
        let v = g2.grad(yv);

        // Inner VJP with that cotangent.
        let mut g3 = Graph::new();
        let (x3, w3, v3) = (g3.param(x0), g3.constant(w0), g3.constant(v));
        let y3 = unary(&mut g3, a, x3, w3);
        let out3 = sum_weighted(&mut g3, y3, v3);
        g3.backward(out3).unwrap();
        let chained = g3.grad(x3);
        prop_assert!(rel_err(composed.data(), chained.data()) <= 1e-12);
    }

    #[test]
    fn forward_is_pure_and_features_are_unit_rows(seed in any::<u64>(), n in 1usize..8) {
        let stream = blobs(seed % 50, 2, 10);
        let net = tiny_mlp(&stream, seed);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[n, stream.input_len], 2.0);
        let a = match net.forward(&x, 1, true) {
            Ok(a) => a,
            Err(rcl::RclError::DegenerateFeature { row, .. }) => {
                prop_assert!(net.hidden(&x, 1).unwrap().row(row).iter().all(|v| *v == 0.0));
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let b = net.forward(&x, 1, true).unwrap();
        prop_assert_eq!(a.logits.data(), b.logits.data());
        prop_assert_eq!(a.features.data(), b.features.data());
        for row in 0..n {
            let norm = a.features.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12);
        }
        for rep in a.reps.values() {
            prop_assert_eq!(rep.cols(), n);
        }
    }

    #[test]
    fn uniformity_is_permutation_invariant(seed in any::<u64>(), n in 2usize..8, tau in 0.5f64..4.0) {
        let mut r = rng(seed);
        let f = random_tensor(&mut r, &[n, 3], 1.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let rows: Vec<&[f64]> = order.iter().map(|&i| f.row(i)).collect();
        let shuffled = Tensor::from_rows(&rows);
        prop_assert_eq!(uniformity_value(&f, tau).unwrap(), uniformity_value(&shuffled, tau).unwrap());
    }

    #[test]
    fn alignment_is_nonnegative_and_zero_on_itself(seed in any::<u64>(), exponent in 0.5f64..3.0) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[4, 3], 1.0);
        let b = random_tensor(&mut r, &[4, 3], 1.0);
        prop_assert_eq!(alignment_value(&a, &a, exponent).unwrap(), 0.0);
        prop_assert!(alignment_value(&a, &b, exponent).unwrap() >= 0.0);
    }

    #[test]
    fn mixup_is_exact_convex_combination(seed in any::<u64>(), gamma in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let (xi, xj) = (random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[3, 4], 1.0));
        let yi = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let yj = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let p = mixup(&xi, &yi, &xj, &yj, gamma).unwrap();
        for (k, v) in p.x_mix.data().iter().enumerate() {
            prop_assert_eq!(*v, gamma * xi.data()[k] + (1.0 - gamma) * xj.data()[k]);
        }
        for (k, v) in p.y_mix.data().iter().enumerate() {
            prop_assert_eq!(*v, gamma * yi.data()[k] + (1.0 - gamma) * yj.data()[k]);
        }
        prop_assert!(mixup(&xi, &yi, &xj, &yj, 1.0 + gamma.max(1e-9)).is_err());
    }

    #[test]
    fn perturbation_contracts(seed in any::<u64>(), gamma in 0.0f64..=1.0, rho in 1e-4f64..2.0) {
        let stream = blobs(seed % 40, 1, 10);
        let net = tiny_mlp(&stream, seed);
        let data = &stream.tasks[0];
        let mut perm: Vec<usize> = (0..data.train.len()).collect();
        perm.shuffle(&mut rng(seed));
        let pair = match mixup_batch(&data.train, &perm, data.classes, gamma) {
            Ok(p) => p,
            Err(_) => return Ok(()),
        };
        let params = LossParams::default();
        let (Ok(gp), Ok(wp)) = (
            worst_case_gamma(&net, 0, &pair, &params, rho),
            worst_case_weight(&net, 0, &pair, &params, rho),
        ) else {
            // Dead ReLU features make the hypersphere losses undefined for this draw.
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&gp.gamma_hat));
        let (jg, jw) = joint_perturbations(&net, 0, &pair, &params, rho, rho).unwrap();
        prop_assert!((jg.derivative - gp.derivative).abs() <= 1e-12 * gp.derivative.abs().max(1.0));
        prop_assert!(jw.upsilon.add_scaled(&wp.upsilon, -1.0).unwrap().norm() <= 1e-12);
        let doubled = worst_case_weight(&net, 0, &pair, &params, 2.0 * rho).unwrap();
        prop_assert_eq!(doubled.upsilon, wp.upsilon.scale(2.0));
    }

    #[test]
    fn projection_is_orthogonal_idempotent_and_contracting(seed in any::<u64>(), tasks in 1usize..4) {
        let stream = blobs(seed % 30, tasks + 1, 10);
        let net = tiny_mlp(&stream, seed);
        let mut memory = ProjectionMemory::new(0.9).unwrap();
        for t in 0..tasks {
            update_gpm(&mut memory, &net, &stream.tasks[t].train.x, t).unwrap();
        }
        let g = net.params_for(&net.trainable_keys(tasks)).gaussian_like(seed).scale(3.0);
        let p = project_gradient(&g, &memory, &net).unwrap();
        let pp = project_gradient(&p, &memory, &net).unwrap();
        prop_assert!(projection_residual(&p, &memory, &net).unwrap() <= 1e-8 * g.norm());
        prop_assert!(pp.add_scaled(&p, -1.0).unwrap().norm() <= 1e-10 * g.norm().max(1.0));
        prop_assert!(p.norm() <= g.norm());
        for (layer, width) in memory.widths() {
            prop_assert!(width <= net.rep_dim(layer).unwrap());
        }
    }

    #[test]
    fn select_k_is_monotone_in_threshold(seed in any::<u64>(), lo in 0.05f64..0.95, gap in 0.0f64..0.5) {
        let mut r = rng(seed);
        let rm = random_tensor(&mut r, &[6, 5], 1.0);
        let width = r.random_range(0..3);
        let m = (width > 0).then(|| random_orthonormal(&mut r, 6, width));
        let r_hat = residual(&rm, m.as_ref()).unwrap();
        let hi = (lo + gap).min(1.0);
        prop_assert!(select_k(&r_hat, &rm, m.as_ref(), lo).unwrap() <= select_k(&r_hat, &rm, m.as_ref(), hi).unwrap());
    }

    #[test]
    fn select_k_matches_oracle_at_listed_thresholds(seed in any::<u64>(), which in 0usize..3) {
        let eps_th = [0.5, 0.9, 0.99][which];
        let mut r = rng(seed);
        let rm = random_tensor(&mut r, &[6, 6], 1.0);
        let width = r.random_range(0..4);
        let m = (width > 0).then(|| random_orthonormal(&mut r, 6, width));
        let r_hat = residual(&rm, m.as_ref()).unwrap();
        prop_assert_eq!(select_k(&r_hat, &rm, m.as_ref(), eps_th).unwrap(), select_k_oracle(&rm, m.as_ref(), eps_th));
    }

    #[test]
    fn fgsm_is_identity_at_zero_and_linear_in_budget(seed in any::<u64>(), mu in 1e-3f64..0.5) {
        let stream = blobs(seed % 40, 1, 8);
        let net = tiny_mlp(&stream, seed);
        let b = &stream.tasks[0].test;
        prop_assert_eq!(fgsm(&net, &b.x, &b.labels, 0.0, 0, None).unwrap(), b.x.clone());
        let one = fgsm(&net, &b.x, &b.labels, mu, 0, None).unwrap().sub(&b.x).unwrap();
        let two = fgsm(&net, &b.x, &b.labels, 2.0 * mu, 0, None).unwrap().sub(&b.x).unwrap();
        prop_assert!(two.sub(&one.scale(2.0)).unwrap().max_abs() <= 1e-12);
        prop_assert!(one.max_abs() <= mu * (1.0 + 1e-12));
    }

    #[test]
    fn diagnostics_leave_the_network_unchanged(seed in any::<u64>()) {
        let stream = blobs(seed % 40, 2, 8);
        let net = tiny_mlp(&stream, seed);
        let before = net.clone();
        let b = &stream.tasks[1].test;
        let probe = FlatnessProbe { directions: 2, ..FlatnessProbe::default() };
        let _ = fgsm(&net, &b.x, &b.labels, 0.1, 1, None).unwrap();
        let _ = worst_case_flatness(&net, 1, b, 0.05).unwrap();
        let s1 = landscape_slice(&net, 1, b, &probe, seed).unwrap();
        let s2 = landscape_slice(&net, 1, b, &probe, seed).unwrap();
        let _ = export_features(&net, &b.x, &b.labels, 1, &random_projection(net.feature_dim(), seed)).unwrap();
        let _ = abnormal_gradient_probe(&net, &b.x, &b.labels, 0.1, 1).unwrap();
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(net, before);
    }

    #[test]
    fn layer_normalization_matches_weight_norms(seed in any::<u64>()) {
        let stream = blobs(seed % 40, 1, 8);
        let net = tiny_mlp(&stream, seed);
        let theta = net.params_for(&net.trainable_keys(0));
        let (dir, skipped) = layer_normalize(&theta.gaussian_like(seed), &theta);
        prop_assert!(skipped.is_empty());
        let group_norm = |p: &ParamTensors, grp: ParamGroup| {
            p.iter().filter(|(k, _)| k.group == grp).map(|(_, t)| t.frobenius_sq()).sum::<f64>().sqrt()
        };
        for k in theta.keys() {
            let (a, b) = (group_norm(&dir, k.group), group_norm(&theta, k.group));
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn accuracy_matrix_csv_roundtrip(seed in any::<u64>(), t in 1usize..7) {
        let rows = random_acc_matrix(&mut rng(seed), t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let a = AccuracyMatrix::new(rows).unwrap();
        write_acc_matrix(&a, &path).unwrap();
        prop_assert_eq!(read_acc_matrix(&path).unwrap(), a);
    }

    #[test]
    fn idx_roundtrip(n in 1usize..5, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..10)).collect();
        let images = parse_images(&encode_images(n, rows, cols, &pixels)).unwrap();
        prop_assert_eq!(images.shape(), &[n, rows * cols]);
        for (p, v) in pixels.iter().zip(images.data()) {
            prop_assert_eq!(f64::from(*p) / 255.0, *v);
        }
        let parsed = parse_labels(&encode_labels(&labels)).unwrap();
        prop_assert_eq!(parsed, labels.iter().map(|&l| usize::from(l)).collect::<Vec<_>>());
    }
}

#[test]
fn uniformity_drops_when_a_duplicate_moves_to_the_grid_optimum() {
    for s in 0..10u64 {
        let mut r = rng(s);
        let (a, b) = (r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.0..std::f64::consts::TAU));
        let point = |t: f64| [t.cos(), t.sin()];
        let config = |c: f64| {
            let rows = [point(a), point(b), point(c)];
            Tensor::from_rows(&[&rows[0], &rows[1], &rows[2]])
        };
        let dup = uniformity_value(&config(b), 2.0).unwrap();
        let (best_angle, best) = (0..720)
            .map(|i| f64::from(i) * std::f64::consts::TAU / 720.0)
            .map(|c| (c, uniformity_value(&config(c), 2.0).unwrap()))
            .fold((b, dup), |acc, x| if x.1 < acc.1 { x } else { acc });
        assert!(best < dup, "seed {s}");
        let moved = (best_angle - b).rem_euclid(std::f64::consts::TAU);
        assert!(moved > 1e-6 && moved < std::f64::consts::TAU - 1e-6);
    }
}

#[test]
fn training_a_task_leaves_other_heads_untouched() {
    let stream = blobs(2, 3, 10);
    let mut net = tiny_mlp(&stream, 2);
    let before = net.clone();
    let cfg = TrainConfig { epochs: 2, lr: 0.1, ..TrainConfig::default() };
    train_task_naive(&mut net, &stream.tasks[1], &cfg).unwrap();
    for key in before.param_keys() {
        let changed = net.param(&key) != before.param(&key);
        match key.group {
            ParamGroup::Head(t) if t != 1 => assert!(!changed, "{key} moved"),
            _ => assert!(changed, "{key} did not move"),
        }
    }
}

#[test]
fn reparameterization_is_mean_zero() {
    let stream = blobs(0, 1, 4);
    let net = Network::mlp(stream.input_len, &[3], &stream.head_classes(), 1).unwrap();
    let phi_value = 1e-4;
    let mut phi = net.params_for(&net.trainable_keys(0));
    for (_, t) in phi.iter_mut() {
        *t = t.map(|_| phi_value);
    }
    let theta = net.flatten_params();
    let seeds = 10_000;
    let mut sum = vec![0.0; theta.numel()];
    for s in 0..seeds {
        let moved = net.reparameterize(&phi, s).unwrap().flatten_params();
        for (acc, (a, b)) in sum.iter_mut().zip(moved.data().iter().zip(theta.data())) {
            *acc += a - b;
        }
    }
    for v in sum {
        assert!((v / seeds as f64).abs() <= 3.0 * phi_value / 100.0);
    }
}

use rcl::model::Network;

#[test]
fn phi_pretraining_is_deterministic_and_spares_later_heads() {
    let stream = blobs(4, 3, 10);
    let net = tiny_mlp(&stream, 4);
    let cfg = PerturbConfig::default();
    let a = robust_pretrain_phi(&net, &cfg, 2.0, 0.01, 9).unwrap();
    let b = robust_pretrain_phi(&net, &cfg, 2.0, 0.01, 9).unwrap();
    assert_eq!(a.net, b.net);
    assert!(a.max_bound_excess <= 0.0);
    for key in net.param_keys() {
        if matches!(key.group, ParamGroup::Head(t) if t >= 1) {
            assert_eq!(a.net.param(&key), net.param(&key), "{key}");
        }
    }
}

#[test]
fn memory_grows_monotonically_within_layer_dimension() {
    let stream = blobs(6, 4, 15);
    let cfg = TrainConfig { method: Method::Gpm, epochs: 2, lr: 0.1, eps_th: 0.99, ..TrainConfig::default() };
    let out = run_sequence(&cfg, tiny_mlp(&stream, 6), &stream).unwrap();
    let hist = out.memory.history();
    assert_eq!(hist.len(), 4);
    let mut widths = std::collections::BTreeMap::new();
    for added in hist {
        for (layer, k) in added {
            *widths.entry(*layer).or_insert(0) += k;
        }
        for (layer, w) in &widths {
            assert!(*w <= out.net.rep_dim(*layer).unwrap());
        }
    }
    assert_eq!(widths, out.memory.widths());
    assert!(out.record.audit_max.iter().all(|a| *a <= 1e-8));
}
