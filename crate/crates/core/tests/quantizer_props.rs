use hestia::autodiff::{grad, Tensor};
use hestia::autodiff::numeric::rel_err;
use hestia::quantizer::{
    code_of, dead_zone_mask, dequantize, effective_weights, jacobian_value, kernel_probs,
    soft_value, GroupScales, GroupSize, Quantizer, QuantizerConfig,
};
use proptest::prelude::*;

fn quantizer(group: usize) -> Quantizer {
    Quantizer::new(QuantizerConfig {
        group_size: GroupSize::Elements(group),
        ..QuantizerConfig::default()
    })
    .unwrap()
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 1..300)
}

fn tau() -> impl Strategy<Value = f64> {
    (-3.0f64..1.0).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kernel_is_a_distribution(z in -5.0f64..5.0, t in tau()) {
        let p = kernel_probs(z, t);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_value_is_odd_bounded_and_monotone(z in 0.0f64..5.0, dz in 1e-6f64..0.5, t in tau()) {
        prop_assert_eq!(soft_value(-z, t), -soft_value(z, t));
        prop_assert_eq!(jacobian_value(-z, t), jacobian_value(z, t));
        prop_assert!(soft_value(z, t).abs() <= 1.0);
        prop_assert!(soft_value(z + dz, t) >= soft_value(z, t));
        prop_assert!(soft_value(-z - dz, t) <= soft_value(-z, t));
        prop_assert!(jacobian_value(z, t) >= 0.0);
    }

    #[test]
    fn soft_quantize_stays_within_gamma(w in weights(), t in tau(), group in 1usize..200) {
        let q = quantizer(group);
        let scales = q.compute_scale(&w).unwrap();
        let soft = q.soft_values(&w, &scales, t).unwrap();
        for (i, v) in soft.iter().enumerate() {
            prop_assert!(v.abs() <= scales.gamma_at(i) * (1.0 + 1e-15));
        }
    }

    #[test]
    fn scales_are_group_absmeans(w in weights(), group in 1usize..200) {
        let q = quantizer(group);
        let scales = q.compute_scale(&w).unwrap();
        let len = group.min(w.len());
        prop_assert_eq!(scales.group_len(), len);
        prop_assert_eq!(scales.gammas().len(), w.len().div_ceil(len));
        for (g, chunk) in w.chunks(len).enumerate() {
            let mean = chunk.iter().map(|x| x.abs()).sum::<f64>() / chunk.len() as f64;
            prop_assert!((scales.gammas()[g] - (mean + 1e-8)).abs() <= 1e-15 * (1.0 + mean));
        }
    }

    #[test]
    fn hard_quantize_is_ternary_times_gamma(w in weights(), group in 1usize..200) {
        let q = quantizer(group);
        let scales = q.compute_scale(&w).unwrap();
        let codes = q.codes(&w, &scales).unwrap();
        let hard = q.hard_quantize(&w, &scales).unwrap();
        for i in 0..w.len() {
            let g = scales.gamma_at(i);
            prop_assert!((-1..=1).contains(&codes[i]));
            // brute force: nearest of {-g, 0, g}, ties away from zero
            let z = w[i] / g;
            let expect = if z >= 0.5 { 1 } else if z <= -0.5 { -1 } else { 0 };
            prop_assert_eq!(codes[i], expect);
            prop_assert_eq!(hard[i].to_bits(), (f64::from(codes[i]) * g).to_bits());
        }
        prop_assert_eq!(dequantize(&codes, &scales), hard);
    }

    #[test]
    fn graph_soft_quantize_matches_closed_forms(w in prop::collection::vec(-3.0f64..3.0, 1..40), t in tau()) {
        let q = quantizer(16);
        let scales = q.compute_scale(&w).unwrap();
        let x = Tensor::param(&[w.len()], w.clone()).unwrap();
        let y = q.soft_quantize(&x, &scales, t).unwrap();
        let closed = q.soft_values(&w, &scales, t).unwrap();
        for (a, b) in y.to_vec().iter().zip(&closed) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // elementwise op, so the gradient of the sum is the diagonal Jacobian
        let g = grad(&y.sum(), &[&x]).unwrap().remove(0).to_vec();
        let jac = q.soft_jacobian(&w, &scales, t).unwrap();
        // the Jacobian lives on a 1/tau scale, so floor the denominator there
        for (a, b) in g.iter().zip(&jac) {
            prop_assert!(rel_err(*a, *b, 1e-3 / t) < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn dead_zone_mask_matches_brute_force(w in weights(), scale in 0.0f64..0.5) {
        let q = quantizer(128);
        let scales = q.compute_scale(&w).unwrap();
        let delta: Vec<f64> = w.iter().enumerate().map(|(i, _)| ((i as f64) * 2.1).sin() * scale).collect();
        let mask = dead_zone_mask(&w, &delta, &scales).unwrap();
        let moved: Vec<f64> = w.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let before = q.codes(&w, &scales).unwrap();
        let after = q.codes(&moved, &scales).unwrap();
        for i in 0..w.len() {
            prop_assert_eq!(mask[i], before[i] == after[i]);
        }
    }

    #[test]
    fn effective_weights_interpolate(w in prop::collection::vec(-3.0f64..3.0, 1..30), p in 0.0f64..=1.0) {
        let q = quantizer(128);
        let scales = q.compute_scale(&w).unwrap();
        let x = Tensor::new(&[w.len()], w.clone()).unwrap();
        let s = q.soft_quantize(&x, &scales, 0.3).unwrap();
        let e = effective_weights(&x, &s, p).unwrap().to_vec();
        for i in 0..w.len() {
            let expect = (1.0 - p) * w[i] + p * s.data()[i];
            prop_assert!((e[i] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn uniform_limit_at_large_temperature() {
    // deviation from uniform grows like |z| / tau, so stay near the code range
    for z in [-1.0, -0.7, 0.0, 0.3, 1.0] {
        for p in kernel_probs(z, 1e6) {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }
}

#[test]
fn scalar_examples() {
    assert_eq!(code_of(0.5), 1);
    assert_eq!(code_of(-0.5), -1);
    assert_eq!(code_of(0.4999), 0);
    assert_eq!(code_of(7.0), 1);
    let scales = GroupScales::uniform(2.0, 3).unwrap();
    assert_eq!(dequantize(&[-1, 0, 1], &scales), vec![-2.0, 0.0, 2.0]);
    assert_eq!(soft_value(0.0, 0.3), 0.0);
    // z on a boundary: equal mass on the two neighbouring codes
    let p = kernel_probs(0.5, 0.05);
    assert!((p[1] - p[2]).abs() < 1e-12);
}

#[test]
fn rejects_bad_inputs() {
    let q = Quantizer::default();
    let w = vec![0.1, -0.2, 0.3];
    let scales = q.compute_scale(&w).unwrap();
    assert!(q.soft_values(&w, &scales, 0.0).is_err());
    assert!(q.soft_values(&w, &scales, -1.0).is_err());
    assert!(q.soft_values(&w, &scales, f64::NAN).is_err());
    assert!(q.compute_scale(&[]).is_err());
    assert!(q.codes(&w[..2], &scales).is_err());
    assert!(Quantizer::new(QuantizerConfig { group_size: GroupSize::Elements(0), ..QuantizerConfig::default() }).is_err());
    let x = Tensor::new(&[3], w.clone()).unwrap();
    assert!(effective_weights(&x, &x, 1.5).is_err());
    // below the floor the kernel uses tau_min
    let a = q.soft_values(&w, &scales, 1e-9).unwrap();
    let b = q.soft_values(&w, &scales, 1e-4).unwrap();
    assert_eq!(a, b);
}
