use hestia::schedules::{base_temperature, pressure, scaled_temperature, ScheduleConfig, ScheduleState};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ScheduleConfig> {
    (1usize..3000, 0.0f64..0.95, 0.01f64..2.0, 0.0f64..2.0).prop_map(|(total_steps, rho, tau_init, alpha)| {
        ScheduleConfig { total_steps, rho, tau_init, alpha }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pressure_ramps_to_one_and_stays(cfg in config()) {
        let mut prev = 0.0;
        for t in 0..=cfg.total_steps {
            let p = pressure(t, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p >= prev);
            let expect = if cfg.rho == 0.0 { 1.0 } else { (t as f64 / (cfg.rho * cfg.total_steps as f64)).min(1.0) };
            prop_assert!((p - expect).abs() < 1e-12);
            if t >= cfg.compress_steps() + 1 {
                prop_assert_eq!(p, 1.0);
            }
            prev = p;
        }
    }

    #[test]
    fn base_temperature_holds_then_decays_to_zero(cfg in config()) {
        let t_comp = cfg.compress_steps();
        let mut prev = f64::INFINITY;
        for t in 0..=cfg.total_steps {
            let tau = base_temperature(t, &cfg).unwrap();
            prop_assert!(tau <= prev);
            prop_assert!((0.0..=cfg.tau_init).contains(&tau));
            if t <= t_comp && t < cfg.total_steps {
                prop_assert_eq!(tau, cfg.tau_init);
            }
            if t > t_comp && t < cfg.total_steps {
                prop_assert!(tau > 0.0);
            }
            prev = tau;
        }
        prop_assert_eq!(base_temperature(cfg.total_steps, &cfg).unwrap(), 0.0);
        prop_assert!(base_temperature(cfg.total_steps + 1, &cfg).is_err());
    }

    #[test]
    fn scaling_orders_tensors_by_score(cfg in config(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, frac in 0.0f64..1.0) {
        let t = ((cfg.total_steps as f64) * frac) as usize;
        let base = base_temperature(t, &cfg).unwrap();
        let ta = scaled_temperature(t, a, &cfg).unwrap();
        let tb = scaled_temperature(t, b, &cfg).unwrap();
        prop_assert!((ta - base * (cfg.alpha * a).exp()).abs() <= 1e-12 * ta.abs().max(1.0));
        if a <= b {
            prop_assert!(ta <= tb);
        } else {
            prop_assert!(ta >= tb);
        }
        if base > 0.0 {
            prop_assert!(((ta / base) - (cfg.alpha * a).exp()).abs() < 1e-12);
        }
        prop_assert!(scaled_temperature(t, 1.5, &cfg).is_err());
    }
}

#[test]
fn unit_values() {
    let cfg = ScheduleConfig { total_steps: 1000, rho: 0.2, tau_init: 0.3, alpha: 0.4 };
    assert!((pressure(100, &cfg).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(base_temperature(200, &cfg).unwrap(), 0.3);
    assert_eq!(base_temperature(1000, &cfg).unwrap(), 0.0);
    let mid = base_temperature(600, &cfg).unwrap();
    assert!((mid - 0.15).abs() < 1e-12);
    let s = ScheduleState::at(600, &[0.0, 0.5, 1.0], &cfg).unwrap();
    for (tau, score) in s.temperatures.iter().zip([0.0, 0.5, 1.0]) {
        assert!((tau / mid - (0.4f64 * score).exp()).abs() < 1e-12);
    }
}

#[test]
fn rejects_invalid_configs() {
    let ok = ScheduleConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        ScheduleConfig { rho: 1.0, ..ok.clone() },
        ScheduleConfig { rho: -0.1, ..ok.clone() },
        ScheduleConfig { tau_init: 0.0, ..ok.clone() },
        ScheduleConfig { alpha: -1.0, ..ok.clone() },
        ScheduleConfig { total_steps: 0, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}
