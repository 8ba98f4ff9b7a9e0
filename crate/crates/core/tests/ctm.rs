use traffic_pde::{ctm_step, CtmBoundary, CtmConfig};

fn hand_config() -> CtmConfig {
    // 25 vehicles per step at capacity; sending is min(k, 25), receiving min((128 - k) / 4, 25)
    CtmConfig::new(1.0, 64.0, 16.0, 1600.0, 128.0, 1.0 / 64.0).unwrap()
}

#[test]
fn three_cell_fixture_matches_hand_computation() {
    let cfg = hand_config();
    let boundary = CtmBoundary::Open {
        upstream_demand: 10.0,
        downstream_supply: 30.0,
    };
    let expected = [[10.0, 35.0, 25.0], [10.0, 20.0, 25.0], [10.0, 10.0, 20.0]];
    let mut k = vec![20.0, 40.0, 10.0];
    for want in expected {
        k = ctm_step(&cfg, &k, boundary).unwrap();
        assert_eq!(k, want);
    }
}

#[test]
fn ring_conserves_vehicles() {
    let cfg = CtmConfig::new(0.5, 60.0, 15.0, 2000.0, 180.0, 1.0 / 180.0).unwrap();
    let mut k: Vec<f64> = (0..40)
        .map(|i| 20.0 + 150.0 * (-((i as f64 - 12.0) / 4.0).powi(2)).exp())
        .collect();
    let total0: f64 = k.iter().sum::<f64>() * cfg.cell_length;
    for _ in 0..2000 {
        k = ctm_step(&cfg, &k, CtmBoundary::Ring).unwrap();
        let total: f64 = k.iter().sum::<f64>() * cfg.cell_length;
        assert!((total - total0).abs() <= 1e-12 * total0, "{total} vs {total0}");
    }
    assert!(k.iter().all(|&d| (0.0..=180.0).contains(&d)));
}

#[test]
fn closed_road_keeps_every_vehicle() {
    let cfg = hand_config();
    let mut k = vec![100.0, 0.0, 0.0, 0.0];
    for _ in 0..50 {
        k = ctm_step(&cfg, &k, CtmBoundary::Closed).unwrap();
    }
    assert!((k.iter().sum::<f64>() - 100.0).abs() < 1e-12);
    assert!(k[3] > 0.0);
}
