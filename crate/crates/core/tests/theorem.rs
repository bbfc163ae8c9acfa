use opssplit_core::metrics::{theorem_shift_harness, theorem_state, TheoremSetup};
use opssplit_core::stencil::fit_slope;

#[test]
fn node_error_is_shift_times_operator_norm() {
    let t = theorem_shift_harness(&TheoremSetup::default()).unwrap();
    for r in &t.rows {
        assert!((r.err_node - r.node_closed_form).abs() <= 1e-10, "{r:?}");
        assert!((r.err_opssplit - r.opssplit_closed_form).abs() <= 1e-10, "{r:?}");
    }
    assert!(t.unshifted.err_node.abs() <= 1e-12);
}

#[test]
fn node_error_from_independent_norm() {
    // ‖ℒu‖ from the closed-form Laplacian of the band-limited state
    let setup = TheoremSetup::default();
    let (_, lap) = theorem_state(setup.grid);
    let norm = (lap.iter().map(|v| v * v).sum::<f64>() / lap.len() as f64).sqrt();
    // each mode contributes (k²·a)²/2 to the mean square
    let want = ((5.0f64 * 0.6).powi(2) / 2.0 + (10.0f64 * 0.3).powi(2) / 2.0 + (13.0f64 * 0.2).powi(2) / 2.0).sqrt();
    assert!((norm - want).abs() < 1e-10, "{norm} vs {want}");
    let t = theorem_shift_harness(&setup).unwrap();
    for r in &t.rows {
        assert!((r.err_node - r.shift * want).abs() <= 1e-10);
    }
}

#[test]
fn opssplit_error_is_flat_in_the_shift() {
    let t = theorem_shift_harness(&TheoremSetup::default()).unwrap();
    let errs: Vec<f64> = t.rows.iter().map(|r| r.err_opssplit).collect();
    let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = errs.iter().cloned().fold(0.0, f64::max);
    assert!((hi - lo) / lo <= 0.10, "{errs:?}");
    assert!((t.slope_node - 1.0).abs() <= 0.1, "{}", t.slope_node);
    assert!(t.slope_opssplit.abs() <= 0.1, "{}", t.slope_opssplit);
    assert!((t.slope_ar - 1.0).abs() <= 0.1, "{}", t.slope_ar);
}

#[test]
fn opssplit_floor_shrinks_with_stencil_order() {
    let floor = |order| {
        let s = TheoremSetup { fd_order: order, ..TheoremSetup::default() };
        theorem_shift_harness(&s).unwrap().unshifted.err_opssplit
    };
    let e: Vec<f64> = [2, 4, 6].iter().map(|&o| floor(o)).collect();
    assert!(e[1] < e[0] && e[2] < e[1], "{e:?}");
}

#[test]
fn harness_rejects_degenerate_shifts() {
    for shifts in [vec![0.01], vec![0.01, 0.0], vec![-0.01, 0.02]] {
        let s = TheoremSetup { shifts, ..TheoremSetup::default() };
        assert!(theorem_shift_harness(&s).is_err());
    }
}

#[test]
fn fit_slope_recovers_power_laws() {
    let xs: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
    for p in [0.0, 1.0, 2.5] {
        let ys: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| (3.0 * v.powf(p)).ln()).collect();
        assert!((fit_slope(&xs, &ys) - p).abs() < 1e-12);
    }
}

#[test]
fn theorem_state_has_zero_mean() {
    let (u, lap) = theorem_state(16);
    assert_eq!((u.len(), lap.len()), (256, 256));
    assert!(u.iter().sum::<f64>().abs() < 1e-12);
    assert!(lap.iter().sum::<f64>().abs() < 1e-10);
}
