use std::f64::consts::PI;

use opssplit_core::field::Field;
use opssplit_core::stencil::{apply_stencil, axis_row, make_stencil, measure_order, StencilKind};
use proptest::prelude::*;

// Centred difference tables (Fornberg 1988), written out by hand.
const D1: [&[f64]; 4] = [
    &[-1.0 / 2.0, 0.0, 1.0 / 2.0],
    &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
    &[-1.0 / 60.0, 3.0 / 20.0, -3.0 / 4.0, 0.0, 3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0],
    &[
        1.0 / 280.0,
        -4.0 / 105.0,
        1.0 / 5.0,
        -4.0 / 5.0,
        0.0,
        4.0 / 5.0,
        -1.0 / 5.0,
        4.0 / 105.0,
        -1.0 / 280.0,
    ],
];

const D2: [&[f64]; 4] = [
    &[1.0, -2.0, 1.0],
    &[-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0],
    &[1.0 / 90.0, -3.0 / 20.0, 3.0 / 2.0, -49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0],
    &[
        -1.0 / 560.0,
        8.0 / 315.0,
        -1.0 / 5.0,
        8.0 / 5.0,
        -205.0 / 72.0,
        8.0 / 5.0,
        -1.0 / 5.0,
        8.0 / 315.0,
        -1.0 / 560.0,
    ],
];

#[test]
fn axis_rows_match_tables() {
    for (k, order) in [2, 4, 6, 8].into_iter().enumerate() {
        for (deriv, table) in [(1, D1[k]), (2, D2[k])] {
            let row = axis_row(deriv, order).unwrap();
            assert_eq!(row.len(), table.len());
            for (a, b) in row.iter().zip(table) {
                assert!((a - b).abs() < 1e-15, "order {order} d{deriv}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn unsupported_orders_rejected() {
    for order in [0, 1, 3, 10] {
        assert!(make_stencil(StencilKind::Laplacian, order, 0.1, 0.1).is_err());
    }
    assert!(make_stencil(StencilKind::GradX, 2, 0.0, 0.1).is_err());
}

fn f(x: f64, y: f64) -> f64 {
    (x).sin() * (2.0 * y).cos() + 0.5 * (3.0 * x + y).cos()
}
fn fx(x: f64, y: f64) -> f64 {
    x.cos() * (2.0 * y).cos() - 1.5 * (3.0 * x + y).sin()
}
fn fy(x: f64, y: f64) -> f64 {
    -2.0 * x.sin() * (2.0 * y).sin() - 0.5 * (3.0 * x + y).sin()
}
fn lap(x: f64, y: f64) -> f64 {
    -5.0 * x.sin() * (2.0 * y).cos() - 5.0 * (3.0 * x + y).cos()
}

fn slope(kind: StencilKind, order: usize, exact: &dyn Fn(f64, f64) -> f64, sizes: &[usize]) -> f64 {
    let m = measure_order(kind, order, 2.0 * PI, &f, exact, sizes).unwrap();
    assert!(m.monotone, "{kind:?} order {order}: errors {:?}", m.errors);
    m.slope
}

#[test]
fn convergence_orders() {
    let div = |x: f64, y: f64| fx(x, y) + fy(x, y);
    for order in [2, 4, 6, 8] {
        let sizes: &[usize] = &[32, 64, 128];
        for (kind, exact) in [
            (StencilKind::GradX, &fx as &dyn Fn(f64, f64) -> f64),
            (StencilKind::GradY, &fy),
            (StencilKind::Laplacian, &lap),
            (StencilKind::Divergence, &div),
        ] {
            let s = slope(kind, order, exact, sizes);
            assert!((s - order as f64).abs() <= 0.3, "{kind:?} order {order}: slope {s}");
        }
    }
}

#[test]
fn anisotropic_spacing() {
    let (h, w) = (48, 80);
    let (dx, dy) = (2.0 * PI / h as f64, 2.0 * PI / w as f64);
    let field = Field::from_fn(1, h, w, (0.0, dx), (0.0, dy), |_, x, y| f(x, y));
    let k = make_stencil(StencilKind::Laplacian, 8, dx, dy).unwrap();
    let out = apply_stencil(&field, &k).unwrap();
    for i in 0..h {
        for j in 0..w {
            let e = out.plane(0)[i * w + j] - lap(i as f64 * dx, j as f64 * dy);
            assert!(e.abs() < 1e-5, "{e}");
        }
    }
}

#[test]
fn spacing_mismatch_rejected() {
    let field = Field::zeros(1, 8, 8, 0.1, 0.1);
    let k = make_stencil(StencilKind::GradX, 2, 0.2, 0.1).unwrap();
    assert!(apply_stencil(&field, &k).is_err());
    let odd = Field::zeros(3, 8, 8, 0.1, 0.1);
    let k = make_stencil(StencilKind::Divergence, 2, 0.1, 0.1).unwrap();
    assert!(apply_stencil(&odd, &k).is_err());
}

fn field_strategy(c: usize) -> impl Strategy<Value = Field> {
    (4usize..10, 4usize..10).prop_flat_map(move |(h, w)| {
        prop::collection::vec(-1.0f64..1.0, c * h * w).prop_map(move |d| {
            Field::new(opssplit_tensor::Tensor::new(vec![c, h, w], d).unwrap(), 0.3, 0.7).unwrap()
        })
    })
}

fn kinds() -> impl Strategy<Value = StencilKind> {
    prop_oneof![
        Just(StencilKind::GradX),
        Just(StencilKind::GradY),
        Just(StencilKind::Laplacian),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_equivariant(f in field_strategy(2), kind in kinds(), order in prop::sample::select(vec![2usize, 4]), si in -5isize..5, sj in -5isize..5) {
        let k = make_stencil(kind, order, f.dx, f.dy).unwrap();
        let a = apply_stencil(&f.shifted(si, sj), &k).unwrap();
        let b = apply_stencil(&f, &k).unwrap().shifted(si, sj);
        for (x, y) in a.data.data().iter().zip(b.data.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn annihilates_constants(c in -5.0f64..5.0, kind in kinds(), order in prop::sample::select(vec![2usize, 4, 6, 8])) {
        let f = Field::from_fn(1, 17, 17, (0.0, 0.1), (0.0, 0.2), |_, _, _| c);
        let out = apply_stencil(&f, &make_stencil(kind, order, 0.1, 0.2).unwrap()).unwrap();
        prop_assert!(out.data.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn linear(a in field_strategy(1), s in -3.0f64..3.0, kind in kinds()) {
        let k = make_stencil(kind, 2, a.dx, a.dy).unwrap();
        let scaled = Field::new(a.data.map(|v| s * v), a.dx, a.dy).unwrap();
        let lhs = apply_stencil(&scaled, &k).unwrap();
        let rhs = apply_stencil(&a, &k).unwrap();
        for (x, y) in lhs.data.data().iter().zip(rhs.data.data()) {
            prop_assert!((x - s * y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn gradient_sums_to_zero(f in field_strategy(1), order in prop::sample::select(vec![2usize, 4, 6, 8])) {
        // Periodic differences telescope.
        let out = apply_stencil(&f, &make_stencil(StencilKind::GradX, order, f.dx, f.dy).unwrap()).unwrap();
        let s: f64 = out.data.data().iter().sum();
        prop_assert!(s.abs() < 1e-9);
    }
}
