use std::sync::Arc;

use proptest::prelude::*;

use msfem::analysis::fit_rate;
use msfem::cell::{homogenized_tensor, solve_corrector};
use msfem::coeff::{check_ellipticity, CoefficientField, FieldDescriptor};
use msfem::fem::{Material, Source};
use msfem::mesh::{build_structured_triangulation, Mesh, Rect};
use msfem::msfem::{assemble_msfem, build_basis, BasisOptions, Mode, MsBasis, Normalization};

fn laminate(a1: f64, a2: f64, fraction: f64) -> CoefficientField {
    FieldDescriptor::Laminate {
        a1,
        a2,
        direction: 1,
        fraction,
    }
    .build()
    .unwrap()
}

fn partition_of_unity_error(basis: &MsBasis) -> f64 {
    let mut worst = 0.0f64;
    for (e, eb) in basis.elements.iter().enumerate() {
        for v in 0..eb.local.mesh.n_vertices() {
            let s: f64 = (0..3).map(|i| basis.phi_at(e, i, 0, v, 0)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn structured_mesh_covers_domain(n in 1usize..20, w in 0.5f64..3.0, h in 0.5f64..3.0) {
        let d = Rect::new(0.0, w, -1.0, h - 1.0).unwrap();
        let mesh = build_structured_triangulation(d, n).unwrap();
        prop_assert_eq!(mesh.n_elements(), 2 * n * n);
        prop_assert!((mesh.total_area() - w * h).abs() < 1e-12 * w * h);
        prop_assert!((0..mesh.n_elements()).all(|e| mesh.area(e) > 0.0));
        prop_assert_eq!(mesh.boundary().iter().filter(|b| **b).count(), 4 * n);
        let back = Mesh::from_msh2(&mesh.to_msh2()).unwrap();
        prop_assert!(back.same_as(&mesh));
    }

    #[test]
    fn laminate_tensor_matches_layer_means(a1 in 0.2f64..10.0, a2 in 0.2f64..10.0, k in 1usize..8) {
        // fractions on the cell grid make the discrete tensor exact
        let fraction = k as f64 / 8.0;
        let f = laminate(a1, a2, fraction);
        let chi = solve_corrector(&f, 16).unwrap();
        let t = homogenized_tensor(&f, &chi).unwrap().tensor;
        let harmonic = 1.0 / (fraction / a1 + (1.0 - fraction) / a2);
        let arithmetic = fraction * a1 + (1.0 - fraction) * a2;
        prop_assert!((t.at(0, 0) - harmonic).abs() < 1e-9 * arithmetic);
        prop_assert!((t.at(1, 1) - arithmetic).abs() < 1e-9 * arithmetic);
        prop_assert!(t.at(0, 1).abs() < 1e-10 * arithmetic);
    }

    #[test]
    fn checkerboard_tensor_within_mean_bounds(a1 in 0.2f64..10.0, a2 in 0.2f64..10.0) {
        let f = CoefficientField::checkerboard(a1, a2);
        let chi = solve_corrector(&f, 16).unwrap();
        let t = homogenized_tensor(&f, &chi).unwrap().tensor;
        let harmonic = 2.0 / (1.0 / a1 + 1.0 / a2);
        let arithmetic = 0.5 * (a1 + a2);
        let tol = 1e-10 * arithmetic;
        prop_assert!(t.is_symmetric(tol));
        for d in 0..2 {
            prop_assert!(t.at(d, d) >= harmonic - tol && t.at(d, d) <= arithmetic + tol);
        }
        // square symmetry of the pattern
        prop_assert!((t.at(0, 0) - t.at(1, 1)).abs() < 1e-8 * arithmetic);
    }

    #[test]
    fn correctors_have_zero_mean_and_bounded_energy(mean in 1.5f64..4.0, amp in 0.0f64..1.4) {
        let f = CoefficientField::trigonometric(mean, amp);
        let b = check_ellipticity(&f, 1024, 16).unwrap();
        let chi = solve_corrector(&f, 16).unwrap();
        for j in 0..2 {
            prop_assert!(chi.mean(j, 0)[0].abs() <= 1e-10);
            prop_assert!(chi.grad_l2(j, 0) <= b.big_lambda / b.lambda * 1.1);
        }
    }

    #[test]
    fn fit_rate_recovers_power_laws(p in -3.0f64..3.0, c in 1e-3f64..1e3) {
        let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.125, 0.0625].iter().map(|&h| (h, c * f64::powf(h, p))).collect();
        let fit = fit_rate(&pts).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-10);
        prop_assert!((fit.intercept - c.ln()).abs() < 1e-8 * (1.0 + c.ln().abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn plain_basis_invariants(a1 in 0.5f64..5.0, a2 in 0.5f64..5.0, k in 3u32..7) {
        let f = laminate(a1, a2, 0.5);
        let eps = 1.0 / k as f64;
        let coarse = Arc::new(build_structured_triangulation(Rect::UNIT, 2).unwrap());
        let material = Material::oscillating(&f, eps).unwrap();
        let opts = BasisOptions { levels: Some(4), ..BasisOptions::with_mode(Mode::Plain) };
        let basis = build_basis(coarse, Rect::UNIT, &material, &opts).unwrap();
        prop_assert!(basis.nodal_duality_error() < 1e-9);
        prop_assert!(partition_of_unity_error(&basis) < 1e-8);
        let sys = assemble_msfem(&basis, &material, &Source::default()).unwrap();
        prop_assert!(sys.matrix.is_symmetric(1e-10 * sys.matrix.max_abs()));
        // constants are in the kernel before boundary conditions
        let ones = vec![1.0; basis.n_dofs()];
        let r = sys.matrix.mul_vec(&ones);
        prop_assert!(r.iter().all(|v| v.abs() < 1e-8 * sys.matrix.max_abs()));
    }

    #[test]
    fn oversampled_nodal_normalization_is_dual(a1 in 0.5f64..5.0, a2 in 0.5f64..5.0) {
        let f = laminate(a1, a2, 0.5);
        let coarse = Arc::new(build_structured_triangulation(Rect::UNIT, 4).unwrap());
        let material = Material::oscillating(&f, 1.0 / 8.0).unwrap();
        let opts = BasisOptions {
            levels: Some(3),
            normalization: Normalization::Nodal,
            ..BasisOptions::with_mode(Mode::Oversampled)
        };
        let basis = build_basis(coarse, Rect::UNIT, &material, &opts).unwrap();
        prop_assert!(basis.nodal_duality_error() < 1e-9);
        prop_assert!(partition_of_unity_error(&basis) < 1e-8);
    }
}
