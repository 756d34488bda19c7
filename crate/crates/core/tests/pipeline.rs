use std::sync::Arc;

use msfem::analysis::{reference_solution, run_study, Norm, StudyConfig, StudyMode, Sweep};
use msfem::coeff::FieldDescriptor;
use msfem::fem::{Material, Source};
use msfem::mesh::{build_structured_triangulation, Rect, RefinedGrid};
use msfem::msfem::{
    assemble_msfem, broken_h1_norm, build_basis, build_basis_cached, cache_path, error_suite, prolongate, solve_msfem,
    BasisOptions, Mode, MsBasis,
};
use msfem::solver::SolverOptions;
use msfem::MsfemError;

fn laminate() -> FieldDescriptor {
    FieldDescriptor::Laminate {
        a1: 1.0,
        a2: 4.0,
        direction: 1,
        fraction: 0.5,
    }
}

/// Multiscale solve on an `n` grid with sub-meshes aligned to `n_ref`.
fn ms_errors(mode: Mode, n: usize, eps: f64, n_ref: usize) -> (f64, f64) {
    let field = laminate().build().unwrap();
    let src = Source::default();
    let reference = reference_solution(Rect::UNIT, &field, eps, n_ref, &src, 1e-10, 4_000_000).unwrap();
    let coarse = Arc::new(build_structured_triangulation(Rect::UNIT, n).unwrap());
    let material = Material::oscillating(&field, eps).unwrap();
    let opts = BasisOptions {
        levels: Some((n_ref / n).trailing_zeros() as usize),
        ..BasisOptions::with_mode(mode)
    };
    let basis = build_basis(coarse, Rect::UNIT, &material, &opts).unwrap();
    let sys = assemble_msfem(&basis, &material, &src).unwrap();
    let sol = solve_msfem(&sys, mode, &SolverOptions::with_tol(1e-12)).unwrap();
    let e = error_suite(&sol, &basis, &reference.grid, &reference.u).unwrap();
    (e.energy_broken, e.l2)
}

#[test]
fn multiscale_beats_resonance_when_eps_is_small() {
    // eps << h against the h = eps resonance case
    let (small_plain, _) = ms_errors(Mode::Plain, 8, 1.0 / 128.0, 512);
    let (small_over, _) = ms_errors(Mode::Oversampled, 8, 1.0 / 128.0, 512);
    let (res_plain, _) = ms_errors(Mode::Plain, 8, 1.0 / 8.0, 512);
    let (res_over, _) = ms_errors(Mode::Oversampled, 8, 1.0 / 8.0, 512);
    assert!(small_plain < res_plain, "{small_plain} vs {res_plain}");
    assert!(small_over < res_over, "{small_over} vs {res_over}");
}

#[test]
fn multiscale_beats_linear_elements_on_coarse_grid() {
    let (lin, _) = ms_errors(Mode::Linear, 8, 1.0 / 32.0, 512);
    let (plain, _) = ms_errors(Mode::Plain, 8, 1.0 / 32.0, 512);
    let (over, _) = ms_errors(Mode::Oversampled, 8, 1.0 / 32.0, 512);
    assert!(plain < lin, "plain {plain} vs linear {lin}");
    assert!(over < lin, "oversampled {over} vs linear {lin}");
}

#[test]
fn conforming_prolongation_matches_broken_norm() {
    let field = laminate().build().unwrap();
    let coarse = Arc::new(build_structured_triangulation(Rect::UNIT, 4).unwrap());
    let material = Material::oscillating(&field, 0.125).unwrap();
    let opts = BasisOptions {
        levels: Some(4),
        ..BasisOptions::with_mode(Mode::Plain)
    };
    let basis = build_basis(coarse, Rect::UNIT, &material, &opts).unwrap();
    let sys = assemble_msfem(&basis, &material, &Source::default()).unwrap();
    let sol = solve_msfem(&sys, Mode::Plain, &SolverOptions::default()).unwrap();
    let grid = RefinedGrid::new(Rect::UNIT, 64).unwrap();
    let u = prolongate(&sol, &basis, &grid).unwrap();
    // plain MsFEM is conforming, so the broken seminorm is the global one
    let broken = broken_h1_norm(&sol, &basis);
    assert!((u.h1_seminorm() - broken).abs() < 1e-10 * broken);
    assert!(u.values.iter().all(|v| v.is_finite()));
}

#[test]
fn cache_reload_is_exact_and_keyed() {
    let dir = tempfile::tempdir().unwrap();
    let field = laminate().build().unwrap();
    let coarse = Arc::new(build_structured_triangulation(Rect::UNIT, 4).unwrap());
    let material = Material::oscillating(&field, 0.125).unwrap();
    let opts = BasisOptions {
        levels: Some(3),
        ..BasisOptions::with_mode(Mode::Oversampled)
    };
    let a = build_basis_cached(coarse.clone(), Rect::UNIT, &material, &opts, Some(dir.path())).unwrap();
    let path = cache_path(dir.path(), &a.key);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MSB1");
    let b = build_basis_cached(coarse.clone(), Rect::UNIT, &material, &opts, Some(dir.path())).unwrap();
    assert_eq!(a.key, b.key);
    for (x, y) in a.elements.iter().zip(&b.elements) {
        assert_eq!(x.phi, y.phi);
        assert_eq!(x.c, y.c);
    }
    // a different eps is a different entry
    let other = Material::oscillating(&field, 0.25).unwrap();
    let c = build_basis_cached(coarse.clone(), Rect::UNIT, &other, &opts, Some(dir.path())).unwrap();
    assert_ne!(c.key, a.key);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    // corrupt files are rejected, not silently used
    std::fs::write(&path, b"MSB1garbage").unwrap();
    let err = MsBasis::read_cache(&path, coarse).unwrap_err();
    assert!(matches!(err, MsfemError::Parse(_) | MsfemError::Io(_)), "{err:?}");
}

#[test]
fn study_records_homogenized_and_fine_modes() {
    let mut cfg = StudyConfig::new(
        laminate(),
        Sweep::FixEpsSweepH {
            eps: 0.125,
            h: vec![0.5, 0.25, 0.125],
        },
        vec![StudyMode::HomogenizedP1, StudyMode::FineP1, StudyMode::Plain],
    );
    cfg.norms = vec![Norm::EnergyBroken, Norm::L2];
    cfg.n_cell = 32;
    let report = run_study(&cfg, 2, None).unwrap();
    assert!(report.complete);
    let hat = report.homogenized.unwrap();
    assert!((hat.at(0, 0) - 1.6).abs() < 1e-9);
    assert_eq!(report.rows.len(), 3 * 3 * 2);
    // the multiscale basis captures the oscillation that plain P1 on the same grid misses
    for h in [0.5, 0.25] {
        let fine = report.error(StudyMode::FineP1, Norm::EnergyBroken, h, 0.125).unwrap();
        let plain = report.error(StudyMode::Plain, Norm::EnergyBroken, h, 0.125).unwrap();
        assert!(plain < fine, "h={h}: plain {plain} fine {fine}");
    }
    let csv = report.to_csv_untimed();
    assert!(csv.starts_with("h,eps,mode,norm,error,iters\n"));
}
