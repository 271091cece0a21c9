use proptest::prelude::*;
use sbrenorm::feshbach::{make_cutoff, CutoffKind};
use sbrenorm::flow::{self, FlowContext};
use sbrenorm::fock::{FockBasis, Scheme};
use sbrenorm::linalg;
use sbrenorm::model::{compute_z_at, desk_spec, AtomicSystem, Family, ModelSpec};
use sbrenorm::validate::{ground_state_at, Selection};
use sbrenorm::{CMat, C64};
use std::f64::consts::PI;

fn cmat(d: usize, re: &[f64], im: &[f64]) -> CMat {
    CMat::from_fn(d, d, |i, j| C64::new(re[i * d + j], im[i * d + j]))
}

fn hermitian(d: usize, re: &[f64], im: &[f64]) -> CMat {
    let a = cmat(d, re, im);
    (&a + a.adjoint()) * C64::new(0.5, 0.0)
}

#[test]
fn desk_model_text_round_trips() {
    let spec = desk_spec();
    assert_eq!(ModelSpec::parse(&spec.to_text()).unwrap(), spec);
}

#[test]
fn two_step_pipeline_on_reduced_desk() {
    let mut spec = desk_spec();
    spec.n_max = 2;
    let model = spec.build().unwrap();
    let ctx = FlowContext::new(&model, make_cutoff(CutoffKind::PolySmooth)).unwrap();
    let (params, ann) = flow::parameter_schedule(0.15, 0.25, 0.25, PI / 6.0, 0.25, &ctx.schedule_norms()).unwrap();
    let g = ann.midpoint(0.0);
    assert!(ann.contains(g));
    let gs = ground_state_at(&ctx.sys, &ctx.coupling, &ctx.basis, g, Selection::Lowest).unwrap();
    assert!(gs.certified(), "{:?}", (gs.residual, gs.refinement_change, gs.gap, gs.h_norm));
    let r = flow::run_two_step(&ctx, &params, &ann, g, Some(gs.energy)).unwrap();
    assert!(r.first_oracle <= 1e-10, "{}", r.first_oracle);
    assert!(r.second.reconstruction_error <= 1e-6, "{}", r.second.reconstruction_error);
    assert!(r.second.cond_ii);
    let e2e = r.end_to_end.unwrap();
    assert!(e2e.residual <= 1e-8, "{e2e:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_text_round_trips(
        h in prop::collection::vec(-2.0f64..2.0, 4),
        a in prop::collection::vec(-1.0f64..1.0, 8),
        sigma in 0.5f64..3.0,
        mu in 0.1f64..1.0,
        shells in 1usize..8,
        n_max in 1usize..4,
        fold in any::<bool>(),
        gl in any::<bool>(),
    ) {
        let spec = ModelSpec {
            h_at: hermitian(2, &h, &[0.0, h[1], -h[1], 0.0]),
            family: Family::PowerLaw { sigma, cutoff: 1.0, amplitude: cmat(2, &a[..4], &a[4..]) },
            mu,
            scheme: if gl { Scheme::GaussLegendre } else { Scheme::Midpoint },
            shells,
            radius: 1.0,
            fold_polarizations: fold,
            n_max,
        };
        prop_assert_eq!(ModelSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn gap_normalization_invariants(v in prop::collection::vec(-3.0f64..3.0, 32)) {
        let h = hermitian(4, &v[..16], &v[16..]);
        let sys = AtomicSystem::new(h.clone()).unwrap();
        prop_assume!(sys.d_at > 1e-6);
        let n = sys.normalize_gap().unwrap();
        prop_assert!(n.is_normalized());
        prop_assert_eq!(n.d0, sys.d0);
        prop_assert!((n.eps_at * n.scale - sys.eps_at).abs() <= 1e-10 * (1.0 + sys.eps_at.abs()));
        let p = &n.p_at;
        prop_assert!(linalg::fro(&(p * p - p)) <= 1e-10);
        prop_assert!(linalg::fro(&(&n.h_at * p - p * C64::new(n.eps_at, 0.0))) <= 1e-10 * (1.0 + n.eps_at.abs()));
        let b = &n.ground_basis;
        prop_assert!(linalg::fro(&(b.adjoint() * b - CMat::identity(n.d0, n.d0))) <= 1e-10);
    }

    /// Lowest eigenvalue of Z_at against (E_g − ε_at)/g² from exact
    /// diagonalization at small g on a two-shell grid.
    #[test]
    fn second_order_shift_matches_diagonalization(
        re in prop::collection::vec(-1.0f64..1.0, 9),
        im in prop::collection::vec(-1.0f64..1.0, 9),
        sigma in 0.5f64..2.0,
    ) {
        let mut h = CMat::zeros(3, 3);
        h[(2, 2)] = C64::new(1.0, 0.0);
        let spec = ModelSpec {
            h_at: h,
            family: Family::PowerLaw { sigma, cutoff: 1.0, amplitude: cmat(3, &re, &im) },
            mu: 0.5,
            scheme: Scheme::Midpoint,
            shells: 2,
            radius: 1.0,
            fold_polarizations: true,
            n_max: 2,
        };
        let m = spec.build().unwrap();
        let basis = FockBasis::build(&m.grid, m.spec.n_max).unwrap();
        let second = compute_z_at(&m.sys, &m.coupling, &m.grid).unwrap();
        prop_assume!(second.norm_z > 1e-3);
        let g = 1e-3 / second.norm_z.sqrt();
        let gs = ground_state_at(&m.sys, &m.coupling, &basis, C64::new(g, 0.0), Selection::Lowest).unwrap();
        let fitted = (gs.energy.re - m.sys.eps_at) / (g * g);
        prop_assert!((fitted - second.eps2).abs() <= 1e-4 * second.norm_z, "{} vs {}", fitted, second.eps2);
    }
}
