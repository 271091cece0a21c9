//! Acceptance criteria 1-11 on the desk model. Each test prints one
//! `criterion N: PASS|FAIL` line with the measured values, then asserts.

use sbrenorm::feshbach::{make_cutoff, CutoffKind, SmoothCutoff};
use sbrenorm::flow::{self, FlowContext};
use sbrenorm::fock::FockBasis;
use sbrenorm::model::{compute_z_at, desk_spec, Model};
use sbrenorm::validate::{self, InequalityReport, Selection};
use sbrenorm_cli::config::{Overrides, RunConfig};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

const SEED: u64 = 20240611;

fn cutoff() -> SmoothCutoff {
    make_cutoff(CutoffKind::PolySmooth)
}

fn desk() -> &'static (Model, FockBasis) {
    static DESK: OnceLock<(Model, FockBasis)> = OnceLock::new();
    DESK.get_or_init(|| {
        let m = desk_spec().build().unwrap();
        let b = FockBasis::build(&m.grid, m.spec.n_max).unwrap();
        (m, b)
    })
}

fn suite() -> &'static InequalityReport {
    static SUITE: OnceLock<InequalityReport> = OnceLock::new();
    SUITE.get_or_init(|| {
        let (m, b) = desk();
        validate::inequality_suite(&m.sys, m.coupling.mu, &m.grid, b, &cutoff(), SEED, 20).unwrap()
    })
}

fn report(n: &str, ok: bool, detail: String) {
    println!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn suite_part(prefixes: &[&str]) -> (bool, String) {
    let rep = suite();
    let picked: Vec<_> = rep.entries.iter().filter(|e| prefixes.iter().any(|p| e.name.starts_with(p))).collect();
    assert!(!picked.is_empty());
    let ok = picked.iter().all(|e| e.violations == 0 && e.instances > 0);
    let detail = picked
        .iter()
        .map(|e| format!("{} [{} inst, {} viol, min slack {:.3e}]", e.name, e.instances, e.violations, e.min_slack))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, detail)
}

#[test]
fn criterion_01_cutoff_identity() {
    let cut = cutoff();
    let ci = validate::cutoff_identity(&cut, 1000);
    let edges = cut.chi(0.75) == 1.0 && cut.chi(1.0) == 0.0 && cut.chi(0.0) == 1.0 && cut.chi(2.0) == 0.0;
    let ok = ci.max_deviation <= 1e-12 && ci.exact_plateaus && edges;
    report("1", ok, format!("max |chi^2+chibar^2-1| = {:.3e}, exact plateaus = {}", ci.max_deviation, ci.exact_plateaus && edges));
}

#[test]
fn criterion_02_pull_through() {
    let (_, b) = desk();
    let cut = cutoff();
    let mut worst = [0.0f64; 3];
    for rho in [0.1, 0.2, 0.25] {
        let r = validate::pull_through_suite(b, &cut, rho).unwrap();
        for i in 0..3 {
            worst[i] = worst[i].max(r[i]);
        }
    }
    let ok = worst.iter().all(|&x| x <= 1e-12);
    report("2", ok, format!("residuals f=1: {:.3e}, f=r: {:.3e}, f=chi(r/rho): {:.3e}", worst[0], worst[1], worst[2]));
}

#[test]
fn criterion_03_field_operator_bounds() {
    let (ok, detail) = suite_part(&["annihilation", "creation", "projection", "interaction_form", "ominv_le_mu"]);
    report("3", ok, detail);
}

#[test]
fn criterion_04_kernel_bounds() {
    let (ok, detail) = suite_part(&["operator_norm_estimate", "sharp_norm", "injective"]);
    report("4", ok, detail);
}

#[test]
fn criterion_05_scaling_identity() {
    let mut worst = 0.0f64;
    let (mut checked, mut viol) = (0, 0);
    for s in 0..5 {
        let r = validate::scaling_identity(0.5, SEED + s).unwrap();
        worst = worst.max(r.rel_error);
        checked += r.contraction_checked;
        viol += r.contraction_violations;
    }
    let ok = worst <= 1e-12 && viol == 0 && checked > 0;
    report("5", ok, format!("max rel Frobenius error {worst:.3e}; contraction {viol} violations of {checked}"));
}

#[test]
fn criterion_06_wick() {
    let mut worst = [0.0f64; 2];
    for s in 0..3 {
        worst[0] = worst[0].max(validate::wick_identity(2, SEED + s).unwrap());
        worst[1] = worst[1].max(validate::wick_identity(3, SEED + 10 + s).unwrap());
    }
    let ok = worst.iter().all(|&x| x <= 1e-8);
    report("6", ok, format!("L=2 rel error {:.3e}, L=3 rel error {:.3e}", worst[0], worst[1]));
}

#[test]
fn criterion_07_first_feshbach_step() {
    let (m, b) = desk();
    let rho = 0.2;
    let r = validate::first_feshbach_check(&m.sys, &m.coupling, b, &cutoff(), rho, SEED, 8).unwrap();
    let a = r.criterion_ok && r.discrepancy <= 1e-9;
    let bb = r.smin <= 1e-8 * r.f_norm && r.residual <= 1e-6 * r.h_norm;
    let inv_viol = r.resolvent.iter().filter(|(_, rep)| rep.inverse_norm > rep.bound * (1.0 + 1e-12)).count();
    let (mut w_viol, mut w_total, mut corr_viol) = (0, 0, 0);
    let mut worst_ratio = 0.0f64;
    for (_, rep) in &r.resolvent {
        for &(_, n, bound) in &rep.weighted {
            w_total += 1;
            worst_ratio = worst_ratio.max(n / bound);
            if n > bound * (1.0 + 1e-12) {
                w_viol += 1;
            }
            if n > (bound + 2.0) * (1.0 + 1e-12) {
                corr_viol += 1;
            }
        }
    }
    let c = inv_viol == 0 && w_viol == 0;
    let detail = format!(
        "g = {:.4e}; (a) {} discrepancy {:.3e}; (b) {} smin/|F| {:.3e}, residual/|H| {:.3e}; \
(c) {} 4/rho: {inv_viol} of {} violated, 1+4tau/rho: {w_viol} of {w_total} violated (worst ratio {worst_ratio:.3}), \
3+4tau/rho: {corr_viol} violated",
        r.g.re,
        if a { "ok" } else { "FAIL" },
        r.discrepancy,
        if bb { "ok" } else { "FAIL" },
        r.smin / r.f_norm,
        r.residual / r.h_norm,
        if c { "ok" } else { "FAIL" },
        r.resolvent.len(),
    );
    report("7", a && bb && c, detail);
}

#[test]
fn criterion_08_expansion() {
    let (m, b) = desk();
    let second = compute_z_at(&m.sys, &m.coupling, &m.grid).unwrap();
    let mags = validate::fit_window(&second, 1e-5).unwrap();
    let fit = validate::expansion_check(&m.sys, &m.coupling, b, &second, 0.0, &mags, None).unwrap();
    let smallest = fit.smallest_remainder_ratio();
    let ok = fit.rel_error <= 1e-2 && fit.remainder_monotone && smallest < 0.1 && fit.parity_max <= 1e-10;
    report(
        "8",
        ok,
        format!(
            "|g| in [{:.3e}, {:.3e}]; eps2 = {:.6e}, fitted = {:.6e}, rel error {:.3e}; remainder monotone = {}, \
smallest/|eps2| = {:.3e}; parity {:.3e}",
            mags[0],
            mags[mags.len() - 1],
            fit.eps2,
            fit.fitted_eps2.re,
            fit.rel_error,
            fit.remainder_monotone,
            smallest,
            fit.parity_max
        ),
    );
}

#[test]
fn criterion_09_second_step() {
    let (m, _) = desk();
    let ctx = FlowContext::new(m, cutoff()).unwrap();
    let mu = ctx.mu;
    let (params, ann) =
        flow::parameter_schedule(0.15, mu / 4.0, mu / 4.0, PI / 6.0, 0.25, &ctx.schedule_norms()).unwrap();
    let g = ann.midpoint(0.0);
    let gs = validate::ground_state_at(&ctx.sys, &ctx.coupling, &ctx.basis, g, Selection::Lowest).unwrap();
    let r = flow::run_two_step(&ctx, &params, &ann, g, Some(gs.energy)).unwrap();
    let inv = &r.invertibility;
    let s = &r.second;
    let ok = inv.ok && s.cond_i && s.cond_ii && s.reconstruction_error <= 1e-6 && s.polydisc.member;
    report(
        "9",
        ok,
        format!(
            "g = {:.4e} in ({:.4e}, {:.4e}); inverse norm on Ran chibar {} vs 4/rho1 = {:.3e} ({}); cond (i) {}, cond (ii) {}; \
reconstruction {:.3e}; polydisc member {}",
            g.re,
            ann.g_lower,
            ann.g_upper,
            inv.inverse_norm.map_or("n/a".into(), |x| format!("{x:.3e}")),
            inv.bound,
            if inv.ok { "ok" } else { "FAIL" },
            s.cond_i,
            s.cond_ii,
            s.reconstruction_error,
            s.polydisc.member
        ),
    );
}

#[test]
fn criterion_10_cone_geometry() {
    let (m, _) = desk();
    let d_at = m.sys.d_at;
    let mut worst = 0.0f64;
    for d0 in [PI / 6.0, PI / 4.0 + 0.01, 3.0 * PI / 8.0] {
        let exact = flow::c_delta0(d0, d_at).unwrap();
        let sampled = flow::c_delta0_sampled(d0, d_at);
        worst = worst.max((exact - sampled).abs() / exact.abs().max(1e-300));
    }
    let ctx = FlowContext::new(m, cutoff()).unwrap();
    let norms = ctx.schedule_norms();
    let mut ratios = Vec::new();
    for rho0 in [0.15, 0.1, 0.05] {
        match flow::parameter_schedule(rho0, ctx.mu / 4.0, ctx.mu / 4.0, PI / 6.0, 0.25, &norms) {
            Ok((_, a)) => ratios.push(a.g_lower / a.g_upper),
            Err(_) => ratios.push(f64::NAN),
        }
    }
    let nonempty = ratios.iter().all(|r| r.is_finite() && *r < 1.0);
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let ok = worst <= 1e-3 && nonempty && decreasing;
    report(
        "10",
        ok,
        format!(
            "c_delta0 max rel error {worst:.3e}; g-/g+ at rho0 = 0.15, 0.1, 0.05: {}",
            ratios.iter().map(|r| format!("{r:.4e}")).collect::<Vec<_>>().join(" ")
        ),
    );
}

fn run_once(text: &str, out: &Path) -> Vec<(String, Vec<u8>)> {
    let ov = Overrides { out: Some(out.to_path_buf()), ..Default::default() };
    let cfg = RunConfig::parse(text, Path::new(env!("CARGO_MANIFEST_DIR")).join("data").as_path(), &ov).unwrap();
    let outcome = sbrenorm_cli::run(&cfg).unwrap();
    let mut csvs: Vec<(String, Vec<u8>)> = outcome
        .files
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
        .collect();
    csvs.sort();
    csvs
}

#[test]
fn criterion_11_determinism() {
    let configs = [
        ("verify", "[run]\nmode = \"verify\"\nmodel = \"builtin:demo\"\nseed = 3\njobs = 2\n[verify]\ndraws = 5\n"),
        ("sweep", "[run]\nmode = \"sweep\"\nmodel = \"builtin:desk\"\nseed = 3\njobs = 3\n[model]\nn_max = 2\n[sweep]\nwindow = \"auto\"\n"),
        ("flow", "[run]\nmode = \"flow\"\nmodel = \"builtin:desk\"\nseed = 3\njobs = 2\n[model]\nn_max = 2\n[flow]\nrho0 = [0.1, 0.15]\n"),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, text) in configs {
        let a = run_once(text, &tmp.path().join(format!("{name}_a")));
        let b = run_once(text, &tmp.path().join(format!("{name}_b")));
        let same = !a.is_empty() && a == b;
        ok &= same;
        parts.push(format!("{name}: {} csv files {}", a.len(), if same { "identical" } else { "DIFFER" }));
    }
    report("11", ok, parts.join("; "));
}
