//! Exact-diagonalization oracle, the second-order expansion check and the
//! randomized inequality suites.

use crate::error::{Error, Result};
use crate::feshbach::{
    feshbach_operator, feshbach_pair_criterion_1, free_minus_z, g_bound_1, isospectral_check, resolvent_bounds_check,
    smoothed_projections_first, ResolventReport, SmoothCutoff,
};
use crate::fock::{self, BoundCheck, CMat, FockBasis, ModeGrid, OperatorMatrix, C64};
use crate::kernels::{self, KernelFamily};
use crate::linalg;
use crate::model::{assemble_hamiltonian, coupling_norms, AtomicSystem, CouplingFunction, SecondOrderData};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write;

/// Eigenpair with its certificate.
#[derive(Clone, Debug)]
pub struct SpectralResult {
    pub g: C64,
    pub energy: C64,
    pub vector: DVector<C64>,
    /// Distance from `energy` to the nearest other eigenvalue.
    pub gap: f64,
    /// ‖(H − E)v‖ with ‖v‖ = 1.
    pub residual: f64,
    pub h_norm: f64,
    /// |E_dense − E_inverse_iteration|.
    pub refinement_change: f64,
    /// Number of eigenvalues within 1e-9·‖H‖ of `energy`.
    pub multiplicity: usize,
    pub hermitian: bool,
}

impl SpectralResult {
    pub fn certified(&self) -> bool {
        let s = self.h_norm.max(1.0);
        self.residual <= 1e-10 * s && self.refinement_change <= 1e-10 * s
    }
}

/// Which eigenvalue of a non-Hermitian matrix counts as the ground state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    /// Lowest eigenvalue (Hermitian) or smallest real part.
    Lowest,
    /// The eigenvalue with smallest real part inside the closed disc.
    Disc { center: C64, radius: f64 },
}

fn start_vector(n: usize) -> DVector<C64> {
    // fixed, generic start vector
    let v = DVector::from_fn(n, |i, _| {
        let t = (i as f64 + 1.0) * 0.618_033_988_749_895;
        C64::new(1.0 + t.fract(), 0.5 * (t * 1.7).fract())
    });
    let nv = linalg::vnorm(&v);
    v / C64::new(nv, 0.0)
}

/// Shifted inverse iteration towards `target`; returns the Rayleigh
/// quotient and the normalized vector.
fn inverse_iteration(h: &CMat, target: C64, shift: f64) -> Result<(C64, DVector<C64>)> {
    let n = h.nrows();
    let sigma = target - C64::new(shift, 0.0);
    let m = h - CMat::identity(n, n) * sigma;
    let lu = m.lu();
    let mut v = start_vector(n);
    let mut rq = target;
    for _ in 0..200 {
        let x = lu
            .solve(&v)
            .ok_or_else(|| Error::Numerical("singular shift in inverse iteration".into()))?;
        let nx = linalg::vnorm(&x);
        if !nx.is_finite() || nx == 0.0 {
            return Err(Error::Numerical("inverse iteration broke down".into()));
        }
        v = x / C64::new(nx, 0.0);
        let new = (v.adjoint() * h * &v)[(0, 0)];
        let done = (new - rq).norm() <= 1e-15 * (1.0 + new.norm());
        rq = new;
        if done {
            break;
        }
    }
    Ok((rq, v))
}

fn pick(vals: &[C64], sel: Selection) -> Option<usize> {
    let ok = |z: &C64| match sel {
        Selection::Lowest => true,
        Selection::Disc { center, radius } => (z - center).norm() <= radius,
    };
    (0..vals.len())
        .filter(|&i| ok(&vals[i]))
        .min_by(|&i, &j| vals[i].re.total_cmp(&vals[j].re).then(vals[i].im.total_cmp(&vals[j].im)))
}

/// Ground eigenpair of `h` with residual certificate. Hermitian input goes
/// through the symmetric solver; anything else through a complex Schur
/// decomposition. In both cases the eigenvalue is cross-checked by inverse
/// iteration, whose vector is the one reported.
pub fn exact_ground_state(h: &OperatorMatrix, g: C64, sel: Selection) -> Result<SpectralResult> {
    let m = &h.mat;
    let n = m.nrows();
    if n == 0 {
        return Err(Error::Precondition("empty operator".into()));
    }
    let hermitian = linalg::is_hermitian(m, 1e-14 * linalg::fro(m).max(1.0));
    let vals: Vec<C64> = if hermitian {
        linalg::eigh(m).0.into_iter().map(|x| C64::new(x, 0.0)).collect()
    } else {
        let schur = nalgebra::Schur::try_new(m.clone(), 1e-15, 100 * n)
            .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
        let ev = schur
            .eigenvalues()
            .ok_or_else(|| Error::Numerical("Schur form is not triangular".into()))?;
        ev.iter().copied().collect()
    };
    let h_norm = if hermitian { vals.iter().map(|z| z.re.abs()).fold(0.0, f64::max) } else { linalg::op_norm(m) };
    let k = pick(&vals, sel).ok_or_else(|| Error::Numerical(format!("no eigenvalue in {sel:?}")))?;
    let e = vals[k];
    let tol = 1e-9 * h_norm.max(1.0);
    let multiplicity = vals.iter().filter(|z| (*z - e).norm() <= tol).count();
    let gap = vals
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, z)| (z - e).norm())
        .fold(f64::INFINITY, f64::min);
    let shift = if gap.is_finite() { (1e-3 * gap).max(1e-11 * h_norm.max(1.0)) } else { 1e-6 };
    let (e_iter, v) = inverse_iteration(m, e, shift)?;
    let r = m * &v - &v * e;
    let energy = if hermitian { C64::new(e.re, 0.0) } else { e };
    Ok(SpectralResult {
        g,
        energy,
        residual: linalg::vnorm(&r),
        vector: v,
        gap,
        h_norm,
        refinement_change: (e_iter - e).norm(),
        multiplicity,
        hermitian,
    })
}

/// Ground state of H_g on `basis`; for complex g the eigenvalue is taken
/// from `sel`.
pub fn ground_state_at(
    sys: &AtomicSystem,
    coupling: &CouplingFunction,
    basis: &FockBasis,
    g: C64,
    sel: Selection,
) -> Result<SpectralResult> {
    let h = assemble_hamiltonian(sys, coupling, basis, g)?;
    exact_ground_state(&h, g, sel)
}

#[derive(Clone, Debug)]
pub struct ExpansionRow {
    pub g: C64,
    pub energy: C64,
    pub gap: f64,
    pub residual: f64,
    /// ε_at + g²ε_at^(2).
    pub predicted: C64,
    /// |E_g − ε_at − g²ε_at^(2)| / |g|².
    pub remainder: f64,
    /// |E_g − E_{−g}|.
    pub parity: f64,
}

#[derive(Clone, Debug)]
pub struct ExpansionFit {
    pub rows: Vec<ExpansionRow>,
    pub eps_at: f64,
    pub eps2: f64,
    /// Least-squares slope of E_g − ε_at against g².
    pub fitted_eps2: C64,
    pub rel_error: f64,
    /// Log-log slopes of the remainder between consecutive |g|.
    pub remainder_slopes: Vec<f64>,
    /// Remainder strictly decreases as |g| decreases.
    pub remainder_monotone: bool,
    pub parity_max: f64,
    pub max_residual_ratio: f64,
}

impl ExpansionFit {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re_g,im_g,E_re,E_im,gap,residual,predicted_E2,remainder\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:.12e},{:.12e},{:.15e},{:.15e},{:.6e},{:.6e},{:.15e},{:.6e}",
                r.g.re, r.g.im, r.energy.re, r.energy.im, r.gap, r.residual, r.predicted.re, r.remainder
            );
        }
        s
    }

    /// Remainder at the smallest |g| relative to |ε_at^(2)|.
    pub fn smallest_remainder_ratio(&self) -> f64 {
        self.rows.first().map(|r| r.remainder / self.eps2.abs()).unwrap_or(f64::NAN)
    }
}

/// Fit window: six geometric magnitudes over [g_lo, 5 g_lo] with
/// g_lo²‖Z_at‖ = `level` (default 1e-5).
pub fn fit_window(second: &SecondOrderData, level: f64) -> Result<Vec<f64>> {
    if !(second.norm_z > 0.0) {
        return Err(Error::Precondition("Z_at vanishes; no second-order window".into()));
    }
    let lo = (level / second.norm_z).sqrt();
    Ok((0..6).map(|i| lo * 5f64.powf(i as f64 / 5.0)).collect())
}

fn selection_for(sys: &AtomicSystem, second: &SecondOrderData, g: C64, disc_radius: Option<f64>) -> Selection {
    match disc_radius {
        Some(radius) => Selection::Disc { center: C64::new(sys.eps_at, 0.0) + g * g * second.eps2, radius },
        None => Selection::Lowest,
    }
}

/// Sweeps |g| along the ray `angle` and fits ε_at^(2). Each entry of
/// `energies` must come from `ground_state_at` on the same basis; callers
/// that parallelize pass their results in, everyone else uses
/// `expansion_check`.
pub fn expansion_fit(
    sys: &AtomicSystem,
    second: &SecondOrderData,
    samples: &[(SpectralResult, SpectralResult)],
) -> Result<ExpansionFit> {
    if samples.len() < 5 {
        return Err(Error::Precondition("expansion fit needs at least 5 samples".into()));
    }
    let eps_at = C64::new(sys.eps_at, 0.0);
    let mut rows: Vec<ExpansionRow> = Vec::new();
    let mut max_residual_ratio = 0.0f64;
    for (plus, minus) in samples {
        if plus.gap <= 1e-8 {
            return Err(Error::Numerical(format!("level crossing near g = {} (gap {:.3e})", plus.g, plus.gap)));
        }
        let g2 = plus.g * plus.g;
        let predicted = eps_at + g2 * second.eps2;
        max_residual_ratio = max_residual_ratio.max(plus.residual / plus.h_norm.max(1.0));
        rows.push(ExpansionRow {
            g: plus.g,
            energy: plus.energy,
            gap: plus.gap,
            residual: plus.residual,
            predicted,
            remainder: (plus.energy - predicted).norm() / g2.norm(),
            parity: (plus.energy - minus.energy).norm(),
        });
    }
    rows.sort_by(|a, b| a.g.norm().total_cmp(&b.g.norm()));
    let (mut num, mut den) = (C64::new(0.0, 0.0), 0.0);
    for r in &rows {
        let x = r.g * r.g;
        num += x.conj() * (r.energy - eps_at);
        den += x.norm_sqr();
    }
    let fitted_eps2 = num / den;
    let rel_error = (fitted_eps2 - second.eps2).norm() / second.eps2.abs();
    let remainder_slopes = rows
        .windows(2)
        .map(|w| (w[1].remainder / w[0].remainder).ln() / (w[1].g.norm() / w[0].g.norm()).ln())
        .collect();
    let remainder_monotone = rows.windows(2).all(|w| w[0].remainder < w[1].remainder);
    let parity_max = rows.iter().map(|r| r.parity).fold(0.0, f64::max);
    Ok(ExpansionFit {
        rows,
        eps_at: sys.eps_at,
        eps2: second.eps2,
        fitted_eps2,
        rel_error,
        remainder_slopes,
        remainder_monotone,
        parity_max,
        max_residual_ratio,
    })
}

/// Ground states at ±g for one sample of the sweep.
pub fn expansion_sample(
    sys: &AtomicSystem,
    coupling: &CouplingFunction,
    basis: &FockBasis,
    second: &SecondOrderData,
    g: C64,
    disc_radius: Option<f64>,
) -> Result<(SpectralResult, SpectralResult)> {
    let plus = ground_state_at(sys, coupling, basis, g, selection_for(sys, second, g, disc_radius))?;
    let minus = ground_state_at(sys, coupling, basis, -g, selection_for(sys, second, -g, disc_radius))?;
    Ok((plus, minus))
}

/// Serial sweep over `magnitudes` along the ray e^{i·angle}.
pub fn expansion_check(
    sys: &AtomicSystem,
    coupling: &CouplingFunction,
    basis: &FockBasis,
    second: &SecondOrderData,
    angle: f64,
    magnitudes: &[f64],
    disc_radius: Option<f64>,
) -> Result<ExpansionFit> {
    let samples = magnitudes
        .iter()
        .map(|&m| expansion_sample(sys, coupling, basis, second, C64::from_polar(m, angle), disc_radius))
        .collect::<Result<Vec<_>>>()?;
    expansion_fit(sys, second, &samples)
}

/// Ground energies for real g on the same grid with n_max = 1, 2, … .
pub fn n_max_sweep(
    sys: &AtomicSystem,
    coupling: &CouplingFunction,
    grid: &ModeGrid,
    g: f64,
    n_values: &[usize],
) -> Result<Vec<f64>> {
    n_values
        .iter()
        .map(|&n| {
            let b = FockBasis::build(grid, n)?;
            Ok(ground_state_at(sys, coupling, &b, C64::new(g, 0.0), Selection::Lowest)?.energy.re)
        })
        .collect()
}

/// Slack statistics of one inequality over its random instances.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub violations: usize,
    /// min (rhs − lhs).
    pub min_slack: f64,
    /// max lhs/rhs.
    pub max_ratio: f64,
}

impl SuiteEntry {
    fn from_checks(name: impl Into<String>, checks: &[BoundCheck]) -> SuiteEntry {
        SuiteEntry {
            name: name.into(),
            instances: checks.len(),
            violations: checks.iter().filter(|c| !c.holds()).count(),
            min_slack: checks.iter().map(|c| c.slack()).fold(f64::INFINITY, f64::min),
            max_ratio: checks
                .iter()
                .map(|c| if c.rhs > 0.0 { c.lhs / c.rhs } else if c.lhs > 0.0 { f64::INFINITY } else { 0.0 })
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InequalityReport {
    pub entries: Vec<SuiteEntry>,
}

impl InequalityReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.violations == 0 && e.instances > 0)
    }

    /// Entries with violations whose name does not start with one of
    /// `known`.
    pub fn unexpected_failures(&self, known: &[&str]) -> Vec<&SuiteEntry> {
        self.entries
            .iter()
            .filter(|e| e.violations > 0 || e.instances == 0)
            .filter(|e| !known.iter().any(|k| e.name.starts_with(&format!("{k} "))))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&SuiteEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("[inequalities]\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} instances={} violations={} min_slack={:.6e} max_ratio={:.6}",
                e.name, e.instances, e.violations, e.min_slack, e.max_ratio
            );
        }
        s
    }
}

/// Random coupling values on the grid: G_q = ω_q^{3/4} A_q with independent
/// complex A_q in the unit box.
pub fn random_coupling_values<R: Rng>(rng: &mut R, grid: &ModeGrid, d: usize) -> Vec<CMat> {
    grid.modes
        .iter()
        .map(|m| kernels::random_matrix(rng, d) * C64::new(m.frequency.powf(0.75), 0.0))
        .collect()
}

fn random_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<C64> {
    DVector::from_fn(n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

/// ‖G/ω‖ against the square-root form of ‖G‖_μ on grid values.
pub fn ominv_vs_mu_check(grid: &ModeGrid, values: &[CMat], mu: f64) -> BoundCheck {
    let (mut om, mut lit) = (0.0, 0.0);
    for (m, g) in grid.modes.iter().zip(values) {
        let n2 = linalg::op_norm(g).powi(2);
        let k = m.frequency;
        om += m.weight * n2 / (k * k);
        lit += m.weight * (k.powf(-3.0 - 2.0 * mu) + 1.0) * n2;
    }
    BoundCheck { lhs: om.sqrt(), rhs: lit.sqrt() }
}

/// Entries that fail as stated; see `resolvent_weighted_corrected`.
pub const KNOWN_DEFECTS: [&str; 1] = ["resolvent_weighted"];

pub const SUITE_RHOS: [f64; 2] = [0.1, 0.25];
pub const SUITE_XIS: [f64; 2] = [0.125, 0.25];
pub const SUITE_MN: [(usize, usize); 5] = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)];

/// Every inequality instantiated on `draws` seeded random inputs. Failures
/// are recorded, not raised.
pub fn inequality_suite(
    sys: &AtomicSystem,
    mu: f64,
    grid: &ModeGrid,
    basis: &FockBasis,
    cutoff: &SmoothCutoff,
    seed: u64,
    draws: usize,
) -> Result<InequalityReport> {
    let d = sys.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    // field-operator estimates
    let (mut ann, mut cre, mut vecb, mut om) = (vec![], vec![], vec![], vec![]);
    let mut proj: Vec<Vec<BoundCheck>> = vec![vec![]; SUITE_RHOS.len()];
    let mut form: Vec<Vec<BoundCheck>> = vec![vec![]; SUITE_RHOS.len()];
    for _ in 0..draws {
        let gv = random_coupling_values(&mut rng, &basis.grid, d);
        ann.push(fock::annihilation_bound(basis, &gv, d)?);
        cre.push(fock::creation_bound(basis, &gv, d)?);
        let v = random_vector(&mut rng, d * basis.dim());
        vecb.push(fock::annihilation_vector_bound(basis, &gv, d, &v)?);
        for (i, &rho) in SUITE_RHOS.iter().enumerate() {
            proj[i].push(fock::projection_bound(basis, &gv, d, rho)?);
            form[i].push(fock::interaction_form_bound(basis, &gv, d, rho)?);
        }
        let gq = random_coupling_values(&mut rng, grid, d);
        om.push(ominv_vs_mu_check(grid, &gq, mu));
    }
    entries.push(SuiteEntry::from_checks("annihilation", &ann));
    entries.push(SuiteEntry::from_checks("creation", &cre));
    entries.push(SuiteEntry::from_checks("annihilation_vector", &vecb));
    for (i, rho) in SUITE_RHOS.iter().enumerate() {
        entries.push(SuiteEntry::from_checks(format!("projection rho={rho}"), &proj[i]));
        entries.push(SuiteEntry::from_checks(format!("interaction_form rho={rho}"), &form[i]));
    }
    entries.push(SuiteEntry::from_checks("ominv_le_mu", &om));

    // free resolvent on Ran χ̄ at z samples in D_{ρ/2}(ε_at)
    for &rho in &SUITE_RHOS {
        let (mut inv, mut weighted) = (vec![], vec![]);
        for _ in 0..draws.min(8) {
            let r = 0.49 * rho * rng.random::<f64>().sqrt();
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let z = C64::new(sys.eps_at, 0.0) + C64::from_polar(r, th);
            let rep = resolvent_bounds_check(sys, cutoff, rho, z, basis)?;
            inv.push(BoundCheck { lhs: rep.inverse_norm, rhs: rep.bound });
            weighted.extend(rep.weighted.iter().map(|&(_, n, b)| BoundCheck { lhs: n, rhs: b }));
        }
        // the literal weighted bound fails for Re(z − ε_at) > 0; the factor
        // r/|r − (z − ε_at)| can reach 3 for r ≥ 3ρ/4, hence the +2 variant
        let corrected: Vec<BoundCheck> = weighted.iter().map(|b| BoundCheck { lhs: b.lhs, rhs: b.rhs + 2.0 }).collect();
        entries.push(SuiteEntry::from_checks(format!("resolvent rho={rho}"), &inv));
        entries.push(SuiteEntry::from_checks(format!("resolvent_weighted rho={rho}"), &weighted));
        entries.push(SuiteEntry::from_checks(format!("resolvent_weighted_corrected rho={rho}"), &corrected));
    }

    // kernel operator estimates
    let rg = kernels::r_grid_for(basis);
    for &(m, n) in &SUITE_MN {
        let (mut est, mut sharp) = (vec![], vec![]);
        for _ in 0..draws {
            let k = kernels::random_kernel(&mut rng, m, n, d, &basis.grid, rg.clone());
            est.push(kernels::operator_norm_estimate_check(&k, basis, mu));
            sharp.push(kernels::sharp_norm_bound_check(&k, basis)?);
        }
        entries.push(SuiteEntry::from_checks(format!("operator_norm_estimate m={m} n={n}"), &est));
        entries.push(SuiteEntry::from_checks(format!("sharp_norm m={m} n={n}"), &sharp));
    }
    for &xi in &SUITE_XIS {
        let mut inj = vec![];
        for _ in 0..draws {
            let mut f = KernelFamily::new(mu, xi, d)?;
            for &(m, n) in &SUITE_MN {
                let s = 10f64.powf(rng.random_range(-2.0..0.0));
                let k = kernels::random_kernel(&mut rng, m, n, d, &basis.grid, rg.clone());
                f.insert(k.scaled(C64::new(s, 0.0)))?;
            }
            inj.push(kernels::injective_bound_check(&f, basis)?);
        }
        entries.push(SuiteEntry::from_checks(format!("injective xi={xi}"), &inj));
    }
    Ok(InequalityReport { entries })
}

/// max |χ² + χ̄² − 1| on `points` equispaced t ∈ [0, 2], and whether χ is
/// exactly 1 on t ≤ 3/4 and exactly 0 on t ≥ 1 at those points.
#[derive(Clone, Copy, Debug)]
pub struct CutoffIdentity {
    pub max_deviation: f64,
    pub exact_plateaus: bool,
}

pub fn cutoff_identity(cutoff: &SmoothCutoff, points: usize) -> CutoffIdentity {
    let mut max_deviation = 0.0f64;
    let mut exact_plateaus = true;
    for i in 0..points {
        let t = 2.0 * i as f64 / (points - 1) as f64;
        let (x, y) = (cutoff.chi(t), cutoff.chibar(t));
        max_deviation = max_deviation.max((x * x + y * y - 1.0).abs());
        if (t <= 0.75 && x != 1.0) || (t >= 1.0 && x != 0.0) {
            exact_plateaus = false;
        }
    }
    CutoffIdentity { max_deviation, exact_plateaus }
}

/// Largest pull-through residual over all modes for f ∈ {1, r, χ(·/ρ)}.
pub fn pull_through_suite(basis: &FockBasis, cutoff: &SmoothCutoff, rho: f64) -> Result<[f64; 3]> {
    let mut out = [0.0f64; 3];
    for q in 0..basis.grid.len() {
        out[0] = out[0].max(fock::pull_through_check(basis, |_| 1.0, q)?);
        out[1] = out[1].max(fock::pull_through_check(basis, |r| r, q)?);
        out[2] = out[2].max(fock::pull_through_check(basis, |r| cutoff.chi(r / rho), q)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct ScalingIdentity {
    /// ‖S_ρ(H(w)) − H(s_ρ(w))‖_F / ‖H(s_ρ(w))‖_F on states whose dilated
    /// image stays in the grid.
    pub rel_error: f64,
    pub contraction_checked: usize,
    pub contraction_violations: usize,
}

/// Dilation identity on a folded dyadic grid (6 shells, n_max 3) for a
/// random family with m + n ≤ 2, ρ = 1/2 by default.
pub fn scaling_identity(rho: f64, seed: u64) -> Result<ScalingIdentity> {
    let grid = ModeGrid::new(fock::Scheme::Dyadic, 6, 1.0)?.fold_polarizations();
    let basis = FockBasis::build(&grid, 3)?;
    let mu = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fam = KernelFamily::new(mu, 0.25, 1)?;
    for (m, n) in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2)] {
        fam.insert(kernels::random_kernel(&mut rng, m, n, 1, &grid, kernels::r_grid_for(&basis)))?;
    }
    let h = kernels::kernel_to_operator(&fam, &basis)?;
    let gamma = kernels::dilation_op(&basis, rho)?;
    let lhs = kernels::dilate_operator(&h, &gamma, rho);
    let scaled = kernels::scale_kernel(&fam, rho)?;
    let rhs = kernels::kernel_to_operator(&scaled, &basis)?;
    // states whose dilated modes all exist and whose energy stays ≤ 1
    let image = kernels::mode_image(&grid, rho)?;
    let keep: Vec<usize> = (0..basis.dim())
        .filter(|&i| basis.energies[i] <= 1.0 && basis.states[i].iter().enumerate().all(|(q, &n)| n == 0 || image[q].is_some()))
        .collect();
    let sub = |a: &CMat| CMat::from_fn(keep.len(), keep.len(), |i, j| a[(keep[i], keep[j])]);
    let rel_error = linalg::rel_fro(&sub(&lhs.mat), &sub(&rhs.mat));
    let mut checked = 0;
    let mut violations = 0;
    for k in fam.kernels.values().filter(|k| k.m + k.n > 0) {
        let ks = scaled.get(k.m, k.n).ok_or_else(|| Error::Numerical("scaled family lost a kernel".into()))?;
        checked += 1;
        let bound = rho.powf(mu * (k.m + k.n) as f64) * kernels::norm_mu(k, mu);
        if kernels::norm_mu(ks, mu) > bound * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    Ok(ScalingIdentity { rel_error, contraction_checked: checked, contraction_violations: violations })
}

/// Relative Frobenius distance between H(w̃) from the normal-ordering
/// engine and the product F_0 H(w_1) F_1 ⋯ H(w_L) F_L, on the reduced
/// space H_f ≤ 1 of a three-mode grid with n_max 3.
pub fn wick_identity(l: usize, seed: u64) -> Result<f64> {
    use kernels::{FnKernel, KernelEval, MatFn, WickProblem, WickRequest};
    use std::sync::Arc;
    let grid = ModeGrid::from_frequencies(&[0.3, 0.45, 0.7], &[0.8, 1.1, 0.6])?;
    let basis = FockBasis::build(&grid, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 2;
    let comps: Vec<Vec<FnKernel>> = (0..l)
        .map(|_| {
            [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .map(|&(m, n)| kernels::random_smooth_kernel(&mut rng, m, n, d, &grid))
                .collect()
        })
        .collect();
    let fs: Vec<MatFn> = (0..=l)
        .map(|_| {
            let a = kernels::random_matrix(&mut rng, d);
            let b = kernels::random_matrix(&mut rng, d);
            Arc::new(move |r: f64| &a + &b * C64::new((1.7 * r).cos(), 0.0)) as MatFn
        })
        .collect();
    let factors: Vec<Vec<&dyn KernelEval>> =
        comps.iter().map(|cs| cs.iter().map(|k| k as &dyn KernelEval).collect()).collect();
    let p = WickProblem { grid: &grid, d, factors, f: fs.clone() };
    let r_points = kernels::sort_dedup(basis.energies.iter().copied().filter(|&e| e <= 1.0).collect());
    let req = WickRequest { out_modes: vec![0, 1, 2], max_m: 3, max_n: 3, mn_max: 6, r_points, energy_bound: Some(1.0) };
    let fam = kernels::wick_normal_order(&p, &req)?.to_family(&grid, d, 0.5, 0.25)?;
    let h = kernels::kernel_to_operator(&fam, &basis)?;
    let nf = basis.dim();
    let fop = |f: &MatFn| {
        let mut m = CMat::zeros(d * nf, d * nf);
        for s in 0..nf {
            let v = f(basis.energies[s]);
            for i in 0..d {
                for j in 0..d {
                    m[(i * nf + s, j * nf + s)] = v[(i, j)];
                }
            }
        }
        m
    };
    let mut direct = fop(&fs[0]);
    for i in 0..l {
        let hw = comps[i]
            .iter()
            .map(|k| kernels::h_mn_matrix(k, &basis))
            .fold(CMat::zeros(d * nf, d * nf), |a, b| a + b);
        direct = direct * hw * fop(&fs[i + 1]);
    }
    // H(w̃) carries P_red on both sides
    let red: Vec<usize> = (0..d * nf).filter(|&i| basis.energies[i % nf] <= 1.0).collect();
    let sub = |a: &CMat| CMat::from_fn(red.len(), red.len(), |i, j| a[(red[i], red[j])]);
    Ok(linalg::rel_fro(&sub(&h.mat), &sub(&direct)))
}

/// Checks of the first Feshbach step at |g| = half the pair-criterion bound.
#[derive(Clone, Debug)]
pub struct FirstFeshbachCheck {
    pub g: C64,
    pub criterion_ok: bool,
    /// Direct against Neumann (order 12) at z = ε_at, relative Frobenius.
    pub discrepancy: f64,
    pub e_g: C64,
    /// σ_min of F compressed to Ran χ at z = E_g, and ‖F‖ there.
    pub smin: f64,
    pub f_norm: f64,
    /// ‖(H − E_g)Q_χ u‖/‖Q_χ u‖ and ‖H_g‖.
    pub residual: f64,
    pub h_norm: f64,
    /// Free resolvent bounds at seeded z in D_{ρ/2}(ε_at).
    pub resolvent: Vec<(C64, ResolventReport)>,
}

pub fn first_feshbach_check(
    sys: &AtomicSystem,
    coupling: &CouplingFunction,
    basis: &FockBasis,
    cutoff: &SmoothCutoff,
    rho: f64,
    seed: u64,
    z_samples: usize,
) -> Result<FirstFeshbachCheck> {
    let norms = coupling_norms(coupling, &basis.grid)?;
    let g = C64::new(0.5 * g_bound_1(&norms, rho), 0.0);
    let z0 = C64::new(sys.eps_at, 0.0);
    let criterion_ok = feshbach_pair_criterion_1(sys, &norms, g, rho, z0)?.ok;
    let h = assemble_hamiltonian(sys, coupling, basis, g)?;
    let pair = smoothed_projections_first(sys, cutoff, rho, basis)?;
    let id = OperatorMatrix::identity(h.tag);
    let at = |z: C64, cap: usize| feshbach_operator(&h.sub(&id.scale(z))?, &free_minus_z(sys, basis, z), &pair, cap);
    let discrepancy = at(z0, 12)?.discrepancy;
    let gs = exact_ground_state(&h, g, Selection::Lowest)?;
    let res = at(gs.energy, 1)?;
    let iso = isospectral_check(&res, &h.sub(&id.scale(gs.energy))?, &pair);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resolvent = Vec::with_capacity(z_samples);
    for _ in 0..z_samples {
        let r = 0.49 * rho * rng.random::<f64>().sqrt();
        let z = z0 + C64::from_polar(r, rng.random_range(0.0..std::f64::consts::TAU));
        resolvent.push((z, resolvent_bounds_check(sys, cutoff, rho, z, basis)?));
    }
    Ok(FirstFeshbachCheck {
        g,
        criterion_ok,
        discrepancy,
        e_g: gs.energy,
        smin: iso.smin,
        f_norm: res.f_op.norm(),
        residual: iso.residual,
        h_norm: gs.h_norm,
        resolvent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feshbach::{make_cutoff, CutoffKind};
    use crate::model::{compute_z_at, desk_spec};
    use proptest::prelude::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn small_desk(n_max: usize) -> (crate::model::Model, FockBasis) {
        let mut spec = desk_spec();
        spec.n_max = n_max;
        let m = spec.build().unwrap();
        let b = FockBasis::build(&m.grid, n_max).unwrap();
        (m, b)
    }

    fn tag(n: usize) -> fock::BasisTag {
        let g = ModeGrid::from_frequencies(&[0.5], &[1.0]).unwrap();
        let b = FockBasis::build(&g, n - 1).unwrap();
        b.tag(1)
    }

    #[test]
    fn diagonal_minimum() {
        let mut m = CMat::zeros(4, 4);
        for (i, v) in [0.3, -0.7, 2.0, -0.1].iter().enumerate() {
            m[(i, i)] = c(*v);
        }
        let h = OperatorMatrix::new(tag(4), m).unwrap();
        let r = exact_ground_state(&h, c(0.0), Selection::Lowest).unwrap();
        assert_eq!(r.energy, c(-0.7));
        assert!((r.gap - 0.6).abs() < 1e-14);
        assert!(r.certified());
        assert!((r.vector[1].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_degenerate_pair_is_certified() {
        // splitting below the multiplicity tolerance
        let mut m = CMat::zeros(3, 3);
        m[(1, 1)] = c(5e-10);
        m[(2, 2)] = c(3.0);
        m[(0, 1)] = c(1e-10);
        m[(1, 0)] = c(1e-10);
        let h = OperatorMatrix::new(tag(3), m).unwrap();
        let r = exact_ground_state(&h, c(0.0), Selection::Lowest).unwrap();
        assert_eq!(r.multiplicity, 2);
        assert!(r.gap > 4e-10 && r.gap < 1e-9, "{}", r.gap);
        assert!(r.certified(), "{r:?}");
    }

    #[test]
    fn zero_coupling_is_degenerate_atomic_ground_state() {
        let (m, b) = small_desk(2);
        let r = ground_state_at(&m.sys, &m.coupling, &b, c(0.0), Selection::Lowest).unwrap();
        assert!((r.energy.re - m.sys.eps_at).abs() < 1e-14);
        assert_eq!(r.multiplicity, m.sys.d0);
        assert!(r.certified());
        // the vector lies in P_at ⊗ Ω
        let nf = b.dim();
        let inside: f64 = (0..m.sys.d)
            .filter(|&a| m.sys.is_ground_index(a))
            .map(|a| r.vector[a * nf].norm_sqr())
            .sum();
        assert!((inside - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_hermitian_path_and_disc_selection() {
        // upper-triangular with known eigenvalues
        let mut m = CMat::zeros(3, 3);
        m[(0, 0)] = C64::new(1.0, 0.5);
        m[(1, 1)] = C64::new(-0.2, 0.1);
        m[(2, 2)] = C64::new(0.4, -0.3);
        m[(0, 1)] = c(0.7);
        m[(1, 2)] = C64::new(0.0, 0.3);
        let h = OperatorMatrix::new(tag(3), m).unwrap();
        let r = exact_ground_state(&h, c(0.0), Selection::Lowest).unwrap();
        assert!(!r.hermitian);
        assert!((r.energy - C64::new(-0.2, 0.1)).norm() < 1e-12);
        assert!(r.certified(), "{r:?}");
        let sel = Selection::Disc { center: c(0.5), radius: 0.35 };
        let r = exact_ground_state(&h, c(0.0), sel).unwrap();
        assert!((r.energy - C64::new(0.4, -0.3)).norm() < 1e-12);
        let sel = Selection::Disc { center: c(5.0), radius: 0.1 };
        assert!(matches!(exact_ground_state(&h, c(0.0), sel), Err(Error::Numerical(_))));
    }

    #[test]
    fn dense_and_inverse_iteration_agree_on_desk() {
        let (m, b) = small_desk(2);
        let r = ground_state_at(&m.sys, &m.coupling, &b, c(40.0), Selection::Lowest).unwrap();
        assert!(r.hermitian);
        assert!(r.refinement_change <= 1e-10, "{}", r.refinement_change);
        assert!(r.residual <= 1e-10 * r.h_norm);
    }

    #[test]
    fn expansion_fit_on_desk() {
        let (m, b) = small_desk(2);
        let second = compute_z_at(&m.sys, &m.coupling, &m.grid).unwrap();
        let mags = fit_window(&second, 1e-5).unwrap();
        let fit = expansion_check(&m.sys, &m.coupling, &b, &second, 0.0, &mags, None).unwrap();
        assert_eq!(fit.rows.len(), 6);
        assert!(fit.rel_error <= 1e-2, "{fit:?}");
        assert!(fit.remainder_monotone, "{:?}", fit.rows);
        assert!(fit.smallest_remainder_ratio() < 0.1);
        assert!(fit.parity_max <= 1e-10);
        for s in &fit.remainder_slopes {
            assert!((s - 2.0).abs() < 0.3, "{:?}", fit.remainder_slopes);
        }
        let csv = fit.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("re_g,im_g,E_re,E_im,gap,residual,predicted_E2,remainder\n"));
    }

    #[test]
    fn complex_ray_uses_disc() {
        let (m, b) = small_desk(1);
        let second = compute_z_at(&m.sys, &m.coupling, &m.grid).unwrap();
        let mags = fit_window(&second, 1e-5).unwrap();
        let radius = 0.5 * second.eps2.abs() * mags[0].powi(2);
        let fit = expansion_check(&m.sys, &m.coupling, &b, &second, 0.3, &mags, Some(radius)).unwrap();
        assert!(fit.rel_error <= 1e-2, "{}", fit.rel_error);
        assert!(fit.rows.iter().all(|r| r.g.im > 0.0));
        assert!(fit.parity_max <= 1e-10);
    }

    #[test]
    fn too_few_samples() {
        let (m, b) = small_desk(1);
        let second = compute_z_at(&m.sys, &m.coupling, &m.grid).unwrap();
        let e = expansion_check(&m.sys, &m.coupling, &b, &second, 0.0, &[1.0, 2.0], None).unwrap_err();
        assert!(matches!(e, Error::Precondition(_)));
    }

    #[test]
    fn variational_in_n_max() {
        let (m, _) = small_desk(1);
        let e = n_max_sweep(&m.sys, &m.coupling, &m.grid, 200.0, &[1, 2, 3]).unwrap();
        assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-14), "{e:?}");
    }

    #[test]
    fn degeneracy_splitting_is_quadratic() {
        let (m, b) = small_desk(1);
        let second = compute_z_at(&m.sys, &m.coupling, &m.grid).unwrap();
        let mags = fit_window(&second, 1e-5).unwrap();
        let split: Vec<f64> = [mags[0], mags[5]]
            .iter()
            .map(|&g| ground_state_at(&m.sys, &m.coupling, &b, c(g), Selection::Lowest).unwrap().gap)
            .collect();
        let slope = (split[1] / split[0]).ln() / (mags[5] / mags[0]).ln();
        assert!((slope - 2.0).abs() < 0.1, "{slope}");
    }

    #[test]
    fn suite_on_small_desk() {
        let (m, b) = small_desk(2);
        let cut = make_cutoff(CutoffKind::PolySmooth);
        let rep = inequality_suite(&m.sys, m.coupling.mu, &m.grid, &b, &cut, 11, 3).unwrap();
        assert!(rep.unexpected_failures(&KNOWN_DEFECTS).is_empty(), "{}", rep.to_text());
        for rho in SUITE_RHOS {
            assert_eq!(rep.get(&format!("resolvent_weighted_corrected rho={rho}")).unwrap().violations, 0);
        }
        assert!(rep.get("injective xi=0.25").is_some());
        assert!(rep.to_text().contains("interaction_form rho=0.1"));
    }

    #[test]
    fn weighted_resolvent_bound_fails_right_of_center() {
        // z − ε_at = 0.45ρ, lowest field energy just above 3ρ/4
        let sys = AtomicSystem::new(CMat::from_diagonal(&DVector::from_vec(vec![c(0.0), c(1.0)]))).unwrap();
        let rho = 0.2;
        let grid = ModeGrid::from_frequencies(&[0.76 * rho, 0.5], &[0.1, 0.1]).unwrap();
        let b = FockBasis::build(&grid, 1).unwrap();
        let cut = make_cutoff(CutoffKind::PolySmooth);
        let rep = resolvent_bounds_check(&sys, &cut, rho, c(0.45 * rho), &b).unwrap();
        let (tau, n, bound) = rep.weighted[0];
        assert_eq!(tau, 0.0);
        // 0.76 / 0.31 ≈ 2.45 against the stated 1
        assert!(n > 2.0 * bound && n <= bound + 2.0, "{n} {bound}");
        assert!(rep.inverse_norm <= rep.bound);
    }

    #[test]
    fn first_feshbach_on_small_desk() {
        let (m, b) = small_desk(2);
        let cut = make_cutoff(CutoffKind::PolySmooth);
        let r = first_feshbach_check(&m.sys, &m.coupling, &b, &cut, 0.2, 5, 8).unwrap();
        assert!(r.criterion_ok);
        assert!(r.discrepancy <= 1e-9, "{}", r.discrepancy);
        assert!(r.smin <= 1e-8 * r.f_norm, "{} {}", r.smin, r.f_norm);
        assert!(r.residual <= 1e-6 * r.h_norm);
        assert_eq!(r.resolvent.len(), 8);
        assert!(r.resolvent.iter().all(|(_, rep)| rep.inverse_norm <= rep.bound));
    }

    #[test]
    fn identity_checks() {
        let cut = make_cutoff(CutoffKind::PolySmooth);
        let ci = cutoff_identity(&cut, 1000);
        assert!(ci.max_deviation <= 1e-12 && ci.exact_plateaus);
        let (_, b) = small_desk(2);
        let pt = pull_through_suite(&b, &cut, 0.2).unwrap();
        assert!(pt.iter().all(|&x| x <= 1e-12), "{pt:?}");
        let sc = scaling_identity(0.5, 3).unwrap();
        assert!(sc.rel_error <= 1e-12 && sc.contraction_violations == 0, "{sc:?}");
        assert_eq!(sc.contraction_checked, 5);
        assert!(wick_identity(3, 4).unwrap() <= 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn oracle_certificate_on_random_hermitian(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = kernels::random_matrix(&mut rng, n);
            let h = (&a + a.adjoint()) * c(0.5);
            let min = linalg::eigh(&h).0[0];
            let op = OperatorMatrix::new(tag(n), h).unwrap();
            let r = exact_ground_state(&op, c(0.0), Selection::Lowest).unwrap();
            prop_assert!((r.energy.re - min).abs() < 1e-12);
            prop_assert!(r.residual <= 1e-10 * r.h_norm);
        }

        #[test]
        fn ominv_never_exceeds_mu_norm(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = ModeGrid::new(fock::Scheme::Midpoint, 6, 1.0).unwrap();
            let v = random_coupling_values(&mut rng, &grid, 2);
            prop_assert!(ominv_vs_mu_check(&grid, &v, 0.5).holds());
        }
    }
}
