//! Smooth cutoffs, smoothed projections and the smooth Feshbach map.

use crate::error::{Error, Result};
use crate::fock::{BasisTag, CMat, FockBasis, OperatorMatrix, C64};
use crate::linalg::{self, c};
use crate::model::{AtomicSystem, CouplingNorms, SecondOrderData};

/// Singular-value floor used to orthonormalize the range of a cutoff.
pub const RANGE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffKind {
    /// χ = √(1−s) with the C^∞ step s(x) = e^{-1/x}/(e^{-1/x}+e^{-1/(1-x)}).
    PolySmooth,
    /// χ = exp(−x²/(1−x²)).
    ExpBump,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothCutoff {
    pub kind: CutoffKind,
    pub chi_prime_sup: f64,
}

/// (s, 1−s) for x in (0,1), each computed without cancellation.
fn step_pair(x: f64) -> (f64, f64) {
    let a = 1.0 / x - 1.0 / (1.0 - x);
    // s = 1/(1+e^{a}), 1−s = 1/(1+e^{−a})
    (1.0 / (1.0 + a.exp()), 1.0 / (1.0 + (-a).exp()))
}

impl SmoothCutoff {
    fn x(t: f64) -> f64 {
        (t - 0.75) / 0.25
    }

    pub fn chi(&self, t: f64) -> f64 {
        if t <= 0.75 {
            return 1.0;
        }
        if t >= 1.0 {
            return 0.0;
        }
        let x = Self::x(t);
        match self.kind {
            CutoffKind::PolySmooth => step_pair(x).1.sqrt(),
            CutoffKind::ExpBump => (-x * x / (1.0 - x * x)).exp(),
        }
    }

    pub fn chibar(&self, t: f64) -> f64 {
        if t <= 0.75 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let x = Self::x(t);
        match self.kind {
            CutoffKind::PolySmooth => step_pair(x).0.sqrt(),
            CutoffKind::ExpBump => (-(-2.0 * x * x / (1.0 - x * x)).exp_m1()).sqrt(),
        }
    }

    pub fn chi_prime(&self, t: f64) -> f64 {
        if t <= 0.75 || t >= 1.0 {
            return 0.0;
        }
        let x = Self::x(t);
        match self.kind {
            CutoffKind::PolySmooth => {
                let (s, one_minus) = step_pair(x);
                // d/dt √(1−s) = −s'/(2√(1−s)), s' = 4 s(1−s)(1/x² + 1/(1−x)²)
                -2.0 * s * one_minus.sqrt() * (1.0 / (x * x) + 1.0 / ((1.0 - x) * (1.0 - x)))
            }
            CutoffKind::ExpBump => {
                let q = 1.0 - x * x;
                self.chi(t) * (-2.0 * x / (q * q)) * 4.0
            }
        }
    }
}

/// Dense sampling of |χ'| on [3/4, 1] followed by golden-section refinement.
fn sup_abs(f: impl Fn(f64) -> f64, a: f64, b: f64, samples: usize) -> f64 {
    let h = (b - a) / samples as f64;
    let mut best = (0.0, a);
    for i in 0..=samples {
        let t = a + h * i as f64;
        let v = f(t).abs();
        if v > best.0 {
            best = (v, t);
        }
    }
    let (mut lo, mut hi) = ((best.1 - h).max(a), (best.1 + h).min(b));
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let m1 = hi - gr * (hi - lo);
        let m2 = lo + gr * (hi - lo);
        if f(m1).abs() > f(m2).abs() {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    best.0.max(f(0.5 * (lo + hi)).abs())
}

pub fn make_cutoff(kind: CutoffKind) -> SmoothCutoff {
    let mut c = SmoothCutoff { kind, chi_prime_sup: 0.0 };
    c.chi_prime_sup = sup_abs(|t| c.chi_prime(t), 0.75, 1.0, 100_000);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    First,
    Second,
}

#[derive(Clone, Debug)]
pub struct SmoothedProjectionPair {
    pub step: Step,
    pub rho: f64,
    pub chi: OperatorMatrix,
    pub chibar: OperatorMatrix,
}

/// χ = P ⊗ χ(H_f/ρ), χ̄ = P̄ ⊗ 1 + P ⊗ χ̄(H_f/ρ) for an orthogonal projection P.
pub fn smoothed_projections_with(
    step: Step,
    proj: &CMat,
    cutoff: &SmoothCutoff,
    rho: f64,
    basis: &FockBasis,
) -> Result<SmoothedProjectionPair> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Precondition(format!("ρ = {rho} outside (0, 1]")));
    }
    let d = proj.nrows();
    let nf = basis.dim();
    let tag = basis.tag(d);
    crate::fock::check_dim(tag.dim())?;
    let pbar = CMat::identity(d, d) - proj;
    let mut chi = CMat::zeros(d * nf, d * nf);
    let mut chibar = CMat::zeros(d * nf, d * nf);
    for (s, &e) in basis.energies.iter().enumerate() {
        let x = cutoff.chi(e / rho);
        let xb = cutoff.chibar(e / rho);
        for a in 0..d {
            for b in 0..d {
                chi[(a * nf + s, b * nf + s)] = proj[(a, b)] * x;
                chibar[(a * nf + s, b * nf + s)] = pbar[(a, b)] + proj[(a, b)] * xb;
            }
        }
    }
    Ok(SmoothedProjectionPair { step, rho, chi: OperatorMatrix { tag, mat: chi }, chibar: OperatorMatrix { tag, mat: chibar } })
}

pub fn smoothed_projections_first(
    sys: &AtomicSystem,
    cutoff: &SmoothCutoff,
    rho: f64,
    basis: &FockBasis,
) -> Result<SmoothedProjectionPair> {
    smoothed_projections_with(Step::First, &sys.p_at, cutoff, rho, basis)
}

/// Second-step pair on a basis whose atomic factor is Ran P_at (in the
/// ground basis of the atomic system).
pub fn smoothed_projections_second(
    second: &SecondOrderData,
    cutoff: &SmoothCutoff,
    rho1: f64,
    basis: &FockBasis,
) -> Result<SmoothedProjectionPair> {
    second.require_simple()?;
    smoothed_projections_with(Step::Second, &second.p2, cutoff, rho1, basis)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriterionOne {
    pub ok: bool,
    /// |g| divided by ρ^{1/2}/(10‖ω^{-1}G‖).
    pub margin: f64,
    pub rho_ok: bool,
    pub z_ok: bool,
    pub g_ok: bool,
}

pub fn g_bound_1(norms: &CouplingNorms, rho: f64) -> f64 {
    rho.sqrt() / (10.0 * norms.ominv)
}

pub fn feshbach_pair_criterion_1(
    sys: &AtomicSystem,
    norms: &CouplingNorms,
    g: C64,
    rho: f64,
    z: C64,
) -> Result<CriterionOne> {
    if !sys.is_normalized() {
        return Err(Error::Precondition("atomic gap must be normalized to 1".into()));
    }
    let rho_ok = rho > 0.0 && rho <= 0.25;
    let z_ok = (z - c(sys.eps_at)).norm() < rho / 2.0;
    let bound = g_bound_1(norms, rho);
    let margin = if g.norm() == 0.0 { 0.0 } else { g.norm() / bound };
    let g_ok = margin < 1.0;
    Ok(CriterionOne { ok: rho_ok && z_ok && g_ok, margin, rho_ok, z_ok, g_ok })
}

#[derive(Clone, Debug)]
pub struct FeshbachResult {
    pub f_op: OperatorMatrix,
    pub f_neumann: OperatorMatrix,
    /// ‖F_direct − F_neumann‖_F / ‖F_direct‖_F.
    pub discrepancy: f64,
    pub q_op: OperatorMatrix,
    /// ‖(H_χ̄ restricted to Ran χ̄)^{-1}‖.
    pub inverse_norm: f64,
    /// Operator norms of the Neumann terms L = 1, 2, ...
    pub neumann_orders: Vec<f64>,
    /// ‖χ̄² T^{-1} W‖, the contraction factor of the series.
    pub contraction: f64,
    /// Geometric bound on the first omitted Neumann term.
    pub omitted_bound: f64,
}

fn restricted_inverse(a: &CMat, u: &CMat) -> Result<(CMat, f64)> {
    let block = u.adjoint() * a * u;
    if block.nrows() == 0 {
        return Ok((CMat::zeros(a.nrows(), a.ncols()), 0.0));
    }
    let smin = linalg::min_singular(&block);
    let scale = linalg::op_norm(&block).max(1.0);
    if !(smin > 1e-12 * scale) {
        return Err(Error::Numerical(format!("operator not invertible on Ran χ̄ (σ_min = {smin:.3e})")));
    }
    let inv = linalg::inverse(&block)?;
    Ok((u * inv * u.adjoint(), 1.0 / smin))
}

/// F_χ(H, T) by direct inversion on Ran χ̄ and by the Neumann series
/// T + Σ_L (−1)^{L−1} χ W (χ̄² T^{-1} W)^{L−1} χ.
pub fn feshbach_operator(
    h: &OperatorMatrix,
    t: &OperatorMatrix,
    pair: &SmoothedProjectionPair,
    order_cap: usize,
) -> Result<FeshbachResult> {
    if h.tag != t.tag || h.tag != pair.chi.tag {
        return Err(Error::Precondition("Feshbach inputs live on different bases".into()));
    }
    let tag = h.tag;
    let w = &h.mat - &t.mat;
    let chi = &pair.chi.mat;
    let chib = &pair.chibar.mat;
    let u = linalg::range_basis(chib, RANGE_FLOOR);
    let h_bar = &t.mat + chib * &w * chib;
    let (r, inverse_norm) = restricted_inverse(&h_bar, &u)?;
    let f_direct = &t.mat + chi * &w * chi - chi * &w * chib * &r * chib * &w * chi;
    let q = chi - chib * &r * chib * &w * chi;

    let (tinv, _) = restricted_inverse(&t.mat, &u)?;
    let rb = chib * tinv * chib;
    let rbw = &rb * &w;
    let contraction = linalg::op_norm(&rbw);
    let left = chi * &w;
    let mut f_neu = t.mat.clone();
    let mut chain = chi.clone();
    let mut orders = Vec::with_capacity(order_cap);
    for l in 1..=order_cap {
        let term = &left * &chain;
        orders.push(linalg::op_norm(&term));
        let sign = if l % 2 == 1 { 1.0 } else { -1.0 };
        f_neu += term * c(sign);
        chain = &rbw * chain;
    }
    let omitted_bound = linalg::op_norm(&left) * contraction.powi(order_cap as i32) * linalg::op_norm(chi);
    let discrepancy = linalg::rel_fro(&f_neu, &f_direct);
    Ok(FeshbachResult {
        f_op: OperatorMatrix { tag, mat: f_direct },
        f_neumann: OperatorMatrix { tag, mat: f_neu },
        discrepancy,
        q_op: OperatorMatrix { tag, mat: q },
        inverse_norm,
        neumann_orders: orders,
        contraction,
        omitted_bound,
    })
}

#[derive(Clone, Debug)]
pub struct IsospectralCheck {
    /// Smallest singular value of F compressed to Ran χ.
    pub smin: f64,
    /// ‖(H − z) Q_χ u‖ / ‖Q_χ u‖ for the corresponding singular vector u.
    pub residual: f64,
    pub vector: nalgebra::DVector<C64>,
}

pub fn isospectral_check(res: &FeshbachResult, h_minus_z: &OperatorMatrix, pair: &SmoothedProjectionPair) -> IsospectralCheck {
    let v = linalg::range_basis(&pair.chi.mat, RANGE_FLOOR);
    let fc = v.adjoint() * &res.f_op.mat * &v;
    let svd = fc.svd(true, true);
    let (imin, smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let y = svd.v_t.as_ref().unwrap().row(imin).adjoint();
    let u = &v * y;
    let psi = &res.q_op.mat * &u;
    let residual = linalg::vnorm(&(&h_minus_z.mat * &psi)) / linalg::vnorm(&psi);
    IsospectralCheck { smin, residual, vector: psi }
}

#[derive(Clone, Debug)]
pub struct ResolventReport {
    pub inverse_norm: f64,
    pub bound: f64,
    /// (τ, computed weighted norm, 1 + 4τ/ρ)
    pub weighted: Vec<(f64, f64, f64)>,
}

impl ResolventReport {
    pub fn holds(&self) -> bool {
        self.inverse_norm <= self.bound * (1.0 + 1e-12) && self.weighted.iter().all(|(_, n, b)| *n <= b * (1.0 + 1e-12))
    }
}

/// Norms of (H_0 − z)^{-1} and (H_f+τ)^{1/2}(H_0 − z)^{-1}(H_f+τ)^{1/2} on
/// Ran χ̄, for τ ∈ {0, ρ, 1}.
pub fn resolvent_bounds_check(
    sys: &AtomicSystem,
    cutoff: &SmoothCutoff,
    rho: f64,
    z: C64,
    basis: &FockBasis,
) -> Result<ResolventReport> {
    if !(rho > 0.0 && rho <= 0.25) || (z - c(sys.eps_at)).norm() >= rho / 2.0 {
        return Err(Error::Precondition("requires 0 < ρ ≤ 1/4 and z in D_{ρ/2}(ε_at)".into()));
    }
    let pair = smoothed_projections_first(sys, cutoff, rho, basis)?;
    let t = sys.functional(basis, |_, e, ef| c(e + ef) - z);
    let u = linalg::range_basis(&pair.chibar.mat, RANGE_FLOOR);
    let tb = u.adjoint() * &t * &u;
    let inv = linalg::inverse(&tb)?;
    let inverse_norm = linalg::op_norm(&inv);
    let mut weighted = Vec::new();
    for tau in [0.0, rho, 1.0] {
        let s = sys.functional(basis, |_, _, ef| c((ef + tau).sqrt()));
        let sb = u.adjoint() * &s * &u;
        weighted.push((tau, linalg::op_norm(&(&sb * &inv * &sb)), 1.0 + 4.0 * tau / rho));
    }
    Ok(ResolventReport { inverse_norm, bound: 4.0 / rho, weighted })
}

/// H_0 − z on the product basis.
pub fn free_minus_z(sys: &AtomicSystem, basis: &FockBasis, z: C64) -> OperatorMatrix {
    OperatorMatrix { tag: basis.tag(sys.d), mat: sys.functional(basis, |_, e, ef| c(e + ef) - z) }
}

pub fn tag_of(basis: &FockBasis, d: usize) -> BasisTag {
    basis.tag(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::ModeGrid;
    use crate::model::{assemble_hamiltonian, coupling_norms, desk_spec};

    #[test]
    fn cutoff_properties() {
        for kind in [CutoffKind::PolySmooth, CutoffKind::ExpBump] {
            let ch = make_cutoff(kind);
            assert_eq!(ch.chi(0.5), 1.0);
            assert_eq!(ch.chi(1.2), 0.0);
            assert_eq!(ch.chi(0.75), 1.0);
            assert_eq!(ch.chi(1.0), 0.0);
            let mut prev = 1.0;
            for i in 0..=2000 {
                let t = 2.0 * i as f64 / 2000.0;
                let x = ch.chi(t);
                let xb = ch.chibar(t);
                assert!((x * x + xb * xb - 1.0).abs() <= 1e-12);
                if t >= 0.75 {
                    assert!(x <= prev + 1e-15);
                    prev = x;
                }
            }
            assert!(ch.chi_prime_sup > 1.0 && ch.chi_prime_sup < 20.0);
        }
    }

    #[test]
    fn cutoff_derivative_matches_difference_quotient() {
        let ch = make_cutoff(CutoffKind::PolySmooth);
        for i in 1..50 {
            let t = 0.75 + 0.25 * i as f64 / 50.0;
            let h = 1e-6;
            let fd = (ch.chi(t + h) - ch.chi(t - h)) / (2.0 * h);
            assert!((fd - ch.chi_prime(t)).abs() < 1e-5 * ch.chi_prime_sup);
        }
        let sampled = (0..=100_000)
            .map(|i| ch.chi_prime(0.75 + 0.25 * i as f64 / 1e5).abs())
            .fold(0.0, f64::max);
        assert!(ch.chi_prime_sup >= sampled && ch.chi_prime_sup - sampled < 1e-6);
    }

    fn desk() -> (AtomicSystem, crate::model::CouplingFunction, FockBasis, ModeGrid) {
        let m = desk_spec().build().unwrap();
        let b = FockBasis::build(&m.grid, 3).unwrap();
        (m.sys, m.coupling, b, m.grid)
    }

    #[test]
    fn projections_are_complementary_and_commute() {
        let (sys, _, basis, _) = desk();
        let ch = make_cutoff(CutoffKind::PolySmooth);
        let p = smoothed_projections_first(&sys, &ch, 0.25, &basis).unwrap();
        let sum = &p.chi.mat * &p.chi.mat + &p.chibar.mat * &p.chibar.mat;
        assert!(linalg::fro(&(sum - CMat::identity(basis.dim() * 3, basis.dim() * 3))) < 1e-10);
        let t = free_minus_z(&sys, &basis, c(0.01));
        assert!(linalg::fro(&(&t.mat * &p.chi.mat - &p.chi.mat * &t.mat)) < 1e-10);
        assert!(linalg::fro(&(&t.mat * &p.chibar.mat - &p.chibar.mat * &t.mat)) < 1e-10);
        // vacuum: acts as P_at ⊗ 1
        let nf = basis.dim();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(p.chi.mat[(a * nf, b * nf)], sys.p_at[(a, b)]);
            }
        }
        // a state with field energy ≥ ρ is annihilated
        let s = basis.energies.iter().position(|&e| e >= 0.25).unwrap();
        assert!((0..3 * nf).all(|r| p.chi.mat[(r, s)] == c(0.0)));
    }

    #[test]
    fn criterion_one_gates() {
        let (sys, g, _, grid) = desk();
        let n = coupling_norms(&g, &grid).unwrap();
        let z = c(sys.eps_at);
        assert!(feshbach_pair_criterion_1(&sys, &n, c(0.0), 0.2, z).unwrap().ok);
        let b = g_bound_1(&n, 0.2);
        assert!(!feshbach_pair_criterion_1(&sys, &n, c(b), 0.2, z).unwrap().ok);
        assert!(!feshbach_pair_criterion_1(&sys, &n, c(0.0), 0.3, z).unwrap().ok);
    }

    #[test]
    fn zero_coupling_gives_free_operator() {
        let (sys, g, basis, _) = desk();
        let ch = make_cutoff(CutoffKind::PolySmooth);
        let z = c(sys.eps_at);
        let h = assemble_hamiltonian(&sys, &g, &basis, c(0.0)).unwrap();
        let h = h.sub(&OperatorMatrix::identity(h.tag).scale(z)).unwrap();
        let t = free_minus_z(&sys, &basis, z);
        let pair = smoothed_projections_first(&sys, &ch, 0.2, &basis).unwrap();
        let r = feshbach_operator(&h, &t, &pair, 12).unwrap();
        assert!(linalg::fro(&(&r.f_op.mat - &t.mat)) < 1e-14);
        assert!(r.neumann_orders.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reduces_to_schur_complement_for_wide_cutoff() {
        let (sys, g, _, grid) = desk();
        let basis = FockBasis::build(&grid.restrict(0.7), 1).unwrap();
        let ch = make_cutoff(CutoffKind::PolySmooth);
        let z = c(-0.01);
        let h = assemble_hamiltonian(&sys, &g, &basis, c(400.0)).unwrap();
        let h = h.sub(&OperatorMatrix::identity(h.tag).scale(z)).unwrap();
        let t = free_minus_z(&sys, &basis, z);
        // every field energy is below 3/4·ρ, so χ = P_at ⊗ 1 exactly
        let pair = smoothed_projections_with(Step::First, &sys.p_at, &ch, 1.0, &basis).unwrap();
        assert!(basis.energies.iter().all(|&e| e < 0.75));
        let r = feshbach_operator(&h, &t, &pair, 12).unwrap();
        let p = &pair.chi.mat;
        let u = linalg::range_basis(&pair.chibar.mat, RANGE_FLOOR);
        let v = linalg::range_basis(p, RANGE_FLOOR);
        let schur = v.adjoint() * &h.mat * &v
            - v.adjoint() * &h.mat * &u * linalg::inverse(&(u.adjoint() * &h.mat * &u)).unwrap() * u.adjoint() * &h.mat * &v;
        let fc = v.adjoint() * &r.f_op.mat * &v;
        assert!(linalg::rel_fro(&fc, &schur) < 1e-10);
    }

    #[test]
    fn neumann_term_norms_respect_geometric_bound() {
        let (sys, g, basis, grid) = desk();
        let n = coupling_norms(&g, &grid).unwrap();
        let ch = make_cutoff(CutoffKind::PolySmooth);
        let rho = 0.2;
        let gg = 0.5 * g_bound_1(&n, rho);
        let z = c(sys.eps_at);
        assert!(feshbach_pair_criterion_1(&sys, &n, c(gg), rho, z).unwrap().ok);
        let h = assemble_hamiltonian(&sys, &g, &basis, c(gg)).unwrap();
        let h = h.sub(&OperatorMatrix::identity(h.tag).scale(z)).unwrap();
        let t = free_minus_z(&sys, &basis, z);
        let pair = smoothed_projections_first(&sys, &ch, rho, &basis).unwrap();
        let r = feshbach_operator(&h, &t, &pair, 12).unwrap();
        let gw = linalg::op_norm(&(&h.mat - &t.mat));
        assert!(r.contraction < 1.0);
        for (l, &x) in r.neumann_orders.iter().enumerate() {
            assert!(x <= gw * r.contraction.powi(l as i32) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn resolvent_bounds_hold_and_ignore_g() {
        let (sys, _, basis, _) = desk();
        let ch = make_cutoff(CutoffKind::PolySmooth);
        let rep = resolvent_bounds_check(&sys, &ch, 0.2, c(sys.eps_at), &basis).unwrap();
        assert!(rep.holds(), "{rep:?}");
        let (tau, val, bound) = rep.weighted[1];
        assert_eq!(tau, 0.2);
        assert!(val <= 5.0 && bound == 5.0);
        assert!(resolvent_bounds_check(&sys, &ch, 0.3, c(sys.eps_at), &basis).is_err());
    }
}
