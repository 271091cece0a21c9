//! The first two renormalization steps: first-step kernels with their bounds,
//! the free approximation, the second Feshbach step, and the schedule of
//! scales and couplings.

use crate::error::{Error, Result};
use crate::feshbach::{
    feshbach_operator, feshbach_pair_criterion_1, free_minus_z, isospectral_check, smoothed_projections_first,
    smoothed_projections_second, smoothed_projections_with, CriterionOne, Step, SmoothCutoff, RANGE_FLOOR,
};
use crate::fock::{CMat, FockBasis, ModeGrid, OperatorMatrix, C64};
use crate::kernels::{
    h_mn_matrix, kernel_to_operator, norm_family, norm_mu, norm_mu_sharp, polydisc_check, r_grid_for,
    wick_normal_order, wick_table, BoundConstants, FnKernel, IntegralKernel, KernelEval, KernelFamily, MatFn,
    PolydiscCheck, PolydiscRadii, WickProblem, WickRequest, WickTerm, WICK_L_CAP,
};
use crate::linalg::{self, c};
use crate::model::{
    assemble_hamiltonian, compute_z_at, coupling_norms, AtomicSystem, CouplingFunction, CouplingNorms, Model,
    SecondOrderData,
};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParameters {
    pub rho0: f64,
    pub rho1: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub delta0: f64,
    pub xi: f64,
    pub l_max: usize,
    pub mn_max: usize,
}

impl FlowParameters {
    pub fn validate(&self, mu: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if !(self.rho0 > 0.0 && self.rho0 < 0.25) {
            return bad(format!("ρ₀ = {} outside (0, 1/4)", self.rho0));
        }
        if !(self.rho1 > 0.0 && self.rho1 <= 0.5) {
            return bad(format!("ρ₁ = {} outside (0, 1/2]", self.rho1));
        }
        if !(self.epsilon > 0.0 && self.epsilon < mu) {
            return bad(format!("ε = {} outside (0, μ)", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha < (mu - self.epsilon).min(1.0)) {
            return bad(format!("α = {} outside (0, min(μ−ε, 1))", self.alpha));
        }
        check_delta0(self.delta0)?;
        if !(self.xi > 0.0 && self.xi <= 0.25) {
            return bad(format!("ξ = {} outside (0, 1/4]", self.xi));
        }
        if self.l_max == 0 || self.l_max > WICK_L_CAP {
            return bad(format!("L_max must be in 1..={WICK_L_CAP}"));
        }
        Ok(())
    }
}

fn check_delta0(delta0: f64) -> Result<()> {
    if !(delta0 > 0.0 && delta0 < PI / 2.0) {
        return Err(Error::Precondition(format!("δ₀ = {delta0} outside (0, π/2)")));
    }
    Ok(())
}

/// inf over g in the double cone of opening δ₀ of |d_at + g^{-2}|.
pub fn c_delta0(delta0: f64, d_at: f64) -> Result<f64> {
    check_delta0(delta0)?;
    Ok(if delta0 <= PI / 4.0 { d_at } else { d_at * (PI - 2.0 * delta0).sin() })
}

/// Sampled version of `c_delta0`: 100 arguments clustered at the cone edge
/// times 1000 log-spaced values of |g|^{-2}.
pub fn c_delta0_sampled(delta0: f64, d_at: f64) -> f64 {
    let nt = 100;
    let ns = 1000;
    let mut best = f64::INFINITY;
    for i in 0..nt {
        let theta = delta0 * (PI * (i as f64 + 0.5) / (2.0 * nt as f64)).cos();
        let rot = C64::from_polar(1.0, -2.0 * theta);
        for j in 0..ns {
            let s = d_at * 10f64.powf(-6.0 + 7.0 * j as f64 / (ns - 1) as f64);
            best = best.min((c(d_at) + rot * s).norm());
        }
    }
    best
}

/// |arg g| < δ₀ or |arg(−g)| < δ₀.
pub fn in_cone(g: C64, delta0: f64) -> bool {
    g != c(0.0) && (g.arg().abs() < delta0 || (-g).arg().abs() < delta0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConeAnnulus {
    pub g_lower: f64,
    pub g_upper: f64,
    pub delta0: f64,
    pub c_delta0: f64,
    /// Which upper bound is smallest.
    pub binding: String,
}

impl ConeAnnulus {
    pub fn nonempty(&self) -> bool {
        self.g_lower < self.g_upper
    }

    pub fn contains(&self, g: C64) -> bool {
        in_cone(g, self.delta0) && g.norm() > self.g_lower && g.norm() < self.g_upper
    }

    /// Midpoint of the radial interval at argument `angle`.
    pub fn midpoint(&self, angle: f64) -> C64 {
        C64::from_polar(0.5 * (self.g_lower + self.g_upper), angle)
    }
}

/// Model quantities entering the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleNorms {
    pub norm_z: f64,
    /// ‖G‖_μ, square-root variant.
    pub g_mu: f64,
    pub c_f: f64,
    pub d_at: f64,
    pub mu: f64,
}

/// ρ₁ = ρ₀^{1+2ε+α} and the coupling annulus
/// c^{-1/2}ρ₀^{1+ε+α/2} < |g| < min(ρ₀^{1+ε}, ρ₀^{1/2}/(8‖Z‖+4c), ρ₀^{1/2}ξ/(8C_F‖G‖_μ)).
pub fn parameter_schedule(
    rho0: f64,
    epsilon: f64,
    alpha: f64,
    delta0: f64,
    xi: f64,
    norms: &ScheduleNorms,
) -> Result<(FlowParameters, ConeAnnulus)> {
    let mu = norms.mu;
    if !(epsilon > 0.0 && epsilon < mu) {
        return Err(Error::Precondition(format!("ε = {epsilon} outside (0, μ)")));
    }
    if !(alpha > 0.0 && alpha < (mu - epsilon).min(1.0)) {
        return Err(Error::Precondition(format!("α = {alpha} outside (0, min(μ−ε, 1))")));
    }
    let params = FlowParameters {
        rho0,
        rho1: rho0.powf(1.0 + 2.0 * epsilon + alpha),
        epsilon,
        alpha,
        delta0,
        xi,
        l_max: 4,
        mn_max: 2,
    };
    params.validate(mu)?;
    let cd = c_delta0(delta0, norms.d_at)?;
    let g_lower = cd.powf(-0.5) * rho0.powf(1.0 + epsilon + alpha / 2.0);
    let uppers = [
        ("ρ₀^{1+ε}", rho0.powf(1.0 + epsilon)),
        ("ρ₀^{1/2}/(8‖Z‖+4c)", rho0.sqrt() / (8.0 * norms.norm_z + 4.0 * cd)),
        ("ρ₀^{1/2}ξ/(8C_F‖G‖_μ)", rho0.sqrt() * xi / (8.0 * norms.c_f * norms.g_mu)),
    ];
    let (name, g_upper) = uppers.iter().copied().fold(("", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let ann = ConeAnnulus { g_lower, g_upper, delta0, c_delta0: cd, binding: name.to_string() };
    if !ann.nonempty() {
        return Err(Error::Precondition(format!(
            "empty annulus at ρ₀ = {rho0}: g₋ = {g_lower:.4e} ≥ g₊ = {g_upper:.4e} (binding {name})"
        )));
    }
    Ok((params, ann))
}

/// Read-only model data shared by all pipeline stages.
#[derive(Clone, Debug)]
pub struct FlowContext {
    pub sys: AtomicSystem,
    pub coupling: CouplingFunction,
    pub grid: ModeGrid,
    pub basis: FockBasis,
    pub g_values: Vec<CMat>,
    pub norms: CouplingNorms,
    pub second: SecondOrderData,
    pub cutoff: SmoothCutoff,
    pub consts: BoundConstants,
    pub mu: f64,
}

impl FlowContext {
    pub fn new(model: &Model, cutoff: SmoothCutoff) -> Result<FlowContext> {
        if !model.sys.is_normalized() {
            return Err(Error::Precondition("atomic gap must be normalized to 1".into()));
        }
        let basis = FockBasis::build(&model.grid, model.spec.n_max)?;
        let norms = coupling_norms(&model.coupling, &model.grid)?;
        let second = compute_z_at(&model.sys, &model.coupling, &model.grid)?;
        Ok(FlowContext {
            sys: model.sys.clone(),
            coupling: model.coupling.clone(),
            g_values: model.coupling.on_grid(&model.grid)?,
            grid: model.grid.clone(),
            basis,
            norms,
            second,
            cutoff,
            consts: BoundConstants::new(cutoff.chi_prime_sup),
            mu: model.spec.mu,
        })
    }

    pub fn schedule_norms(&self) -> ScheduleNorms {
        ScheduleNorms {
            norm_z: self.second.norm_z,
            g_mu: self.norms.mu_sqrt,
            c_f: self.consts.c_f,
            d_at: self.sys.d_at,
            mu: self.mu,
        }
    }
}

/// The states of `parent` with field energy ≤ ρ, relabelled on the dilated
/// grid of the modes with k ≤ ρ.
#[derive(Clone, Debug)]
pub struct Window {
    pub rho: f64,
    pub grid: ModeGrid,
    pub basis: FockBasis,
    /// Parent index of each window mode.
    pub modes: Vec<usize>,
    /// Parent index of each window state.
    pub states: Vec<usize>,
}

pub fn window(parent: &FockBasis, rho: f64) -> Result<Window> {
    let pg = &parent.grid;
    let modes: Vec<usize> = (0..pg.len()).filter(|&q| pg.modes[q].frequency <= rho + crate::fock::ENERGY_TOL).collect();
    let grid = pg.restrict(rho).dilate(rho);
    let basis = FockBasis::build_windowed(&grid, parent.n_max, Some(1.0))?;
    let mut states = Vec::with_capacity(basis.dim());
    for st in &basis.states {
        let mut full = vec![0u8; pg.len()];
        for (i, &q) in modes.iter().enumerate() {
            full[q] = st[i];
        }
        let idx = parent
            .index_of(&full)
            .ok_or_else(|| Error::Precondition("window state missing from the parent basis".into()))?;
        states.push(idx);
    }
    Ok(Window { rho, grid, basis, modes, states })
}

impl Window {
    /// (d·n_parent) × (d'·n_window) isometry iso ⊗ (window embedding).
    pub fn embedding(&self, parent_dim: usize, iso: &CMat) -> CMat {
        let (d, dp) = (iso.nrows(), iso.ncols());
        let nw = self.basis.dim();
        let mut e = CMat::zeros(d * parent_dim, dp * nw);
        for a in 0..d {
            for ap in 0..dp {
                for (sp, &s) in self.states.iter().enumerate() {
                    e[(a * parent_dim + s, ap * nw + sp)] = iso[(a, ap)];
                }
            }
        }
        e
    }

    /// scale · E† A E: the compression of A to the window, atomic factor
    /// reduced by `iso`.
    pub fn compress(&self, a: &CMat, parent_dim: usize, iso: &CMat, scale: f64) -> CMat {
        let e = self.embedding(parent_dim, iso);
        e.adjoint() * a * e * c(scale)
    }
}

fn geometric_tail(x: f64, from: usize, coef: impl Fn(usize) -> f64) -> f64 {
    if !(x < 1.0) {
        return f64::INFINITY;
    }
    let mut s = 0.0;
    let mut l = from;
    loop {
        let t = coef(l) * x.powi(l as i32);
        s += t;
        if t <= 1e-17 * s || t == 0.0 || l > 100_000 {
            return s;
        }
        l += 1;
    }
}

/// First-step polydisc radii (α₀, β₀, γ₀) from the explicit series, together
/// with the part of those series beyond L_max.
pub fn first_step_radii(ctx: &FlowContext, g_abs: f64, rho: f64, xi: f64, l_max: usize) -> (PolydiscRadii, f64) {
    let ch = ctx.cutoff.chi_prime_sup;
    let cf = ctx.consts.c_f_hat;
    let gm = ctx.norms.mu_sqrt;
    let x1 = 2.0 * ctx.norms.ominv * g_abs * rho.powf(-0.5) * cf;
    let x2 = g_abs * rho.powf(-0.5) * cf * gm / xi;
    let mu = ctx.mu;
    let alpha = geometric_tail(x1, 2, |_| 1.0);
    let beta = (1.0 + ch) * geometric_tail(x1, 2, |l| (l + 1) as f64);
    let gamma = rho.powf(mu)
        * (1.0 + ch)
        * (6.0 * g_abs * gm / xi + 64.0 * x2 * x2 + rho.powf(-0.5) * geometric_tail(4.0 * x2, 3, |l| (l + 2) as f64));
    let from = l_max + 1;
    let tail = geometric_tail(x1, from.max(2), |_| 1.0)
        + (1.0 + ch) * geometric_tail(x1, from.max(2), |l| (l + 1) as f64)
        + rho.powf(mu - 0.5) * (1.0 + ch) * geometric_tail(4.0 * x2, from.max(3), |l| (l + 2) as f64);
    (PolydiscRadii { alpha, beta, gamma }, tail)
}

/// |g| < ρ^{1/2}ξ/(8C_F‖G‖_μ), the convergence condition of the first-step series.
pub fn first_series_bound(ctx: &FlowContext, rho: f64, xi: f64) -> f64 {
    rho.sqrt() * xi / (8.0 * ctx.consts.c_f * ctx.norms.mu_sqrt)
}

fn vertex_kernels(ctx: &FlowContext, g: C64) -> [FnKernel; 2] {
    let gv = Arc::new(ctx.g_values.clone());
    let gv2 = gv.clone();
    let d = ctx.sys.d;
    [
        FnKernel { m: 1, n: 0, d, f: Arc::new(move |_, cr: &[usize], _: &[usize]| &gv[cr[0]] * g) },
        FnKernel { m: 0, n: 1, d, f: Arc::new(move |_, _: &[usize], an: &[usize]| gv2[an[0]].adjoint() * g) },
    ]
}

/// P_at χ(E/ρ) and P̄_at(H_at − z + E)^{-1} + P_at χ̄²(E/ρ)/(ε_at − z + E).
fn step_one_resolvents(ctx: &FlowContext, z: C64, rho: f64) -> (MatFn, MatFn) {
    let sys = &ctx.sys;
    let cut = ctx.cutoff;
    let p = sys.p_at.clone();
    let p2 = p.clone();
    let eps = sys.eps_at;
    let excited: Vec<(f64, CMat)> = (sys.d0..sys.d)
        .map(|i| {
            let v = sys.eigenvectors.column(i);
            (sys.eigenvalues[i], &v * v.adjoint())
        })
        .collect();
    let end: MatFn = Arc::new(move |e| &p * c(cut.chi(e / rho)));
    let mid: MatFn = Arc::new(move |e| {
        let xb = cut.chibar(e / rho).powi(2);
        let mut m = if xb > 0.0 { &p2 * (c(xb) / (c(eps + e) - z)) } else { CMat::zeros(p2.nrows(), p2.ncols()) };
        for (lam, outer) in &excited {
            m += outer * (c(1.0) / (c(lam + e) - z));
        }
        m
    });
    (end, mid)
}

fn resolvent_list(end: &MatFn, mid: &MatFn, l: usize) -> Vec<MatFn> {
    (0..=l).map(|i| if i == 0 || i == l { end.clone() } else { mid.clone() }).collect()
}

fn step_one_problem<'a>(grid: &'a ModeGrid, d: usize, verts: &'a [FnKernel; 2], end: &MatFn, mid: &MatFn, l: usize) -> WickProblem<'a> {
    let comps: Vec<&dyn KernelEval> = vec![&verts[0], &verts[1]];
    WickProblem { grid, d, factors: vec![comps; l], f: resolvent_list(end, mid, l) }
}

fn sign(l: usize) -> f64 {
    if l % 2 == 1 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug)]
pub struct FirstStep {
    pub g: C64,
    pub z: C64,
    pub rho0: f64,
    /// w^{(1,ρ₀)} on the window grid, atomic factor Ran P_at.
    pub family: KernelFamily,
    pub window: Window,
    /// Term counts per L and (M,N).
    pub term_counts: Vec<BTreeMap<(usize, usize), usize>>,
    pub tail_bound: f64,
    pub radii: PolydiscRadii,
    /// Membership of w^{(1)} − ρ₀^{-1}(ε_at − z) in the polydisc.
    pub polydisc: PolydiscCheck,
    pub criterion: CriterionOne,
    /// |g| divided by the series bound.
    pub series_margin: f64,
}

/// Kernels of S_ρ₀(F(H_g − z, H_0 − z)) through order L_max of the Neumann
/// series, external degrees M+N ≤ MN_max.
pub fn first_step_kernels(
    ctx: &FlowContext,
    g: C64,
    rho0: f64,
    z: C64,
    l_max: usize,
    mn_max: usize,
    xi: f64,
) -> Result<FirstStep> {
    let criterion = feshbach_pair_criterion_1(&ctx.sys, &ctx.norms, g, rho0, z)?;
    if !criterion.ok {
        return Err(Error::Precondition(format!(
            "first Feshbach pair criterion fails (ρ ok {}, z ok {}, |g| margin {:.3})",
            criterion.rho_ok, criterion.z_ok, criterion.margin
        )));
    }
    let series_margin = g.norm() / first_series_bound(ctx, rho0, xi);
    if !(series_margin < 1.0) {
        return Err(Error::Precondition(format!("|g| is {series_margin:.3}× the first-step series bound")));
    }
    if l_max == 0 || l_max > WICK_L_CAP {
        return Err(Error::Precondition(format!("L_max must be in 1..={WICK_L_CAP}")));
    }
    let (radii, tail_bound) = first_step_radii(ctx, g.norm(), rho0, xi, l_max);
    if !tail_bound.is_finite() {
        return Err(Error::Numerical("first-step truncation tail is not summable".into()));
    }
    let win = window(&ctx.basis, rho0)?;
    let r_out = r_grid_for(&win.basis);
    let req = WickRequest {
        out_modes: win.modes.clone(),
        max_m: mn_max,
        max_n: mn_max,
        mn_max,
        r_points: r_out.iter().map(|r| rho0 * r).collect(),
        energy_bound: Some(rho0),
    };
    let verts = vertex_kernels(ctx, g);
    let (end, mid) = step_one_resolvents(ctx, z, rho0);
    let mut acc: BTreeMap<(usize, usize), Vec<CMat>> = BTreeMap::new();
    let mut term_counts = Vec::new();
    for l in 1..=l_max {
        let problem = step_one_problem(&ctx.grid, ctx.sys.d, &verts, &end, &mid, l);
        let out = wick_normal_order(&problem, &req)?;
        for (key, vals) in out.blocks {
            let slot = acc.entry(key).or_insert_with(|| vec![CMat::zeros(ctx.sys.d, ctx.sys.d); vals.len()]);
            for (a, v) in slot.iter_mut().zip(vals) {
                *a += v * c(sign(l));
            }
        }
        term_counts.push(out.term_counts);
    }
    let b = &ctx.sys.ground_basis;
    let d0 = ctx.sys.d0;
    let nr = r_out.len();
    let mut family = KernelFamily::new(ctx.mu, xi, d0)?;
    for ((m, n), vals) in acc {
        let pow = rho0.powi((m + n) as i32 - 1);
        let mut k = IntegralKernel::zeros(m, n, d0, &win.grid, r_out.clone());
        for (i, v) in vals.iter().enumerate() {
            let mut x = b.adjoint() * v * b * c(pow);
            if m + n == 0 {
                let r = r_out[i % nr];
                x += CMat::identity(d0, d0) * ((c(ctx.sys.eps_at) - z) / rho0 + r);
            }
            k.values[i] = x;
        }
        k.symmetric = true;
        family.insert(k)?;
    }
    let mut shifted = family.clone();
    if let Some(k) = shifted.kernels.get_mut(&(0, 0)) {
        let lead = CMat::identity(d0, d0) * ((c(ctx.sys.eps_at) - z) / rho0);
        for v in k.values.iter_mut() {
            *v -= &lead;
        }
    }
    let polydisc = polydisc_check(&shifted, radii)?;
    Ok(FirstStep { g, z, rho0, family, window: win, term_counts, tail_bound, radii, polydisc, criterion, series_margin })
}

/// Relative Frobenius distance between H(w^{(1)}) and the direct
/// S_ρ₀(F(H_g − z, H_0 − z)) on the window.
pub fn first_step_oracle(ctx: &FlowContext, first: &FirstStep) -> Result<f64> {
    let h = assemble_hamiltonian(&ctx.sys, &ctx.coupling, &ctx.basis, first.g)?;
    let hz = h.sub(&OperatorMatrix::identity(h.tag).scale(first.z))?;
    let t = free_minus_z(&ctx.sys, &ctx.basis, first.z);
    let pair = smoothed_projections_first(&ctx.sys, &ctx.cutoff, first.rho0, &ctx.basis)?;
    let res = feshbach_operator(&hz, &t, &pair, 1)?;
    let direct = first.window.compress(&res.f_op.mat, ctx.basis.dim(), &ctx.sys.ground_basis, 1.0 / first.rho0);
    let hw = kernel_to_operator(&first.family, &first.window.basis)?;
    Ok(linalg::rel_fro(&hw.mat, &direct))
}

/// One computed per-term norm beside its analytic bound.
#[derive(Clone, Debug, PartialEq)]
pub struct TermBound {
    pub l: usize,
    /// (m, p, n, q) per factor.
    pub parts: Vec<(usize, usize, usize, usize)>,
    pub external: (usize, usize),
    /// "kernel", "sup" or "deriv".
    pub kind: &'static str,
    pub computed: f64,
    pub bound: f64,
}

impl TermBound {
    pub fn holds(&self) -> bool {
        self.computed <= self.bound * (1.0 + 1e-9)
    }
}

fn part_tuple(t: &WickTerm) -> Vec<(usize, usize, usize, usize)> {
    t.parts.iter().map(|p| (p.m, p.p, p.n, p.q)).collect()
}

/// Kernel of a single Wick term, divided by its binomial weight, projected
/// with `iso` and scaled by ρ^{M+N−1}.
fn single_term_kernel(
    problem: &WickProblem,
    term: &WickTerm,
    big_m: usize,
    big_n: usize,
    req: &WickRequest,
    iso: &CMat,
    rho: f64,
    grid_out: &ModeGrid,
    r_out: &[f64],
) -> Result<IntegralKernel> {
    let vals = wick_table(problem, std::slice::from_ref(term), big_m, big_n, req)?;
    let scale = rho.powi((big_m + big_n) as i32 - 1) / term.binomial();
    let mut k = IntegralKernel::zeros(big_m, big_n, iso.ncols(), grid_out, r_out.to_vec());
    for (i, v) in vals.iter().enumerate() {
        k.values[i] = iso.adjoint() * v * iso * c(scale);
    }
    k.symmetric = false;
    Ok(k)
}

#[derive(Clone, Debug)]
pub struct FirstStepBounds {
    pub terms: Vec<TermBound>,
    /// Multi-indices (m,p,n,q) of the L = 1 terms.
    pub l1_indices: Vec<(usize, usize, usize, usize)>,
    /// max over states and r of ‖B^{1/2} F(H_f + ρr) B^{1/2}‖ with B = H_f + ρ.
    pub resolvent_max: f64,
    /// Same for ∂_r F.
    pub resolvent_deriv_max: f64,
    pub c_f_hat: f64,
    pub c_f: f64,
    pub all_hold: bool,
}

/// Per-term norms of the first-step expansion against their analytic bounds,
/// and the weighted resolvent bounds.
pub fn first_step_bound_report(
    ctx: &FlowContext,
    g: C64,
    rho0: f64,
    z: C64,
    l_max: usize,
    mn_max: usize,
) -> Result<FirstStepBounds> {
    let crit = feshbach_pair_criterion_1(&ctx.sys, &ctx.norms, g, rho0, z)?;
    if !crit.ok {
        return Err(Error::Precondition("first Feshbach pair criterion fails".into()));
    }
    let win = window(&ctx.basis, rho0)?;
    let r_out = r_grid_for(&win.basis);
    let req = WickRequest {
        out_modes: win.modes.clone(),
        max_m: mn_max,
        max_n: mn_max,
        mn_max,
        r_points: r_out.iter().map(|r| rho0 * r).collect(),
        energy_bound: Some(rho0),
    };
    let verts = vertex_kernels(ctx, g);
    let (end, mid) = step_one_resolvents(ctx, z, rho0);
    let ga = g.norm();
    let chp = ctx.cutoff.chi_prime_sup;
    let cfh = ctx.consts.c_f_hat;
    let om = ctx.norms.ominv;
    let gm = ctx.norms.mu_sqrt;
    let mu = ctx.mu;
    let mut terms = Vec::new();
    let mut l1_indices = Vec::new();
    for l in 1..=l_max {
        let problem = step_one_problem(&ctx.grid, ctx.sys.d, &verts, &end, &mid, l);
        for big_m in 0..=mn_max {
            for big_n in 0..=(mn_max - big_m) {
                for term in problem.terms(big_m, big_n) {
                    let k = single_term_kernel(
                        &problem, &term, big_m, big_n, &req, &ctx.sys.ground_basis, rho0, &win.grid, &r_out,
                    )?;
                    let parts = part_tuple(&term);
                    let ps: usize = parts.iter().map(|p| p.1).sum();
                    let qs: usize = parts.iter().map(|p| p.3).sum();
                    let lf = l as f64;
                    let common = cfh.powi(l as i32 - 1) * ga.powi(l as i32) * om.powi((ps + qs) as i32);
                    if big_m + big_n == 0 {
                        let half = rho0.powf(-lf + 0.5 * (ps + qs) as f64);
                        let sup = norm_mu(&k, mu);
                        let der = norm_mu_sharp(&k, mu) - sup;
                        let b = TermBound { l, parts: parts.clone(), external: (0, 0), kind: "sup", computed: sup, bound: common * half };
                        terms.push(b);
                        terms.push(TermBound {
                            l,
                            parts,
                            external: (0, 0),
                            kind: "deriv",
                            computed: der,
                            bound: (lf + 1.0) * (1.0 + chp) * common * half,
                        });
                    } else {
                        let mn = (big_m + big_n) as f64;
                        let expo = -lf + 0.5 * (ps - parts[0].1 + qs - parts[l - 1].3) as f64 + (1.0 + mu) * mn;
                        let bound = (lf + 2.0) * (1.0 + chp) * common * rho0.powf(expo) * gm.powf(mn);
                        let computed = norm_mu_sharp(&k, mu);
                        if l == 1 {
                            l1_indices.push(parts[0]);
                        }
                        terms.push(TermBound { l, parts, external: (big_m, big_n), kind: "kernel", computed, bound });
                    }
                }
            }
        }
    }
    let (resolvent_max, resolvent_deriv_max) = weighted_resolvent_max(ctx, z, rho0, &r_out, &mid);
    let all_hold = terms.iter().all(|t| t.holds()) && resolvent_max <= cfh && resolvent_deriv_max <= ctx.consts.c_f;
    Ok(FirstStepBounds {
        terms,
        l1_indices,
        resolvent_max,
        resolvent_deriv_max,
        c_f_hat: cfh,
        c_f: ctx.consts.c_f,
        all_hold,
    })
}

fn weighted_resolvent_max(ctx: &FlowContext, _z: C64, rho: f64, r_grid: &[f64], mid: &MatFn) -> (f64, f64) {
    let h = 1e-6;
    let mut energies = ctx.basis.energies.clone();
    energies.sort_by(|a, b| a.total_cmp(b));
    energies.dedup();
    let mut fmax = 0.0f64;
    let mut dmax = 0.0f64;
    for &e in &energies {
        let w = e + rho;
        for &r in r_grid {
            fmax = fmax.max(w * linalg::op_norm(&mid(e + rho * r)));
            let lo = (r - h).max(0.0);
            let hi = r + h;
            let dv = (mid(e + rho * hi) - mid(e + rho * lo)) / c(hi - lo);
            dmax = dmax.max(w * linalg::op_norm(&dv));
        }
    }
    (fmax, dmax)
}

/// ρ₀^{-1}(ε_at − z + ρ₀r + χ²(r)g²Z_at) on `r_grid` (or with χ² replaced by 1).
pub fn t_free_kernel(ctx: &FlowContext, g: C64, rho0: f64, z: C64, r_grid: &[f64], grid: &ModeGrid, with_chi: bool) -> IntegralKernel {
    let d0 = ctx.sys.d0;
    let zz = &ctx.second.z_at;
    let eps = ctx.sys.eps_at;
    let cut = ctx.cutoff;
    IntegralKernel::from_fn(0, 0, d0, grid, r_grid.to_vec(), |r, _, _| {
        let x = if with_chi { cut.chi(r).powi(2) } else { 1.0 };
        (CMat::identity(d0, d0) * (c(eps + rho0 * r) - z) + zz * (g * g * x)) / c(rho0)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeApproximation {
    /// sup_r ‖t_free(r) − w_{0,0}(r)‖ on the r grid.
    pub difference: f64,
    /// ‖G‖_μ|g|² + ‖G‖_μ⁴C_F⁴|g|⁴ρ₀^{-2}.
    pub scale: f64,
    /// difference / scale, the observed constant.
    pub ratio: f64,
}

pub fn free_approximation_from(ctx: &FlowContext, first: &FirstStep, with_chi: bool) -> Result<FreeApproximation> {
    let w00 = first.family.w00().ok_or_else(|| Error::Precondition("first-step kernels lack w_{0,0}".into()))?;
    let tf = t_free_kernel(ctx, first.g, first.rho0, first.z, &w00.r_grid, &w00.grid, with_chi);
    let difference = w00.values.iter().zip(&tf.values).map(|(a, b)| linalg::op_norm(&(a - b))).fold(0.0, f64::max);
    let gm = ctx.norms.mu_sqrt;
    let ga = first.g.norm();
    let scale = gm * ga * ga + gm.powi(4) * ctx.consts.c_f.powi(4) * ga.powi(4) / first.rho0.powi(2);
    let ratio = if scale > 0.0 { difference / scale } else { 0.0 };
    Ok(FreeApproximation { difference, scale, ratio })
}

/// Distance between w_{0,0}^{(1)} and its free approximation.
pub fn free_approximation_error(
    ctx: &FlowContext,
    g: C64,
    rho0: f64,
    z: C64,
    xi: f64,
    with_chi: bool,
) -> Result<FreeApproximation> {
    let bound = rho0.sqrt() / (4.0 * ctx.consts.c_f * ctx.norms.ominv);
    if !(g.norm() < bound) {
        return Err(Error::Precondition(format!("|g| = {:.4e} not below ρ₀^{{1/2}}/(4C_F‖G/ω‖) = {bound:.4e}", g.norm())));
    }
    let first = first_step_kernels(ctx, g, rho0, z, 4, 0, xi)?;
    free_approximation_from(ctx, &first, with_chi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertibilityReport {
    pub small_g: bool,
    pub scale_relation: bool,
    pub z_in_disc: bool,
    pub g_in_cone: bool,
    /// None when a hypothesis failed and nothing was computed.
    pub inverse_norm: Option<f64>,
    pub bound: f64,
    pub ok: bool,
    pub failed: Vec<&'static str>,
}

/// Inverse of X = ρ₀^{-1}(ε_at − z + ρ₀H_f + χ²(H_f)g²Z_at) on Ran χ̄^{(1)},
/// against 4/ρ₁. `basis1` is the first-step window basis (scaled units).
#[allow(clippy::too_many_arguments)]
pub fn second_step_invertibility(
    eps_at: f64,
    second: &SecondOrderData,
    cutoff: &SmoothCutoff,
    g: C64,
    rho0: f64,
    rho1: f64,
    z: C64,
    delta0: f64,
    d_at: f64,
    basis1: &FockBasis,
) -> Result<InvertibilityReport> {
    if !(rho0 > 0.0 && rho0 <= 0.5 && rho1 > 0.0 && rho1 <= 0.5) {
        return Err(Error::Precondition("ρ₀, ρ₁ must lie in (0, 1/2]".into()));
    }
    second.require_simple()?;
    let cd = c_delta0(delta0, d_at)?;
    let g2 = g.norm_sqr();
    let small_g = g2 / rho0 < 0.25 / (second.norm_z + cd);
    let scale_relation = rho1 * rho0 <= g2 * cd;
    let center = c(eps_at) + g * g * second.eps2;
    let z_in_disc = (z - center).norm() < rho0 * rho1 / 2.0;
    let g_in_cone = in_cone(g, delta0);
    let bound = 4.0 / rho1;
    let mut failed = Vec::new();
    for (ok, name) in [
        (small_g, "ρ₀^{-1}|g|² < (1/4)/(‖Z‖+c_δ₀)"),
        (scale_relation, "ρ₁ρ₀ ≤ |g|²c_δ₀"),
        (z_in_disc, "z in D_{ρ₀ρ₁/2}(ε_at + g²ε⁽²⁾)"),
        (g_in_cone, "g in S_δ₀"),
    ] {
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Ok(InvertibilityReport { small_g, scale_relation, z_in_disc, g_in_cone, inverse_norm: None, bound, ok: false, failed });
    }
    let d0 = second.z_at.nrows();
    let nf = basis1.dim();
    let mut x = CMat::zeros(d0 * nf, d0 * nf);
    for (s, &e) in basis1.energies.iter().enumerate() {
        let blk = (CMat::identity(d0, d0) * (c(eps_at + rho0 * e) - z) + &second.z_at * (g * g * cutoff.chi(e).powi(2))) / c(rho0);
        for a in 0..d0 {
            for b in 0..d0 {
                x[(a * nf + s, b * nf + s)] = blk[(a, b)];
            }
        }
    }
    let pair = smoothed_projections_second(second, cutoff, rho1, basis1)?;
    let u = linalg::range_basis(&pair.chibar.mat, RANGE_FLOOR);
    let smin = linalg::min_singular(&(u.adjoint() * &x * &u));
    let inverse_norm = 1.0 / smin;
    let ok = inverse_norm <= bound;
    if !ok {
        failed.push("‖X^{-1}‖ ≤ 4/ρ₁");
    }
    Ok(InvertibilityReport { small_g, scale_relation, z_in_disc, g_in_cone, inverse_norm: Some(inverse_norm), bound, ok, failed })
}

#[derive(Clone, Debug)]
pub struct SecondStepDecomposition {
    /// P2 w₀₀ P2 + P̄2 w₀₀ P̄2.
    pub t_part: IntegralKernel,
    /// Off-diagonal part of w₀₀ and all kernels with m+n ≥ 1.
    pub w_int: KernelFamily,
    pub t_free: Option<IntegralKernel>,
    pub tau0: f64,
    pub tau1: f64,
    /// C¹ norm of the off-diagonal part of w₀₀.
    pub offdiag_norm: f64,
    /// Lowest eigenvector of Z_at (d0 × 1) and an orthonormal complement.
    pub u2: CMat,
    pub v2: CMat,
}

pub fn second_step_decompose(first: &KernelFamily, second: &SecondOrderData) -> Result<SecondStepDecomposition> {
    let w00 = first.w00().ok_or_else(|| Error::Precondition("first-step kernels lack w_{0,0}".into()))?;
    let d0 = first.d;
    if second.p2.nrows() != d0 {
        return Err(Error::Precondition("Z_at and kernel dimensions differ".into()));
    }
    let p = &second.p2;
    let pb = second.p2_bar();
    let split = |v: &CMat| p * v * p + &pb * v * &pb;
    let mut t_part = w00.clone();
    let mut off = w00.clone();
    let dw = w00.derivative_table();
    let dt: Vec<CMat> = dw.iter().map(split).collect();
    for (i, v) in w00.values.iter().enumerate() {
        t_part.values[i] = split(v);
        off.values[i] = v - &t_part.values[i];
    }
    off.deriv_values = Some(dw.iter().zip(&dt).map(|(a, b)| a - b).collect());
    t_part.deriv_values = Some(dt.clone());
    let tau0 = dt.iter().map(linalg::op_norm).fold(0.0, f64::max);
    let tau1 = dt.iter().map(|v| linalg::op_norm(&(p * v * p - p))).fold(0.0, f64::max);
    let offdiag_norm = norm_mu_sharp(&off, first.mu);
    let mut w_int = first.without_w00();
    w_int.insert(off)?;
    let u2 = second.eigenvectors.columns(0, 1).into_owned();
    let v2 = second.eigenvectors.columns(1, d0 - 1).into_owned();
    Ok(SecondStepDecomposition { t_part, w_int, t_free: None, tau0, tau1, offdiag_norm, u2, v2 })
}

fn step_two_resolvents(dec: &SecondStepDecomposition, cutoff: SmoothCutoff, rho1: f64) -> (MatFn, MatFn) {
    let d0 = dec.t_part.d;
    let t = Arc::new(dec.t_part.clone());
    let (u, v) = (dec.u2.clone(), dec.v2.clone());
    let end: MatFn = Arc::new(move |e| CMat::identity(d0, d0) * c(cutoff.chi(e / rho1)));
    let mid: MatFn = Arc::new(move |e| {
        let te = t.eval(e, &[], &[]);
        let mut m = CMat::zeros(d0, d0);
        if v.ncols() > 0 {
            let blk = v.adjoint() * &te * &v;
            let inv = blk.try_inverse().unwrap_or_else(|| CMat::from_element(v.ncols(), v.ncols(), c(f64::NAN)));
            m += &v * inv * v.adjoint();
        }
        let xb = cutoff.chibar(e / rho1).powi(2);
        if xb > 0.0 {
            let tp = (u.adjoint() * &te * &u)[(0, 0)];
            m += &u * u.adjoint() * (c(xb) / tp);
        }
        m
    });
    (end, mid)
}

/// Longest products whose individual terms are checked against the
/// per-term bound in the second step; the term count grows like 4^L.
pub const TERM_BOUND_L_MAX: usize = 4;

#[derive(Clone, Debug)]
pub struct SecondStep {
    pub rho1: f64,
    pub window: Window,
    /// ‖(H(t) restricted to Ran χ̄^{(1)})^{-1}‖ and the test against 8/ρ₁.
    pub t_inverse_norm: f64,
    pub cond_i: bool,
    /// ‖H(w)‖ and the test against ρ₁/8.
    pub w_norm: f64,
    pub cond_ii: bool,
    /// ‖w‖^# and the test against ρ₁/(8C_χ).
    pub gamma: f64,
    pub gamma_ok: bool,
    pub kernels: KernelFamily,
    pub radii: PolydiscRadii,
    pub polydisc: PolydiscCheck,
    /// ρ₁^{-1} times the compressed direct Feshbach operator.
    pub direct: CMat,
    pub reconstruction_error: f64,
    pub contraction: f64,
    pub neumann_orders: Vec<f64>,
    pub term_bounds: Vec<TermBound>,
    pub term_bounds_hold: bool,
}

impl SecondStep {
    pub fn conditions_hold(&self) -> bool {
        self.cond_i && self.cond_ii && self.gamma_ok
    }
}

/// Second Feshbach step on the first-step window basis `basis1`: direct
/// operator, kernels by normal ordering, polydisc radii and per-term bounds.
pub fn second_feshbach(
    dec: &SecondStepDecomposition,
    basis1: &FockBasis,
    cutoff: SmoothCutoff,
    params: &FlowParameters,
    mu: f64,
) -> Result<SecondStep> {
    let rho1 = params.rho1;
    let d0 = dec.t_part.d;
    let p2 = &dec.u2 * dec.u2.adjoint();
    let pair = smoothed_projections_with(Step::Second, &p2, &cutoff, rho1, basis1)?;
    let tag = basis1.tag(d0);
    let t_op = OperatorMatrix { tag, mat: h_mn_matrix(&dec.t_part, basis1) };
    let w_op = kernel_to_operator(&dec.w_int, basis1)?;
    let h2 = t_op.add(&w_op)?;
    let u = linalg::range_basis(&pair.chibar.mat, RANGE_FLOOR);
    let t_inverse_norm = 1.0 / linalg::min_singular(&(u.adjoint() * &t_op.mat * &u));
    let cond_i = t_inverse_norm <= 8.0 / rho1;
    let w_norm = w_op.norm();
    let cond_ii = w_norm < rho1 / 8.0;
    let consts = BoundConstants::new(cutoff.chi_prime_sup);
    let gamma = norm_family(&dec.w_int);
    let gamma_ok = gamma < rho1 / (8.0 * consts.c_chi);

    let res = feshbach_operator(&h2, &t_op, &pair, 12)?;
    let win = window(basis1, rho1)?;
    let direct = win.compress(&res.f_op.mat, basis1.dim(), &dec.u2, 1.0 / rho1);

    let grid1 = &basis1.grid;
    let comps: Vec<&IntegralKernel> = dec.w_int.kernels.values().collect();
    let comp_norms: Vec<f64> = comps.iter().map(|k| norm_mu_sharp(k, mu)).collect();
    let factor_comps: Vec<&dyn KernelEval> = comps.iter().map(|k| *k as &dyn KernelEval).collect();
    let (end, mid) = step_two_resolvents(dec, cutoff, rho1);
    let r_out = r_grid_for(&win.basis);
    let mn_max = params.mn_max;
    let req = WickRequest {
        out_modes: win.modes.clone(),
        max_m: mn_max,
        max_n: mn_max,
        mn_max,
        r_points: r_out.iter().map(|r| rho1 * r).collect(),
        energy_bound: Some(rho1),
    };
    let nr = r_out.len();
    let mut acc: BTreeMap<(usize, usize), Vec<CMat>> = BTreeMap::new();
    let mut term_bounds = Vec::new();
    let chp = cutoff.chi_prime_sup;
    for l in 1..=params.l_max {
        let problem = WickProblem { grid: grid1, d: d0, factors: vec![factor_comps.clone(); l], f: resolvent_list(&end, &mid, l) };
        let out = wick_normal_order(&problem, &req)?;
        for (key, vals) in out.blocks {
            let slot = acc.entry(key).or_insert_with(|| vec![CMat::zeros(d0, d0); vals.len()]);
            for (a, v) in slot.iter_mut().zip(vals) {
                *a += v * c(sign(l));
            }
        }
        if l > TERM_BOUND_L_MAX {
            continue;
        }
        for big_m in 0..=mn_max {
            for big_n in 0..=(mn_max - big_m) {
                for term in problem.terms(big_m, big_n) {
                    let k = single_term_kernel(&problem, &term, big_m, big_n, &req, &dec.u2, rho1, &win.grid, &r_out)?;
                    let mut bound = (l as f64 + 2.0)
                        * 2f64.powf(l as f64 / 2.0)
                        * consts.c_chi_hat.powi(l as i32 - 1)
                        * (1.0 + chp + 4.0 * dec.tau0)
                        * rho1.powf((1.0 + mu) * (big_m + big_n) as f64 - l as f64);
                    let pp = |p: usize| if p == 0 { 1.0 } else { (p as f64).powi(p as i32) };
                    for part in &term.parts {
                        bound *= comp_norms[part.comp] / (pp(part.p) * pp(part.q)).sqrt();
                    }
                    term_bounds.push(TermBound {
                        l,
                        parts: part_tuple(&term),
                        external: (big_m, big_n),
                        kind: "kernel",
                        computed: norm_mu_sharp(&k, mu),
                        bound,
                    });
                }
            }
        }
    }
    let mut kernels = KernelFamily::new(mu, params.xi, 1)?;
    for ((m, n), vals) in acc {
        let pow = rho1.powi((m + n) as i32 - 1);
        let mut k = IntegralKernel::zeros(m, n, 1, &win.grid, r_out.clone());
        for (i, v) in vals.iter().enumerate() {
            let mut x = dec.u2.adjoint() * v * &dec.u2 * c(pow);
            if m + n == 0 {
                let r = r_out[i % nr];
                x += dec.u2.adjoint() * dec.t_part.eval(rho1 * r, &[], &[]) * &dec.u2 * c(1.0 / rho1);
            }
            k.values[i] = x;
        }
        k.symmetric = true;
        kernels.insert(k)?;
    }
    let hw = kernel_to_operator(&kernels, &win.basis)?;
    let reconstruction_error = linalg::rel_fro(&hw.mat, &direct);

    let a = 1.0 + 2.0 * chp + 8.0 * dec.tau0;
    let alpha = 12.0 * a * consts.c_chi * gamma / rho1;
    let radii = PolydiscRadii { alpha, beta: dec.tau1 + alpha, gamma: 96.0 * a * rho1.powf(mu) * consts.c_chi * gamma };
    let mut shifted = kernels.clone();
    let lead = dec.u2.adjoint() * dec.t_part.eval(0.0, &[], &[]) * &dec.u2 * c(1.0 / rho1);
    if let Some(k) = shifted.kernels.get_mut(&(0, 0)) {
        for v in k.values.iter_mut() {
            *v -= &lead;
        }
    }
    let polydisc = polydisc_check(&shifted, radii)?;
    let term_bounds_hold = term_bounds.iter().all(|t| t.holds());
    Ok(SecondStep {
        rho1,
        window: win,
        t_inverse_norm,
        cond_i,
        w_norm,
        cond_ii,
        gamma,
        gamma_ok,
        kernels,
        radii,
        polydisc,
        direct,
        reconstruction_error,
        contraction: res.contraction,
        neumann_orders: res.neumann_orders,
        term_bounds,
        term_bounds_hold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndToEnd {
    pub e_g: C64,
    /// Smallest singular value of the second Feshbach operator on Ran χ^{(1)}.
    pub smin: f64,
    /// ‖(H_g − E_g) Q^{(0)} Q^{(1)} v‖ / ‖H_g‖ for the unit vector v.
    pub residual: f64,
}

/// Reconstruct an eigenvector of H_g from the kernel of the second Feshbach
/// operator at z = E_g, through both Q maps.
pub fn end_to_end_check(ctx: &FlowContext, g: C64, e_g: C64, params: &FlowParameters) -> Result<EndToEnd> {
    ctx.second.require_simple()?;
    let first = first_step_kernels(ctx, g, params.rho0, e_g, params.l_max, 0, params.xi)?;
    let dec = second_step_decompose(&first.family, &ctx.second)?;
    let h = assemble_hamiltonian(&ctx.sys, &ctx.coupling, &ctx.basis, g)?;
    let hz = h.sub(&OperatorMatrix::identity(h.tag).scale(e_g))?;
    let t0 = free_minus_z(&ctx.sys, &ctx.basis, e_g);
    let pair0 = smoothed_projections_first(&ctx.sys, &ctx.cutoff, params.rho0, &ctx.basis)?;
    let res0 = feshbach_operator(&hz, &t0, &pair0, 1)?;
    let win = &first.window;
    let nf = ctx.basis.dim();
    let f1 = win.compress(&res0.f_op.mat, nf, &ctx.sys.ground_basis, 1.0 / params.rho0);
    let basis1 = &win.basis;
    let tag1 = basis1.tag(ctx.sys.d0);
    let t1 = OperatorMatrix { tag: tag1, mat: h_mn_matrix(&dec.t_part, basis1) };
    let f1 = OperatorMatrix { tag: tag1, mat: f1 };
    let pair1 = smoothed_projections_second(&ctx.second, &ctx.cutoff, params.rho1, basis1)?;
    let res1 = feshbach_operator(&f1, &t1, &pair1, 1)?;
    let iso = isospectral_check(&res1, &f1, &pair1);
    let lifted = win.embedding(nf, &ctx.sys.ground_basis) * &iso.vector;
    let psi = &res0.q_op.mat * lifted;
    let residual = linalg::vnorm(&(&hz.mat * &psi)) / h.norm();
    Ok(EndToEnd { e_g, smin: iso.smin, residual })
}

/// Everything computed for one coupling on the two-step pipeline.
#[derive(Clone, Debug)]
pub struct FlowReport {
    pub params: FlowParameters,
    pub annulus: ConeAnnulus,
    pub g: C64,
    pub z: C64,
    pub first: FirstStep,
    pub first_oracle: f64,
    pub first_bounds: FirstStepBounds,
    pub free: FreeApproximation,
    pub invertibility: InvertibilityReport,
    pub decomposition: SecondStepDecomposition,
    pub second: SecondStep,
    pub end_to_end: Option<EndToEnd>,
}

/// Run both steps at z = ε_at + g²ε⁽²⁾; `e_g`, when given, drives the
/// end-to-end eigenvector reconstruction.
pub fn run_two_step(
    ctx: &FlowContext,
    params: &FlowParameters,
    annulus: &ConeAnnulus,
    g: C64,
    e_g: Option<C64>,
) -> Result<FlowReport> {
    params.validate(ctx.mu)?;
    ctx.second.require_simple()?;
    let z = c(ctx.sys.eps_at) + g * g * ctx.second.eps2;
    let first = first_step_kernels(ctx, g, params.rho0, z, params.l_max, params.mn_max, params.xi)?;
    let first_oracle = first_step_oracle(ctx, &first)?;
    let first_bounds = first_step_bound_report(ctx, g, params.rho0, z, params.l_max, params.mn_max)?;
    let free = free_approximation_from(ctx, &first, true)?;
    let invertibility = second_step_invertibility(
        ctx.sys.eps_at,
        &ctx.second,
        &ctx.cutoff,
        g,
        params.rho0,
        params.rho1,
        z,
        params.delta0,
        ctx.sys.d_at,
        &first.window.basis,
    )?;
    let mut decomposition = second_step_decompose(&first.family, &ctx.second)?;
    let w00 = first.family.w00().expect("w00 present");
    decomposition.t_free = Some(t_free_kernel(ctx, g, params.rho0, z, &w00.r_grid, &w00.grid, true));
    let second = second_feshbach(&decomposition, &first.window.basis, ctx.cutoff, params, ctx.mu)?;
    let end_to_end = match e_g {
        Some(e) => Some(end_to_end_check(ctx, g, e, params)?),
        None => None,
    };
    Ok(FlowReport {
        params: *params,
        annulus: annulus.clone(),
        g,
        z,
        first,
        first_oracle,
        first_bounds,
        free,
        invertibility,
        decomposition,
        second,
        end_to_end,
    })
}

fn e(x: f64) -> String {
    format!("{:.6e}", x + 0.0)
}

impl FlowReport {
    /// One `[stage]` record per pipeline stage, `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let a = &self.annulus;
        let _ = writeln!(s, "[schedule]");
        let _ = writeln!(s, "rho0 = {}\nrho1 = {}\nepsilon = {}\nalpha = {}\ndelta0 = {}\nxi = {}", e(p.rho0), e(p.rho1), p.epsilon, p.alpha, p.delta0, p.xi);
        let _ = writeln!(s, "L_max = {}\nMN_max = {}", p.l_max, p.mn_max);
        let _ = writeln!(s, "g_lower = {}\ng_upper = {}\nc_delta0 = {}\nbinding = {}", e(a.g_lower), e(a.g_upper), e(a.c_delta0), a.binding);
        let _ = writeln!(s, "g = {} {}\nz = {} {}\n", e(self.g.re), e(self.g.im), e(self.z.re), e(self.z.im));

        let f = &self.first;
        let _ = writeln!(s, "[first_step]");
        let _ = writeln!(s, "criterion_ok = {}\ncriterion_margin = {}\nseries_margin = {}", f.criterion.ok, e(f.criterion.margin), e(f.series_margin));
        let _ = writeln!(s, "tail_bound = {}", e(f.tail_bound));
        let _ = writeln!(s, "radii = {} {} {}", e(f.radii.alpha), e(f.radii.beta), e(f.radii.gamma));
        let _ = writeln!(s, "polydisc_values = {} {} {}", e(f.polydisc.values[0]), e(f.polydisc.values[1]), e(f.polydisc.values[2]));
        let _ = writeln!(s, "polydisc_member = {}", f.polydisc.member);
        let _ = writeln!(s, "oracle_rel_error = {}", e(self.first_oracle));
        for ((m, n), v) in f.family.norm_contributions() {
            let _ = writeln!(s, "norm_w{m}{n} = {}", e(v));
        }
        let _ = writeln!(s);

        let b = &self.first_bounds;
        let _ = writeln!(s, "[first_step_bounds]");
        let worst = b.terms.iter().map(|t| if t.bound > 0.0 { t.computed / t.bound } else { 0.0 }).fold(0.0, f64::max);
        let _ = writeln!(s, "terms = {}\nworst_ratio = {}\nall_hold = {}", b.terms.len(), e(worst), b.all_hold);
        let _ = writeln!(s, "l1_indices = {:?}", b.l1_indices);
        let _ = writeln!(s, "resolvent_max = {} (bound {})", e(b.resolvent_max), e(b.c_f_hat));
        let _ = writeln!(s, "resolvent_deriv_max = {} (bound {})\n", e(b.resolvent_deriv_max), e(b.c_f));

        let _ = writeln!(s, "[free_approximation]");
        let _ = writeln!(s, "difference = {}\nscale = {}\nratio = {}\n", e(self.free.difference), e(self.free.scale), e(self.free.ratio));

        let iv = &self.invertibility;
        let _ = writeln!(s, "[invertibility]");
        let _ = writeln!(s, "small_g = {}\nscale_relation = {}\nz_in_disc = {}\ng_in_cone = {}", iv.small_g, iv.scale_relation, iv.z_in_disc, iv.g_in_cone);
        let _ = writeln!(s, "inverse_norm = {}\nbound = {}\nok = {}", iv.inverse_norm.map(e).unwrap_or_else(|| "none".into()), e(iv.bound), iv.ok);
        let _ = writeln!(s, "failed = {}\n", iv.failed.join("; "));

        let d = &self.decomposition;
        let _ = writeln!(s, "[decomposition]");
        let _ = writeln!(s, "tau0 = {}\ntau1 = {}\noffdiag_norm = {}", e(d.tau0), e(d.tau1), e(d.offdiag_norm));
        let off_ratio = d.offdiag_norm / p.rho0.powf(2.0 + 2.0 * p.epsilon);
        let _ = writeln!(s, "offdiag_over_rho0_pow = {}\n", e(off_ratio));

        let t = &self.second;
        let _ = writeln!(s, "[second_step]");
        let _ = writeln!(s, "t_inverse_norm = {} (bound {})\ncond_i = {}", e(t.t_inverse_norm), e(8.0 / t.rho1), t.cond_i);
        let _ = writeln!(s, "w_norm = {} (bound {})\ncond_ii = {}", e(t.w_norm), e(t.rho1 / 8.0), t.cond_ii);
        let _ = writeln!(s, "gamma = {}\ngamma_ok = {}", e(t.gamma), t.gamma_ok);
        let _ = writeln!(s, "reconstruction_rel_error = {}", e(t.reconstruction_error));
        let _ = writeln!(s, "contraction = {}", e(t.contraction));
        let _ = writeln!(s, "radii = {} {} {}", e(t.radii.alpha), e(t.radii.beta), e(t.radii.gamma));
        let _ = writeln!(s, "polydisc_values = {} {} {}", e(t.polydisc.values[0]), e(t.polydisc.values[1]), e(t.polydisc.values[2]));
        let _ = writeln!(s, "polydisc_member = {}", t.polydisc.member);
        let _ = writeln!(s, "term_bounds = {}\nterm_bounds_hold = {}\n", t.term_bounds.len(), t.term_bounds_hold);

        if let Some(x) = &self.end_to_end {
            let _ = writeln!(s, "[end_to_end]");
            let _ = writeln!(s, "E_g = {} {}\nsmin = {}\nresidual = {}\n", e(x.e_g.re), e(x.e_g.im), e(x.smin), e(x.residual));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feshbach::{make_cutoff, CutoffKind};
    use crate::model::{desk_spec, second_order_from_matrix};

    fn desk_ctx() -> FlowContext {
        FlowContext::new(&desk_spec().build().unwrap(), make_cutoff(CutoffKind::PolySmooth)).unwrap()
    }

    #[test]
    fn c_delta0_cases() {
        assert_eq!(c_delta0(PI / 6.0, 1.0).unwrap(), 1.0);
        assert!((c_delta0(3.0 * PI / 8.0, 1.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(c_delta0(PI / 2.0, 1.0).is_err());
        for d in [PI / 6.0, PI / 4.0 + 0.01, 3.0 * PI / 8.0] {
            assert!((c_delta0_sampled(d, 1.0) - c_delta0(d, 1.0).unwrap()).abs() < 1e-3);
        }
    }

    #[test]
    fn schedule_on_desk_model() {
        let ctx = desk_ctx();
        let n = ctx.schedule_norms();
        let mut last = f64::INFINITY;
        for rho0 in [0.15, 0.1, 0.05] {
            let (p, a) = parameter_schedule(rho0, 0.25, 0.25, PI / 6.0, 0.25, &n).unwrap();
            assert!((p.rho1 - rho0.powf(1.75)).abs() < 1e-15);
            let ratio = a.g_lower / a.g_upper;
            assert!(ratio < last);
            last = ratio;
        }
        assert!(parameter_schedule(0.1, 0.25, 0.25, PI / 2.0, 0.25, &n).is_err());
    }

    #[test]
    fn zero_coupling_gives_free_kernels() {
        let ctx = desk_ctx();
        let z = C64::new(0.01, 0.0);
        let f = first_step_kernels(&ctx, c(0.0), 0.15, z, 4, 2, 0.25).unwrap();
        let w = f.family.w00().unwrap();
        for (i, v) in w.values.iter().enumerate() {
            let r = w.r_grid[i];
            let want = (c(0.0) - z) / 0.15 + r;
            assert!((v - CMat::identity(2, 2) * want).norm() < 1e-13);
        }
        for (&(m, n), k) in &f.family.kernels {
            if m + n > 0 {
                assert!(k.values.iter().all(|v| v.norm() == 0.0));
            }
        }
        let fa = free_approximation_from(&ctx, &f, true).unwrap();
        assert!(fa.difference < 1e-13);
    }

    #[test]
    fn first_step_matches_direct_feshbach() {
        let ctx = desk_ctx();
        let g = c(0.5 * first_series_bound(&ctx, 0.15, 0.25).min(crate::feshbach::g_bound_1(&ctx.norms, 0.15)));
        let z = c(ctx.sys.eps_at);
        let f = first_step_kernels(&ctx, g, 0.15, z, 4, 2, 0.25).unwrap();
        let err = first_step_oracle(&ctx, &f).unwrap();
        assert!(err < 1e-7, "{err}");
        assert!(f.polydisc.member);
        let b = first_step_bound_report(&ctx, g, 0.15, z, 4, 2).unwrap();
        assert_eq!(b.l1_indices.len(), 2);
        assert!(b.l1_indices.contains(&(1, 0, 0, 0)) && b.l1_indices.contains(&(0, 0, 1, 0)));
        assert!(b.all_hold, "{:?}", b.terms.iter().filter(|t| !t.holds()).collect::<Vec<_>>());
        assert!(b.resolvent_max <= 5.0 + 1e-12);
    }

    #[test]
    fn free_approximation_is_second_order() {
        let ctx = desk_ctx();
        let z = c(ctx.sys.eps_at);
        let gs = [0.01, 0.02, 0.04];
        let d: Vec<f64> = gs.iter().map(|&g| free_approximation_error(&ctx, c(g), 0.15, z, 0.25, true).unwrap().difference).collect();
        let slope = (d[2] / d[0]).ln() / (gs[2] / gs[0] as f64).ln();
        assert!((slope - 2.0).abs() < 0.1, "{slope}");
        let rhos = [0.05, 0.2];
        let with: Vec<f64> = rhos.iter().map(|&r| free_approximation_error(&ctx, c(0.02), r, z, 0.25, true).unwrap().difference).collect();
        let without: Vec<f64> = rhos.iter().map(|&r| free_approximation_error(&ctx, c(0.02), r, z, 0.25, false).unwrap().difference).collect();
        let s_with = (with[1] / with[0]).ln() / 4f64.ln();
        let s_without = (without[1] / without[0]).ln() / 4f64.ln();
        assert!((s_without + 1.0).abs() < 0.1, "{s_without}");
        assert!(s_with > s_without + 0.5, "{s_with} {s_without}");
    }

    #[test]
    fn invertibility_gate_and_trend() {
        // Z with a unit gap, so the free approximation is well conditioned.
        let zz = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(-1.0), c(0.0)]));
        let second = second_order_from_matrix(zz, None);
        let cut = make_cutoff(CutoffKind::PolySmooth);
        let grid = ModeGrid::from_frequencies(&[0.2, 0.45, 0.9], &[0.1, 0.1, 0.1]).unwrap();
        let basis1 = FockBasis::build_windowed(&grid, 2, Some(1.0)).unwrap();
        let (rho0, rho1) = (0.2, 0.05);
        let g = c(0.14);
        let center = g * g * second.eps2;
        let rep = second_step_invertibility(0.0, &second, &cut, g, rho0, rho1, center, PI / 6.0, 1.0, &basis1).unwrap();
        assert!(rep.ok, "{rep:?}");
        let mut last = f64::INFINITY;
        for k in (0..5).rev() {
            let z = center + c(0.9 * rho0 * rho1 / 2.0 * k as f64 / 4.0);
            let r = second_step_invertibility(0.0, &second, &cut, g, rho0, rho1, z, PI / 6.0, 1.0, &basis1).unwrap();
            let n = r.inverse_norm.unwrap();
            assert!(r.ok && n <= last * (1.0 + 1e-12));
            last = n;
        }
        let gate = second_step_invertibility(0.0, &second, &cut, c(0.05), rho0, rho1, center, PI / 6.0, 1.0, &basis1).unwrap();
        assert!(!gate.scale_relation && gate.inverse_norm.is_none() && !gate.ok);
    }

    fn synthetic_second(seed: u64, scale: f64) -> (SecondStepDecomposition, FockBasis) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = ModeGrid::from_frequencies(&[0.1, 0.3, 0.7], &[0.05, 0.08, 0.1]).unwrap();
        let basis1 = FockBasis::build_windowed(&grid, 10, Some(1.0)).unwrap();
        let zz = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(-1.0), c(0.0)]));
        let second = second_order_from_matrix(zz, None);
        let rg = r_grid_for(&basis1);
        let a1 = rng.random_range(0.4..0.8);
        let s0 = rng.random_range(0.95..1.05);
        let mut fam = KernelFamily::new(1.0, 0.25, 2).unwrap();
        fam.insert(IntegralKernel::from_fn(0, 0, 2, &grid, rg.clone(), |r, _, _| {
            CMat::from_fn(2, 2, |i, j| match (i, j) {
                (0, 0) => c(s0 * r),
                (1, 1) => c(a1 + r),
                _ => c(scale * 0.1 * (1.0 + r)),
            })
        }))
        .unwrap();
        for (m, n) in [(1, 0), (0, 1), (1, 1)] {
            let mut k = crate::kernels::random_kernel(&mut rng, m, n, 2, &grid, rg.clone());
            for v in k.values.iter_mut() {
                *v = &*v * c(scale);
            }
            k.enforce_support();
            fam.insert(k).unwrap();
        }
        (second_step_decompose(&fam, &second).unwrap(), basis1)
    }

    #[test]
    fn second_step_matches_direct_and_polydisc() {
        let params = FlowParameters { rho0: 0.2, rho1: 0.4, epsilon: 0.25, alpha: 0.25, delta0: 0.5, xi: 0.25, l_max: 4, mn_max: 2 };
        for seed in 0..3 {
            let (dec, basis1) = synthetic_second(seed, 1e-11);
            let s = second_feshbach(&dec, &basis1, make_cutoff(CutoffKind::PolySmooth), &params, 1.0).unwrap();
            assert!(s.conditions_hold(), "{} {} {}", s.t_inverse_norm, s.w_norm, s.gamma);
            assert!(s.reconstruction_error < 1e-6, "{}", s.reconstruction_error);
            assert!(s.polydisc.member, "{:?} {:?}", s.polydisc, s.radii);
            assert!(s.term_bounds_hold);
        }
    }

    #[test]
    fn second_step_reconstruction_with_sizable_interaction() {
        let params = FlowParameters { rho0: 0.2, rho1: 0.4, epsilon: 0.25, alpha: 0.25, delta0: 0.5, xi: 0.25, l_max: 4, mn_max: 4 };
        // the window holds up to four bosons, so L = 2 already feeds M+N = 4
        let (dec, basis1) = synthetic_second(11, 1e-3);
        let s = second_feshbach(&dec, &basis1, make_cutoff(CutoffKind::PolySmooth), &params, 1.0).unwrap();
        assert!(s.contraction < 0.1);
        assert!(s.reconstruction_error < 1e-6, "{}", s.reconstruction_error);
    }

    #[test]
    fn second_step_without_interaction() {
        let params = FlowParameters { rho0: 0.2, rho1: 0.4, epsilon: 0.25, alpha: 0.25, delta0: 0.5, xi: 0.25, l_max: 3, mn_max: 2 };
        let (dec, basis1) = synthetic_second(7, 0.0);
        let s = second_feshbach(&dec, &basis1, make_cutoff(CutoffKind::PolySmooth), &params, 1.0).unwrap();
        assert!(s.reconstruction_error < 1e-12);
        assert_eq!(s.gamma, 0.0);
        assert_eq!((s.radii.alpha, s.radii.gamma), (0.0, 0.0));
        assert!(s.polydisc.member);
    }

    #[test]
    fn decomposition_reconstructs() {
        let (dec, _) = synthetic_second(3, 1e-3);
        let off = dec.w_int.w00().unwrap();
        let p = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0), c(0.0)]));
        for (t, o) in dec.t_part.values.iter().zip(&off.values) {
            let w = t + o;
            assert!((&p * t - t * &p).norm() < 1e-15);
            assert!((w[(0, 1)] - o[(0, 1)]).norm() == 0.0 && o[(0, 0)] == c(0.0));
        }
    }
}
