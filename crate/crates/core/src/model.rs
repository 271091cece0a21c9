//! Atomic system, coupling functions, the assembled Hamiltonian and the
//! second-order operator on the atomic ground eigenspace.

use crate::error::{Error, Result};
use crate::fock::{self, CMat, FockBasis, ModeGrid, OperatorMatrix, Scheme, C64};
use crate::kv::{fmt_f64, fmt_list, KvDoc, Section};
use crate::linalg::{self, c};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

/// Eigenvalues closer than this (relative) count as one atomic level.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Relative gap between the two lowest eigenvalues of Z_at below which the
/// lowest one is treated as degenerate.
pub const SIMPLICITY_TOL: f64 = 1e-6;
/// Relative change of Z_at under grid doubling that counts as non-convergence.
pub const Z_REFINEMENT_TOL: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct AtomicSystem {
    pub d: usize,
    pub h_at: CMat,
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors, ordered like `eigenvalues`.
    pub eigenvectors: CMat,
    pub eps_at: f64,
    pub p_at: CMat,
    pub d0: usize,
    pub d_at: f64,
    /// Orthonormal basis of Ran P_at (d × d0), from pivoted Gram-Schmidt on
    /// the columns of P_at so that it does not depend on the eigensolver.
    pub ground_basis: CMat,
    /// Energies of this system times `scale` are energies of the original.
    pub scale: f64,
}

fn pivoted_gram_schmidt(p: &CMat, rank: usize) -> CMat {
    let d = p.nrows();
    let mut cols: Vec<nalgebra::DVector<C64>> = (0..d).map(|j| p.column(j).into_owned()).collect();
    let mut used = vec![false; d];
    let mut out = CMat::zeros(d, rank);
    for k in 0..rank {
        let mut best = None;
        let mut best_norm = -1.0;
        for j in 0..d {
            if used[j] {
                continue;
            }
            let n = linalg::vnorm(&cols[j]);
            if n > best_norm * (1.0 + 1e-12) {
                best_norm = n;
                best = Some(j);
            }
        }
        let j = best.unwrap();
        used[j] = true;
        let v = &cols[j] / c(best_norm);
        for (i, col) in cols.iter_mut().enumerate() {
            if !used[i] {
                let proj = v.dotc(col);
                *col -= &v * proj;
            }
        }
        out.set_column(k, &v);
    }
    out
}

impl AtomicSystem {
    pub fn new(h_at: CMat) -> Result<AtomicSystem> {
        let d = h_at.nrows();
        if d == 0 || h_at.ncols() != d {
            return Err(Error::Config("atomic Hamiltonian must be a nonempty square matrix".into()));
        }
        if !linalg::is_hermitian(&h_at, 1e-12) {
            return Err(Error::Config("atomic Hamiltonian is not Hermitian".into()));
        }
        let (eigenvalues, eigenvectors) = linalg::eigh(&h_at);
        let eps_at = eigenvalues[0];
        let tol = DEGENERACY_TOL * eps_at.abs().max(1.0);
        let d0 = eigenvalues.iter().take_while(|&&e| e - eps_at <= tol).count();
        let d_at = if d0 < d { eigenvalues[d0] - eps_at } else { 0.0 };
        let mut p_at = CMat::zeros(d, d);
        for i in 0..d0 {
            let v = eigenvectors.column(i);
            p_at += &v * v.adjoint();
        }
        let ground_basis = pivoted_gram_schmidt(&p_at, d0);
        Ok(AtomicSystem { d, h_at, eigenvalues, eigenvectors, eps_at, p_at, d0, d_at, ground_basis, scale: 1.0 })
    }

    /// Rescale so that the distance from ε_at to the rest of the spectrum is 1.
    pub fn normalize_gap(&self) -> Result<AtomicSystem> {
        if !(self.d_at > 0.0) {
            return Err(Error::Precondition("atomic spectrum has no gap above the ground energy".into()));
        }
        let f = 1.0 / self.d_at;
        let mut out = AtomicSystem::new(&self.h_at * c(f))?;
        out.scale = self.scale * self.d_at;
        Ok(out)
    }

    pub fn p_bar(&self) -> CMat {
        CMat::identity(self.d, self.d) - &self.p_at
    }

    pub fn is_normalized(&self) -> bool {
        (self.d_at - 1.0).abs() < 1e-12
    }

    /// Σ_i v_i v_i† ⊗ diag_s f(i, e_i, E_s) over the atomic eigenbasis.
    pub fn functional(&self, basis: &FockBasis, f: impl Fn(usize, f64, f64) -> C64) -> CMat {
        let nf = basis.dim();
        let n = self.d * nf;
        let mut out = CMat::zeros(n, n);
        for i in 0..self.d {
            let v = self.eigenvectors.column(i);
            let outer = &v * v.adjoint();
            for (s, &e) in basis.energies.iter().enumerate() {
                let val = f(i, self.eigenvalues[i], e);
                if val == C64::new(0.0, 0.0) {
                    continue;
                }
                for a in 0..self.d {
                    for b in 0..self.d {
                        let o = outer[(a, b)];
                        if o != C64::new(0.0, 0.0) {
                            out[(a * nf + s, b * nf + s)] += o * val;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn is_ground_index(&self, i: usize) -> bool {
        i < self.d0
    }
}

pub type CustomCoupling = Arc<dyn Fn(f64, u8) -> CMat + Send + Sync>;

#[derive(Clone)]
pub enum CouplingKind {
    /// G(k) = |k|^σ A for |k| ≤ cutoff, zero beyond.
    PowerLaw { sigma: f64, cutoff: f64, amplitude: CMat },
    Zero,
    Custom(CustomCoupling),
}

impl std::fmt::Debug for CouplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CouplingKind::PowerLaw { sigma, cutoff, amplitude } => f
                .debug_struct("PowerLaw")
                .field("sigma", sigma)
                .field("cutoff", cutoff)
                .field("amplitude", amplitude)
                .finish(),
            CouplingKind::Zero => write!(f, "Zero"),
            CouplingKind::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingFunction {
    pub kind: CouplingKind,
    pub mu: f64,
    pub d: usize,
}

impl CouplingFunction {
    pub fn power_law(sigma: f64, cutoff: f64, amplitude: CMat, mu: f64) -> Self {
        let d = amplitude.nrows();
        CouplingFunction { kind: CouplingKind::PowerLaw { sigma, cutoff, amplitude }, mu, d }
    }

    pub fn zero(d: usize, mu: f64) -> Self {
        CouplingFunction { kind: CouplingKind::Zero, mu, d }
    }

    pub fn custom(d: usize, mu: f64, f: CustomCoupling) -> Self {
        CouplingFunction { kind: CouplingKind::Custom(f), mu, d }
    }

    pub fn eval(&self, k: f64, polarization: u8) -> CMat {
        match &self.kind {
            CouplingKind::PowerLaw { sigma, cutoff, amplitude } => {
                if k <= *cutoff {
                    amplitude * c(k.powf(*sigma))
                } else {
                    CMat::zeros(self.d, self.d)
                }
            }
            CouplingKind::Zero => CMat::zeros(self.d, self.d),
            CouplingKind::Custom(f) => f(k, polarization),
        }
    }

    pub fn on_grid(&self, grid: &ModeGrid) -> Result<Vec<CMat>> {
        grid.modes
            .iter()
            .map(|m| {
                let g = self.eval(m.frequency, m.polarization);
                if g.nrows() != self.d || g.ncols() != self.d {
                    return Err(Error::Precondition("coupling evaluator returned wrong dimension".into()));
                }
                if g.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(Error::Numerical(format!("coupling not finite at |k| = {}", m.frequency)));
                }
                Ok(g)
            })
            .collect()
    }

    /// ∫ (|k|^{-3-2μ} + 1)‖G‖² dk in closed form, when available.
    pub fn closed_form_mu_literal(&self) -> Option<f64> {
        match &self.kind {
            CouplingKind::PowerLaw { sigma, cutoff, amplitude } => {
                let a2 = linalg::op_norm(amplitude).powi(2);
                let e1 = 2.0 * sigma - 2.0 * self.mu;
                if e1 <= 0.0 {
                    return Some(f64::INFINITY);
                }
                let e2 = 2.0 * sigma + 3.0;
                Some(8.0 * PI * a2 * (cutoff.powf(e1) / e1 + cutoff.powf(e2) / e2))
            }
            CouplingKind::Zero => Some(0.0),
            CouplingKind::Custom(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingNorms {
    /// ∫ (|k|^{-3-2μ} + 1)‖G(k)‖² dk as written.
    pub mu_literal: f64,
    /// Its square root; this is the variant that multiplies other norms.
    pub mu_sqrt: f64,
    pub ominv: f64,
    pub ominvhalf: f64,
    pub l2: f64,
    /// `mu_literal` on the grid and two successive refinements.
    pub refinement: Option<[f64; 3]>,
    pub closed_form: Option<f64>,
    pub converged: bool,
}

impl CouplingNorms {
    pub fn require_finite(&self) -> Result<()> {
        if !self.converged || !self.mu_literal.is_finite() {
            return Err(Error::Precondition("coupling norm ‖G‖_μ does not converge under refinement".into()));
        }
        Ok(())
    }
}

fn grid_norms(g: &CouplingFunction, grid: &ModeGrid) -> Result<(f64, f64, f64, f64)> {
    let vals = g.on_grid(grid)?;
    let (mut lit, mut om1, mut om2, mut l2) = (0.0, 0.0, 0.0, 0.0);
    for (m, gv) in grid.modes.iter().zip(&vals) {
        let n2 = linalg::op_norm(gv).powi(2);
        let k = m.frequency;
        lit += m.weight * (k.powf(-3.0 - 2.0 * g.mu) + 1.0) * n2;
        om1 += m.weight * n2 / (k * k);
        om2 += m.weight * n2 / k;
        l2 += m.weight * n2;
    }
    Ok((lit, om1.sqrt(), om2.sqrt(), l2.sqrt()))
}

pub fn coupling_norms(g: &CouplingFunction, quad: &ModeGrid) -> Result<CouplingNorms> {
    if !(g.mu > 0.0) {
        return Err(Error::Precondition("infrared index μ must be positive".into()));
    }
    let (lit, ominv, ominvhalf, l2) = grid_norms(g, quad)?;
    let mut refinement = None;
    let mut converged = lit.is_finite();
    if let Some(r1) = quad.refined() {
        let r2 = r1.refined().expect("refinable scheme");
        let v1 = grid_norms(g, &r1)?.0;
        let v2 = grid_norms(g, &r2)?.0;
        let d1 = (v1 - lit).abs();
        let d2 = (v2 - v1).abs();
        converged = converged && (d2 <= 0.9 * d1 + 1e-12 * v2.abs() || d1 == 0.0);
        refinement = Some([lit, v1, v2]);
    }
    Ok(CouplingNorms {
        mu_literal: lit,
        mu_sqrt: lit.sqrt(),
        ominv,
        ominvhalf,
        l2,
        refinement,
        closed_form: g.closed_form_mu_literal(),
        converged,
    })
}

#[derive(Clone, Debug)]
pub struct SecondOrderData {
    /// Z_at in the basis `AtomicSystem::ground_basis` (d0 × d0).
    pub z_at: CMat,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
    pub eps2: f64,
    /// Projection onto the lowest eigenvector of `z_at` (d0 × d0).
    pub p2: CMat,
    pub simple: bool,
    pub norm_z: f64,
    pub refinement_change: Option<f64>,
}

impl SecondOrderData {
    pub fn require_simple(&self) -> Result<()> {
        if !self.simple {
            return Err(Error::Precondition(format!(
                "lowest eigenvalue of Z_at is not simple (eigenvalues {:?})",
                self.eigenvalues
            )));
        }
        Ok(())
    }

    pub fn p2_bar(&self) -> CMat {
        let n = self.p2.nrows();
        CMat::identity(n, n) - &self.p2
    }

    pub fn gap(&self) -> f64 {
        if self.eigenvalues.len() > 1 {
            self.eigenvalues[1] - self.eigenvalues[0]
        } else {
            f64::INFINITY
        }
    }
}

fn z_matrix(sys: &AtomicSystem, g: &CouplingFunction, grid: &ModeGrid) -> Result<CMat> {
    let vals = g.on_grid(grid)?;
    let b = &sys.ground_basis;
    let mut z = CMat::zeros(sys.d0, sys.d0);
    for (m, gv) in grid.modes.iter().zip(&vals) {
        let w = m.frequency;
        let mut r = &sys.p_at * c(1.0 / w);
        for i in sys.d0..sys.d {
            let v = sys.eigenvectors.column(i);
            r += (&v * v.adjoint()) * c(1.0 / (sys.eigenvalues[i] - sys.eps_at + w));
        }
        let gb = gv * b;
        z -= gb.adjoint() * r * gb * c(m.weight / w);
    }
    Ok((&z + z.adjoint()) * c(0.5))
}

pub fn second_order_from_matrix(z: CMat, refinement_change: Option<f64>) -> SecondOrderData {
    let (vals, vecs) = linalg::eigh(&z);
    let d0 = vals.len();
    let v0 = vecs.column(0).into_owned();
    let p2 = &v0 * v0.adjoint();
    let simple = if d0 == 1 {
        true
    } else {
        let gap = vals[1] - vals[0];
        gap > 0.0 && gap >= SIMPLICITY_TOL * vals[0].abs().max(vals[1].abs())
    };
    let norm_z = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    SecondOrderData { eps2: vals[0], z_at: z, eigenvalues: vals, eigenvectors: vecs, p2, simple, norm_z, refinement_change }
}

pub fn compute_z_at(sys: &AtomicSystem, g: &CouplingFunction, quad: &ModeGrid) -> Result<SecondOrderData> {
    if g.d != sys.d {
        return Err(Error::Precondition("coupling and atomic dimensions differ".into()));
    }
    let z = z_matrix(sys, g, quad)?;
    let mut change = None;
    if let Some(r) = quad.refined() {
        let zr = z_matrix(sys, g, &r)?;
        let nz = linalg::fro(&zr);
        if nz > 0.0 {
            let rel = linalg::fro(&(&zr - &z)) / nz;
            if rel > Z_REFINEMENT_TOL {
                return Err(Error::Numerical(format!("Z_at changes by {rel:.3e} under grid refinement")));
            }
            change = Some(rel);
        }
    }
    Ok(second_order_from_matrix(z, change))
}

pub fn free_hamiltonian(sys: &AtomicSystem, basis: &FockBasis) -> Result<OperatorMatrix> {
    let hat = fock::embed_atomic(&sys.h_at, basis)?;
    let hf = fock::embed_field(&fock::field_energy_op(basis), sys.d)?;
    hat.add(&hf)
}

/// H_g = H_at ⊗ 1 + 1 ⊗ H_f + g W.
pub fn assemble_hamiltonian(
    sys: &AtomicSystem,
    g_fn: &CouplingFunction,
    basis: &FockBasis,
    g: C64,
) -> Result<OperatorMatrix> {
    if g_fn.d != sys.d {
        return Err(Error::Precondition("coupling and atomic dimensions differ".into()));
    }
    let w = fock::interaction_op(basis, &g_fn.on_grid(&basis.grid)?, sys.d)?;
    free_hamiltonian(sys, basis)?.add(&w.scale(g))
}

/// −(B⊗Ω)† W (H_0 − ε_at)^{-1} W (B⊗Ω) with the inverse taken off
/// Ran(P_at ⊗ P_Ω), computed on the truncated Fock space.
pub fn second_order_on_fock(sys: &AtomicSystem, g_fn: &CouplingFunction, basis: &FockBasis) -> Result<CMat> {
    let w = fock::interaction_op(basis, &g_fn.on_grid(&basis.grid)?, sys.d)?.mat;
    let res = sys.functional(basis, |i, e, ef| {
        if sys.is_ground_index(i) && ef == 0.0 {
            c(0.0)
        } else {
            c(1.0 / (e - sys.eps_at + ef))
        }
    });
    let nf = basis.dim();
    let mut bo = CMat::zeros(sys.d * nf, sys.d0);
    for j in 0..sys.d0 {
        for a in 0..sys.d {
            bo[(a * nf, j)] = sys.ground_basis[(a, j)];
        }
    }
    let z = -(bo.adjoint() * &w * res * &w * bo);
    Ok((&z + z.adjoint()) * c(0.5))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    PowerLaw { sigma: f64, cutoff: f64, amplitude: CMat },
    Zero,
}

/// Contents of a model definition file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub h_at: CMat,
    pub family: Family,
    pub mu: f64,
    pub scheme: Scheme,
    pub shells: usize,
    pub radius: f64,
    pub fold_polarizations: bool,
    pub n_max: usize,
}

/// Everything derived from a `ModelSpec`.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub sys: AtomicSystem,
    pub coupling: CouplingFunction,
    pub grid: ModeGrid,
}

fn mat_parts(m: &CMat) -> (Vec<f64>, Vec<f64>) {
    let mut re = Vec::new();
    let mut im = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            re.push(m[(i, j)].re);
            im.push(m[(i, j)].im);
        }
    }
    (re, im)
}

fn mat_from(sec: &Section, d: usize, re_key: &str, im_key: &str) -> Result<CMat> {
    let re = sec.f64_list(re_key)?;
    let im = if sec.has(im_key) { sec.f64_list(im_key)? } else { vec![0.0; d * d] };
    if re.len() != d * d || im.len() != d * d {
        return Err(Error::Config(format!("[{}] {re_key}/{im_key} need {} entries", sec.name, d * d)));
    }
    Ok(CMat::from_fn(d, d, |i, j| C64::new(re[i * d + j], im[i * d + j])))
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<ModelSpec> {
        let doc = KvDoc::parse(text)?;
        doc.check_keys(&[
            ("atomic", &["dim", "h_re", "h_im"]),
            ("coupling", &["family", "mu", "sigma", "cutoff", "a_re", "a_im"]),
            ("grid", &["scheme", "shells", "radius", "polarizations"]),
            ("fock", &["n_max"]),
        ])?;
        let at = Section::of(&doc, "atomic");
        let d = at.usize("dim")?;
        if d == 0 {
            return Err(Error::Config("[atomic] dim must be positive".into()));
        }
        let h_at = mat_from(&at, d, "h_re", "h_im")?;
        let cp = Section::of(&doc, "coupling");
        let mu = cp.f64("mu")?;
        let family = match cp.req("family")? {
            "power_law" => Family::PowerLaw {
                sigma: cp.f64("sigma")?,
                cutoff: cp.f64("cutoff")?,
                amplitude: mat_from(&cp, d, "a_re", "a_im")?,
            },
            "zero" => Family::Zero,
            other => return Err(Error::Config(format!("unknown coupling family {other:?}"))),
        };
        let gr = Section::of(&doc, "grid");
        let scheme = Scheme::parse(gr.req("scheme")?)
            .ok_or_else(|| Error::Config(format!("unknown grid scheme {:?}", gr.req("scheme").unwrap_or_default())))?;
        let fold_polarizations = match gr.raw("polarizations") {
            None => false,
            Some(toml::Value::Integer(2)) => false,
            Some(toml::Value::String(s)) if s == "folded" => true,
            Some(other) => return Err(Error::Config(format!("polarizations must be 2 or \"folded\", got {other}"))),
        };
        let spec = ModelSpec {
            h_at,
            family,
            mu,
            scheme,
            shells: gr.usize("shells")?,
            radius: gr.f64("radius")?,
            fold_polarizations,
            n_max: Section::of(&doc, "fock").usize("n_max")?,
        };
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = self.h_at.nrows();
        let (re, im) = mat_parts(&self.h_at);
        let _ = writeln!(s, "[atomic]\ndim = {d}\nh_re = {}\nh_im = {}\n", fmt_list(&re), fmt_list(&im));
        let _ = writeln!(s, "[coupling]");
        match &self.family {
            Family::PowerLaw { sigma, cutoff, amplitude } => {
                let (re, im) = mat_parts(amplitude);
                let _ = writeln!(
                    s,
                    "family = \"power_law\"\nmu = {}\nsigma = {}\ncutoff = {}\na_re = {}\na_im = {}",
                    fmt_f64(self.mu),
                    fmt_f64(*sigma),
                    fmt_f64(*cutoff),
                    fmt_list(&re),
                    fmt_list(&im)
                );
            }
            Family::Zero => {
                let _ = writeln!(s, "family = \"zero\"\nmu = {}", fmt_f64(self.mu));
            }
        }
        let _ = writeln!(
            s,
            "\n[grid]\nscheme = \"{}\"\nshells = {}\nradius = {}\npolarizations = {}\n\n[fock]\nn_max = {}",
            self.scheme.name(),
            self.shells,
            fmt_f64(self.radius),
            if self.fold_polarizations { "\"folded\"" } else { "2" },
            self.n_max
        );
        s
    }

    pub fn build(&self) -> Result<Model> {
        let sys = AtomicSystem::new(self.h_at.clone())?.normalize_gap()?;
        let d = self.h_at.nrows();
        let coupling = match &self.family {
            Family::PowerLaw { sigma, cutoff, amplitude } => {
                CouplingFunction::power_law(*sigma, *cutoff, amplitude.clone(), self.mu)
            }
            Family::Zero => CouplingFunction::zero(d, self.mu),
        };
        let mut grid = ModeGrid::new(self.scheme, self.shells, self.radius)?;
        if self.fold_polarizations {
            grid = grid.fold_polarizations();
        }
        Ok(Model { spec: self.clone(), sys, coupling, grid })
    }
}

/// Reference desk model: h_at = diag(0,0,1), a Λ-type amplitude coupling
/// both ground states to the excited level with weights 1 and 1/2, and
/// G(k) = |k|^{7/4} A (μ = 1), six midpoint shells, n_max = 3.
pub fn desk_spec() -> ModelSpec {
    let a = 1.97e-4;
    let mut amp = CMat::zeros(3, 3);
    amp[(2, 0)] = c(a);
    amp[(0, 2)] = c(a);
    amp[(2, 1)] = c(0.5 * a);
    amp[(1, 2)] = c(0.5 * a);
    let mut h = CMat::zeros(3, 3);
    h[(2, 2)] = c(1.0);
    ModelSpec {
        h_at: h,
        family: Family::PowerLaw { sigma: 1.75, cutoff: 1.0, amplitude: amp },
        mu: 1.0,
        scheme: Scheme::Midpoint,
        shells: 6,
        radius: 1.0,
        fold_polarizations: true,
        n_max: 3,
    }
}
