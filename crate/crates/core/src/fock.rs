//! Discrete bosonic modes, truncated occupation-number bases and the
//! second-quantized operators built on them.
//!
//! Product states of the atomic space ℂ^d and the Fock basis are indexed
//! atomic-major: `a * fock_dim + s`.

use crate::error::{Error, Result};
use crate::linalg;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

/// Environment variable overriding the dense dimension cap.
pub const DIM_CAP_ENV: &str = "SBRENORM_MAX_DIM";
pub const DEFAULT_DIM_CAP: usize = 20_000;

/// Energies closer than this are treated as equal (grid lookups, windows).
pub const ENERGY_TOL: f64 = 1e-12;

pub fn dim_cap() -> usize {
    std::env::var(DIM_CAP_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(DEFAULT_DIM_CAP)
}

pub fn check_dim(dim: usize) -> Result<()> {
    let cap = dim_cap();
    if dim > cap {
        return Err(Error::Resource(format!("dimension {dim} exceeds cap {cap} (set {DIM_CAP_ENV})")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub shell: usize,
    pub polarization: u8,
    pub frequency: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Midpoint,
    GaussLegendre,
    /// Geometric shells k_j = R 2^{-(J-j)+1/2}, one per octave.
    Dyadic,
    Custom,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Midpoint => "midpoint",
            Scheme::GaussLegendre => "gauss_legendre",
            Scheme::Dyadic => "dyadic",
            Scheme::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "midpoint" => Some(Scheme::Midpoint),
            "gauss_legendre" => Some(Scheme::GaussLegendre),
            "dyadic" => Some(Scheme::Dyadic),
            "custom" => Some(Scheme::Custom),
            _ => None,
        }
    }
}

/// Radial quadrature of ∫ dk over ℝ³ × {1,2}; the 4π|k|² factor and, for
/// folded grids, the polarization sum are part of the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeGrid {
    pub modes: Vec<Mode>,
    pub radius_max: f64,
    pub scheme: Scheme,
    pub shells: usize,
    /// 2 if each shell carries two polarization modes, 1 if folded.
    pub polarizations: u8,
}

fn shells_to_modes(nodes: &[(f64, f64)], polarizations: u8) -> Vec<Mode> {
    let mut modes = Vec::with_capacity(nodes.len() * polarizations as usize);
    for (j, &(k, w)) in nodes.iter().enumerate() {
        for p in 1..=polarizations {
            modes.push(Mode { shell: j, polarization: p, frequency: k, weight: w });
        }
    }
    modes
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Golub-Welsch).
pub fn gauss_legendre_nodes(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let se = j.symmetric_eigen();
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|i| (se.eigenvalues[i], 2.0 * se.eigenvectors[(0, i)].powi(2)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

impl ModeGrid {
    pub fn new(scheme: Scheme, shells: usize, radius: f64) -> Result<ModeGrid> {
        if shells == 0 || !(radius > 0.0) {
            return Err(Error::Config("grid needs at least one shell and a positive radius".into()));
        }
        let nodes: Vec<(f64, f64)> = match scheme {
            Scheme::Midpoint => {
                let h = radius / shells as f64;
                (0..shells)
                    .map(|j| {
                        let k = (j as f64 + 0.5) * h;
                        (k, 4.0 * PI * k * k * h)
                    })
                    .collect()
            }
            Scheme::GaussLegendre => gauss_legendre_nodes(shells)
                .into_iter()
                .map(|(x, w)| {
                    let k = 0.5 * radius * (x + 1.0);
                    (k, 0.5 * radius * w * 4.0 * PI * k * k)
                })
                .collect(),
            Scheme::Dyadic => (0..shells)
                .map(|j| {
                    let k = radius * 2f64.powi(j as i32 - shells as i32) * std::f64::consts::SQRT_2;
                    (k, 4.0 * PI * k.powi(3) * std::f64::consts::LN_2)
                })
                .collect(),
            Scheme::Custom => return Err(Error::Config("custom grids are built with from_frequencies".into())),
        };
        Ok(ModeGrid { modes: shells_to_modes(&nodes, 2), radius_max: radius, scheme, shells, polarizations: 2 })
    }

    /// Single-polarization grid with explicit frequencies and weights.
    pub fn from_frequencies(freqs: &[f64], weights: &[f64]) -> Result<ModeGrid> {
        if freqs.is_empty() || freqs.len() != weights.len() {
            return Err(Error::Config("frequency and weight lists must be nonempty and equal length".into()));
        }
        if freqs.windows(2).any(|w| !(w[0] < w[1])) || freqs.iter().chain(weights).any(|&x| !(x > 0.0)) {
            return Err(Error::Config("frequencies must be positive and strictly increasing, weights positive".into()));
        }
        let nodes: Vec<(f64, f64)> = freqs.iter().copied().zip(weights.iter().copied()).collect();
        Ok(ModeGrid {
            modes: shells_to_modes(&nodes, 1),
            radius_max: *freqs.last().unwrap(),
            scheme: Scheme::Custom,
            shells: freqs.len(),
            polarizations: 1,
        })
    }

    /// Merge the two polarizations of every shell into one mode of doubled
    /// weight. Exact for couplings that do not depend on the polarization:
    /// the antisymmetric combination then decouples from the atom.
    pub fn fold_polarizations(&self) -> ModeGrid {
        if self.polarizations == 1 {
            return self.clone();
        }
        let modes = self
            .modes
            .iter()
            .filter(|m| m.polarization == 1)
            .map(|m| Mode { weight: 2.0 * m.weight, ..*m })
            .collect();
        ModeGrid { modes, polarizations: 1, ..self.clone() }
    }

    /// Same scheme with twice the shells.
    pub fn refined(&self) -> Option<ModeGrid> {
        let g = match self.scheme {
            Scheme::Custom => return None,
            Scheme::Dyadic => {
                // refine the log spacing: half-octave shells covering the same range
                let n = 2 * self.shells;
                let nodes: Vec<(f64, f64)> = (0..n)
                    .map(|j| {
                        let k = self.radius_max * 2f64.powf((j as f64 - n as f64 + 0.5) / 2.0);
                        (k, 4.0 * PI * k.powi(3) * std::f64::consts::LN_2 / 2.0)
                    })
                    .collect();
                ModeGrid {
                    modes: shells_to_modes(&nodes, 2),
                    radius_max: self.radius_max,
                    scheme: Scheme::Dyadic,
                    shells: n,
                    polarizations: 2,
                }
            }
            s => ModeGrid::new(s, 2 * self.shells, self.radius_max).ok()?,
        };
        Some(if self.polarizations == 1 { g.fold_polarizations() } else { g })
    }

    /// Modes with frequency ≤ `kmax`.
    pub fn restrict(&self, kmax: f64) -> ModeGrid {
        let modes: Vec<Mode> = self.modes.iter().filter(|m| m.frequency <= kmax + ENERGY_TOL).copied().collect();
        ModeGrid { modes, radius_max: self.radius_max.min(kmax), ..self.clone() }
    }

    /// Momentum dilation k ↦ k/ρ with the Jacobian ρ^{-3} in the weights.
    pub fn dilate(&self, rho: f64) -> ModeGrid {
        let modes = self
            .modes
            .iter()
            .map(|m| Mode { frequency: m.frequency / rho, weight: m.weight / rho.powi(3), ..*m })
            .collect();
        ModeGrid { modes, radius_max: self.radius_max / rho, scheme: Scheme::Custom, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.frequency).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Quadrature Σ_q w_q f(ω_q).
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.modes.iter().map(|m| m.weight * f(m.frequency)).sum()
    }
}

/// Occupation-number basis with total boson number ≤ n_max, optionally
/// restricted to field energies ≤ e_max.
#[derive(Clone, Debug)]
pub struct FockBasis {
    pub grid: ModeGrid,
    pub mode_count: usize,
    pub n_max: usize,
    pub e_max: Option<f64>,
    pub states: Vec<Vec<u8>>,
    pub energies: Vec<f64>,
    pub numbers: Vec<usize>,
    index: HashMap<Vec<u8>, usize>,
    up: Vec<Vec<Option<usize>>>,
    down: Vec<Vec<Option<usize>>>,
    fingerprint: u64,
}

fn count_states(m: usize, n_max: usize) -> f64 {
    // Σ_j C(m+j-1, j) = C(m+n_max, n_max)
    let mut c = 1.0f64;
    for i in 1..=n_max {
        c = c * (m + i) as f64 / i as f64;
    }
    c
}

fn enumerate(m: usize, rem: usize, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if prefix.len() == m {
        out.push(prefix.clone());
        return;
    }
    for v in 0..=rem {
        prefix.push(v as u8);
        enumerate(m, rem - v, prefix, out);
        prefix.pop();
    }
}

pub fn state_energy(state: &[u8], freqs: &[f64]) -> f64 {
    let mut e = 0.0;
    for (n, w) in state.iter().zip(freqs) {
        if *n > 0 {
            e += *n as f64 * w;
        }
    }
    e
}

impl FockBasis {
    pub fn build(grid: &ModeGrid, n_max: usize) -> Result<FockBasis> {
        Self::build_windowed(grid, n_max, None)
    }

    pub fn build_windowed(grid: &ModeGrid, n_max: usize, e_max: Option<f64>) -> Result<FockBasis> {
        if grid.is_empty() && n_max > 0 {
            return Self::build_windowed(grid, 0, e_max);
        }
        if n_max > u8::MAX as usize {
            return Err(Error::Config("n_max above 255".into()));
        }
        let m = grid.len();
        let total = count_states(m, n_max);
        if e_max.is_none() && total > dim_cap() as f64 {
            return Err(Error::Resource(format!("Fock dimension {total} exceeds cap {}", dim_cap())));
        }
        if total > 50.0 * dim_cap() as f64 {
            return Err(Error::Resource(format!("Fock enumeration of {total} states refused")));
        }
        let freqs = grid.frequencies();
        let mut states = Vec::new();
        enumerate(m, n_max, &mut Vec::with_capacity(m), &mut states);
        if let Some(emax) = e_max {
            states.retain(|s| state_energy(s, &freqs) <= emax + ENERGY_TOL);
        }
        check_dim(states.len())?;
        let energies: Vec<f64> = states.iter().map(|s| state_energy(s, &freqs)).collect();
        let numbers: Vec<usize> = states.iter().map(|s| s.iter().map(|&n| n as usize).sum()).collect();
        let index: HashMap<Vec<u8>, usize> = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut up = vec![vec![None; m]; states.len()];
        let mut down = vec![vec![None; m]; states.len()];
        for (i, s) in states.iter().enumerate() {
            for q in 0..m {
                let mut t = s.clone();
                if t[q] < u8::MAX {
                    t[q] += 1;
                    up[i][q] = index.get(&t).copied();
                }
                if s[q] > 0 {
                    let mut t = s.clone();
                    t[q] -= 1;
                    down[i][q] = index.get(&t).copied();
                }
            }
        }
        let mut h = DefaultHasher::new();
        n_max.hash(&mut h);
        for f in &freqs {
            f.to_bits().hash(&mut h);
        }
        e_max.map(f64::to_bits).hash(&mut h);
        states.len().hash(&mut h);
        Ok(FockBasis {
            grid: grid.clone(),
            mode_count: m,
            n_max,
            e_max,
            states,
            energies,
            numbers,
            index,
            up,
            down,
            fingerprint: h.finish(),
        })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn index_of(&self, state: &[u8]) -> Option<usize> {
        self.index.get(state).copied()
    }

    /// Index of a_q† |s⟩ with its amplitude √(n_q+1), if inside the basis.
    pub fn raise(&self, s: usize, q: usize) -> Option<(usize, f64)> {
        self.up[s][q].map(|t| (t, ((self.states[s][q] as f64) + 1.0).sqrt()))
    }

    /// Index of a_q |s⟩ with amplitude √n_q.
    pub fn lower(&self, s: usize, q: usize) -> Option<(usize, f64)> {
        self.down[s][q].map(|t| (t, (self.states[s][q] as f64).sqrt()))
    }

    pub fn tag(&self, atomic_dim: usize) -> BasisTag {
        BasisTag { atomic_dim, fock_dim: self.dim(), fock: self.fingerprint }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BasisTag {
    pub atomic_dim: usize,
    pub fock_dim: usize,
    pub fock: u64,
}

impl BasisTag {
    pub fn dim(&self) -> usize {
        self.atomic_dim * self.fock_dim
    }
}

/// Dense operator on ℂ^d ⊗ (truncated Fock space).
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix {
    pub tag: BasisTag,
    pub mat: CMat,
}

impl OperatorMatrix {
    pub fn new(tag: BasisTag, mat: CMat) -> Result<Self> {
        if mat.nrows() != tag.dim() || mat.ncols() != tag.dim() {
            return Err(Error::Precondition(format!(
                "matrix {}x{} does not match basis dimension {}",
                mat.nrows(),
                mat.ncols(),
                tag.dim()
            )));
        }
        Ok(OperatorMatrix { tag, mat })
    }

    pub fn zeros(tag: BasisTag) -> Self {
        OperatorMatrix { tag, mat: CMat::zeros(tag.dim(), tag.dim()) }
    }

    pub fn identity(tag: BasisTag) -> Self {
        OperatorMatrix { tag, mat: CMat::identity(tag.dim(), tag.dim()) }
    }

    fn same(&self, o: &Self) -> Result<()> {
        if self.tag != o.tag {
            return Err(Error::Precondition(format!("basis mismatch: {:?} vs {:?}", self.tag, o.tag)));
        }
        Ok(())
    }

    pub fn compose(&self, o: &Self) -> Result<Self> {
        self.same(o)?;
        Ok(OperatorMatrix { tag: self.tag, mat: &self.mat * &o.mat })
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.same(o)?;
        Ok(OperatorMatrix { tag: self.tag, mat: &self.mat + &o.mat })
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.same(o)?;
        Ok(OperatorMatrix { tag: self.tag, mat: &self.mat - &o.mat })
    }

    pub fn scale(&self, c: C64) -> Self {
        OperatorMatrix { tag: self.tag, mat: &self.mat * c }
    }

    pub fn adjoint(&self) -> Self {
        OperatorMatrix { tag: self.tag, mat: self.mat.adjoint() }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn norm(&self) -> f64 {
        linalg::op_norm(&self.mat)
    }
}

fn check_mode(basis: &FockBasis, q: usize) -> Result<()> {
    if q >= basis.mode_count {
        return Err(Error::Precondition(format!("mode index {q} out of range ({} modes)", basis.mode_count)));
    }
    Ok(())
}

pub fn creation_op(basis: &FockBasis, q: usize) -> Result<OperatorMatrix> {
    check_mode(basis, q)?;
    let mut m = CMat::zeros(basis.dim(), basis.dim());
    for s in 0..basis.dim() {
        if let Some((t, amp)) = basis.raise(s, q) {
            m[(t, s)] = C64::new(amp, 0.0);
        }
    }
    OperatorMatrix::new(basis.tag(1), m)
}

pub fn annihilation_op(basis: &FockBasis, q: usize) -> Result<OperatorMatrix> {
    Ok(creation_op(basis, q)?.adjoint())
}

/// Diagonal f(H_f) on the Fock basis alone.
pub fn field_function(basis: &FockBasis, f: impl Fn(f64) -> f64) -> CMat {
    let mut m = CMat::zeros(basis.dim(), basis.dim());
    for (s, &e) in basis.energies.iter().enumerate() {
        m[(s, s)] = C64::new(f(e), 0.0);
    }
    m
}

pub fn field_energy_op(basis: &FockBasis) -> OperatorMatrix {
    OperatorMatrix { tag: basis.tag(1), mat: field_function(basis, |e| e) }
}

pub fn number_op(basis: &FockBasis) -> OperatorMatrix {
    let mut m = CMat::zeros(basis.dim(), basis.dim());
    for (s, &n) in basis.numbers.iter().enumerate() {
        m[(s, s)] = C64::new(n as f64, 0.0);
    }
    OperatorMatrix { tag: basis.tag(1), mat: m }
}

pub fn parity_op(basis: &FockBasis) -> OperatorMatrix {
    let mut m = CMat::zeros(basis.dim(), basis.dim());
    for (s, &n) in basis.numbers.iter().enumerate() {
        m[(s, s)] = C64::new(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0);
    }
    OperatorMatrix { tag: basis.tag(1), mat: m }
}

/// 1_d ⊗ A for a Fock-space operator A.
pub fn embed_field(a: &OperatorMatrix, d: usize) -> Result<OperatorMatrix> {
    if a.tag.atomic_dim != 1 {
        return Err(Error::Precondition("embed_field expects a pure Fock operator".into()));
    }
    let tag = BasisTag { atomic_dim: d, ..a.tag };
    check_dim(tag.dim())?;
    let f = a.tag.fock_dim;
    let mut m = CMat::zeros(tag.dim(), tag.dim());
    for i in 0..d {
        m.view_mut((i * f, i * f), (f, f)).copy_from(&a.mat);
    }
    Ok(OperatorMatrix { tag, mat: m })
}

/// h ⊗ 1_F for an atomic matrix h.
pub fn embed_atomic(h: &CMat, basis: &FockBasis) -> Result<OperatorMatrix> {
    let tag = basis.tag(h.nrows());
    check_dim(tag.dim())?;
    Ok(OperatorMatrix { tag, mat: linalg::kron_identity(h, basis.dim()) })
}

fn check_couplings(basis: &FockBasis, g_values: &[CMat], d: usize) -> Result<()> {
    if g_values.len() != basis.mode_count {
        return Err(Error::Precondition(format!(
            "{} coupling values for {} modes",
            g_values.len(),
            basis.mode_count
        )));
    }
    for (q, g) in g_values.iter().enumerate() {
        if g.nrows() != d || g.ncols() != d {
            return Err(Error::Precondition(format!("coupling on mode {q} is not {d}x{d}")));
        }
        if g.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical(format!("non-finite coupling value on mode {q}")));
        }
    }
    Ok(())
}

/// (a(G), a*(G)) with a(G) = Σ_q √w_q G(k_q)† ⊗ a_q.
pub fn smeared_ops(basis: &FockBasis, g_values: &[CMat], d: usize) -> Result<(OperatorMatrix, OperatorMatrix)> {
    check_couplings(basis, g_values, d)?;
    let tag = basis.tag(d);
    check_dim(tag.dim())?;
    let f = basis.dim();
    let mut a = CMat::zeros(tag.dim(), tag.dim());
    for (q, g) in g_values.iter().enumerate() {
        let sw = basis.grid.modes[q].weight.sqrt();
        for s in 0..f {
            if let Some((t, amp)) = basis.lower(s, q) {
                for i in 0..d {
                    for j in 0..d {
                        let gij = g[(j, i)].conj();
                        if gij != C64::new(0.0, 0.0) {
                            a[(i * f + t, j * f + s)] += gij * (sw * amp);
                        }
                    }
                }
            }
        }
    }
    let a_op = OperatorMatrix { tag, mat: a };
    let c_op = a_op.adjoint();
    Ok((a_op, c_op))
}

/// W = a*(ω^{-1/2}G) + a(ω^{-1/2}G).
pub fn interaction_op(basis: &FockBasis, g_values: &[CMat], d: usize) -> Result<OperatorMatrix> {
    if basis.grid.modes.iter().any(|m| !(m.frequency > 0.0)) {
        return Err(Error::Precondition("interaction needs positive frequencies".into()));
    }
    let scaled: Vec<CMat> = g_values
        .iter()
        .zip(&basis.grid.modes)
        .map(|(g, m)| g * C64::new(m.frequency.powf(-0.5), 0.0))
        .collect();
    let (a, c) = smeared_ops(basis, &scaled, d)?;
    a.add(&c)
}

/// max |(f(H_f)a_q† − a_q† f(H_f + ω_q))_{ts}| over columns s with fewer
/// than n_max bosons, where the truncation cannot interfere.
pub fn pull_through_check(basis: &FockBasis, f: impl Fn(f64) -> f64, q: usize) -> Result<f64> {
    let a = creation_op(basis, q)?.mat;
    let w = basis.grid.modes[q].frequency;
    let lhs = field_function(basis, &f) * &a;
    let rhs = &a * field_function(basis, |e| f(e + w));
    let mut worst = 0.0f64;
    for s in 0..basis.dim() {
        if basis.numbers[s] + 1 > basis.n_max {
            continue;
        }
        if let Some(emax) = basis.e_max {
            if basis.energies[s] + w > emax + ENERGY_TOL {
                continue;
            }
        }
        for t in 0..basis.dim() {
            worst = worst.max((lhs[(t, s)] - rhs[(t, s)]).norm());
        }
    }
    Ok(worst)
}

/// Result of one instance of an operator inequality `lhs ≤ rhs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + 1e-10) + 1e-14
    }

    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

fn grid_norm_sq(basis: &FockBasis, g_values: &[CMat], weight: impl Fn(f64) -> f64) -> f64 {
    g_values
        .iter()
        .zip(&basis.grid.modes)
        .map(|(g, m)| m.weight * weight(m.frequency) * linalg::op_norm(g).powi(2))
        .sum()
}

fn field_diag(basis: &FockBasis, d: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let one: Vec<f64> = basis.energies.iter().map(|&e| f(e)).collect();
    (0..d).flat_map(|_| one.iter().copied()).collect()
}

fn scale_cols(mut a: CMat, w: &[f64]) -> CMat {
    for (j, &x) in w.iter().enumerate() {
        a.column_mut(j).scale_mut(x);
    }
    a
}

fn scale_rows(mut a: CMat, w: &[f64]) -> CMat {
    for (i, &x) in w.iter().enumerate() {
        a.row_mut(i).scale_mut(x);
    }
    a
}

fn scaled_vec(v: &DVector<C64>, w: &[f64]) -> DVector<C64> {
    DVector::from_fn(v.len(), |i, _| v[i] * w[i])
}

/// ‖a(G) H_f^{-1/2}‖ (on H_f > 0) against ‖ω^{-1/2}G‖.
pub fn annihilation_bound(basis: &FockBasis, g_values: &[CMat], d: usize) -> Result<BoundCheck> {
    let (a, _) = smeared_ops(basis, g_values, d)?;
    let hinv = field_diag(basis, d, |e| if e > 0.0 { e.powf(-0.5) } else { 0.0 });
    let lhs = linalg::op_norm(&scale_cols(a.mat, &hinv));
    let rhs = grid_norm_sq(basis, g_values, |w| 1.0 / w).sqrt();
    Ok(BoundCheck { lhs, rhs })
}

/// ‖a*(G)(H_f+1)^{-1/2}‖ against ‖(ω^{-1}+1)^{1/2}G‖.
pub fn creation_bound(basis: &FockBasis, g_values: &[CMat], d: usize) -> Result<BoundCheck> {
    let (_, c) = smeared_ops(basis, g_values, d)?;
    let h = field_diag(basis, d, |e| (e + 1.0).powf(-0.5));
    let lhs = linalg::op_norm(&scale_cols(c.mat, &h));
    let rhs = grid_norm_sq(basis, g_values, |w| 1.0 / w + 1.0).sqrt();
    Ok(BoundCheck { lhs, rhs })
}

/// ‖a(G) 1_{H_f ≤ r}‖ against (Σ_{ω_q ≤ r} w_q‖G_q‖²/ω_q)^{1/2} r^{1/2}.
pub fn projection_bound(basis: &FockBasis, g_values: &[CMat], d: usize, r: f64) -> Result<BoundCheck> {
    let (a, _) = smeared_ops(basis, g_values, d)?;
    let p = field_diag(basis, d, |e| if e <= r { 1.0 } else { 0.0 });
    let lhs = linalg::op_norm(&scale_cols(a.mat, &p));
    let rhs = grid_norm_sq(basis, g_values, |w| if w <= r { 1.0 / w } else { 0.0 }).sqrt() * r.sqrt();
    Ok(BoundCheck { lhs, rhs })
}

/// ‖(H_f+ρ)^{-1/2} W (H_f+ρ)^{-1/2}‖ against 2‖ω^{-1}G‖ρ^{-1/2}, where W is
/// built from G via `interaction_op`.
pub fn interaction_form_bound(basis: &FockBasis, g_values: &[CMat], d: usize, rho: f64) -> Result<BoundCheck> {
    let w = interaction_op(basis, g_values, d)?;
    let h = field_diag(basis, d, |e| (e + rho).powf(-0.5));
    let lhs = linalg::op_norm(&scale_rows(scale_cols(w.mat, &h), &h));
    let rhs = 2.0 * grid_norm_sq(basis, g_values, |w| 1.0 / (w * w)).sqrt() / rho.sqrt();
    Ok(BoundCheck { lhs, rhs })
}

/// ‖a(G)v‖ and ‖ω^{-1/2}G‖·‖H_f^{1/2}v‖ for a given product-space vector.
pub fn annihilation_vector_bound(
    basis: &FockBasis,
    g_values: &[CMat],
    d: usize,
    v: &DVector<C64>,
) -> Result<BoundCheck> {
    let (a, _) = smeared_ops(basis, g_values, d)?;
    let lhs = linalg::vnorm(&(&a.mat * v));
    let hs = field_diag(basis, d, f64::sqrt);
    let rhs = grid_norm_sq(basis, g_values, |w| 1.0 / w).sqrt() * linalg::vnorm(&scaled_vec(v, &hs));
    Ok(BoundCheck { lhs, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn grid(freqs: &[f64]) -> ModeGrid {
        ModeGrid::from_frequencies(freqs, &vec![0.1; freqs.len()]).unwrap()
    }

    #[test]
    fn basis_sizes() {
        let b = FockBasis::build(&grid(&[0.5]), 0).unwrap();
        assert_eq!(b.states, vec![vec![0u8]]);
        let b = FockBasis::build(&grid(&[0.2, 0.5]), 1).unwrap();
        assert_eq!(b.states, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
        assert_eq!(b.index_of(&[0, 0]), Some(0));
        let b = FockBasis::build(&grid(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), 3).unwrap();
        // independent count: vectors of 6 entries in 0..=3 with sum ≤ 3
        let mut n = 0;
        for code in 0..4usize.pow(6) {
            let mut x = code;
            let mut s = 0;
            for _ in 0..6 {
                s += x % 4;
                x /= 4;
            }
            if s <= 3 {
                n += 1;
            }
        }
        assert_eq!(b.dim(), n);
        assert_eq!(b.dim(), 84);
        assert!(b.states.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn dimension_cap_is_resource_error() {
        let g = ModeGrid::new(Scheme::Midpoint, 20, 1.0).unwrap();
        let e = FockBasis::build(&g, 8).unwrap_err();
        assert!(matches!(e, Error::Resource(_)));
    }

    #[test]
    fn creation_matrix_elements() {
        let b = FockBasis::build(&grid(&[0.5]), 1).unwrap();
        let a = creation_op(&b, 0).unwrap().mat;
        assert_eq!(a[(1, 0)], c(1.0));
        assert_eq!(a[(0, 1)], c(0.0));
        assert_eq!(a.column(1).iter().map(|z| z.norm()).sum::<f64>(), 0.0);
        let b = FockBasis::build(&grid(&[0.5]), 3).unwrap();
        let a = creation_op(&b, 0).unwrap().mat;
        assert!((a[(2, 1)].re - 2f64.sqrt()).abs() < 1e-15);
        assert!(creation_op(&b, 1).is_err());
    }

    #[test]
    fn field_energy_diagonal() {
        let b = FockBasis::build(&grid(&[0.2, 0.5]), 2).unwrap();
        let h = field_energy_op(&b).mat;
        assert_eq!(h[(0, 0)], c(0.0));
        let i = b.index_of(&[1, 0]).unwrap();
        assert_eq!(h[(i, i)], c(0.2));
        let i = b.index_of(&[1, 1]).unwrap();
        assert!((h[(i, i)].re - 0.7).abs() < 1e-15);
    }

    #[test]
    fn smeared_vacuum_action() {
        let g = ModeGrid::from_frequencies(&[0.4], &[0.3]).unwrap();
        let b = FockBasis::build(&g, 2).unwrap();
        let cval = C64::new(0.7, -0.2);
        let gv = vec![CMat::from_element(1, 1, cval)];
        let (a, ad) = smeared_ops(&b, &gv, 1).unwrap();
        let mut omega = DVector::zeros(b.dim());
        omega[0] = c(1.0);
        assert_eq!(linalg::vnorm(&(&a.mat * &omega)), 0.0);
        let v = &ad.mat * &omega;
        let one = b.index_of(&[1]).unwrap();
        assert!((v[one] - cval * 0.3f64.sqrt()).norm() < 1e-15);
    }

    #[test]
    fn smeared_expectation_is_quadrature_sum() {
        let g = ModeGrid::from_frequencies(&[0.2, 0.5, 0.9], &[0.1, 0.2, 0.4]).unwrap();
        let b = FockBasis::build(&g, 2).unwrap();
        let gv: Vec<CMat> =
            [0.3, -1.1, 0.6].iter().map(|&x| CMat::from_element(1, 1, C64::new(x, 0.5 * x))).collect();
        let (a, ad) = smeared_ops(&b, &gv, 1).unwrap();
        let m = &a.mat * &ad.mat;
        let direct: f64 = g.modes.iter().zip(&gv).map(|(md, g)| md.weight * g[(0, 0)].norm_sqr()).sum();
        assert!((m[(0, 0)].re - direct).abs() < 1e-14);
    }

    #[test]
    fn interaction_single_mode_element() {
        let g = ModeGrid::from_frequencies(&[0.36], &[0.25]).unwrap();
        let b = FockBasis::build(&g, 1).unwrap();
        let w = interaction_op(&b, &[CMat::from_element(1, 1, c(1.5))], 1).unwrap();
        assert!((w.mat[(1, 0)].re - 0.5 * 1.5 / 0.6).abs() < 1e-15);
        let zero = interaction_op(&b, &[CMat::zeros(1, 1)], 1).unwrap();
        assert_eq!(linalg::fro(&zero.mat), 0.0);
    }

    #[test]
    fn parity_anticommutes_with_interaction() {
        let g = ModeGrid::new(Scheme::Midpoint, 3, 1.0).unwrap().fold_polarizations();
        let b = FockBasis::build(&g, 3).unwrap();
        let gv: Vec<CMat> = (0..3)
            .map(|q| CMat::from_fn(2, 2, |i, j| C64::new((q + i) as f64 * 0.3, j as f64 * 0.2 - 0.1)))
            .collect();
        let w = interaction_op(&b, &gv, 2).unwrap();
        assert!(linalg::is_hermitian(&w.mat, 1e-15));
        let p = embed_field(&parity_op(&b), 2).unwrap();
        let conj = p.compose(&w).unwrap().compose(&p).unwrap();
        assert!(linalg::fro(&(conj.mat + &w.mat)) < 1e-14);
        assert_eq!(parity_op(&b).mat[(0, 0)], c(1.0));
    }

    #[test]
    fn pull_through_examples() {
        let g = ModeGrid::new(Scheme::Midpoint, 6, 1.0).unwrap().fold_polarizations();
        let b = FockBasis::build(&g, 3).unwrap();
        for q in 0..6 {
            assert_eq!(pull_through_check(&b, |_| 1.0, q).unwrap(), 0.0);
            assert!(pull_through_check(&b, |r| r, q).unwrap() < 1e-15);
            assert!(pull_through_check(&b, |r| (-3.0 * r).exp(), q).unwrap() < 1e-14);
        }
    }

    #[test]
    fn composition_rejects_mismatched_tags() {
        let b1 = FockBasis::build(&grid(&[0.5]), 1).unwrap();
        let b2 = FockBasis::build(&grid(&[0.5]), 2).unwrap();
        let e = field_energy_op(&b1).compose(&field_energy_op(&b2)).unwrap_err();
        assert!(matches!(e, Error::Precondition(_)));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let g = ModeGrid::new(Scheme::GaussLegendre, 5, 1.0).unwrap();
        // ∫_{|k|≤1} |k|^2 d^3k × 2 polarizations = 2·4π/5
        let v = g.integrate(|k| k * k);
        assert!((v - 8.0 * PI / 5.0).abs() < 1e-12);
    }

    #[test]
    fn dyadic_grid_is_self_similar() {
        let g = ModeGrid::new(Scheme::Dyadic, 5, 1.0).unwrap().fold_polarizations();
        for j in 1..5 {
            assert_eq!(g.modes[j].frequency * 0.5, g.modes[j - 1].frequency);
            assert_eq!(g.modes[j].weight * 0.125, g.modes[j - 1].weight);
        }
    }

    proptest! {
        #[test]
        fn ccr_on_interior(n_modes in 1usize..4, n_max in 1usize..4, seed in 0u64..1000) {
            let freqs: Vec<f64> = (0..n_modes).map(|i| 0.1 + 0.17 * i as f64 + (seed % 7) as f64 * 0.01).collect();
            let b = FockBasis::build(&grid(&freqs), n_max).unwrap();
            for q in 0..n_modes {
                let a = annihilation_op(&b, q).unwrap().mat;
                let cq = creation_op(&b, q).unwrap().mat;
                prop_assert_eq!(&a, &cq.adjoint());
                for p in 0..n_modes {
                    let ap = creation_op(&b, p).unwrap().mat;
                    let comm = &a * &ap - &ap * &a;
                    for s in 0..b.dim() {
                        if b.numbers[s] + 1 > n_max { continue; }
                        for t in 0..b.dim() {
                            let expect = if p == q && s == t { 1.0 } else { 0.0 };
                            prop_assert!((comm[(t, s)] - C64::new(expect, 0.0)).norm() < 1e-13);
                        }
                    }
                }
            }
        }

        #[test]
        fn annihilation_vector_estimate(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = ModeGrid::new(Scheme::Midpoint, 3, 1.0).unwrap().fold_polarizations();
            let b = FockBasis::build(&g, 2).unwrap();
            let gv: Vec<CMat> = (0..3).map(|_| CMat::from_fn(2, 2, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))).collect();
            let mut v = DVector::from_fn(2 * b.dim(), |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            v[0] = c(0.0);
            v[b.dim()] = c(0.0);
            let chk = annihilation_vector_bound(&b, &gv, 2, &v).unwrap();
            prop_assert!(chk.holds(), "{:?}", chk);
        }
    }
}
