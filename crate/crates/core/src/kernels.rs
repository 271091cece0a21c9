//! Matrix-valued integral kernels w_{m,n}(r; K), their norms, the operators
//! H(w), dilations, and normal ordering of operator products.
//!
//! Discrete convention: H_{m,n}(w) = P_red Σ_K Π_q (√w_q ω_q^{-1/2})
//! a†(k_1)…a†(k_m) w(H_f; K) a(k̃_1)…a(k̃_n) P_red, the sum running over
//! ordered tuples of grid modes and P_red = 1[H_f ≤ 1].

use crate::error::{Error, Result};
use crate::fock::{state_energy, CMat, FockBasis, ModeGrid, OperatorMatrix, Scheme, C64, ENERGY_TOL};
use crate::kv::{fmt_f64, parse_f64};
use crate::linalg::{self, c};
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Node-matching tolerance on the r axis.
pub const R_TOL: f64 = 1e-12;
/// Intervals of the default uniform r grid.
pub const R_UNIFORM: usize = 64;
/// Largest product length accepted by the normal-ordering engine.
pub const WICK_L_CAP: usize = 8;

/// Uniform grid on [0,1] merged with `extra` points (clamped to [0,1]).
pub fn r_grid_with(extra: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = (0..=R_UNIFORM).map(|i| i as f64 / R_UNIFORM as f64).collect();
    v.extend(extra.into_iter().filter(|&e| (0.0..=1.0 + R_TOL).contains(&e)).map(|e| e.min(1.0)));
    sort_dedup(v)
}

pub fn sort_dedup(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    let mut out: Vec<f64> = Vec::with_capacity(v.len());
    for x in v {
        if out.last().map_or(true, |&l| x - l > R_TOL) {
            out.push(x);
        }
    }
    out
}

/// r grid containing every field energy of `basis` in [0,1].
pub fn r_grid_for(basis: &FockBasis) -> Vec<f64> {
    r_grid_with(basis.energies.iter().copied())
}

enum Loc {
    Node(usize),
    Between(usize, f64),
}

fn locate(grid: &[f64], r: f64) -> Loc {
    let i = grid.partition_point(|&x| x < r - R_TOL);
    if i < grid.len() && (grid[i] - r).abs() <= R_TOL {
        return Loc::Node(i);
    }
    if i == 0 {
        return Loc::Node(0);
    }
    if i == grid.len() {
        return Loc::Node(grid.len() - 1);
    }
    Loc::Between(i - 1, (r - grid[i - 1]) / (grid[i] - grid[i - 1]))
}

/// Anything that can be evaluated as w_{m,n}(r; K, K̃), with K and K̃ given
/// as mode indices of an agreed grid.
pub trait KernelEval: Send + Sync {
    fn degree(&self) -> (usize, usize);
    fn dim(&self) -> usize;
    fn eval(&self, r: f64, creat: &[usize], annih: &[usize]) -> CMat;
}

pub type KernelFn = Arc<dyn Fn(f64, &[usize], &[usize]) -> CMat + Send + Sync>;

/// Kernel given by a closure.
#[derive(Clone)]
pub struct FnKernel {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub f: KernelFn,
}

impl KernelEval for FnKernel {
    fn degree(&self) -> (usize, usize) {
        (self.m, self.n)
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn eval(&self, r: f64, creat: &[usize], annih: &[usize]) -> CMat {
        (self.f)(r, creat, annih)
    }
}

/// All ordered tuples of length `len` over `modes` symbols, lexicographic.
pub fn tuples(len: usize, modes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..modes).map(move |q| {
                    let mut t = t.clone();
                    t.push(q);
                    t
                })
            })
            .collect();
    }
    out
}

fn split_index(mut idx: usize, len: usize, modes: usize) -> Vec<usize> {
    let mut t = vec![0; len];
    for slot in t.iter_mut().rev() {
        *slot = idx % modes;
        idx /= modes;
    }
    t
}

fn join_index(t: &[usize], modes: usize) -> usize {
    t.iter().fold(0, |acc, &q| acc * modes + q)
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn distinct_perms(t: &[usize]) -> Vec<Vec<usize>> {
    let mut s = t.to_vec();
    s.sort_unstable();
    let mut out = vec![s.clone()];
    while next_permutation(&mut s) {
        out.push(s.clone());
    }
    out
}

/// Average over permutations of the creation and of the annihilation
/// arguments. Orbits that are already constant are left untouched, which
/// makes the operation idempotent bit for bit.
pub fn symmetrize_values(values: &[CMat], m: usize, n: usize, modes: usize, nr: usize) -> Vec<CMat> {
    let total = modes.pow((m + n) as u32);
    let mut out = values.to_vec();
    let mut done = vec![false; total];
    for ti in 0..total {
        if done[ti] {
            continue;
        }
        let t = split_index(ti, m + n, modes);
        let orbit: Vec<usize> = distinct_perms(&t[..m])
            .iter()
            .flat_map(|cp| {
                distinct_perms(&t[m..]).into_iter().map(move |ap| {
                    let mut all = cp.clone();
                    all.extend(ap);
                    all
                })
            })
            .map(|u| join_index(&u, modes))
            .collect();
        for ri in 0..nr {
            let first = &values[orbit[0] * nr + ri];
            if orbit.iter().all(|&o| values[o * nr + ri] == *first) {
                continue;
            }
            let mut acc = CMat::zeros(first.nrows(), first.ncols());
            for &o in &orbit {
                acc += &values[o * nr + ri];
            }
            acc /= c(orbit.len() as f64);
            for &o in &orbit {
                out[o * nr + ri] = acc.clone();
            }
        }
        for &o in &orbit {
            done[o] = true;
        }
    }
    out
}

/// Tabulated kernel w_{m,n} on an r grid and the ordered mode tuples of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralKernel {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub grid: ModeGrid,
    pub r_grid: Vec<f64>,
    /// Row `tuple * r_grid.len() + r_index`; the tuple lists the m creation
    /// modes followed by the n annihilation modes, base `grid.len()`.
    pub values: Vec<CMat>,
    /// ∂_r w on the same layout; centered differences are used when absent.
    pub deriv_values: Option<Vec<CMat>>,
    pub symmetric: bool,
}

impl IntegralKernel {
    pub fn zeros(m: usize, n: usize, d: usize, grid: &ModeGrid, r_grid: Vec<f64>) -> Self {
        let count = grid.len().pow((m + n) as u32) * r_grid.len();
        IntegralKernel {
            m,
            n,
            d,
            grid: grid.clone(),
            r_grid,
            values: vec![CMat::zeros(d, d); count],
            deriv_values: None,
            symmetric: true,
        }
    }

    pub fn from_fn(
        m: usize,
        n: usize,
        d: usize,
        grid: &ModeGrid,
        r_grid: Vec<f64>,
        f: impl Fn(f64, &[usize], &[usize]) -> CMat,
    ) -> Self {
        let mut k = Self::zeros(m, n, d, grid, r_grid);
        for ti in 0..k.tuple_count() {
            let t = k.tuple(ti);
            for ri in 0..k.r_grid.len() {
                k.values[ti * k.r_grid.len() + ri] = f(k.r_grid[ri], &t[..m], &t[m..]);
            }
        }
        k.symmetric = k.is_symmetric(1e-12);
        k
    }

    pub fn tuple_count(&self) -> usize {
        self.grid.len().pow((self.m + self.n) as u32)
    }

    pub fn tuple(&self, ti: usize) -> Vec<usize> {
        split_index(ti, self.m + self.n, self.grid.len())
    }

    pub fn index(&self, creat: &[usize], annih: &[usize]) -> usize {
        let modes = self.grid.len();
        join_index(annih, modes) + join_index(creat, modes) * modes.pow(self.n as u32)
    }

    pub fn value(&self, ti: usize, ri: usize) -> &CMat {
        &self.values[ti * self.r_grid.len() + ri]
    }

    fn interp(&self, table: &[CMat], r: f64, ti: usize) -> CMat {
        let nr = self.r_grid.len();
        match locate(&self.r_grid, r) {
            Loc::Node(i) => table[ti * nr + i].clone(),
            Loc::Between(i, t) => &table[ti * nr + i] * c(1.0 - t) + &table[ti * nr + i + 1] * c(t),
        }
    }

    /// Derivative table: stored values or centered differences on the
    /// (possibly nonuniform) r grid.
    pub fn derivative_table(&self) -> Vec<CMat> {
        if let Some(d) = &self.deriv_values {
            return d.clone();
        }
        let nr = self.r_grid.len();
        let r = &self.r_grid;
        let mut out = vec![CMat::zeros(self.d, self.d); self.values.len()];
        if nr < 2 {
            return out;
        }
        for ti in 0..self.tuple_count() {
            let v = &self.values[ti * nr..(ti + 1) * nr];
            for i in 0..nr {
                out[ti * nr + i] = if i == 0 {
                    (&v[1] - &v[0]) / c(r[1] - r[0])
                } else if i == nr - 1 {
                    (&v[i] - &v[i - 1]) / c(r[i] - r[i - 1])
                } else {
                    // three-point formula, second order on nonuniform grids
                    let (h0, h1) = (r[i] - r[i - 1], r[i + 1] - r[i]);
                    &v[i + 1] * c(h0 / (h1 * (h0 + h1))) - &v[i - 1] * c(h1 / (h0 * (h0 + h1)))
                        + &v[i] * c((h1 - h0) / (h0 * h1))
                };
            }
        }
        out
    }

    pub fn eval_deriv(&self, r: f64, creat: &[usize], annih: &[usize]) -> CMat {
        let table = self.derivative_table();
        self.interp(&table, r, self.index(creat, annih))
    }

    pub fn sums(&self, ti: usize) -> (f64, f64) {
        let t = self.tuple(ti);
        let f = |q: &usize| self.grid.modes[*q].frequency;
        (t[..self.m].iter().map(f).sum(), t[self.m..].iter().map(f).sum())
    }

    /// Support condition: w = 0 wherever r > 1 − max(Σk, Σk̃).
    pub fn support_ok(&self) -> bool {
        let nr = self.r_grid.len();
        (0..self.tuple_count()).all(|ti| {
            let (a, b) = self.sums(ti);
            (0..nr).all(|ri| self.r_grid[ri] + a.max(b) <= 1.0 + R_TOL || self.values[ti * nr + ri].iter().all(|z| *z == c(0.0)))
        })
    }

    pub fn enforce_support(&mut self) {
        let nr = self.r_grid.len();
        for ti in 0..self.tuple_count() {
            let (a, b) = self.sums(ti);
            for ri in 0..nr {
                if self.r_grid[ri] + a.max(b) > 1.0 + R_TOL {
                    self.values[ti * nr + ri].fill(c(0.0));
                    if let Some(d) = &mut self.deriv_values {
                        d[ti * nr + ri].fill(c(0.0));
                    }
                }
            }
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let sym = symmetrize_values(&self.values, self.m, self.n, self.grid.len(), self.r_grid.len());
        sym.iter().zip(&self.values).all(|(a, b)| linalg::fro(&(a - b)) <= tol * linalg::fro(b).max(1.0))
    }

    pub fn symmetrize(&self) -> IntegralKernel {
        let (modes, nr) = (self.grid.len(), self.r_grid.len());
        IntegralKernel {
            values: symmetrize_values(&self.values, self.m, self.n, modes, nr),
            deriv_values: self.deriv_values.as_ref().map(|d| symmetrize_values(d, self.m, self.n, modes, nr)),
            symmetric: true,
            ..self.clone()
        }
    }

    pub fn scaled(&self, z: C64) -> IntegralKernel {
        IntegralKernel {
            values: self.values.iter().map(|v| v * z).collect(),
            deriv_values: self.deriv_values.as_ref().map(|d| d.iter().map(|v| v * z).collect()),
            ..self.clone()
        }
    }

    /// Sum of two kernels on identical grids.
    pub fn plus(&self, o: &IntegralKernel) -> Result<IntegralKernel> {
        if (self.m, self.n, self.d) != (o.m, o.n, o.d) || self.r_grid != o.r_grid || self.grid != o.grid {
            return Err(Error::Precondition("kernels live on different grids".into()));
        }
        let deriv = match (&self.deriv_values, &o.deriv_values) {
            (None, None) => None,
            _ => Some(self.derivative_table().iter().zip(o.derivative_table()).map(|(a, b)| a + b).collect()),
        };
        Ok(IntegralKernel {
            values: self.values.iter().zip(&o.values).map(|(a, b)| a + b).collect(),
            deriv_values: deriv,
            symmetric: self.symmetric && o.symmetric,
            ..self.clone()
        })
    }

    /// Π_q w_q over the tuple and |K| = Π_q ω_q.
    fn measure(&self, ti: usize) -> (f64, f64) {
        self.tuple(ti).iter().fold((1.0, 1.0), |(w, k), &q| {
            let md = &self.grid.modes[q];
            (w * md.weight, k * md.frequency)
        })
    }
}

impl KernelEval for IntegralKernel {
    fn degree(&self) -> (usize, usize) {
        (self.m, self.n)
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn eval(&self, r: f64, creat: &[usize], annih: &[usize]) -> CMat {
        self.interp(&self.values, r, self.index(creat, annih))
    }
}

fn norm_of_table(k: &IntegralKernel, table: &[CMat], mu: f64) -> f64 {
    let nr = k.r_grid.len();
    let sup = |ti: usize| table[ti * nr..(ti + 1) * nr].iter().map(linalg::op_norm).fold(0.0, f64::max);
    if k.m + k.n == 0 {
        return sup(0);
    }
    (0..k.tuple_count())
        .map(|ti| {
            let (w, kk) = k.measure(ti);
            let s = sup(ti);
            if s == 0.0 {
                0.0
            } else {
                w / kk.powf(3.0 + 2.0 * mu) * s * s
            }
        })
        .sum::<f64>()
        .sqrt()
}

/// ‖w‖_μ = (Σ_K Π w_q |K|^{-3-2μ} sup_r ‖w(r,K)‖²)^{1/2}; sup norm for m = n = 0.
pub fn norm_mu(k: &IntegralKernel, mu: f64) -> f64 {
    norm_of_table(k, &k.values, mu)
}

/// ‖w‖_μ + ‖∂_r w‖_μ (the C¹ norm when m = n = 0).
pub fn norm_mu_sharp(k: &IntegralKernel, mu: f64) -> f64 {
    norm_mu(k, mu) + norm_of_table(k, &k.derivative_table(), mu)
}

/// The weighted norm
/// (Σ_K Π w_q |K|^{-2} sup_r ‖w‖² Π_l (r + Σ_{i≤l} k_i) Π_l (r + Σ_{i≤l} k̃_i))^{1/2},
/// which dominates ‖H_{m,n}(w)‖.
pub fn norm_sharp(k: &IntegralKernel) -> f64 {
    let nr = k.r_grid.len();
    (0..k.tuple_count())
        .map(|ti| {
            let t = k.tuple(ti);
            let (w, kk) = k.measure(ti);
            let f = |q: usize| k.grid.modes[q].frequency;
            let sup = (0..nr)
                .map(|ri| {
                    let r = k.r_grid[ri];
                    let mut weight = 1.0;
                    for part in [&t[..k.m], &t[k.m..]] {
                        let mut acc = r;
                        for &q in part {
                            acc += f(q);
                            weight *= acc;
                        }
                    }
                    linalg::op_norm(&k.values[ti * nr + ri]).powi(2) * weight
                })
                .fold(0.0, f64::max);
            w / (kk * kk) * sup
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelFamily {
    pub kernels: BTreeMap<(usize, usize), IntegralKernel>,
    pub mu: f64,
    pub xi: f64,
    pub d: usize,
}

impl KernelFamily {
    pub fn new(mu: f64, xi: f64, d: usize) -> Result<KernelFamily> {
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::Precondition(format!("ξ = {xi} outside (0,1)")));
        }
        Ok(KernelFamily { kernels: BTreeMap::new(), mu, xi, d })
    }

    pub fn insert(&mut self, k: IntegralKernel) -> Result<()> {
        if k.d != self.d {
            return Err(Error::Precondition(format!("kernel dimension {} in a family of dimension {}", k.d, self.d)));
        }
        if let Some(other) = self.kernels.values().next() {
            if other.grid != k.grid {
                return Err(Error::Precondition("family members must share the mode grid".into()));
            }
        }
        self.kernels.insert((k.m, k.n), k);
        Ok(())
    }

    pub fn get(&self, m: usize, n: usize) -> Option<&IntegralKernel> {
        self.kernels.get(&(m, n))
    }

    pub fn w00(&self) -> Option<&IntegralKernel> {
        self.get(0, 0)
    }

    /// (m,n) ↦ weighted contribution to the family norm.
    pub fn norm_contributions(&self) -> Vec<((usize, usize), f64)> {
        self.kernels
            .iter()
            .map(|(&(m, n), k)| {
                let v = norm_mu_sharp(k, self.mu);
                ((m, n), if m + n == 0 { v } else { self.xi.powi(-((m + n) as i32)) * v })
            })
            .collect()
    }

    /// Σ_{m+n≥1} ξ^{-(m+n)} ‖w_{m,n}‖_μ^#.
    pub fn interaction_norm(&self) -> f64 {
        self.norm_contributions().into_iter().filter(|((m, n), _)| m + n > 0).map(|(_, v)| v).sum()
    }

    pub fn without_w00(&self) -> KernelFamily {
        let mut f = self.clone();
        f.kernels.remove(&(0, 0));
        f
    }
}

/// ‖w_{0,0}‖_{C¹} + Σ_{m+n≥1} ξ^{-(m+n)} ‖w_{m,n}‖_μ^#.
pub fn norm_family(f: &KernelFamily) -> f64 {
    f.norm_contributions().into_iter().map(|(_, v)| v).sum()
}

/// Matrix of H_{m,n}(w) on ℂ^d ⊗ F, with `basis.grid` the kernel's grid.
pub fn h_mn_matrix(k: &dyn KernelEval, basis: &FockBasis) -> CMat {
    let (m, n) = k.degree();
    let d = k.dim();
    let nf = basis.dim();
    let modes = basis.grid.len();
    let fac: Vec<f64> = basis.grid.modes.iter().map(|md| (md.weight / md.frequency).sqrt()).collect();
    let ann = tuples(n, modes);
    let cre = tuples(m, modes);
    let inside = |s: usize| basis.energies[s] <= 1.0 + ENERGY_TOL;
    let entries: Vec<(usize, usize, CMat)> = (0..nf)
        .into_par_iter()
        .filter(|&s| inside(s))
        .flat_map_iter(|s| {
            let mut out = Vec::new();
            for a in &ann {
                let mut u = s;
                let mut amp = 1.0;
                let mut ok = true;
                for &q in a {
                    match basis.lower(u, q) {
                        Some((t, x)) => {
                            u = t;
                            amp *= x * fac[q];
                        }
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                let r = basis.energies[u];
                for cr in &cre {
                    let mut t = u;
                    let mut amp2 = amp;
                    let mut ok = true;
                    for &q in cr {
                        match basis.raise(t, q) {
                            Some((v, x)) => {
                                t = v;
                                amp2 *= x * fac[q];
                            }
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok || !inside(t) {
                        continue;
                    }
                    let v = k.eval(r, cr, a);
                    out.push((t, s, v * c(amp2)));
                }
            }
            out
        })
        .collect();
    let mut mat = CMat::zeros(d * nf, d * nf);
    for (t, s, v) in entries {
        for i in 0..d {
            for j in 0..d {
                mat[(i * nf + t, j * nf + s)] += v[(i, j)];
            }
        }
    }
    mat
}

fn same_grid(a: &ModeGrid, b: &ModeGrid) -> bool {
    a.len() == b.len()
        && a.modes.iter().zip(&b.modes).all(|(x, y)| x.frequency == y.frequency && x.weight == y.weight)
}

/// H(w) = Σ_{m,n} H_{m,n}(w_{m,n}) on the basis built from the family's grid.
pub fn kernel_to_operator(f: &KernelFamily, basis: &FockBasis) -> Result<OperatorMatrix> {
    let tag = basis.tag(f.d);
    crate::fock::check_dim(tag.dim())?;
    let mut mat = CMat::zeros(tag.dim(), tag.dim());
    for k in f.kernels.values() {
        if !same_grid(&k.grid, &basis.grid) {
            return Err(Error::Precondition("kernel grid differs from the basis grid".into()));
        }
        mat += h_mn_matrix(k, basis);
    }
    Ok(OperatorMatrix { tag, mat })
}

/// For each mode, the index of the mode at frequency ρ·k (same
/// polarization, weight scaled by ρ³), or None when ρ·k lies below the grid.
pub fn mode_image(grid: &ModeGrid, rho: f64) -> Result<Vec<Option<usize>>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Precondition(format!("ρ = {rho} outside (0,1]")));
    }
    let kmin = grid.modes.iter().map(|m| m.frequency).fold(f64::INFINITY, f64::min);
    grid.modes
        .iter()
        .map(|md| {
            let target = rho * md.frequency;
            let hit = grid.modes.iter().position(|o| {
                o.polarization == md.polarization && (o.frequency - target).abs() <= 1e-12 * md.frequency
            });
            match hit {
                Some(i) if (grid.modes[i].weight - rho.powi(3) * md.weight).abs() <= 1e-12 * md.weight => Ok(Some(i)),
                None if target < kmin * (1.0 - 1e-12) => Ok(None),
                _ => Err(Error::Precondition(format!("grid is not compatible with dilation by ρ = {rho}"))),
            }
        })
        .collect()
}

/// Γ_ρ on the Fock factor: the occupation of mode j moves to the mode at
/// frequency k_j/ρ; columns whose image leaves the basis are zero.
pub fn dilation_op(basis: &FockBasis, rho: f64) -> Result<CMat> {
    let image = mode_image(&basis.grid, rho)?;
    let mut up = vec![None; basis.grid.len()];
    for (j, im) in image.iter().enumerate() {
        if let Some(i) = im {
            up[*i] = Some(j);
        }
    }
    let nf = basis.dim();
    let mut gamma = CMat::zeros(nf, nf);
    'states: for s in 0..nf {
        let mut target = vec![0u8; basis.grid.len()];
        for (i, &occ) in basis.states[s].iter().enumerate() {
            if occ > 0 {
                match up[i] {
                    Some(j) => target[j] = occ,
                    None => continue 'states,
                }
            }
        }
        if let Some(t) = basis.index_of(&target) {
            gamma[(t, s)] = c(1.0);
        }
    }
    Ok(gamma)
}

/// S_ρ(A) = ρ^{-1} Γ_ρ A Γ_ρ† with Γ_ρ acting on the Fock factor.
pub fn dilate_operator(a: &OperatorMatrix, gamma: &CMat, rho: f64) -> OperatorMatrix {
    let d = a.tag.atomic_dim;
    let nf = a.tag.fock_dim;
    let mut g = CMat::zeros(d * nf, d * nf);
    for i in 0..d {
        g.view_mut((i * nf, i * nf), (nf, nf)).copy_from(gamma);
    }
    OperatorMatrix { tag: a.tag, mat: &g * &a.mat * g.adjoint() * c(1.0 / rho) }
}

/// s_ρ(w)(r, K) = ρ^{m+n−1} w(ρr, ρK) on the same grids, cut back to the
/// support; arguments whose image falls below the grid give zero.
pub fn scale_kernel(f: &KernelFamily, rho: f64) -> Result<KernelFamily> {
    let mut out = KernelFamily::new(f.mu, f.xi, f.d)?;
    for k in f.kernels.values() {
        let image = mode_image(&k.grid, rho)?;
        let nr = k.r_grid.len();
        let pow = rho.powi((k.m + k.n) as i32 - 1);
        let deriv = k.derivative_table();
        let mut s = IntegralKernel::zeros(k.m, k.n, k.d, &k.grid, k.r_grid.clone());
        let mut ds = vec![CMat::zeros(k.d, k.d); s.values.len()];
        for ti in 0..k.tuple_count() {
            let t = k.tuple(ti);
            let mapped: Option<Vec<usize>> = t.iter().map(|&q| image[q]).collect();
            let Some(mt) = mapped else { continue };
            let src = k.index(&mt[..k.m], &mt[k.m..]);
            for ri in 0..nr {
                let r = rho * k.r_grid[ri];
                s.values[ti * nr + ri] = k.interp(&k.values, r, src) * c(pow);
                ds[ti * nr + ri] = k.interp(&deriv, r, src) * c(pow * rho);
            }
        }
        s.deriv_values = k.deriv_values.as_ref().map(|_| ds);
        s.symmetric = k.symmetric;
        // entries with 1 < r + ΣK ≤ 1/ρ are invisible under P_red
        s.enforce_support();
        out.insert(s)?;
    }
    Ok(out)
}

pub type MatFn = Arc<dyn Fn(f64) -> CMat + Send + Sync>;

/// F_0(H_f) H(w^1) F_1(H_f) ⋯ H(w^L) F_L(H_f), each H(w^l) given by its
/// kernel components. Kernels must be symmetric in their creation and in
/// their annihilation arguments.
pub struct WickProblem<'a> {
    /// Grid of the contracted and external modes.
    pub grid: &'a ModeGrid,
    pub d: usize,
    pub factors: Vec<Vec<&'a dyn KernelEval>>,
    pub f: Vec<MatFn>,
}

/// Choice of kernel component and split into external (m, n) and
/// contracted (p, q) arguments for one factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TermPart {
    pub comp: usize,
    pub m: usize,
    pub p: usize,
    pub n: usize,
    pub q: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WickTerm {
    pub parts: Vec<TermPart>,
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl WickTerm {
    pub fn external(&self) -> (usize, usize) {
        self.parts.iter().fold((0, 0), |(a, b), p| (a + p.m, b + p.n))
    }

    /// Π_l C(m_l+p_l, p_l) C(n_l+q_l, q_l).
    pub fn binomial(&self) -> f64 {
        self.parts.iter().map(|p| binom(p.m + p.p, p.p) * binom(p.n + p.q, p.q)).product()
    }

    /// Contracted arguments can be paired: scanning right to left, every
    /// contracted annihilator meets a boson created further right.
    pub fn feasible(&self) -> bool {
        let mut pool = 0usize;
        for p in self.parts.iter().rev() {
            if p.q > pool {
                return false;
            }
            pool = pool - p.q + p.p;
        }
        pool == 0
    }
}

impl<'a> WickProblem<'a> {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.factors.len() > WICK_L_CAP {
            return Err(Error::Precondition(format!("product length must be in 1..={WICK_L_CAP}")));
        }
        if self.f.len() != self.factors.len() + 1 {
            return Err(Error::Precondition("need L+1 resolvent functions for L factors".into()));
        }
        if self.factors.iter().flatten().any(|k| k.dim() != self.d) {
            return Err(Error::Precondition("kernel dimension mismatch".into()));
        }
        Ok(())
    }

    /// Terms with M external creators and N external annihilators.
    pub fn terms(&self, big_m: usize, big_n: usize) -> Vec<WickTerm> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        self.terms_rec(0, big_m, big_n, &mut cur, &mut out);
        out
    }

    fn terms_rec(&self, l: usize, rm: usize, rn: usize, cur: &mut Vec<TermPart>, out: &mut Vec<WickTerm>) {
        if l == self.factors.len() {
            if rm == 0 && rn == 0 {
                let t = WickTerm { parts: cur.clone() };
                if t.feasible() {
                    out.push(t);
                }
            }
            return;
        }
        for (comp, k) in self.factors[l].iter().enumerate() {
            let (km, kn) = k.degree();
            for m in 0..=km.min(rm) {
                for n in 0..=kn.min(rn) {
                    cur.push(TermPart { comp, m, p: km - m, n, q: kn - n });
                    self.terms_rec(l + 1, rm - m, rn - n, cur, out);
                    cur.pop();
                }
            }
        }
    }

    /// Value of one term at (r; K, K̃): the vacuum expectation of the
    /// contracted product with external blocks assigned consecutively.
    pub fn eval_term(&self, term: &WickTerm, r: f64, creat: &[usize], annih: &[usize]) -> CMat {
        let big_l = self.factors.len();
        let modes = self.grid.len();
        let freqs = self.grid.frequencies();
        let fac: Vec<f64> = self.grid.modes.iter().map(|md| (md.weight / md.frequency).sqrt()).collect();
        let mut cs = Vec::with_capacity(big_l);
        let mut ct = Vec::with_capacity(big_l);
        let (mut oc, mut oa) = (0, 0);
        for p in &term.parts {
            cs.push(oc..oc + p.m);
            ct.push(oa..oa + p.n);
            oc += p.m;
            oa += p.n;
        }
        let sk: Vec<f64> = cs.iter().map(|rg| creat[rg.clone()].iter().map(|&q| freqs[q]).sum()).collect();
        let skt: Vec<f64> = ct.iter().map(|rg| annih[rg.clone()].iter().map(|&q| freqs[q]).sum()).collect();
        // kernel shift r_l and resolvent shift r̃_l
        let r_k = |l: usize| skt[..l].iter().sum::<f64>() + sk[l + 1..].iter().sum::<f64>();
        let r_f = |l: usize| skt[..l].iter().sum::<f64>() + sk[l..].iter().sum::<f64>();
        let mut cap = vec![0usize; big_l + 1];
        for l in 0..big_l {
            cap[l + 1] = cap[l] + term.parts[l].q;
        }

        let vac = vec![0u8; modes];
        let mut cur: BTreeMap<Vec<u8>, CMat> = BTreeMap::new();
        cur.insert(vac.clone(), (self.f[big_l])(r + r_f(big_l)));
        for l in (0..big_l).rev() {
            let part = term.parts[l];
            let ker = self.factors[l][part.comp];
            let ann = tuples(part.q, modes);
            let cre = tuples(part.p, modes);
            let mut next: BTreeMap<Vec<u8>, CMat> = BTreeMap::new();
            for (u, a) in &cur {
                for xt in &ann {
                    let mut st = u.clone();
                    let mut amp = 1.0;
                    let mut ok = true;
                    for &x in xt {
                        if st[x] == 0 {
                            ok = false;
                            break;
                        }
                        amp *= (st[x] as f64).sqrt() * fac[x];
                        st[x] -= 1;
                    }
                    if !ok {
                        continue;
                    }
                    let e1 = state_energy(&st, &freqs);
                    let mut aa: Vec<usize> = annih[ct[l].clone()].to_vec();
                    aa.extend_from_slice(xt);
                    for x in &cre {
                        let mut s2 = st.clone();
                        let mut amp2 = amp;
                        for &y in x {
                            s2[y] += 1;
                            amp2 *= (s2[y] as f64).sqrt() * fac[y];
                        }
                        if s2.iter().map(|&v| v as usize).sum::<usize>() > cap[l] {
                            continue;
                        }
                        let mut ca: Vec<usize> = creat[cs[l].clone()].to_vec();
                        ca.extend_from_slice(x);
                        let kv = ker.eval(r + r_k(l) + e1, &ca, &aa);
                        let contrib = kv * a * c(amp2);
                        match next.get_mut(&s2) {
                            Some(acc) => *acc += contrib,
                            None => {
                                next.insert(s2, contrib);
                            }
                        }
                    }
                }
            }
            cur = next
                .into_iter()
                .filter(|(_, m)| m.iter().any(|z| *z != c(0.0)))
                .map(|(s, m)| {
                    let e = state_energy(&s, &freqs);
                    (s, (self.f[l])(r + r_f(l) + e) * m)
                })
                .collect();
        }
        cur.remove(&vac).map(|m| m * c(term.binomial())).unwrap_or_else(|| CMat::zeros(self.d, self.d))
    }
}

#[derive(Clone, Debug)]
pub struct WickRequest {
    /// Grid indices of the modes carried by output kernels.
    pub out_modes: Vec<usize>,
    pub max_m: usize,
    pub max_n: usize,
    pub mn_max: usize,
    pub r_points: Vec<f64>,
    /// Output entries with r + max(ΣK, ΣK̃) above this are set to zero.
    pub energy_bound: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct WickOutput {
    pub out_modes: Vec<usize>,
    pub r_points: Vec<f64>,
    /// (M,N) ↦ symmetrized values, row `tuple * r_points.len() + r_index`
    /// with tuples over positions in `out_modes`.
    pub blocks: BTreeMap<(usize, usize), Vec<CMat>>,
    pub term_counts: BTreeMap<(usize, usize), usize>,
}

/// Tabulate Σ_terms at the requested points for one (M,N), optionally only
/// for a given subset of terms. Unsymmetrized.
pub fn wick_table(problem: &WickProblem, terms: &[WickTerm], big_m: usize, big_n: usize, req: &WickRequest) -> Result<Vec<CMat>> {
    let no = req.out_modes.len();
    let nr = req.r_points.len();
    let freqs = problem.grid.frequencies();
    let count = no.pow((big_m + big_n) as u32);
    let jobs: Vec<(usize, usize)> = (0..count).flat_map(|ti| (0..nr).map(move |ri| (ti, ri))).collect();
    let vals: Vec<CMat> = jobs
        .par_iter()
        .map(|&(ti, ri)| {
            let t: Vec<usize> = split_index(ti, big_m + big_n, no).into_iter().map(|i| req.out_modes[i]).collect();
            let (cr, an) = t.split_at(big_m);
            let r = req.r_points[ri];
            let sk: f64 = cr.iter().map(|&q| freqs[q]).sum();
            let skt: f64 = an.iter().map(|&q| freqs[q]).sum();
            if let Some(b) = req.energy_bound {
                if r + sk.max(skt) > b + R_TOL {
                    return CMat::zeros(problem.d, problem.d);
                }
            }
            let mut acc = CMat::zeros(problem.d, problem.d);
            for term in terms {
                acc += problem.eval_term(term, r, cr, an);
            }
            acc
        })
        .collect();
    if vals.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("non-finite value in normal ordering".into()));
    }
    Ok(vals)
}

/// Normal-ordered kernels w̃_{M,N} of the product, symmetrized.
pub fn wick_normal_order(problem: &WickProblem, req: &WickRequest) -> Result<WickOutput> {
    problem.validate()?;
    let mut blocks = BTreeMap::new();
    let mut term_counts = BTreeMap::new();
    for big_m in 0..=req.max_m {
        for big_n in 0..=req.max_n {
            if big_m + big_n > req.mn_max {
                continue;
            }
            let terms = problem.terms(big_m, big_n);
            term_counts.insert((big_m, big_n), terms.len());
            let raw = wick_table(problem, &terms, big_m, big_n, req)?;
            let sym = symmetrize_values(&raw, big_m, big_n, req.out_modes.len(), req.r_points.len());
            blocks.insert((big_m, big_n), sym);
        }
    }
    Ok(WickOutput { out_modes: req.out_modes.clone(), r_points: req.r_points.clone(), blocks, term_counts })
}

impl WickOutput {
    /// Kernel family on `grid_out`, whose modes correspond one to one to
    /// `out_modes`, with r grid equal to the requested points.
    pub fn to_family(&self, grid_out: &ModeGrid, d: usize, mu: f64, xi: f64) -> Result<KernelFamily> {
        if grid_out.len() != self.out_modes.len() {
            return Err(Error::Precondition("output grid does not match the external modes".into()));
        }
        let mut fam = KernelFamily::new(mu, xi, d)?;
        for (&(m, n), vals) in &self.blocks {
            let mut k = IntegralKernel::zeros(m, n, d, grid_out, self.r_points.clone());
            k.values = vals.clone();
            k.symmetric = true;
            fam.insert(k)?;
        }
        Ok(fam)
    }
}

/// Fixed constants of the estimates, given ‖χ'‖_∞.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConstants {
    pub c_f: f64,
    pub c_f_hat: f64,
    pub c_chi: f64,
    pub c_chi_hat: f64,
}

impl BoundConstants {
    pub fn new(chi_prime_sup: f64) -> Self {
        BoundConstants { c_f: 10.0 * chi_prime_sup + 20.0, c_f_hat: 20.0, c_chi: 20.0 * 2f64.sqrt(), c_chi_hat: 20.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolydiscRadii {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolydiscCheck {
    pub member: bool,
    /// ‖w00(0)‖, sup ‖w00' − 1‖, ‖w − w00‖.
    pub values: [f64; 3],
    /// radius − value for each inequality.
    pub slack: [f64; 3],
}

pub fn polydisc_check(f: &KernelFamily, radii: PolydiscRadii) -> Result<PolydiscCheck> {
    let w00 = f.w00().ok_or_else(|| Error::Precondition("family has no w_{0,0}".into()))?;
    let a = linalg::op_norm(&w00.eval(0.0, &[], &[]));
    let id = CMat::identity(f.d, f.d);
    let b = w00.derivative_table().iter().map(|v| linalg::op_norm(&(v - &id))).fold(0.0, f64::max);
    let g = f.interaction_norm();
    let values = [a, b, g];
    let radii = [radii.alpha, radii.beta, radii.gamma];
    let slack = [radii[0] - a, radii[1] - b, radii[2] - g];
    let member = values.iter().zip(&radii).all(|(v, r)| *v <= r * (1.0 + 1e-12) + 1e-15);
    Ok(PolydiscCheck { member, values, slack })
}

/// ‖H_{m,n}(w)‖ against ‖w‖_♯.
pub fn sharp_norm_bound_check(k: &IntegralKernel, basis: &FockBasis) -> Result<crate::fock::BoundCheck> {
    if k.m + k.n == 0 {
        return Err(Error::Precondition("sharp bound needs m + n ≥ 1".into()));
    }
    Ok(crate::fock::BoundCheck { lhs: linalg::op_norm(&h_mn_matrix(k, basis)), rhs: norm_sharp(k) })
}

/// ‖H_{m,n}(w)‖ against ‖w‖_μ / √(m^m n^n) (with 0^0 = 1).
pub fn operator_norm_estimate_check(k: &IntegralKernel, basis: &FockBasis, mu: f64) -> crate::fock::BoundCheck {
    let pp = |p: usize| if p == 0 { 1.0 } else { (p as f64).powi(p as i32) };
    crate::fock::BoundCheck {
        lhs: linalg::op_norm(&h_mn_matrix(k, basis)),
        rhs: norm_mu(k, mu) / (pp(k.m) * pp(k.n)).sqrt(),
    }
}

/// ‖H(w)‖ against ξ‖w‖^# for a family without w_{0,0}.
pub fn injective_bound_check(f: &KernelFamily, basis: &FockBasis) -> Result<crate::fock::BoundCheck> {
    if f.w00().is_some() {
        return Err(Error::Precondition("family must have w_{0,0} = 0".into()));
    }
    Ok(crate::fock::BoundCheck { lhs: kernel_to_operator(f, basis)?.norm(), rhs: f.xi * norm_family(f) })
}

fn rand_c64<R: Rng>(rng: &mut R) -> C64 {
    C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub fn random_matrix<R: Rng>(rng: &mut R, d: usize) -> CMat {
    CMat::from_fn(d, d, |_, _| rand_c64(rng))
}

/// Random tabulated kernel, symmetrized and cut to its support.
pub fn random_kernel<R: Rng>(rng: &mut R, m: usize, n: usize, d: usize, grid: &ModeGrid, r_grid: Vec<f64>) -> IntegralKernel {
    let mut k = IntegralKernel::zeros(m, n, d, grid, r_grid);
    for v in k.values.iter_mut() {
        *v = random_matrix(rng, d);
    }
    let mut k = k.symmetrize();
    k.enforce_support();
    k
}

/// Random smooth symmetric kernel given in closed form, with support.
pub fn random_smooth_kernel<R: Rng>(rng: &mut R, m: usize, n: usize, d: usize, grid: &ModeGrid) -> FnKernel {
    let a0 = random_matrix(rng, d);
    let a1 = random_matrix(rng, d);
    let coef: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    let freqs = grid.frequencies();
    let f = move |r: f64, cr: &[usize], an: &[usize]| {
        let s1: f64 = cr.iter().map(|&q| freqs[q]).sum();
        let s2: f64 = an.iter().map(|&q| freqs[q]).sum();
        if r + s1.max(s2) > 1.0 + R_TOL {
            return CMat::zeros(a0.nrows(), a0.ncols());
        }
        let p2: f64 = cr.iter().map(|&q| freqs[q] * freqs[q]).sum::<f64>() - an.iter().map(|&q| freqs[q].powi(3)).sum::<f64>();
        &a0 * c((coef[0] * r + coef[1] * s1 - coef[2] * s2).cos()) + &a1 * c((coef[3] * (r + p2)).sin())
    };
    FnKernel { m, n, d, f: Arc::new(f) }
}

/// Self-describing text dump; every float is written in shortest
/// round-trip form, so `from_text(to_text(k)) == k` bit for bit.
pub fn kernel_to_text(k: &IntegralKernel) -> String {
    let mut s = String::new();
    s.push_str(&format!("kernel {} {} {}\n", k.m, k.n, k.d));
    s.push_str(&format!(
        "grid {} {} {} {}\n",
        k.grid.scheme.name(),
        k.grid.shells,
        k.grid.polarizations,
        fmt_f64(k.grid.radius_max)
    ));
    for md in &k.grid.modes {
        s.push_str(&format!("mode {} {} {} {}\n", md.shell, md.polarization, fmt_f64(md.frequency), fmt_f64(md.weight)));
    }
    s.push_str(&format!("symmetric {}\n", k.symmetric));
    s.push_str("r");
    for r in &k.r_grid {
        s.push(' ');
        s.push_str(&fmt_f64(*r));
    }
    s.push('\n');
    let mut body = |tag: &str, table: &[CMat]| {
        for (i, v) in table.iter().enumerate() {
            s.push_str(&format!("{tag} {i}"));
            for a in 0..k.d {
                for b in 0..k.d {
                    s.push_str(&format!(" {} {}", fmt_f64(v[(a, b)].re), fmt_f64(v[(a, b)].im)));
                }
            }
            s.push('\n');
        }
    };
    body("v", &k.values);
    if let Some(d) = &k.deriv_values {
        body("dv", d);
    }
    s
}

pub fn kernel_from_text(text: &str) -> Result<IntegralKernel> {
    let bad = |what: &str| Error::Config(format!("kernel dump: {what}"));
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
    if head.len() != 4 || head[0] != "kernel" {
        return Err(bad("missing header"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
    let (m, n, d) = (num(head[1])?, num(head[2])?, num(head[3])?);
    let g: Vec<&str> = lines.next().ok_or_else(|| bad("missing grid"))?.split_whitespace().collect();
    if g.len() != 5 || g[0] != "grid" {
        return Err(bad("bad grid line"));
    }
    let scheme: Scheme = Scheme::parse(g[1]).ok_or_else(|| bad("unknown scheme"))?;
    let shells = num(g[2])?;
    let polarizations = num(g[3])? as u8;
    let radius_max = parse_f64(g[4], "radius")?;
    let mut modes = Vec::new();
    let mut symmetric = false;
    let mut r_grid = Vec::new();
    let mut values = Vec::new();
    let mut deriv = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.first().copied() {
            Some("mode") if t.len() == 5 => modes.push(crate::fock::Mode {
                shell: num(t[1])?,
                polarization: num(t[2])? as u8,
                frequency: parse_f64(t[3], "frequency")?,
                weight: parse_f64(t[4], "weight")?,
            }),
            Some("symmetric") if t.len() == 2 => symmetric = t[1] == "true",
            Some("r") => r_grid = t[1..].iter().map(|x| parse_f64(x, "r")).collect::<Result<_>>()?,
            Some(tag @ ("v" | "dv")) if t.len() == 2 + 2 * d * d => {
                let nums: Vec<f64> = t[2..].iter().map(|x| parse_f64(x, "value")).collect::<Result<_>>()?;
                let mat = CMat::from_fn(d, d, |a, b| C64::new(nums[2 * (a * d + b)], nums[2 * (a * d + b) + 1]));
                if tag == "v" {
                    values.push(mat)
                } else {
                    deriv.push(mat)
                }
            }
            None => {}
            _ => return Err(bad("unrecognized line")),
        }
    }
    let grid = ModeGrid { modes, radius_max, scheme, shells, polarizations };
    let expected = grid.len().pow((m + n) as u32) * r_grid.len();
    if values.len() != expected || !(deriv.is_empty() || deriv.len() == expected) {
        return Err(bad("value count does not match the grids"));
    }
    Ok(IntegralKernel {
        m,
        n,
        d,
        grid,
        r_grid,
        values,
        deriv_values: if deriv.is_empty() { None } else { Some(deriv) },
        symmetric,
    })
}
