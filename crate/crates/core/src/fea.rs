//! Plane-stress finite-element analysis on the regular element grid.
//!
//! Elements are 4-node bilinear unit squares with the analytically integrated
//! stiffness `k0(nu)` at Young's modulus 1. Per-element moduli follow the
//! modified SIMP interpolation `E(x) = E_min + x^p (E0 - E_min)`, the global
//! system is reduced to free dofs and solved either by a banded Cholesky
//! factorization (grids up to 128 elements per side) or by Jacobi-
//! preconditioned conjugate gradients above that.
//!
//! Dof numbering is node-major with two dofs per node and column-major node
//! order (`node = col*(nely+1) + row`), which keeps the factorization band
//! narrow and makes outputs bit-stable.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;
use crate::geometry::{DensityField, LoadCase, WheelDomain};

/// Integer numerators of the unit-square bilinear stiffness: the
/// nu-independent part. `k0 = (A + nu*B) / (24 (1 - nu^2))`.
const KE_A24: [[i32; 8]; 8] = [
    [12, 3, -6, -3, -6, -3, 0, 3],
    [3, 12, 3, 0, -3, -6, -3, -6],
    [-6, 3, 12, -3, 0, -3, -6, 3],
    [-3, 0, -3, 12, 3, -6, 3, -6],
    [-6, -3, 0, 3, 12, 3, -6, -3],
    [-3, -6, -3, -6, 3, 12, 3, 0],
    [0, -3, -6, 3, -6, 3, 12, -3],
    [3, -6, 3, -6, -3, 0, -3, 12],
];

/// Integer numerators of the nu coefficient.
const KE_B24: [[i32; 8]; 8] = [
    [-4, 3, -2, 9, 2, -3, 4, -9],
    [3, -4, -9, 4, -3, 2, 9, -2],
    [-2, -9, -4, -3, 4, 9, 2, 3],
    [9, 4, -3, -4, -9, -2, 3, 2],
    [2, -3, 4, -9, -4, 3, -2, 9],
    [-3, 2, 9, -2, 3, -4, -9, 4],
    [4, 9, 2, 3, -2, -9, -4, -3],
    [-9, -2, 3, 2, 9, 4, -3, -4],
];

/// Analytically integrated stiffness of a unit bilinear square at `E = 1`.
///
/// Local dof order is `[u1x u1y ... u4y]` for nodes counterclockwise from the
/// element origin corner, matching [`WheelDomain::element_dofs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ElementStiffness {
    pub k0: [[f64; 8]; 8],
    pub poisson_ratio: f64,
}

/// Modified SIMP material interpolation constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpMaterial {
    pub e0: f64,
    pub e_min: f64,
    pub penal: f64,
    pub poisson_ratio: f64,
}

impl Default for SimpMaterial {
    fn default() -> Self {
        Self {
            e0: 1.0,
            e_min: 1e-9,
            penal: 3.0,
            poisson_ratio: 0.3,
        }
    }
}

impl SimpMaterial {
    /// `E(x) = E_min + x^p (E0 - E_min)`.
    #[inline]
    pub fn modulus(&self, x: f64) -> f64 {
        self.e_min + fmath::powp(x, self.penal) * (self.e0 - self.e_min)
    }

    /// `dE/dx = p x^(p-1) (E0 - E_min)`.
    #[inline]
    pub fn modulus_derivative(&self, x: f64) -> f64 {
        self.penal * fmath::powp(x, self.penal - 1.0) * (self.e0 - self.e_min)
    }
}

/// Linear solver selection for the reduced system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Banded Cholesky up to 128 elements per side, PCG above.
    #[default]
    Auto,
    Direct,
    Pcg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeaError {
    PoissonOutOfRange { nu: f64 },
    /// Density outside `[0, 1]` or not finite.
    InvalidDensity { element: usize },
    ShapeMismatch { expected: usize, got: usize },
    /// Factorization hit a non-positive pivot: disconnected load path or a
    /// system that is not positive definite.
    Singular { pivot_index: usize },
    /// Iterative solve failed to reach the requested tolerance.
    NoConvergence { iterations: usize, residual: f64 },
    InvalidParameter(&'static str),
}

impl fmt::Display for FeaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeaError::PoissonOutOfRange { nu } => {
                write!(f, "Poisson ratio {nu} outside (-1, 0.5)")
            }
            FeaError::InvalidDensity { element } => {
                write!(f, "element {element} density is not a finite value in [0, 1]")
            }
            FeaError::ShapeMismatch { expected, got } => {
                write!(f, "field has {got} entries, expected {expected}")
            }
            FeaError::Singular { pivot_index } => write!(
                f,
                "stiffness matrix is singular or indefinite at reduced dof {pivot_index}"
            ),
            FeaError::NoConvergence { iterations, residual } => write!(
                f,
                "iterative solver stalled after {iterations} iterations (residual {residual:e})"
            ),
            FeaError::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
        }
    }
}

impl core::error::Error for FeaError {}

/// Plane-stress bilinear-quad stiffness for a unit square at `E = 1`.
pub fn element_stiffness(poisson_ratio: f64) -> Result<ElementStiffness, FeaError> {
    if !(poisson_ratio > -1.0 && poisson_ratio < 0.5) {
        return Err(FeaError::PoissonOutOfRange { nu: poisson_ratio });
    }
    let scale = 1.0 / (24.0 * (1.0 - poisson_ratio * poisson_ratio));
    let mut k0 = [[0.0; 8]; 8];
    for r in 0..8 {
        for c in 0..8 {
            k0[r][c] = scale * (KE_A24[r][c] as f64 + poisson_ratio * KE_B24[r][c] as f64);
        }
    }
    Ok(ElementStiffness { k0, poisson_ratio })
}

/// Map from global dofs to contiguous free-dof indices.
struct DofMap {
    /// `free_of[dof] = usize::MAX` when the dof is fixed.
    free_of: Vec<usize>,
    n_free: usize,
}

impl DofMap {
    fn new(ndof: usize, fixed: &[usize]) -> Self {
        let mut free_of = vec![0usize; ndof];
        for &d in fixed {
            free_of[d] = usize::MAX;
        }
        let mut next = 0usize;
        for slot in free_of.iter_mut() {
            if *slot != usize::MAX {
                *slot = next;
                next += 1;
            }
        }
        Self { free_of, n_free: next }
    }
}

fn validate_density(density: &[f64], nel: usize) -> Result<(), FeaError> {
    if density.len() != nel {
        return Err(FeaError::ShapeMismatch {
            expected: nel,
            got: density.len(),
        });
    }
    for (e, &x) in density.iter().enumerate() {
        if !x.is_finite() || !(0.0..=1.0).contains(&x) {
            return Err(FeaError::InvalidDensity { element: e });
        }
    }
    Ok(())
}

#[inline]
fn element_dofs(nelx: usize, nely: usize, col: usize, row: usize) -> [usize; 8] {
    let _ = nelx;
    let n1 = col * (nely + 1) + row;
    let n2 = (col + 1) * (nely + 1) + row;
    let n3 = (col + 1) * (nely + 1) + row + 1;
    let n4 = col * (nely + 1) + row + 1;
    [
        2 * n1,
        2 * n1 + 1,
        2 * n2,
        2 * n2 + 1,
        2 * n3,
        2 * n3 + 1,
        2 * n4,
        2 * n4 + 1,
    ]
}

/// Symmetric banded matrix in lower-band storage: entry `(r, c)` with
/// `0 <= r - c <= bandwidth` lives at `data[c*(bandwidth+1) + (r-c)]`.
struct BandedMatrix {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    #[inline]
    fn add(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r >= c && r - c <= self.bandwidth);
        self.data[c * (self.bandwidth + 1) + (r - c)] += v;
    }

    /// In-place Cholesky `A = L L^T`; fails on a vanishing pivot.
    fn factorize(&mut self) -> Result<(), FeaError> {
        let bw1 = self.bandwidth + 1;
        let dmax = (0..self.n)
            .map(|j| self.data[j * bw1])
            .fold(0.0f64, f64::max);
        let floor = dmax * 1e-13;
        for j in 0..self.n {
            let m = self.bandwidth.min(self.n - 1 - j);
            let d = self.data[j * bw1];
            if !(d > floor) || !d.is_finite() {
                return Err(FeaError::Singular { pivot_index: j });
            }
            let l = fmath::sqrt(d);
            let inv = 1.0 / l;
            self.data[j * bw1] = l;
            for off in 1..=m {
                self.data[j * bw1 + off] *= inv;
            }
            for c in (j + 1)..=(j + m) {
                let factor = self.data[j * bw1 + (c - j)];
                if factor == 0.0 {
                    continue;
                }
                let (head, tail) = self.data.split_at_mut(c * bw1);
                let src = &head[j * bw1 + (c - j)..j * bw1 + m + 1];
                let dst = &mut tail[..m + 1 - (c - j)];
                for (dv, &sv) in dst.iter_mut().zip(src) {
                    *dv -= factor * sv;
                }
            }
        }
        Ok(())
    }

    /// Solves `L L^T x = b` in place after [`Self::factorize`].
    fn solve(&self, b: &mut [f64]) {
        let bw1 = self.bandwidth + 1;
        // Forward: L y = b, sweeping columns.
        for j in 0..self.n {
            let m = self.bandwidth.min(self.n - 1 - j);
            let yj = b[j] / self.data[j * bw1];
            b[j] = yj;
            for off in 1..=m {
                b[j + off] -= self.data[j * bw1 + off] * yj;
            }
        }
        // Backward: L^T x = y, column dot products.
        for j in (0..self.n).rev() {
            let m = self.bandwidth.min(self.n - 1 - j);
            let mut acc = b[j];
            for off in 1..=m {
                acc -= self.data[j * bw1 + off] * b[j + off];
            }
            b[j] = acc / self.data[j * bw1];
        }
    }
}

/// Assembles the reduced system and solves `K U = F` on an arbitrary grid.
///
/// Returns the full-length displacement vector with zeros at fixed dofs.
pub fn solve_grid(
    nelx: usize,
    nely: usize,
    fixed_dofs: &[usize],
    density: &[f64],
    forces: &[f64],
    mat: &SimpMaterial,
    solver: SolverKind,
    tolerance: f64,
) -> Result<Vec<f64>, FeaError> {
    validate_density(density, nelx * nely)?;
    let ndof = 2 * (nelx + 1) * (nely + 1);
    if forces.len() != ndof {
        return Err(FeaError::ShapeMismatch {
            expected: ndof,
            got: forces.len(),
        });
    }
    if !(mat.e_min > 0.0) {
        return Err(FeaError::InvalidParameter("E_min must be positive"));
    }
    if !(mat.penal >= 1.0) {
        return Err(FeaError::InvalidParameter("penalization must be >= 1"));
    }
    let ke = element_stiffness(mat.poisson_ratio)?;
    let map = DofMap::new(ndof, fixed_dofs);
    if map.n_free == 0 {
        return Ok(vec![0.0; ndof]);
    }

    let direct = match solver {
        SolverKind::Direct => true,
        SolverKind::Pcg => false,
        SolverKind::Auto => nelx.max(nely) <= 128,
    };

    let mut u_free = if direct {
        solve_direct(nelx, nely, density, forces, mat, &ke, &map)?
    } else {
        solve_pcg(nelx, nely, density, forces, mat, &ke, &map, tolerance)?
    };

    // Scatter back to full dof numbering.
    let mut u = vec![0.0; ndof];
    for (dof, &fi) in map.free_of.iter().enumerate() {
        if fi != usize::MAX {
            u[dof] = core::mem::take(&mut u_free[fi]);
        }
    }
    Ok(u)
}

fn solve_direct(
    nelx: usize,
    nely: usize,
    density: &[f64],
    forces: &[f64],
    mat: &SimpMaterial,
    ke: &ElementStiffness,
    map: &DofMap,
) -> Result<Vec<f64>, FeaError> {
    // Bandwidth over free indices of coupled dofs.
    let mut bandwidth = 0usize;
    for row in 0..nely {
        for col in 0..nelx {
            let dofs = element_dofs(nelx, nely, col, row);
            let mut lo = usize::MAX;
            let mut hi = 0usize;
            for &d in &dofs {
                let fi = map.free_of[d];
                if fi != usize::MAX {
                    lo = lo.min(fi);
                    hi = hi.max(fi);
                }
            }
            if lo != usize::MAX {
                bandwidth = bandwidth.max(hi - lo);
            }
        }
    }

    let mut k = BandedMatrix::zeros(map.n_free, bandwidth);
    for row in 0..nely {
        for col in 0..nelx {
            let e = row * nelx + col;
            let ee = mat.modulus(density[e]);
            let dofs = element_dofs(nelx, nely, col, row);
            for a in 0..8 {
                let fa = map.free_of[dofs[a]];
                if fa == usize::MAX {
                    continue;
                }
                for b in 0..8 {
                    let fb = map.free_of[dofs[b]];
                    if fb == usize::MAX || fa < fb {
                        continue;
                    }
                    k.add(fa, fb, ee * ke.k0[a][b]);
                }
            }
        }
    }
    k.factorize()?;

    let mut rhs = vec![0.0; map.n_free];
    for (dof, &fi) in map.free_of.iter().enumerate() {
        if fi != usize::MAX {
            rhs[fi] = forces[dof];
        }
    }
    k.solve(&mut rhs);
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(FeaError::Singular { pivot_index: 0 });
    }
    Ok(rhs)
}

/// `y += K x` over free dofs, element by element (matrix-free).
fn apply_stiffness(
    nelx: usize,
    nely: usize,
    density: &[f64],
    mat: &SimpMaterial,
    ke: &ElementStiffness,
    map: &DofMap,
    x: &[f64],
    y: &mut [f64],
) {
    for row in 0..nely {
        for col in 0..nelx {
            let e = row * nelx + col;
            let ee = mat.modulus(density[e]);
            let dofs = element_dofs(nelx, nely, col, row);
            let mut ue = [0.0f64; 8];
            for (a, &d) in dofs.iter().enumerate() {
                let fi = map.free_of[d];
                if fi != usize::MAX {
                    ue[a] = x[fi];
                }
            }
            for (a, &d) in dofs.iter().enumerate() {
                let fi = map.free_of[d];
                if fi == usize::MAX {
                    continue;
                }
                let row_k = &ke.k0[a];
                let mut acc = 0.0;
                for b in 0..8 {
                    acc += row_k[b] * ue[b];
                }
                y[fi] += ee * acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_pcg(
    nelx: usize,
    nely: usize,
    density: &[f64],
    forces: &[f64],
    mat: &SimpMaterial,
    ke: &ElementStiffness,
    map: &DofMap,
    tolerance: f64,
) -> Result<Vec<f64>, FeaError> {
    let n = map.n_free;
    let mut b = vec![0.0; n];
    for (dof, &fi) in map.free_of.iter().enumerate() {
        if fi != usize::MAX {
            b[fi] = forces[dof];
        }
    }
    let bnorm = fmath::sqrt(b.iter().map(|v| v * v).sum::<f64>());
    if bnorm == 0.0 {
        return Ok(b);
    }

    // Jacobi preconditioner from assembled diagonal.
    let mut diag = vec![0.0; n];
    for row in 0..nely {
        for col in 0..nelx {
            let e = row * nelx + col;
            let ee = mat.modulus(density[e]);
            let dofs = element_dofs(nelx, nely, col, row);
            for (a, &d) in dofs.iter().enumerate() {
                let fi = map.free_of[d];
                if fi != usize::MAX {
                    diag[fi] += ee * ke.k0[a][a];
                }
            }
        }
    }
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(FeaError::Singular { pivot_index: 0 });
    }

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(rv, dv)| rv / dv).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let max_iter = 40 * n;
    for it in 0..max_iter {
        ap.fill(0.0);
        apply_stiffness(nelx, nely, density, mat, ke, map, &p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(FeaError::Singular { pivot_index: it });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = fmath::sqrt(r.iter().map(|v| v * v).sum::<f64>());
        if rnorm <= tolerance * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = fmath::sqrt(r.iter().map(|v| v * v).sum::<f64>());
    Err(FeaError::NoConvergence {
        iterations: max_iter,
        residual: rnorm / bnorm,
    })
}

/// Solves the wheel system for a physical density field.
pub fn assemble_and_solve(
    domain: &WheelDomain,
    physical_density: &DensityField,
    loads: &LoadCase,
    mat: &SimpMaterial,
    solver: SolverKind,
    tolerance: f64,
) -> Result<Vec<f64>, FeaError> {
    if physical_density.nelx != domain.nelx || physical_density.nely != domain.nely {
        return Err(FeaError::ShapeMismatch {
            expected: domain.element_count(),
            got: physical_density.len(),
        });
    }
    solve_grid(
        domain.nelx,
        domain.nely,
        &domain.fixed_dofs,
        &physical_density.values,
        &loads.nodal_forces,
        mat,
        solver,
        tolerance,
    )
}

/// Compliance as the element strain-energy sum `sum_e E_e u_e^T k0 u_e`.
pub fn compliance(
    nelx: usize,
    nely: usize,
    density: &[f64],
    mat: &SimpMaterial,
    u: &[f64],
) -> Result<f64, FeaError> {
    validate_density(density, nelx * nely)?;
    let ndof = 2 * (nelx + 1) * (nely + 1);
    if u.len() != ndof {
        return Err(FeaError::ShapeMismatch {
            expected: ndof,
            got: u.len(),
        });
    }
    let ke = element_stiffness(mat.poisson_ratio)?;
    let mut c = 0.0;
    for row in 0..nely {
        for col in 0..nelx {
            let e = row * nelx + col;
            c += mat.modulus(density[e]) * element_quadratic_form(&ke, nelx, nely, col, row, u);
        }
    }
    Ok(c)
}

/// Per-element compliance sensitivity `-p x^(p-1) (E0 - E_min) u_e^T k0 u_e`;
/// every component is nonpositive.
pub fn compliance_sensitivity(
    nelx: usize,
    nely: usize,
    density: &[f64],
    mat: &SimpMaterial,
    u: &[f64],
) -> Result<Vec<f64>, FeaError> {
    validate_density(density, nelx * nely)?;
    let ndof = 2 * (nelx + 1) * (nely + 1);
    if u.len() != ndof {
        return Err(FeaError::ShapeMismatch {
            expected: ndof,
            got: u.len(),
        });
    }
    let ke = element_stiffness(mat.poisson_ratio)?;
    let mut dc = vec![0.0; nelx * nely];
    for row in 0..nely {
        for col in 0..nelx {
            let e = row * nelx + col;
            let q = element_quadratic_form(&ke, nelx, nely, col, row, u);
            dc[e] = -mat.modulus_derivative(density[e]) * q;
        }
    }
    Ok(dc)
}

/// External work `F . U`, the independent route to compliance.
pub fn compliance_from_work(forces: &[f64], u: &[f64]) -> f64 {
    forces.iter().zip(u).map(|(f, d)| f * d).sum()
}

/// Relative residual `||K u - f||_2 / ||f||_2` computed matrix-free.
pub fn residual_norm(
    nelx: usize,
    nely: usize,
    fixed_dofs: &[usize],
    density: &[f64],
    mat: &SimpMaterial,
    forces: &[f64],
    u: &[f64],
) -> f64 {
    let ke = element_stiffness(mat.poisson_ratio).expect("valid material");
    let map = DofMap::new(2 * (nelx + 1) * (nely + 1), fixed_dofs);
    let mut uf = vec![0.0; map.n_free];
    let mut ff = vec![0.0; map.n_free];
    for (dof, &fi) in map.free_of.iter().enumerate() {
        if fi != usize::MAX {
            uf[fi] = u[dof];
            ff[fi] = forces[dof];
        }
    }
    let mut ku = vec![0.0; map.n_free];
    apply_stiffness(nelx, nely, density, mat, &ke, &map, &uf, &mut ku);
    let num: f64 = ku
        .iter()
        .zip(&ff)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    let den: f64 = ff.iter().map(|v| v * v).sum::<f64>();
    fmath::sqrt(num) / fmath::sqrt(den.max(1e-300))
}

#[inline]
fn element_quadratic_form(
    ke: &ElementStiffness,
    nelx: usize,
    nely: usize,
    col: usize,
    row: usize,
    u: &[f64],
) -> f64 {
    let dofs = element_dofs(nelx, nely, col, row);
    let mut ue = [0.0f64; 8];
    for (a, &d) in dofs.iter().enumerate() {
        ue[a] = u[d];
    }
    let mut q = 0.0;
    for a in 0..8 {
        let mut acc = 0.0;
        for b in 0..8 {
            acc += ke.k0[a][b] * ue[b];
        }
        q += ue[a] * acc;
    }
    q
}
