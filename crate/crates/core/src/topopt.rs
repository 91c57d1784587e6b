//! Reference-guided SIMP compliance minimization.
//!
//! The default path is three-field SIMP: design densities `x` are smoothed by
//! a density filter into `x_tilde`, sharpened by a smoothed Heaviside
//! projection into the physical field `x_bar`, and the compliance gradient is
//! chain-ruled back through both maps. A pixel-wise L1 pull toward a binary
//! reference design enters the objective with weight `lambda_sim`; its
//! gradient is the constant `-lambda_sim` on reference-solid elements. Updates
//! use the optimality-criteria rule with a bisected Lagrange multiplier that
//! holds the physical volume fraction at the target, and the projection slope
//! `beta` is continued upward during the run. A classic one-field mode with
//! the sensitivity filter is selectable instead.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fea::{self, FeaError, SimpMaterial, SolverKind};
use crate::fmath;
use crate::geometry::{self, DensityField, GeometryError, LoadCase, WheelDomain};
use crate::image::DesignImage;

/// Projection slope continuation: `beta` starts at `initial`, multiplies by
/// `growth` every `period` iterations or when the design change stalls, and
/// never exceeds `cap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub initial: f64,
    pub growth: f64,
    pub cap: f64,
    pub period: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            growth: 2.0,
            cap: 64.0,
            period: 40,
        }
    }
}

/// Filter arrangement: three-field (density filter + projection) or the
/// classic one-field sensitivity filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterScheme {
    #[default]
    ThreeField,
    SensitivityFilter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimpConfig {
    pub material: SimpMaterial,
    /// Filter radius in element units.
    pub r_min: f64,
    /// OC move limit.
    pub move_limit: f64,
    /// OC damping exponent.
    pub oc_damping: f64,
    /// Convergence tolerance on the max design change.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub beta: BetaSchedule,
    pub filter: FilterScheme,
    pub solver: SolverKind,
    /// Relative residual tolerance for the iterative solver.
    pub solver_tolerance: f64,
    /// Density floor in the sensitivity-filter denominator.
    pub sensitivity_floor: f64,
}

impl Default for SimpConfig {
    fn default() -> Self {
        Self {
            material: SimpMaterial::default(),
            r_min: 2.0,
            move_limit: 0.2,
            oc_damping: 0.5,
            tolerance: 0.01,
            max_iterations: 300,
            beta: BetaSchedule::default(),
            filter: FilterScheme::ThreeField,
            solver: SolverKind::Auto,
            solver_tolerance: 1e-8,
            sensitivity_floor: 1e-3,
        }
    }
}

/// Filter radius default that scales with the grid.
pub fn default_r_min(resolution: usize) -> f64 {
    (0.04 * resolution as f64).max(1.5)
}

impl SimpConfig {
    /// Defaults with `r_min` scaled to the resolution.
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            r_min: default_r_min(resolution),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TopoptError> {
        if !(self.material.penal >= 1.0) {
            return Err(TopoptError::InvalidConfig("penalization must be >= 1"));
        }
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return Err(TopoptError::InvalidConfig("move limit must be in (0, 1]"));
        }
        if !(self.oc_damping > 0.0 && self.oc_damping <= 1.0) {
            return Err(TopoptError::InvalidConfig("OC damping must be in (0, 1]"));
        }
        if !(self.tolerance > 0.0) {
            return Err(TopoptError::InvalidConfig("tolerance must be positive"));
        }
        if !(self.beta.initial > 0.0
            && self.beta.growth >= 1.0
            && self.beta.cap >= self.beta.initial)
        {
            return Err(TopoptError::InvalidConfig(
                "beta schedule must be positive and nondecreasing",
            ));
        }
        if self.beta.period == 0 {
            return Err(TopoptError::InvalidConfig("beta period must be nonzero"));
        }
        if !(self.r_min >= 1.0) {
            return Err(TopoptError::InvalidConfig("r_min must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopoptError {
    InvalidConfig(&'static str),
    /// Filter radius below 1 leaves elements without a neighborhood.
    DegenerateKernel { r_min: f64 },
    Geometry(GeometryError),
    Fea(FeaError),
    /// Reference image must be binary.
    NonBinaryReference { pixel: usize },
    /// OC bisection could not bracket the volume target.
    BisectionBracket { target: f64, reachable: (f64, f64) },
    /// Bisection ran out of iterations before meeting the volume tolerance.
    BisectionStalled { achieved: f64, target: f64 },
    /// Neither a reference design nor an explicit volume fraction was given.
    MissingVolumeTarget,
    ShapeMismatch { expected: usize, got: usize },
}

impl fmt::Display for TopoptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopoptError::InvalidConfig(what) => write!(f, "invalid config: {what}"),
            TopoptError::DegenerateKernel { r_min } => {
                write!(f, "filter radius {r_min} is below 1 element")
            }
            TopoptError::Geometry(e) => write!(f, "{e}"),
            TopoptError::Fea(e) => write!(f, "{e}"),
            TopoptError::NonBinaryReference { pixel } => {
                write!(f, "reference pixel {pixel} is not binary")
            }
            TopoptError::BisectionBracket { target, reachable } => write!(
                f,
                "volume target {target} is outside the reachable range [{}, {}]",
                reachable.0, reachable.1
            ),
            TopoptError::BisectionStalled { achieved, target } => write!(
                f,
                "OC bisection stalled at volume {achieved} (target {target})"
            ),
            TopoptError::MissingVolumeTarget => {
                write!(f, "need a reference design or an explicit volume fraction")
            }
            TopoptError::ShapeMismatch { expected, got } => {
                write!(f, "field has {got} entries, expected {expected}")
            }
        }
    }
}

impl core::error::Error for TopoptError {}

impl From<GeometryError> for TopoptError {
    fn from(e: GeometryError) -> Self {
        TopoptError::Geometry(e)
    }
}

impl From<FeaError> for TopoptError {
    fn from(e: FeaError) -> Self {
        TopoptError::Fea(e)
    }
}

/// Precomputed filter neighborhoods: for element `e`, the elements `f` with
/// center distance below `r_min` and weights `H_f = r_min - dist(e, f)`.
#[derive(Debug, Clone)]
pub struct FilterKernel {
    nelx: usize,
    nely: usize,
    r_min: f64,
    offsets: Vec<usize>,
    neighbor: Vec<u32>,
    weight: Vec<f64>,
    weight_sum: Vec<f64>,
}

impl FilterKernel {
    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn element_count(&self) -> usize {
        self.nelx * self.nely
    }

    /// Neighbors of `e` as `(element, weight)` pairs; `e` itself is included
    /// with weight `r_min`.
    pub fn neighbors(&self, e: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.offsets[e];
        let hi = self.offsets[e + 1];
        self.neighbor[lo..hi]
            .iter()
            .zip(&self.weight[lo..hi])
            .map(|(&n, &w)| (n as usize, w))
    }

    pub fn weight_sum(&self, e: usize) -> f64 {
        self.weight_sum[e]
    }
}

fn build_kernel_impl(
    nelx: usize,
    nely: usize,
    r_min: f64,
    mask: Option<&[bool]>,
) -> Result<FilterKernel, TopoptError> {
    if !(r_min >= 1.0) {
        return Err(TopoptError::DegenerateKernel { r_min });
    }
    let reach = r_min.ceil() as isize;
    let n = nelx * nely;
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbor = Vec::new();
    let mut weight = Vec::new();
    let mut weight_sum = Vec::with_capacity(n);
    offsets.push(0usize);
    for row in 0..nely as isize {
        for col in 0..nelx as isize {
            let e = (row * nelx as isize + col) as usize;
            let mut sum = 0.0;
            let in_mask = mask.map(|m| m[e]).unwrap_or(true);
            if in_mask {
                for dr in -reach..=reach {
                    let nr = row + dr;
                    if nr < 0 || nr >= nely as isize {
                        continue;
                    }
                    for dc in -reach..=reach {
                        let nc = col + dc;
                        if nc < 0 || nc >= nelx as isize {
                            continue;
                        }
                        let f = (nr * nelx as isize + nc) as usize;
                        if let Some(m) = mask {
                            if !m[f] {
                                continue;
                            }
                        }
                        let dist = fmath::sqrt((dr * dr + dc * dc) as f64);
                        let w = r_min - dist;
                        if w > 0.0 {
                            neighbor.push(f as u32);
                            weight.push(w);
                            sum += w;
                        }
                    }
                }
            } else {
                // Elements outside the mask keep their own value: they are
                // pinned after projection anyway.
                neighbor.push(e as u32);
                weight.push(r_min);
                sum = r_min;
            }
            offsets.push(neighbor.len());
            weight_sum.push(sum);
        }
    }
    Ok(FilterKernel {
        nelx,
        nely,
        r_min,
        offsets,
        neighbor,
        weight,
        weight_sum,
    })
}

/// Builds the convolution kernel on a plain grid (every element filtered).
pub fn build_filter_kernel_grid(
    nelx: usize,
    nely: usize,
    r_min: f64,
) -> Result<FilterKernel, TopoptError> {
    build_kernel_impl(nelx, nely, r_min, None)
}

/// Kernel for a wheel domain: neighborhoods are restricted to the design
/// region so that the pinned rim and void cannot bleed material across the
/// passive boundary (which would floor the reachable volume above thin-spoke
/// targets once the projection sharpens). Passive elements pass through
/// unchanged.
pub fn build_filter_kernel(domain: &WheelDomain, r_min: f64) -> Result<FilterKernel, TopoptError> {
    build_kernel_impl(domain.nelx, domain.nely, r_min, Some(&domain.design_mask))
}

/// Density filter: `x_tilde_e = sum_f H_f x_f / sum_f H_f`.
pub fn density_filter(x: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    debug_assert_eq!(x.len(), kernel.element_count());
    let mut out = vec![0.0; x.len()];
    for (e, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (f, w) in kernel.neighbors(e) {
            acc += w * x[f];
        }
        *o = acc / kernel.weight_sum(e);
    }
    out
}

/// Adjoint of the density filter: maps a gradient with respect to `x_tilde`
/// to a gradient with respect to `x` (`g_f = sum_e H_ef g_tilde_e / S_e`).
pub fn density_filter_adjoint(g_tilde: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    debug_assert_eq!(g_tilde.len(), kernel.element_count());
    let mut out = vec![0.0; g_tilde.len()];
    for e in 0..g_tilde.len() {
        let scaled = g_tilde[e] / kernel.weight_sum(e);
        if scaled == 0.0 {
            continue;
        }
        for (f, w) in kernel.neighbors(e) {
            out[f] += w * scaled;
        }
    }
    out
}

/// Sensitivity filter for the one-field mode:
/// `dc_e <- (1 / (max(x_e, floor) * sum H)) * sum_f H_f x_f dc_f`.
pub fn sensitivity_filter(x: &[f64], dc: &[f64], kernel: &FilterKernel, floor: f64) -> Vec<f64> {
    debug_assert_eq!(x.len(), kernel.element_count());
    debug_assert_eq!(dc.len(), kernel.element_count());
    let mut out = vec![0.0; dc.len()];
    for (e, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (f, w) in kernel.neighbors(e) {
            acc += w * x[f] * dc[f];
        }
        *o = acc / (x[e].max(floor) * kernel.weight_sum(e));
    }
    out
}

/// Smoothed Heaviside projection `x_bar = 1 - e^(-beta x) + x e^(-beta)` and
/// its derivative `beta e^(-beta x) + e^(-beta)` for the chain rule.
pub fn heaviside_project(x_filtered: &[f64], beta: f64) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(beta >= 0.0);
    let e_mb = fmath::exp(-beta);
    let mut projected = Vec::with_capacity(x_filtered.len());
    let mut derivative = Vec::with_capacity(x_filtered.len());
    for &x in x_filtered {
        let e = fmath::exp(-beta * x);
        projected.push(1.0 - e + x * e_mb);
        derivative.push(beta * e + e_mb);
    }
    (projected, derivative)
}

/// Reference pull of the modified objective: weight and binary target.
#[derive(Debug, Clone)]
pub struct SimilarityObjective {
    pub lambda_sim: f64,
    pub reference: DesignImage,
}

impl SimilarityObjective {
    pub fn new(lambda_sim: f64, reference: DesignImage) -> Result<Self, TopoptError> {
        if !(lambda_sim >= 0.0) {
            return Err(TopoptError::InvalidConfig("lambda_sim must be >= 0"));
        }
        if let Some(pixel) = reference.pixels().iter().position(|&p| p != 0.0 && p != 1.0) {
            return Err(TopoptError::NonBinaryReference { pixel });
        }
        Ok(Self { lambda_sim, reference })
    }
}

/// Gradient of the similarity term: `-lambda` on reference-solid elements,
/// zero elsewhere.
pub fn similarity_sensitivity(
    reference: &DesignImage,
    lambda_sim: f64,
) -> Result<Vec<f64>, TopoptError> {
    if let Some(pixel) = reference.pixels().iter().position(|&p| p != 0.0 && p != 1.0) {
        return Err(TopoptError::NonBinaryReference { pixel });
    }
    Ok(reference.pixels().iter().map(|&p| -lambda_sim * p).collect())
}

/// Evaluates the OC update rule at a given Lagrange multiplier: candidate
/// densities are `x B^eta` clamped to the move box and `[0, 1]`, with
/// passive elements held at their pinned values.
pub fn oc_candidate(
    x: &[f64],
    dobj: &[f64],
    dv: &[f64],
    lambda: f64,
    move_limit: f64,
    damping: f64,
    domain: &WheelDomain,
) -> Vec<f64> {
    let mut out = x.to_vec();
    for (e, o) in out.iter_mut().enumerate() {
        if !domain.design_mask[e] {
            continue;
        }
        let b = (-dobj[e]) / (lambda * dv[e]);
        let scaled = if damping == 0.5 {
            x[e] * fmath::sqrt(b.max(0.0))
        } else {
            x[e] * fmath::powf(b.max(0.0), damping)
        };
        let lower = (x[e] - move_limit).max(0.0);
        let upper = (x[e] + move_limit).min(1.0);
        *o = scaled.clamp(lower, upper);
    }
    out
}

/// Result of one OC update.
#[derive(Debug, Clone)]
pub struct OcUpdate {
    pub x_new: Vec<f64>,
    /// Filtered field of the accepted candidate (three-field mode only).
    pub x_filtered: Option<Vec<f64>>,
    /// Physical field of the accepted candidate, passive elements pinned.
    pub x_physical: Vec<f64>,
    /// Volume fraction of `x_physical` over the design region.
    pub volume_fraction: f64,
}

/// Projection context for the volume measurement inside the OC bisection.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionContext<'a> {
    pub kernel: &'a FilterKernel,
    pub beta: f64,
}

/// Optimality-criteria update with a bisected Lagrange multiplier.
///
/// The multiplier is bisected (geometrically, bracket `[1e-9, 1e9]`, at most
/// 60 halvings) until the volume fraction of the candidate's physical field
/// lands within `1e-3` of the target.
pub fn oc_update(
    x: &[f64],
    dobj: &[f64],
    dv: &[f64],
    target: f64,
    config: &SimpConfig,
    domain: &WheelDomain,
    projection: Option<ProjectionContext<'_>>,
) -> Result<OcUpdate, TopoptError> {
    let n = domain.element_count();
    if x.len() != n || dobj.len() != n || dv.len() != n {
        return Err(TopoptError::ShapeMismatch { expected: n, got: x.len() });
    }
    debug_assert!(dobj
        .iter()
        .enumerate()
        .all(|(e, &g)| !domain.design_mask[e] || g <= 0.0));
    debug_assert!(dv
        .iter()
        .enumerate()
        .all(|(e, &g)| !domain.design_mask[e] || g > 0.0));

    let physical = |candidate: &[f64]| -> (Option<Vec<f64>>, Vec<f64>) {
        match &projection {
            Some(ctx) => {
                let filtered = density_filter(candidate, ctx.kernel);
                let (mut phys, _) = heaviside_project(&filtered, ctx.beta);
                domain.apply_passive(&mut phys);
                (Some(filtered), phys)
            }
            None => {
                let mut phys = candidate.to_vec();
                domain.apply_passive(&mut phys);
                (None, phys)
            }
        }
    };

    let evaluate = |lambda: f64| {
        let cand = oc_candidate(x, dobj, dv, lambda, config.move_limit, config.oc_damping, domain);
        let (filtered, phys) = physical(&cand);
        let vol = domain.design_volume_fraction(&phys);
        (cand, filtered, phys, vol)
    };

    let (mut lo, mut hi) = (1e-9f64, 1e9f64);
    let (_, _, _, vol_lo) = evaluate(lo);
    let (_, _, _, vol_hi) = evaluate(hi);
    // Volume is nonincreasing in the multiplier: `vol_lo` is the most
    // material reachable this step, `vol_hi` the least.
    if target > vol_lo + 1e-3 || target < vol_hi - 1e-3 {
        return Err(TopoptError::BisectionBracket {
            target,
            reachable: (vol_hi, vol_lo),
        });
    }

    let mut best = evaluate(fmath::sqrt(lo * hi));
    for _ in 0..60 {
        if fmath::abs(best.3 - target) <= 1e-4 {
            break;
        }
        if best.3 > target {
            lo = fmath::sqrt(lo * hi);
        } else {
            hi = fmath::sqrt(lo * hi);
        }
        best = evaluate(fmath::sqrt(lo * hi));
    }
    if fmath::abs(best.3 - target) > 1e-3 {
        return Err(TopoptError::BisectionStalled {
            achieved: best.3,
            target,
        });
    }
    let (x_new, x_filtered, x_physical, volume_fraction) = best;
    Ok(OcUpdate {
        x_new,
        x_filtered,
        x_physical,
        volume_fraction,
    })
}

/// Compliance objective of a design-variable field through the three-field
/// chain: physical field, compliance, and gradients with respect to `x`.
#[derive(Debug, Clone)]
pub struct ComplianceEval {
    pub compliance: f64,
    /// d(compliance)/dx through projection derivative and filter adjoint.
    pub gradient: Vec<f64>,
    /// Volume-constraint gradient through the same chain.
    pub volume_gradient: Vec<f64>,
    pub x_physical: Vec<f64>,
    pub volume_fraction: f64,
}

/// Evaluates compliance and its design gradient for the three-field chain.
/// This is exactly the evaluation the optimizer iterates on.
pub fn evaluate_compliance_objective(
    domain: &WheelDomain,
    loads: &LoadCase,
    kernel: &FilterKernel,
    config: &SimpConfig,
    x: &[f64],
    beta: f64,
) -> Result<ComplianceEval, TopoptError> {
    let filtered = density_filter(x, kernel);
    let (mut phys, dproj) = heaviside_project(&filtered, beta);
    domain.apply_passive(&mut phys);

    let u = fea::solve_grid(
        domain.nelx,
        domain.nely,
        &domain.fixed_dofs,
        &phys,
        &loads.nodal_forces,
        &config.material,
        config.solver,
        config.solver_tolerance,
    )?;
    let compliance = fea::compliance(domain.nelx, domain.nely, &phys, &config.material, &u)?;
    let dc_phys =
        fea::compliance_sensitivity(domain.nelx, domain.nely, &phys, &config.material, &u)?;

    // Passive elements are pinned after projection, so nothing propagates
    // through them in the chain rule.
    let n = domain.element_count();
    let mut g_tilde = vec![0.0; n];
    let mut gv_tilde = vec![0.0; n];
    for e in 0..n {
        if domain.design_mask[e] {
            g_tilde[e] = dc_phys[e] * dproj[e];
            gv_tilde[e] = dproj[e];
        }
    }
    let gradient = density_filter_adjoint(&g_tilde, kernel);
    let volume_gradient = density_filter_adjoint(&gv_tilde, kernel);
    let volume_fraction = domain.design_volume_fraction(&phys);
    Ok(ComplianceEval {
        compliance,
        gradient,
        volume_gradient,
        x_physical: phys,
        volume_fraction,
    })
}

/// Per-iteration log entry of an optimization run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub compliance: f64,
    pub similarity_l1: f64,
    pub volume_fraction: f64,
    pub beta: f64,
    pub change: f64,
}

/// Snapshot handed to a run observer after each iteration.
pub struct IterationSnapshot<'a> {
    pub log: IterationLog,
    pub x_physical: &'a [f64],
}

/// Final state of a topology-optimization run.
#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub x_physical: DensityField,
    pub compliance: f64,
    /// `||x* - x_bar||_1` against the reference, when one was given.
    pub similarity_l1: f64,
    pub iterations: usize,
    pub converged: bool,
    pub volume_fraction: f64,
    pub history: Vec<IterationLog>,
}

/// Runs SIMP compliance minimization toward an optional reference design.
///
/// The volume target comes from the reference (its solid fraction over the
/// design region) unless an explicit fraction is supplied.
pub fn run_topopt(
    domain: &WheelDomain,
    reference: Option<&DesignImage>,
    lambda_sim: f64,
    force_ratio: f64,
    volume_fraction: Option<f64>,
    config: &SimpConfig,
) -> Result<OptimizationResult, TopoptError> {
    run_topopt_observed(
        domain,
        reference,
        lambda_sim,
        force_ratio,
        volume_fraction,
        config,
        |_| {},
    )
}

/// [`run_topopt`] with a per-iteration observer (history dumps, progress).
pub fn run_topopt_observed(
    domain: &WheelDomain,
    reference: Option<&DesignImage>,
    lambda_sim: f64,
    force_ratio: f64,
    volume_fraction: Option<f64>,
    config: &SimpConfig,
    mut observer: impl FnMut(&IterationSnapshot<'_>),
) -> Result<OptimizationResult, TopoptError> {
    config.validate()?;
    let similarity = match reference {
        Some(r) => Some(SimilarityObjective::new(lambda_sim, r.clone())?),
        None => None,
    };
    if let Some(sim) = &similarity {
        if sim.reference.width() != domain.nelx || sim.reference.height() != domain.nely {
            return Err(GeometryError::ShapeMismatch {
                domain: (domain.nelx, domain.nely),
                image: (sim.reference.width(), sim.reference.height()),
            }
            .into());
        }
    }
    let target = match (reference, volume_fraction) {
        (_, Some(f)) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(TopoptError::InvalidConfig("volume fraction must be in (0, 1)"));
            }
            f
        }
        (Some(r), None) => geometry::volume_fraction_of(r, domain)?,
        (None, None) => return Err(TopoptError::MissingVolumeTarget),
    };

    let loads = geometry::build_surface_loads(domain, force_ratio)?;
    let kernel = build_filter_kernel(domain, config.r_min)?;
    let three_field = config.filter == FilterScheme::ThreeField;

    // Similarity gradient is constant over the run; skipped when weightless so
    // runs with lambda 0 are bit-identical regardless of reference content.
    let sim_grad = match &similarity {
        Some(s) if s.lambda_sim > 0.0 => Some(similarity_sensitivity(&s.reference, s.lambda_sim)?),
        _ => None,
    };

    let n = domain.element_count();
    let mut x = vec![0.0; n];
    for e in 0..n {
        if domain.design_mask[e] {
            x[e] = target;
        }
    }
    domain.apply_passive(&mut x);

    let mut beta = if three_field { config.beta.initial } else { 0.0 };
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=config.max_iterations {
        iterations = it;
        let (compliance, mut dobj, dv, x_phys) = if three_field {
            let eval = evaluate_compliance_objective(domain, &loads, &kernel, config, &x, beta)?;
            (eval.compliance, eval.gradient, eval.volume_gradient, eval.x_physical)
        } else {
            let mut phys = x.clone();
            domain.apply_passive(&mut phys);
            let u = fea::solve_grid(
                domain.nelx,
                domain.nely,
                &domain.fixed_dofs,
                &phys,
                &loads.nodal_forces,
                &config.material,
                config.solver,
                config.solver_tolerance,
            )?;
            let c = fea::compliance(domain.nelx, domain.nely, &phys, &config.material, &u)?;
            let dc =
                fea::compliance_sensitivity(domain.nelx, domain.nely, &phys, &config.material, &u)?;
            let filtered = sensitivity_filter(&phys, &dc, &kernel, config.sensitivity_floor);
            (c, filtered, vec![1.0; n], phys)
        };

        if let Some(sg) = &sim_grad {
            for (g, s) in dobj.iter_mut().zip(sg) {
                *g += s;
            }
        }
        // Positive sensitivities would push the OC update the wrong way.
        for g in dobj.iter_mut() {
            if *g > 0.0 {
                *g = 0.0;
            }
        }

        let projection = if three_field {
            Some(ProjectionContext { kernel: &kernel, beta })
        } else {
            None
        };
        // When the projection sharpens, saturated elements stop responding to
        // small density moves and the per-step reachable volume band can
        // narrow past the target. The move limit is a stabilizer, not a
        // constraint: widen it for this update until the volume bracket
        // exists again (1.0 always brackets with the masked kernel).
        let mut move_limit = config.move_limit;
        let update = loop {
            let relaxed = SimpConfig { move_limit, ..config.clone() };
            match oc_update(&x, &dobj, &dv, target, &relaxed, domain, projection) {
                Ok(u) => break u,
                Err(TopoptError::BisectionBracket { .. }) if move_limit < 1.0 => {
                    move_limit = (2.0 * move_limit).min(1.0);
                }
                Err(e) => return Err(e),
            }
        };

        let mut change = 0.0f64;
        for e in 0..n {
            if domain.design_mask[e] {
                change = change.max(fmath::abs(update.x_new[e] - x[e]));
            }
        }

        let similarity_l1 = similarity
            .as_ref()
            .map(|s| l1_between(s.reference.pixels(), &x_phys))
            .unwrap_or(0.0);
        let log = IterationLog {
            iteration: it,
            compliance,
            similarity_l1,
            volume_fraction: update.volume_fraction,
            beta,
            change,
        };
        history.push(log);
        observer(&IterationSnapshot {
            log,
            x_physical: &update.x_physical,
        });

        x = update.x_new;

        if change <= config.tolerance {
            if !three_field || beta >= config.beta.cap {
                converged = true;
                break;
            }
            // Sharpen the projection and keep iterating; the convergence
            // check restarts against the new beta.
            beta = (beta * config.beta.growth).min(config.beta.cap);
        } else if three_field && it % config.beta.period == 0 && beta < config.beta.cap {
            beta = (beta * config.beta.growth).min(config.beta.cap);
        }
    }

    // Final consistent evaluation of the updated design.
    let (x_phys, compliance) = if three_field {
        let eval = evaluate_compliance_objective(domain, &loads, &kernel, config, &x, beta)?;
        (eval.x_physical, eval.compliance)
    } else {
        let mut phys = x.clone();
        domain.apply_passive(&mut phys);
        let u = fea::solve_grid(
            domain.nelx,
            domain.nely,
            &domain.fixed_dofs,
            &phys,
            &loads.nodal_forces,
            &config.material,
            config.solver,
            config.solver_tolerance,
        )?;
        let c = fea::compliance(domain.nelx, domain.nely, &phys, &config.material, &u)?;
        (phys, c)
    };
    let volume_fraction = domain.design_volume_fraction(&x_phys);
    let similarity_l1 = similarity
        .as_ref()
        .map(|s| l1_between(s.reference.pixels(), &x_phys))
        .unwrap_or(0.0);

    Ok(OptimizationResult {
        x_physical: DensityField {
            nelx: domain.nelx,
            nely: domain.nely,
            values: x_phys,
        },
        compliance,
        similarity_l1,
        iterations,
        converged,
        volume_fraction,
        history,
    })
}

fn l1_between(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| fmath::abs(x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_wheel_domain;

    fn small_domain() -> WheelDomain {
        build_wheel_domain(16, 6.0, 1.2, 1.6).unwrap()
    }

    #[test]
    fn kernel_at_unit_radius_is_self_only() {
        // dist 0 keeps weight r_min, dist 1 lands exactly on the boundary and
        // is excluded by the strict `H > 0` rule.
        let k = build_filter_kernel_grid(5, 4, 1.0).unwrap();
        for e in 0..20 {
            let n: Vec<_> = k.neighbors(e).collect();
            assert_eq!(n.len(), 1);
            assert_eq!(n[0].0, e);
            assert!((n[0].1 - k.r_min()).abs() < 1e-12);
        }
        // Nudging the radius above 1 admits the axis neighbors with their
        // (here tiny) positive weights.
        let k = build_filter_kernel_grid(5, 4, 1.0 + 1e-9).unwrap();
        assert_eq!(k.neighbors(2 * 5 + 2).count(), 5);
    }

    /// Independent enumeration oracle: Euclidean center distances on the
    /// grid, weights `r_min - dist` where positive.
    fn enumerate_kernel(
        nelx: isize,
        nely: isize,
        e: (isize, isize),
        r_min: f64,
    ) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for fr in 0..nely {
            for fc in 0..nelx {
                let d = (((e.0 - fr).pow(2) + (e.1 - fc).pow(2)) as f64).sqrt();
                if r_min - d > 0.0 {
                    out.push(((fr * nelx + fc) as usize, r_min - d));
                }
            }
        }
        out
    }

    #[test]
    fn kernel_radius_two_interior_matches_enumeration() {
        let k = build_filter_kernel_grid(5, 5, 2.0).unwrap();
        let center = 2 * 5 + 2;
        let mut got: Vec<_> = k.neighbors(center).collect();
        got.sort_by_key(|&(e, _)| e);
        let mut expect = enumerate_kernel(5, 5, (2, 2), 2.0);
        expect.sort_by_key(|&(e, _)| e);
        // Self + 4 axis neighbors (weight 1) + 4 diagonals (weight 2 - sqrt 2).
        assert_eq!(expect.len(), 9);
        assert_eq!(got.len(), expect.len());
        for ((ge, gw), (ee, ew)) in got.iter().zip(&expect) {
            assert_eq!(ge, ee);
            assert!((gw - ew).abs() < 1e-12);
        }
        let self_w = got.iter().find(|&&(e, _)| e == center).unwrap().1;
        assert!((self_w - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_radius_two_corner_is_truncated() {
        let k = build_filter_kernel_grid(5, 5, 2.0).unwrap();
        let mut got: Vec<_> = k.neighbors(0).collect();
        got.sort_by_key(|&(e, _)| e);
        let mut expect = enumerate_kernel(5, 5, (0, 0), 2.0);
        expect.sort_by_key(|&(e, _)| e);
        // Self + 2 axis neighbors + 1 diagonal survive the boundary cut.
        assert_eq!(expect.len(), 4);
        assert_eq!(got.len(), expect.len());
        for ((ge, gw), (ee, ew)) in got.iter().zip(&expect) {
            assert_eq!(ge, ee);
            assert!((gw - ew).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_symmetric() {
        let k = build_filter_kernel_grid(7, 6, 2.5).unwrap();
        for e in 0..42 {
            for (f, w) in k.neighbors(e) {
                let back = k
                    .neighbors(f)
                    .find(|&(g, _)| g == e)
                    .expect("asymmetric kernel");
                assert!((back.1 - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_rejects_sub_unit_radius() {
        assert!(matches!(
            build_filter_kernel_grid(4, 4, 0.8),
            Err(TopoptError::DegenerateKernel { .. })
        ));
    }

    #[test]
    fn density_filter_preserves_uniform_fields() {
        let k = build_filter_kernel_grid(6, 6, 2.0).unwrap();
        let x = vec![0.37; 36];
        let out = density_filter(&x, &k);
        for v in out {
            assert!((v - 0.37).abs() < 1e-14);
        }
    }

    #[test]
    fn density_filter_matches_naive_double_loop() {
        use rand::{Rng, SeedableRng};
        let (nelx, nely) = (6, 6);
        let k = build_filter_kernel_grid(nelx, nely, 2.3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = density_filter(&x, &k);
        // Naive oracle straight from the definition.
        for er in 0..nely {
            for ec in 0..nelx {
                let mut num = 0.0;
                let mut den = 0.0;
                for fr in 0..nely {
                    for fc in 0..nelx {
                        let dist = ((er as f64 - fr as f64).powi(2)
                            + (ec as f64 - fc as f64).powi(2))
                        .sqrt();
                        let w = 2.3 - dist;
                        if w > 0.0 {
                            num += w * x[fr * nelx + fc];
                            den += w;
                        }
                    }
                }
                let got = out[er * nelx + ec];
                assert!((got - num / den).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn impulse_stays_within_bounds() {
        let k = build_filter_kernel_grid(5, 5, 2.0).unwrap();
        let mut x = vec![0.0; 25];
        x[12] = 1.0;
        let out = density_filter(&x, &k);
        for v in &out {
            assert!((0.0..=1.0).contains(v));
        }
        assert!(out[12] > out[7]);
    }

    #[test]
    fn adjoint_is_transpose_of_filter() {
        use rand::{Rng, SeedableRng};
        let k = build_filter_kernel_grid(5, 4, 1.8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // <g, F x> == <F^T g, x>
        let fx = density_filter(&x, &k);
        let ftg = density_filter_adjoint(&g, &k);
        let lhs: f64 = g.iter().zip(&fx).map(|(a, b)| a * b).sum();
        let rhs: f64 = ftg.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_filter_fixes_uniform_inputs() {
        let k = build_filter_kernel_grid(6, 6, 2.0).unwrap();
        let x = vec![0.5; 36];
        let dc = vec![-2.0; 36];
        let out = sensitivity_filter(&x, &dc, &k, 1e-3);
        for v in out {
            assert!((v + 2.0).abs() < 1e-13);
        }
    }

    #[test]
    fn sensitivity_filter_with_self_kernel_is_identity() {
        let k = build_filter_kernel_grid(4, 4, 1.0).unwrap();
        let x: Vec<f64> = (0..16).map(|i| 0.2 + 0.04 * i as f64).collect();
        let dc: Vec<f64> = (0..16).map(|i| -(i as f64) - 1.0).collect();
        let out = sensitivity_filter(&x, &dc, &k, 1e-3);
        for (a, b) in out.iter().zip(&dc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sensitivity_filter_matches_naive_oracle() {
        use rand::{Rng, SeedableRng};
        let (nelx, nely) = (5, 5);
        let r = 2.0;
        let k = build_filter_kernel_grid(nelx, nely, r).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..25).map(|_| rng.gen_range(0.05..1.0)).collect();
        let dc: Vec<f64> = (0..25).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let out = sensitivity_filter(&x, &dc, &k, 1e-3);
        for er in 0..nely {
            for ec in 0..nelx {
                let mut num = 0.0;
                let mut den = 0.0;
                for fr in 0..nely {
                    for fc in 0..nelx {
                        let dist = ((er as f64 - fr as f64).powi(2)
                            + (ec as f64 - fc as f64).powi(2))
                        .sqrt();
                        let w = r - dist;
                        if w > 0.0 {
                            num += w * x[fr * nelx + fc] * dc[fr * nelx + fc];
                            den += w;
                        }
                    }
                }
                let e = er * nelx + ec;
                let expect = num / (x[e].max(1e-3) * den);
                assert!((out[e] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn projection_endpoints_are_fixed() {
        for beta in [0.0, 0.5, 1.0, 8.0, 64.0] {
            let (p, _) = heaviside_project(&[0.0, 1.0], beta);
            assert!((p[0] - 0.0).abs() < 1e-15, "beta {beta}");
            assert!((p[1] - 1.0).abs() < 1e-15, "beta {beta}");
        }
    }

    #[test]
    fn projection_at_beta_zero_is_identity() {
        let xs = [0.0, 0.1, 0.33, 0.5, 0.9, 1.0];
        let (p, d) = heaviside_project(&xs, 0.0);
        for (a, b) in p.iter().zip(&xs) {
            assert_eq!(a, b);
        }
        for v in d {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_midpoint_matches_direct_evaluation() {
        let (p, d) = heaviside_project(&[0.5], 1.0);
        let expect = 1.0 - (-0.5f64).exp() + 0.5 * (-1.0f64).exp();
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - 0.5774090608730878).abs() < 1e-12);
        let dexpect = 1.0 * (-0.5f64).exp() + (-1.0f64).exp();
        assert!((d[0] - dexpect).abs() < 1e-15);
    }

    #[test]
    fn projection_derivative_matches_finite_differences() {
        let beta = 3.0;
        let h = 1e-7;
        for x in [0.05, 0.3, 0.62, 0.95] {
            let (_, d) = heaviside_project(&[x], beta);
            let (pp, _) = heaviside_project(&[x + h], beta);
            let (pm, _) = heaviside_project(&[x - h], beta);
            let fd = (pp[0] - pm[0]) / (2.0 * h);
            assert!((d[0] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn similarity_gradient_is_minus_lambda_on_solid() {
        let reference = DesignImage::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = similarity_sensitivity(&reference, 0.005).unwrap();
        assert_eq!(g, vec![-0.005, 0.0, 0.0, -0.005]);
        let zeros = similarity_sensitivity(&reference, 0.0).unwrap();
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_gradient_matches_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pixels: Vec<f64> = (0..48)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let reference = DesignImage::new(8, 6, pixels.clone()).unwrap();
        let g = similarity_sensitivity(&reference, 0.5).unwrap();
        for (gv, p) in g.iter().zip(&pixels) {
            assert_eq!(*gv, -0.5 * p);
        }
    }

    #[test]
    fn similarity_rejects_gray_references() {
        let gray = DesignImage::new(2, 1, vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            similarity_sensitivity(&gray, 1.0),
            Err(TopoptError::NonBinaryReference { pixel: 0 })
        ));
    }

    #[test]
    fn oc_move_clamp_caps_the_step() {
        let domain = small_domain();
        let n = domain.element_count();
        let x = vec![0.5; n];
        // Huge favorable sensitivity drives B far above 1.
        let dobj = vec![-1e6; n];
        let dv = vec![1.0; n];
        let got = oc_candidate(&x, &dobj, &dv, 1.0, 0.2, 0.5, &domain);
        for e in 0..n {
            if domain.design_mask[e] {
                assert_eq!(got[e], 0.7, "upper move clamp");
            } else {
                assert_eq!(got[e], x[e]);
            }
        }
    }

    #[test]
    fn oc_fixed_point_when_b_is_one_at_target_volume() {
        let domain = small_domain();
        let n = domain.element_count();
        let config = SimpConfig {
            r_min: 1.0 + 1e-9,
            ..SimpConfig::default()
        };
        let kernel = build_filter_kernel(&domain, config.r_min).unwrap();
        let f = 0.4;
        let mut x = vec![0.0; n];
        for e in 0..n {
            if domain.design_mask[e] {
                x[e] = f;
            }
        }
        domain.apply_passive(&mut x);
        let dv = vec![1.0; n];
        let dobj = vec![-1.0; n]; // B = 1 exactly at lambda = 1
        let update = oc_update(
            &x,
            &dobj,
            &dv,
            f,
            &config,
            &domain,
            Some(ProjectionContext { kernel: &kernel, beta: 0.0 }),
        )
        .unwrap();
        for e in 0..n {
            assert!(
                (update.x_new[e] - x[e]).abs() < 1e-5,
                "element {e} moved from the fixed point"
            );
        }
        assert!((update.volume_fraction - f).abs() <= 1e-3);
    }

    #[test]
    fn oc_hits_volume_target_on_random_instance() {
        use rand::{Rng, SeedableRng};
        let domain = small_domain();
        let n = domain.element_count();
        let config = SimpConfig::default();
        let kernel = build_filter_kernel(&domain, config.r_min).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut x = vec![0.0; n];
        for e in 0..n {
            if domain.design_mask[e] {
                x[e] = rng.gen_range(0.2..0.8);
            }
        }
        domain.apply_passive(&mut x);
        let dobj: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..2.0)).collect();
        let dv = vec![1.0; n];
        // Rim mixing through the filter floors the reachable volume near
        // 0.36 here, and beta = 2 projection inflates mid densities further.
        for (beta, target) in [(0.0, 0.4), (0.0, 0.5), (0.0, 0.65), (2.0, 0.6), (2.0, 0.75)] {
            let update = oc_update(
                &x,
                &dobj,
                &dv,
                target,
                &config,
                &domain,
                Some(ProjectionContext { kernel: &kernel, beta }),
            )
            .unwrap();
            // Independent volume summation over the design region.
            let mut sum = 0.0;
            let mut cnt = 0;
            for e in 0..n {
                if domain.design_mask[e] {
                    sum += update.x_physical[e];
                    cnt += 1;
                }
            }
            assert!((sum / cnt as f64 - target).abs() <= 1e-3, "target {target}");
        }
    }

    #[test]
    fn oc_rejects_unreachable_volume_targets() {
        let domain = small_domain();
        let n = domain.element_count();
        let config = SimpConfig::default();
        let kernel = build_filter_kernel(&domain, config.r_min).unwrap();
        let mut x = vec![0.0; n];
        for e in 0..n {
            if domain.design_mask[e] {
                x[e] = 0.5;
            }
        }
        domain.apply_passive(&mut x);
        let dobj = vec![-1.0; n];
        let dv = vec![1.0; n];
        // Move limit 0.2 cannot jump from 0.5 to 0.99 in one step.
        let err = oc_update(
            &x,
            &dobj,
            &dv,
            0.99,
            &config,
            &domain,
            Some(ProjectionContext { kernel: &kernel, beta: 0.0 }),
        )
        .unwrap_err();
        assert!(matches!(err, TopoptError::BisectionBracket { .. }));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let c = SimpConfig {
            move_limit: 0.0,
            ..SimpConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SimpConfig {
            beta: BetaSchedule { growth: 0.5, ..BetaSchedule::default() },
            ..SimpConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SimpConfig {
            r_min: 0.5,
            ..SimpConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn run_requires_a_volume_target() {
        let domain = small_domain();
        let config = SimpConfig::for_resolution(16);
        assert!(matches!(
            run_topopt(&domain, None, 0.0, 0.1, None, &config),
            Err(TopoptError::MissingVolumeTarget)
        ));
    }
}
