//! Wheel design domain: element masks, boundary conditions and surface loads.
//!
//! The domain is a square grid of unit elements. Coordinates follow the image
//! convention: `x` grows with the column index, `y` grows with the row index
//! (downward), element `(col, row)` has its center at `(col + 0.5, row + 0.5)`
//! and the grid center sits at `(nelx/2, nely/2)`. Each element is classified
//! by its center distance `r` from the grid center:
//!
//! * `r > outer_radius` or `r < hub_radius` — passive void (density pinned 0),
//! * `outer_radius - rim_thickness < r <= outer_radius` — passive solid rim
//!   (density pinned 1),
//! * otherwise — free design region.
//!
//! Nodes ringing the hub hole are fully clamped; rim surface nodes carry the
//! normal/shear traction pair whose magnitude ratio is the force ratio.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;
use crate::image::DesignImage;

/// Per-element scalar field on the domain grid, row-major like [`DesignImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub nelx: usize,
    pub nely: usize,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn constant(nelx: usize, nely: usize, value: f64) -> Self {
        Self {
            nelx,
            nely,
            values: vec![value; nelx * nely],
        }
    }

    pub fn from_image(image: &DesignImage) -> Self {
        Self {
            nelx: image.width(),
            nely: image.height(),
            values: image.pixels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Element classification masks, fixed dofs and grid geometry of the wheel.
#[derive(Debug, Clone)]
pub struct WheelDomain {
    pub nelx: usize,
    pub nely: usize,
    pub outer_radius: f64,
    pub rim_thickness: f64,
    pub hub_radius: f64,
    /// Rim annulus; density pinned to 1.
    pub passive_solid: Vec<bool>,
    /// Outside the outer circle and inside the hub hole; density pinned to 0.
    pub passive_void: Vec<bool>,
    /// Free elements the optimizer may change.
    pub design_mask: Vec<bool>,
    /// Clamped displacement dofs (hub hole boundary nodes), sorted ascending.
    pub fixed_dofs: Vec<usize>,
    /// Grid center in node coordinates.
    pub center: (f64, f64),
}

/// Surface traction turned into a nodal force vector.
#[derive(Debug, Clone)]
pub struct LoadCase {
    /// Normal (radial, inward) force magnitude divided by shear magnitude.
    pub force_ratio: f64,
    /// Per-node normal force magnitude (`force_ratio * shear_magnitude`).
    pub normal_magnitude: f64,
    /// Per-node tangential force magnitude (unit scale).
    pub shear_magnitude: f64,
    /// Global force vector, two dofs per node, zero on all fixed dofs.
    pub nodal_forces: Vec<f64>,
    /// Nodes that received a load (rim surface nodes).
    pub loaded_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    /// Radii must satisfy `0 < hub < outer - rim` and `2*outer <= resolution`.
    InvalidRadii {
        outer: f64,
        rim: f64,
        hub: f64,
        resolution: usize,
    },
    ResolutionTooSmall { resolution: usize },
    NegativeForceRatio { force_ratio: f64 },
    /// Reference image grid does not match the domain element grid.
    ShapeMismatch {
        domain: (usize, usize),
        image: (usize, usize),
    },
    EmptyDesignRegion,
    /// Hub clamp produced no fixed dofs (degenerate hub).
    NoFixedDofs,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::InvalidRadii {
                outer,
                rim,
                hub,
                resolution,
            } => write!(
                f,
                "invalid radii (outer={outer}, rim={rim}, hub={hub}) for resolution {resolution}: \
                 need 0 < hub < outer - rim and 2*outer <= resolution"
            ),
            GeometryError::ResolutionTooSmall { resolution } => {
                write!(f, "resolution {resolution} is below the minimum of 8")
            }
            GeometryError::NegativeForceRatio { force_ratio } => {
                write!(f, "force ratio must be >= 0, got {force_ratio}")
            }
            GeometryError::ShapeMismatch { domain, image } => write!(
                f,
                "reference image is {}x{} but the domain has {}x{} elements",
                image.0, image.1, domain.0, domain.1
            ),
            GeometryError::EmptyDesignRegion => write!(f, "domain has no free design elements"),
            GeometryError::NoFixedDofs => write!(f, "hub boundary produced no fixed dofs"),
        }
    }
}

impl core::error::Error for GeometryError {}

impl WheelDomain {
    pub fn element_count(&self) -> usize {
        self.nelx * self.nely
    }

    pub fn node_count(&self) -> usize {
        (self.nelx + 1) * (self.nely + 1)
    }

    pub fn dof_count(&self) -> usize {
        2 * self.node_count()
    }

    /// Node id for node grid coordinates, column-major: `col*(nely+1) + row`.
    pub fn node_id(&self, col: usize, row: usize) -> usize {
        col * (self.nely + 1) + row
    }

    /// Element index for grid coordinates, row-major like images.
    pub fn element_index(&self, col: usize, row: usize) -> usize {
        row * self.nelx + col
    }

    /// The 8 global dofs of element `(col, row)` in the local stiffness order
    /// (nodes counterclockwise from the element origin corner).
    pub fn element_dofs(&self, col: usize, row: usize) -> [usize; 8] {
        let n1 = self.node_id(col, row);
        let n2 = self.node_id(col + 1, row);
        let n3 = self.node_id(col + 1, row + 1);
        let n4 = self.node_id(col, row + 1);
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

    pub fn design_element_count(&self) -> usize {
        self.design_mask.iter().filter(|&&d| d).count()
    }

    /// Distance of an element center from the grid center.
    pub fn element_radius(&self, col: usize, row: usize) -> f64 {
        let dx = (col as f64 + 0.5) - self.center.0;
        let dy = (row as f64 + 0.5) - self.center.1;
        fmath::sqrt(dx * dx + dy * dy)
    }

    /// Pins a density field to the passive masks: rim 1, void 0.
    pub fn apply_passive(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            if self.passive_solid[i] {
                *v = 1.0;
            } else if self.passive_void[i] {
                *v = 0.0;
            }
        }
    }

    /// Mean physical density over the design region.
    pub fn design_volume_fraction(&self, values: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &v) in values.iter().enumerate() {
            if self.design_mask[i] {
                sum += v;
                count += 1;
            }
        }
        sum / count as f64
    }
}

/// Default radii for a given resolution: outer `n/2 - 2`, rim `max(2, n/32)`,
/// hub `n/10`.
pub fn default_radii(resolution: usize) -> (f64, f64, f64) {
    let n = resolution as f64;
    (n / 2.0 - 2.0, (n / 32.0).max(2.0), n / 10.0)
}

/// Builds the square wheel domain: element masks plus hub clamp dofs.
pub fn build_wheel_domain(
    resolution: usize,
    outer_radius: f64,
    rim_thickness: f64,
    hub_radius: f64,
) -> Result<WheelDomain, GeometryError> {
    if resolution < 8 {
        return Err(GeometryError::ResolutionTooSmall { resolution });
    }
    let bad_order = !(hub_radius > 0.0 && hub_radius < outer_radius - rim_thickness);
    if bad_order || rim_thickness <= 0.0 || 2.0 * outer_radius > resolution as f64 {
        return Err(GeometryError::InvalidRadii {
            outer: outer_radius,
            rim: rim_thickness,
            hub: hub_radius,
            resolution,
        });
    }

    let nelx = resolution;
    let nely = resolution;
    let center = (nelx as f64 / 2.0, nely as f64 / 2.0);
    let n = nelx * nely;
    let mut passive_solid = vec![false; n];
    let mut passive_void = vec![false; n];
    let mut design_mask = vec![false; n];

    // hub_void is tracked separately from the outside void: clamped nodes ring
    // the hub hole, loaded nodes ring the outer circle.
    let mut hub_void = vec![false; n];
    for row in 0..nely {
        for col in 0..nelx {
            let e = row * nelx + col;
            let dx = (col as f64 + 0.5) - center.0;
            let dy = (row as f64 + 0.5) - center.1;
            let r = fmath::sqrt(dx * dx + dy * dy);
            if r > outer_radius {
                passive_void[e] = true;
            } else if r < hub_radius {
                passive_void[e] = true;
                hub_void[e] = true;
            } else if r > outer_radius - rim_thickness {
                passive_solid[e] = true;
            } else {
                design_mask[e] = true;
            }
        }
    }
    if !design_mask.iter().any(|&d| d) {
        return Err(GeometryError::EmptyDesignRegion);
    }

    // A node is clamped when its adjacent elements straddle the hub circle.
    let mut fixed_dofs = Vec::new();
    for ncol in 0..=nelx {
        for nrow in 0..=nely {
            let mut touches_hub = false;
            let mut touches_material = false;
            for (ec, er) in adjacent_elements(ncol, nrow, nelx, nely) {
                let e = er * nelx + ec;
                if hub_void[e] {
                    touches_hub = true;
                } else {
                    touches_material = true;
                }
            }
            if touches_hub && touches_material {
                let node = ncol * (nely + 1) + nrow;
                fixed_dofs.push(2 * node);
                fixed_dofs.push(2 * node + 1);
            }
        }
    }
    fixed_dofs.sort_unstable();
    if fixed_dofs.is_empty() {
        return Err(GeometryError::NoFixedDofs);
    }

    Ok(WheelDomain {
        nelx,
        nely,
        outer_radius,
        rim_thickness,
        hub_radius,
        passive_solid,
        passive_void,
        design_mask,
        fixed_dofs,
        center,
    })
}

/// Convenience: domain with [`default_radii`] for the resolution.
pub fn build_default_domain(resolution: usize) -> Result<WheelDomain, GeometryError> {
    let (outer, rim, hub) = default_radii(resolution);
    build_wheel_domain(resolution, outer, rim, hub)
}

fn adjacent_elements(
    ncol: usize,
    nrow: usize,
    nelx: usize,
    nely: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let cols = [ncol.checked_sub(1), (ncol < nelx).then_some(ncol)];
    let rows = [nrow.checked_sub(1), (nrow < nely).then_some(nrow)];
    cols.into_iter().flatten().flat_map(move |c| {
        rows.into_iter().flatten().map(move |r| (c, r))
    })
}

/// Builds the rim surface load: at each loaded node a radially inward normal
/// force of magnitude `force_ratio * s` and a tangential force of magnitude
/// `s`, with fixed dofs zeroed. The shear scale `s` is `1 / (loaded node
/// count)` so the total applied shear is one force unit regardless of
/// resolution; compliance values are reported per this normalization and
/// land on the same scale as the similarity weights.
pub fn build_surface_loads(
    domain: &WheelDomain,
    force_ratio: f64,
) -> Result<LoadCase, GeometryError> {
    if !(force_ratio >= 0.0) {
        return Err(GeometryError::NegativeForceRatio { force_ratio });
    }

    // Outer surface nodes: adjacent to both a rim element and an outside-void
    // element.
    let mut loaded_nodes = Vec::new();
    for ncol in 0..=domain.nelx {
        for nrow in 0..=domain.nely {
            let mut touches_rim = false;
            let mut touches_outside = false;
            for (ec, er) in adjacent_elements(ncol, nrow, domain.nelx, domain.nely) {
                let e = er * domain.nelx + ec;
                if domain.passive_solid[e] {
                    touches_rim = true;
                }
                if domain.passive_void[e] {
                    let dx = (ec as f64 + 0.5) - domain.center.0;
                    let dy = (er as f64 + 0.5) - domain.center.1;
                    if dx * dx + dy * dy > domain.outer_radius * domain.outer_radius {
                        touches_outside = true;
                    }
                }
            }
            if touches_rim && touches_outside {
                loaded_nodes.push(domain.node_id(ncol, nrow));
            }
        }
    }

    let shear_magnitude = if loaded_nodes.is_empty() {
        0.0
    } else {
        1.0 / loaded_nodes.len() as f64
    };
    let normal_magnitude = force_ratio * shear_magnitude;

    let mut is_fixed = vec![false; domain.dof_count()];
    for &d in &domain.fixed_dofs {
        is_fixed[d] = true;
    }

    let mut nodal_forces = vec![0.0; domain.dof_count()];
    for &node in &loaded_nodes {
        let ncol = node / (domain.nely + 1);
        let nrow = node % (domain.nely + 1);
        let dx = ncol as f64 - domain.center.0;
        let dy = nrow as f64 - domain.center.1;
        let r = fmath::sqrt(dx * dx + dy * dy);
        if r == 0.0 {
            continue;
        }
        let (ux, uy) = (dx / r, dy / r);
        // Inward normal is -u, tangent is u rotated a quarter turn.
        let fx = -normal_magnitude * ux - shear_magnitude * uy;
        let fy = -normal_magnitude * uy + shear_magnitude * ux;
        if !is_fixed[2 * node] {
            nodal_forces[2 * node] += fx;
        }
        if !is_fixed[2 * node + 1] {
            nodal_forces[2 * node + 1] += fy;
        }
    }

    Ok(LoadCase {
        force_ratio,
        normal_magnitude,
        shear_magnitude,
        nodal_forces,
        loaded_nodes,
    })
}

/// Volume fraction of a binarized reference within the design region,
/// clamped to `[0.05, 0.95]`.
pub fn volume_fraction_of(
    reference: &DesignImage,
    domain: &WheelDomain,
) -> Result<f64, GeometryError> {
    if reference.width() != domain.nelx || reference.height() != domain.nely {
        return Err(GeometryError::ShapeMismatch {
            domain: (domain.nelx, domain.nely),
            image: (reference.width(), reference.height()),
        });
    }
    let design_count = domain.design_element_count();
    if design_count == 0 {
        return Err(GeometryError::EmptyDesignRegion);
    }
    let solid_in_design = reference
        .pixels()
        .iter()
        .zip(&domain.design_mask)
        .filter(|&(&p, &d)| d && p >= 0.5)
        .count();
    let f = solid_in_design as f64 / design_count as f64;
    Ok(f.clamp(0.05, 0.95))
}
