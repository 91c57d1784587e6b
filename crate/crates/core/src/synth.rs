//! Synthetic wheel renderer: the seed-data substitute for crawled images.
//!
//! Wheels are rendered as a solid rim ring, a hub hole and `spoke_count`
//! spokes of constant physical width, optionally twisted so each spoke sweeps
//! an angle between hub and rim. All geometry matches the mask classes of the
//! corresponding [`WheelDomain`](crate::geometry::WheelDomain): the rim region
//! is always solid and everything outside the outer circle or inside the hub
//! hole is void.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fmath;
use crate::geometry;
use crate::image::DesignImage;

/// Parameters of one rendered wheel.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWheelSpec {
    pub resolution: usize,
    /// Number of spokes, at least 2.
    pub spoke_count: u32,
    /// Spoke width as a fraction of the outer radius.
    pub spoke_width: f64,
    /// Angular sweep (radians) a spoke covers from hub to rim.
    pub twist: f64,
    pub outer_radius: f64,
    pub rim_thickness: f64,
    pub hub_radius: f64,
}

impl SyntheticWheelSpec {
    /// Spec with the domain default radii and a plain 5-spoke layout.
    pub fn default_for(resolution: usize) -> Self {
        let (outer, rim, hub) = geometry::default_radii(resolution);
        Self {
            resolution,
            spoke_count: 5,
            spoke_width: 0.1,
            twist: 0.0,
            outer_radius: outer,
            rim_thickness: rim,
            hub_radius: hub,
        }
    }
}

/// Sampling ranges for a family of wheels.
#[derive(Debug, Clone, PartialEq)]
pub struct WheelFamily {
    pub spoke_count: (u32, u32),
    pub spoke_width: (f64, f64),
    pub twist: (f64, f64),
}

impl Default for WheelFamily {
    fn default() -> Self {
        Self {
            spoke_count: (3, 8),
            spoke_width: (0.06, 0.16),
            twist: (-0.9, 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    UnrenderableParameters(&'static str),
    Geometry(geometry::GeometryError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::UnrenderableParameters(what) => {
                write!(f, "unrenderable wheel parameters: {what}")
            }
            SynthError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SynthError {}

impl From<geometry::GeometryError> for SynthError {
    fn from(e: geometry::GeometryError) -> Self {
        SynthError::Geometry(e)
    }
}

/// Renders one binary wheel image from its spec.
pub fn render_wheel(spec: &SyntheticWheelSpec) -> Result<DesignImage, SynthError> {
    if spec.spoke_count < 2 {
        return Err(SynthError::UnrenderableParameters("spoke_count < 2"));
    }
    if !(spec.spoke_width > 0.0 && spec.spoke_width < 1.0) {
        return Err(SynthError::UnrenderableParameters("spoke_width outside (0, 1)"));
    }
    if !spec.twist.is_finite() || fmath::abs(spec.twist) > 2.0 * PI {
        return Err(SynthError::UnrenderableParameters("twist outside [-2pi, 2pi]"));
    }
    if !(spec.hub_radius > 0.0 && spec.hub_radius < spec.outer_radius - spec.rim_thickness) {
        return Err(SynthError::UnrenderableParameters("radii ordering"));
    }

    let res = spec.resolution;
    let center = res as f64 / 2.0;
    let n = spec.spoke_count as f64;
    let design_inner = spec.hub_radius;
    let design_outer = spec.outer_radius - spec.rim_thickness;
    let span = (design_outer - design_inner).max(1e-9);
    let half_width_phys = 0.5 * spec.spoke_width * spec.outer_radius;

    let mut pixels = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            let dx = col as f64 + 0.5 - center;
            let dy = row as f64 + 0.5 - center;
            let r = fmath::sqrt(dx * dx + dy * dy);
            let value = if r > spec.outer_radius || r < spec.hub_radius {
                0.0
            } else if r > design_outer {
                1.0
            } else {
                // Fold the angle into quadrant-canonical form so that an
                // exact quarter-turn of the pixel grid shifts the spoke
                // coordinate by exactly n/4; for spoke counts divisible by 4
                // and zero twist the rendered image is then exactly
                // 90-degree symmetric.
                let (cx, cy, quadrant) = canonical_quadrant(dx, dy);
                let angle = fmath::atan2(cy, cx);
                let twist_term = spec.twist * (r - design_inner) / span;
                let spokes =
                    angle * n / (2.0 * PI) + (quadrant * spec.spoke_count) as f64 / 4.0
                        - twist_term * n / (2.0 * PI);
                let frac = spokes - fmath::floor(spokes);
                let offset = frac.min(1.0 - frac) * 2.0 * PI / n;
                // Angular half-width of a constant-physical-width spoke.
                let half_angle = (half_width_phys / r).min(PI / n);
                if offset <= half_angle {
                    1.0
                } else {
                    0.0
                }
            };
            pixels.push(value);
        }
    }
    DesignImage::new(res, res, pixels).map_err(|_| SynthError::UnrenderableParameters("pixels"))
}

/// Rotates (dx, dy) by exact quarter turns into the quadrant with
/// `cx > 0, cy >= 0` (axis points included), returning the turn count.
fn canonical_quadrant(dx: f64, dy: f64) -> (f64, f64, u32) {
    if dx > 0.0 && dy >= 0.0 {
        (dx, dy, 0)
    } else if dx <= 0.0 && dy > 0.0 {
        (dy, -dx, 1)
    } else if dx < 0.0 {
        (-dx, -dy, 2)
    } else {
        (-dy, dx, 3)
    }
}

/// Draws `count` wheels from the family ranges; deterministic per seed.
pub fn generate_synthetic_wheels(
    count: usize,
    resolution: usize,
    family: &WheelFamily,
    seed: u64,
) -> Result<Vec<(DesignImage, SyntheticWheelSpec)>, SynthError> {
    if count == 0 {
        return Err(SynthError::UnrenderableParameters("count must be >= 1"));
    }
    if family.spoke_count.0 < 2 || family.spoke_count.1 < family.spoke_count.0 {
        return Err(SynthError::UnrenderableParameters("spoke_count range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = SyntheticWheelSpec::default_for(resolution);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let spec = SyntheticWheelSpec {
            spoke_count: rng.gen_range(family.spoke_count.0..=family.spoke_count.1),
            spoke_width: sample_range(&mut rng, family.spoke_width),
            twist: sample_range(&mut rng, family.twist),
            ..base.clone()
        };
        let image = render_wheel(&spec)?;
        out.push((image, spec));
    }
    Ok(out)
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}
