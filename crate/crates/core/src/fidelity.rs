//! Data terms: the edge detector `g`, the two-region fitting term `Φ`, and the
//! linear data energy `λ⟨Φ,u⟩ + θ⟨D_G,u⟩` (pixel means).

use crate::error::{shape_err, Error, Result};
use crate::geodesic::{build_slowness, solve_eikonal, DEFAULT_BETA, DEFAULT_EPS};
use crate::image::{gradient_magnitude, rasterize_polygon, region_mean, FieldKind, Image, MarkerSet, ScalarField};

pub const DEFAULT_IOTA: f64 = 100.0;

const PHI_ZERO: f64 = 1e-12;

/// Parameters used to assemble a [`FidelityBundle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityConfig {
    pub iota: f64,
    pub eikonal_beta: f64,
    pub eikonal_eps: f64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            iota: DEFAULT_IOTA,
            eikonal_beta: DEFAULT_BETA,
            eikonal_eps: DEFAULT_EPS,
        }
    }
}

/// Precomputed per-image fields shared by every method.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityBundle {
    pub phi: ScalarField,
    pub dist: ScalarField,
    pub edge: ScalarField,
    pub c1: f64,
    pub c2: f64,
}

impl FidelityBundle {
    pub fn new(phi: ScalarField, dist: ScalarField, edge: ScalarField, c1: f64, c2: f64) -> Result<Self> {
        let dims = phi.dims();
        dist.check_dims(dims.0, dims.1, "distance field")?;
        edge.check_dims(dims.0, dims.1, "edge field")?;
        if phi.kind() != FieldKind::Fidelity || dist.kind() != FieldKind::Distance || edge.kind() != FieldKind::Edge {
            return Err(Error::InvalidParameter("bundle fields carry the wrong kinds".into()));
        }
        Ok(Self {
            phi,
            dist,
            edge,
            c1,
            c2,
        })
    }

    /// Builds Φ, D_G (seeded on the marker polygon) and g for one image.
    pub fn build(f: &Image, markers: &MarkerSet, cfg: &FidelityConfig) -> Result<Self> {
        let (phi, c1, c2) = chanvese_phi(f, markers)?;
        let seeds = rasterize_polygon(markers, f.height(), f.width())?;
        let speed = build_slowness(f, cfg.eikonal_beta, cfg.eikonal_eps)?;
        let dist = solve_eikonal(&speed, &seeds)?;
        let edge = edge_detector(f, cfg.iota)?;
        Self::new(phi, dist, edge, c1, c2)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.phi.dims()
    }

    /// Per-pixel linear coefficient `λΦ + θD_G` of the data energy.
    pub fn weights(&self, lambda: f64, theta: f64) -> Vec<f64> {
        self.phi
            .data()
            .iter()
            .zip(self.dist.data())
            .map(|(p, d)| lambda * p + theta * d)
            .collect()
    }
}

/// `g = 1 / (1 + ι|∇f|²)`.
pub fn edge_detector(f: &Image, iota: f64) -> Result<ScalarField> {
    if !(iota.is_finite() && iota >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "iota must be nonnegative, got {iota}"
        )));
    }
    let grad = gradient_magnitude(f);
    let g = grad.data().iter().map(|m| 1.0 / (1.0 + iota * m * m)).collect();
    ScalarField::new(f.height(), f.width(), g, FieldKind::Edge)
}

/// Two-region fitting term `Φ = (f − c1)² − (f − c2)²`, scaled by `max|Φ|`,
/// with `c1`/`c2` the mean intensity inside/outside the marker polygon.
pub fn chanvese_phi(f: &Image, markers: &MarkerSet) -> Result<(ScalarField, f64, f64)> {
    let (h, w) = f.dims();
    let inside = rasterize_polygon(markers, h, w)?;
    let outside = ScalarField::new(
        h,
        w,
        inside.data().iter().map(|m| 1.0 - m).collect(),
        FieldKind::Mask,
    )?;
    let c1 = region_mean(f, &inside)?;
    let c2 = region_mean(f, &outside).map_err(|_| Error::EmptyRegion("marker polygon covers the whole image"))?;
    let mut phi: Vec<f64> = f
        .data()
        .iter()
        .map(|v| (v - c1) * (v - c1) - (v - c2) * (v - c2))
        .collect();
    let scale = phi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    if scale > PHI_ZERO {
        phi.iter_mut().for_each(|p| *p /= scale);
    } else {
        // c1 and c2 agree up to rounding
        phi.fill(0.0);
    }
    Ok((ScalarField::new(h, w, phi, FieldKind::Fidelity)?, c1, c2))
}

/// Mean over pixels of `(λΦ + θD_G)·u`.
pub fn data_energy(u: &ScalarField, bundle: &FidelityBundle, lambda: f64, theta: f64) -> Result<f64> {
    let (h, w) = bundle.dims();
    if u.dims() != (h, w) {
        return Err(shape_err(format!(
            "label is {}x{}, bundle is {h}x{w}",
            u.height(),
            u.width()
        )));
    }
    let total: f64 = bundle
        .phi
        .data()
        .iter()
        .zip(bundle.dist.data())
        .zip(u.data())
        .map(|((p, d), u)| (lambda * p + theta * d) * u)
        .sum();
    Ok(total / (h * w) as f64)
}
