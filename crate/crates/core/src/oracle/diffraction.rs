//! Single knife-edge diffraction and profile sampling.

use crate::env::HeightField;

/// Below this Fresnel parameter the obstacle is taken as fully cleared.
pub const KNIFE_EDGE_THRESHOLD: f64 = -0.78;

/// Knife-edge diffraction loss in dB for Fresnel-Kirchhoff parameter `nu`.
///
/// `J(nu) = 6.9 + 20 log10(sqrt((nu - 0.1)^2 + 1) + nu - 0.1)` for
/// `nu > -0.78`, zero otherwise.
pub fn knife_edge_loss(nu: f64) -> f64 {
    if nu <= KNIFE_EDGE_THRESHOLD {
        return 0.0;
    }
    let v = nu - 0.1;
    6.9 + 20.0 * ((v * v + 1.0).sqrt() + v).log10()
}

/// Fresnel parameter for an obstacle protruding `clearance` meters above the
/// ray, `d1` and `d2` meters from the two ends.
pub fn fresnel_nu(clearance: f64, d1: f64, d2: f64, wavelength: f64) -> f64 {
    clearance * (2.0 / wavelength * (1.0 / d1 + 1.0 / d2)).sqrt()
}

/// Number of sub-intervals used to sample a segment of plan length `len`;
/// keeps the step at or below half a cell.
#[inline]
pub(crate) fn sample_count(len: f64, cell_size: f64) -> usize {
    ((len / (0.5 * cell_size)).ceil() as usize).max(2)
}

/// Iterates interior samples `(t, x, y, z)` along the 3D segment `p -> q`,
/// `t` in `(0, 1)` with a step of at most half a cell in plan view.
#[inline]
pub(crate) fn interior_samples(
    cell_size: f64,
    p: [f64; 3],
    q: [f64; 3],
) -> impl Iterator<Item = (f64, f64, f64, f64)> {
    let len = (q[0] - p[0]).hypot(q[1] - p[1]);
    let n = sample_count(len, cell_size);
    (1..n).map(move |i| {
        let t = i as f64 / n as f64;
        (
            t,
            p[0] + t * (q[0] - p[0]),
            p[1] + t * (q[1] - p[1]),
            p[2] + t * (q[2] - p[2]),
        )
    })
}

/// True when every interior sample of `p -> q` passes strictly above the
/// local surface.
pub(crate) fn segment_clear(field: &HeightField, p: [f64; 3], q: [f64; 3]) -> bool {
    interior_samples(field.cell_size(), p, q).all(|(_, x, y, z)| field.height_or_ground(x, y) < z)
}

/// Largest Fresnel parameter over building samples of the direct profile, or
/// `None` when the profile crosses no building.
pub(crate) fn dominant_nu(field: &HeightField, p: [f64; 3], q: [f64; 3], wavelength: f64) -> Option<f64> {
    let len3 = ((q[0] - p[0]).hypot(q[1] - p[1])).hypot(q[2] - p[2]);
    interior_samples(field.cell_size(), p, q)
        .filter_map(|(t, x, y, z)| {
            let h = field.height_or_ground(x, y);
            (h > 0.0).then(|| fresnel_nu(h - z, t * len3, (1.0 - t) * len3, wavelength))
        })
        .reduce(f64::max)
}
