//! Facade extraction from the height raster.
//!
//! Every cell edge separating two different heights is a vertical wall
//! spanning `[bottom, top]` between the two heights. Collinear runs with the
//! same pair of heights are merged into one segment. Edges on the map border
//! are skipped: they face away from every in-map point.

use crate::env::HeightField;

/// A vertical reflecting facade seen in plan view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Unit normal pointing to the open (lower) side.
    pub normal: [f64; 2],
    pub bottom: f64,
    pub top: f64,
}

impl Wall {
    /// Signed distance of `p` from the wall line, positive on the open side.
    #[inline]
    pub fn side(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.a[0]) * self.normal[0] + (p[1] - self.a[1]) * self.normal[1]
    }

    /// Mirror image of `p` across the wall line.
    #[inline]
    pub fn mirror(&self, p: [f64; 2]) -> [f64; 2] {
        let d = 2.0 * self.side(p);
        [p[0] - d * self.normal[0], p[1] - d * self.normal[1]]
    }

    /// Intersection of the segment `from -> to` with this wall segment.
    /// Returns `None` unless the crossing lies strictly inside the segment
    /// `from -> to` and within the wall's extent.
    #[inline]
    pub fn crossing(&self, from: [f64; 2], to: [f64; 2]) -> Option<[f64; 2]> {
        let dir = [to[0] - from[0], to[1] - from[1]];
        let denom = dir[0] * self.normal[0] + dir[1] * self.normal[1];
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = -self.side(from) / denom;
        if !(t > 0.0 && t < 1.0) {
            return None;
        }
        let x = [from[0] + t * dir[0], from[1] + t * dir[1]];
        let along = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = along[0] * along[0] + along[1] * along[1];
        let s = ((x[0] - self.a[0]) * along[0] + (x[1] - self.a[1]) * along[1]) / len2;
        (0.0..=1.0).contains(&s).then_some(x)
    }

    pub fn length(&self) -> f64 {
        (self.b[0] - self.a[0]).hypot(self.b[1] - self.a[1])
    }
}

/// Extracts all interior facades of `field`, merged along runs of equal
/// height pairs. Output order is deterministic: vertical walls by column then
/// row, followed by horizontal walls by row then column.
pub fn extract_walls(field: &HeightField) -> Vec<Wall> {
    let cs = field.cell_size();
    let (w, h) = (field.width(), field.height());
    let mut walls = Vec::new();

    // Edges at x = col * cs between cells (row, col-1) and (row, col).
    for col in 1..w {
        let x = col as f64 * cs;
        let mut run: Option<(usize, f64, f64)> = None;
        for row in 0..=h {
            let pair = (row < h).then(|| (field.get(row, col - 1), field.get(row, col)));
            let continues = matches!((run, pair), (Some((_, l, r)), Some((pl, pr))) if l == pl && r == pr);
            if continues {
                continue;
            }
            if let Some((start, left, right)) = run.take() {
                // Open side is the lower one.
                let normal = if right < left { [1.0, 0.0] } else { [-1.0, 0.0] };
                walls.push(Wall {
                    a: [x, start as f64 * cs],
                    b: [x, row as f64 * cs],
                    normal,
                    bottom: left.min(right),
                    top: left.max(right),
                });
            }
            if let Some((l, r)) = pair {
                if l != r {
                    run = Some((row, l, r));
                }
            }
        }
    }

    // Edges at y = row * cs between cells (row-1, col) and (row, col).
    for row in 1..h {
        let y = row as f64 * cs;
        let mut run: Option<(usize, f64, f64)> = None;
        for col in 0..=w {
            let pair = (col < w).then(|| (field.get(row - 1, col), field.get(row, col)));
            let continues = matches!((run, pair), (Some((_, s, n)), Some((ps, pn))) if s == ps && n == pn);
            if continues {
                continue;
            }
            if let Some((start, south, north)) = run.take() {
                let normal = if north < south { [0.0, 1.0] } else { [0.0, -1.0] };
                walls.push(Wall {
                    a: [start as f64 * cs, y],
                    b: [col as f64 * cs, y],
                    normal,
                    bottom: south.min(north),
                    top: south.max(north),
                });
            }
            if let Some((s, n)) = pair {
                if s != n {
                    run = Some((col, s, n));
                }
            }
        }
    }
    walls
}
