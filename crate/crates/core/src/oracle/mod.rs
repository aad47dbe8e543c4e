//! Desk-scale multipath ground truth.
//!
//! Paths are found with the 2.5D image method: specular reflections off
//! vertical facades in plan view, with heights interpolated linearly along
//! the unfolded 3D path. The direct path may additionally carry one
//! knife-edge diffraction loss taken at the dominant obstruction of its
//! profile. Path loss is the power sum over the retained components.

mod diffraction;
mod walls;

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, HeightField, Site, SiteKind};
use crate::error::{Error, Result};

pub use diffraction::{fresnel_nu, knife_edge_loss, KNIFE_EDGE_THRESHOLD};
pub use walls::{extract_walls, Wall};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const MAX_REFLECTION_DEPTH: usize = 4;
/// Components more than this many dB below the strongest one are dropped.
pub const DYNAMIC_RANGE_DB: f64 = 40.0;

const SIDE_EPS: f64 = 1e-9;
const LABEL_CSV_HEADER: &str = "tx_id,rx_id,tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,freq_hz,pl_db,los";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub frequency: f64,
    pub max_reflection_depth: usize,
    /// Field amplitude ratio applied per bounce.
    pub reflection_coefficient: f64,
    pub include_diffraction: bool,
    pub clip_ceiling_db: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            frequency: 7.0e9,
            max_reflection_depth: 2,
            reflection_coefficient: 0.5,
            include_diffraction: true,
            clip_ceiling_db: 160.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return Err(Error::Config(format!("oracle frequency must be > 0, got {}", self.frequency)));
        }
        if self.max_reflection_depth > MAX_REFLECTION_DEPTH {
            return Err(Error::Config(format!(
                "max_reflection_depth must be <= {MAX_REFLECTION_DEPTH}, got {}",
                self.max_reflection_depth
            )));
        }
        if !(self.reflection_coefficient > 0.0 && self.reflection_coefficient <= 1.0) {
            return Err(Error::Config(format!(
                "reflection_coefficient must be in (0, 1], got {}",
                self.reflection_coefficient
            )));
        }
        if !(self.clip_ceiling_db.is_finite() && self.clip_ceiling_db > 0.0) {
            return Err(Error::Config(format!("clip_ceiling_db must be > 0, got {}", self.clip_ceiling_db)));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultipathComponent {
    pub amplitude: Complex64,
    pub delay: f64,
    pub departure_azimuth: f64,
    pub arrival_azimuth: f64,
    pub n_reflections: usize,
    pub diffracted: bool,
}

impl MultipathComponent {
    pub fn power(&self) -> f64 {
        self.amplitude.norm_sqr()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayTraceResult {
    pub components: Vec<MultipathComponent>,
    pub path_loss_db: f64,
    pub los: bool,
}

/// `-10 log10(sum |a|^2)` over `components`.
pub fn power_sum_db(components: &[MultipathComponent]) -> f64 {
    -10.0 * components.iter().map(MultipathComponent::power).sum::<f64>().log10()
}

/// Free-space path loss `20 log10(4 pi d f / c)`.
pub fn free_space_loss_db(distance: f64, frequency: f64) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * distance * frequency / SPEED_OF_LIGHT).log10()
}

/// True iff the 3D segment between the antennas clears every sampled
/// profile height (step at most half a cell).
pub fn los_clear(field: &HeightField, tx: &Site, rx: &Site) -> Result<bool> {
    field.height_at(tx.x, tx.y)?;
    field.height_at(rx.x, rx.y)?;
    Ok(diffraction::segment_clear(field, [tx.x, tx.y, tx.z], [rx.x, rx.y, rx.z]))
}

/// Traces a single Tx/Rx pair. Prefer [`Tracer`] when tracing many pairs on
/// the same field.
pub fn trace(field: &HeightField, tx: &Site, rx: &Site, cfg: &OracleConfig) -> Result<RayTraceResult> {
    Tracer::new(field, cfg.clone())?.trace(tx, rx)
}

#[derive(Debug, Clone, Copy)]
struct ImageNode {
    pos: [f64; 2],
    wall: usize,
    parent: Option<usize>,
    depth: usize,
}

/// Mirror images of one transmitter through every admissible wall sequence.
#[derive(Debug, Clone)]
pub struct ImageTree {
    source: [f64; 2],
    nodes: Vec<ImageNode>,
}

impl ImageTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Reusable tracer over a fixed field: walls are extracted once.
pub struct Tracer<'a> {
    field: &'a HeightField,
    cfg: OracleConfig,
    walls: Vec<Wall>,
}

impl<'a> Tracer<'a> {
    pub fn new(field: &'a HeightField, cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            field,
            cfg,
            walls: extract_walls(field),
        })
    }

    pub fn walls(&self) -> &[Wall] {
        &self.walls
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    /// Builds the image tree of `tx` up to the configured reflection depth.
    /// A wall only spawns an image when the current source lies strictly on
    /// its open side.
    pub fn images(&self, tx: &Site) -> ImageTree {
        let source = [tx.x, tx.y];
        let mut nodes: Vec<ImageNode> = Vec::new();
        let mut level: Vec<Option<usize>> = vec![None];
        for depth in 1..=self.cfg.max_reflection_depth {
            let mut next = Vec::new();
            for &parent in &level {
                let (pos, prev_wall) = match parent {
                    None => (source, None),
                    Some(i) => (nodes[i].pos, Some(nodes[i].wall)),
                };
                for (w, wall) in self.walls.iter().enumerate() {
                    if Some(w) == prev_wall || wall.side(pos) <= SIDE_EPS {
                        continue;
                    }
                    nodes.push(ImageNode {
                        pos: wall.mirror(pos),
                        wall: w,
                        parent,
                        depth,
                    });
                    next.push(Some(nodes.len() - 1));
                }
            }
            level = next;
        }
        ImageTree { source, nodes }
    }

    pub fn trace(&self, tx: &Site, rx: &Site) -> Result<RayTraceResult> {
        let images = self.images(tx);
        self.trace_with(&images, tx, rx)
    }

    /// Traces `tx -> rx` reusing a precomputed image tree of `tx`.
    pub fn trace_with(&self, images: &ImageTree, tx: &Site, rx: &Site) -> Result<RayTraceResult> {
        if tx.kind != SiteKind::Tx || rx.kind != SiteKind::Rx {
            return Err(Error::Usage(format!(
                "trace expects (Tx, Rx), got ({}, {})",
                tx.kind, rx.kind
            )));
        }
        if images.source != [tx.x, tx.y] {
            return Err(Error::Usage("image tree was built for a different transmitter".into()));
        }
        self.field.height_at(tx.x, tx.y)?;
        self.field.height_at(rx.x, rx.y)?;
        if tx.distance(rx) <= 1e-9 {
            return Err(Error::DegenerateGeometry(format!(
                "Tx and Rx coincide at ({}, {}, {})",
                tx.x, tx.y, tx.z
            )));
        }

        let lambda = self.cfg.wavelength();
        let k = 2.0 * std::f64::consts::PI / lambda;
        let p_tx = [tx.x, tx.y, tx.z];
        let p_rx = [rx.x, rx.y, rx.z];
        let los = diffraction::segment_clear(self.field, p_tx, p_rx);

        let mut components = Vec::new();
        let direct_loss_db = if self.cfg.include_diffraction {
            diffraction::dominant_nu(self.field, p_tx, p_rx, lambda).map_or(0.0, knife_edge_loss)
        } else {
            0.0
        };
        if los || self.cfg.include_diffraction {
            let len = tx.distance(rx);
            components.push(component(
                &[[tx.x, tx.y], [rx.x, rx.y]],
                len,
                k,
                lambda,
                10f64.powf(-direct_loss_db / 20.0),
                0,
                direct_loss_db > 0.0,
            ));
        }

        let gamma = self.cfg.reflection_coefficient;
        let mut chain = [0usize; MAX_REFLECTION_DEPTH];
        let mut pts = [[0.0f64; 2]; MAX_REFLECTION_DEPTH + 2];
        'nodes: for (idx, node) in images.nodes.iter().enumerate() {
            let depth = node.depth;
            // chain[j] = node of reflection j (0-based, first bounce first)
            let mut cur = Some(idx);
            for j in (0..depth).rev() {
                let i = cur.expect("image chain shorter than its depth");
                chain[j] = i;
                cur = images.nodes[i].parent;
            }

            pts[0] = [tx.x, tx.y];
            pts[depth + 1] = [rx.x, rx.y];
            let mut q = [rx.x, rx.y];
            for j in (0..depth).rev() {
                let n = &images.nodes[chain[j]];
                let wall = &self.walls[n.wall];
                if wall.side(q) <= SIDE_EPS {
                    continue 'nodes;
                }
                match wall.crossing(q, n.pos) {
                    Some(x) => {
                        pts[j + 1] = x;
                        q = x;
                    }
                    None => continue 'nodes,
                }
            }

            let path = &pts[..depth + 2];
            let mut cum = [0.0f64; MAX_REFLECTION_DEPTH + 2];
            for i in 1..path.len() {
                cum[i] = cum[i - 1] + (path[i][0] - path[i - 1][0]).hypot(path[i][1] - path[i - 1][1]);
            }
            let plan_len = cum[path.len() - 1];
            if plan_len <= 0.0 {
                continue;
            }
            let z_at = |s: f64| tx.z + (rx.z - tx.z) * s / plan_len;
            for j in 0..depth {
                let wall = &self.walls[images.nodes[chain[j]].wall];
                let z = z_at(cum[j + 1]);
                if z < wall.bottom || z > wall.top {
                    continue 'nodes;
                }
            }
            for i in 1..path.len() {
                let a = [path[i - 1][0], path[i - 1][1], z_at(cum[i - 1])];
                let b = [path[i][0], path[i][1], z_at(cum[i])];
                if !diffraction::segment_clear(self.field, a, b) {
                    continue 'nodes;
                }
            }
            let len3 = plan_len.hypot(rx.z - tx.z);
            components.push(component(path, len3, k, lambda, gamma.powi(depth as i32), depth, false));
        }

        Ok(finalize(components, los, self.cfg.clip_ceiling_db))
    }
}

fn component(
    path: &[[f64; 2]],
    len3: f64,
    k: f64,
    lambda: f64,
    gain: f64,
    n_reflections: usize,
    diffracted: bool,
) -> MultipathComponent {
    let first = path[1];
    let last = path[path.len() - 2];
    let tx = path[0];
    let rx = path[path.len() - 1];
    let magnitude = gain * lambda / (4.0 * std::f64::consts::PI * len3);
    MultipathComponent {
        amplitude: Complex64::from_polar(magnitude, -k * len3),
        delay: len3 / SPEED_OF_LIGHT,
        departure_azimuth: (first[1] - tx[1]).atan2(first[0] - tx[0]),
        arrival_azimuth: (last[1] - rx[1]).atan2(last[0] - rx[0]),
        n_reflections,
        diffracted,
    }
}

/// Applies the dynamic-range cut and the clip ceiling, then aggregates.
fn finalize(mut components: Vec<MultipathComponent>, los: bool, ceiling: f64) -> RayTraceResult {
    let strongest = components.iter().map(MultipathComponent::power).fold(0.0, f64::max);
    let floor = strongest * 10f64.powf(-DYNAMIC_RANGE_DB / 10.0);
    components.retain(|c| c.power() >= floor && c.power() > 0.0);
    if components.is_empty() {
        return RayTraceResult {
            components,
            path_loss_db: ceiling,
            los,
        };
    }
    let pl = power_sum_db(&components);
    if pl > ceiling {
        // everything is below the receiver floor
        components.clear();
        return RayTraceResult {
            components,
            path_loss_db: ceiling,
            los,
        };
    }
    RayTraceResult {
        components,
        path_loss_db: pl,
        los,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub tx_id: usize,
    pub rx_id: usize,
    pub tx: Site,
    pub rx: Site,
    pub frequency: f64,
    pub pl_db: f64,
    pub los: bool,
}

/// Path-loss label for every (Tx, Rx) pair, Tx-major and Rx-minor in input
/// order. Ids are 1-based per kind.
pub fn generate_labels(field: &HeightField, sites: &[Site], cfg: &OracleConfig) -> Result<Vec<LabelRecord>> {
    let txs = env::transmitters(sites);
    let rxs = env::receivers(sites);
    if txs.is_empty() || rxs.is_empty() {
        return Err(Error::Usage(format!(
            "label generation needs at least one Tx and one Rx, got {} and {}",
            txs.len(),
            rxs.len()
        )));
    }
    let tracer = Tracer::new(field, cfg.clone())?;
    let mut records = Vec::with_capacity(txs.len() * rxs.len());
    for (tx_id, tx) in &txs {
        let images = tracer.images(tx);
        let batch: Vec<Result<LabelRecord>> = rxs
            .par_iter()
            .map(|(rx_id, rx)| {
                tracer
                    .trace_with(&images, tx, rx)
                    .map(|r| LabelRecord {
                        tx_id: *tx_id,
                        rx_id: *rx_id,
                        tx: *tx,
                        rx: *rx,
                        frequency: cfg.frequency,
                        pl_db: r.path_loss_db,
                        los: r.los,
                    })
                    .map_err(|e| e.in_pair(*tx_id, *rx_id))
            })
            .collect();
        for r in batch {
            records.push(r?);
        }
    }
    Ok(records)
}

pub fn write_labels_csv<W: Write>(records: &[LabelRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LABEL_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.tx_id,
            r.rx_id,
            r.tx.x,
            r.tx.y,
            r.tx.z,
            r.rx.x,
            r.rx.y,
            r.rx.z,
            r.frequency,
            r.pl_db,
            u8::from(r.los)
        )?;
    }
    Ok(())
}
