//! 2.5D environment: building height raster, antenna sites, and a seeded
//! synthetic urban scene generator.
//!
//! World coordinates are meters with the origin at the south-west corner of
//! the raster. Cell `(row, col)` covers `[col*cell, (col+1)*cell) x
//! [row*cell, (row+1)*cell)`, so `x` selects the column and `y` the row.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest raster side accepted by [`HeightField::new`].
pub const MIN_FIELD_CELLS: usize = 8;

const PLACEMENT_RETRIES: usize = 10_000;
const MAX_BUILDING_ATTEMPTS: usize = 200_000;
/// Minimum horizontal spacing between an Rx and every Tx.
const MIN_TX_RX_SPACING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    width: usize,
    height: usize,
    cell_size: f64,
    heights: Vec<f64>,
}

impl HeightField {
    pub fn new(width: usize, height: usize, cell_size: f64, heights: Vec<f64>) -> Result<Self> {
        if width < MIN_FIELD_CELLS || height < MIN_FIELD_CELLS {
            return Err(Error::Config(format!(
                "height field must be at least {MIN_FIELD_CELLS}x{MIN_FIELD_CELLS} cells, got {width}x{height}"
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Config(format!("cell_size must be > 0, got {cell_size}")));
        }
        if heights.len() != width * height {
            return Err(Error::Config(format!(
                "expected {} heights for a {width}x{height} field, got {}",
                width * height,
                heights.len()
            )));
        }
        if let Some(bad) = heights.iter().find(|h| !(h.is_finite() && **h >= 0.0)) {
            return Err(Error::Config(format!("heights must be finite and >= 0, found {bad}")));
        }
        Ok(Self {
            width,
            height,
            cell_size,
            heights,
        })
    }

    /// An all-ground field.
    pub fn flat(width: usize, height: usize, cell_size: f64) -> Result<Self> {
        Self::new(width, height, cell_size, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Extent in meters along x (east).
    pub fn extent_x(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    /// Extent in meters along y (north).
    pub fn extent_y(&self) -> f64 {
        self.height as f64 * self.cell_size
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    /// `(row, col)` of the cell containing `(x, y)`, using `floor(coord / cell_size)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = (x / self.cell_size).floor();
        let row = (y / self.cell_size).floor();
        if col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height {
            Some((row as usize, col as usize))
        } else {
            None
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(value.is_finite() && value >= 0.0, "height must be finite and >= 0");
        self.heights[row * self.width + col] = value;
    }

    /// Stored height of the containing cell (nearest-cell, no interpolation).
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        self.cell_of(x, y)
            .map(|(r, c)| self.get(r, c))
            .ok_or(Error::OutOfBounds {
                x,
                y,
                max_x: self.extent_x(),
                max_y: self.extent_y(),
            })
    }

    /// Like [`height_at`](Self::height_at) but treats anything off the map as open ground.
    pub fn height_or_ground(&self, x: f64, y: f64) -> f64 {
        self.cell_of(x, y).map_or(0.0, |(r, c)| self.get(r, c))
    }

    /// Fraction of cells holding a building.
    pub fn built_fraction(&self) -> f64 {
        self.heights.iter().filter(|h| **h > 0.0).count() as f64 / self.heights.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    Tx,
    Rx,
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiteKind::Tx => "Tx",
            SiteKind::Rx => "Rx",
        })
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Tx" => Ok(SiteKind::Tx),
            "Rx" => Ok(SiteKind::Rx),
            other => Err(Error::Malformed(format!("unknown site kind {other:?}"))),
        }
    }
}

/// An antenna. `z` is the absolute antenna height above the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub kind: SiteKind,
}

impl Site {
    pub fn tx(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            kind: SiteKind::Tx,
        }
    }

    pub fn rx(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            kind: SiteKind::Rx,
        }
    }

    pub fn horizontal_distance(&self, other: &Site) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    pub fn distance(&self, other: &Site) -> f64 {
        let h = self.horizontal_distance(other);
        h.hypot(other.z - self.z)
    }

    /// Checks the site against the field: positive height, inside bounds, and
    /// not buried in a building.
    pub fn validate(&self, field: &HeightField) -> Result<()> {
        if !(self.z.is_finite() && self.z > 0.0) {
            return Err(Error::Config(format!("site antenna height must be > 0, got {}", self.z)));
        }
        let ground = field.height_at(self.x, self.y)?;
        if ground >= self.z {
            return Err(Error::DegenerateGeometry(format!(
                "{} at ({}, {}) has z = {} below the local surface {ground}",
                self.kind, self.x, self.y, self.z
            )));
        }
        Ok(())
    }
}

/// Parameters for [`generate_scene`]. Antenna heights are measured above the
/// local surface (roof or ground) at the placement point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length of the square scene in meters.
    pub extent: f64,
    pub cell_size: f64,
    pub building_density: f64,
    pub height_range: [f64; 2],
    /// Footprint side range of a single building, meters.
    pub building_size: [f64; 2],
    pub n_tx: usize,
    pub n_rx_per_tx: usize,
    pub frequency: f64,
    pub tx_height: f64,
    pub rx_height: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            extent: 400.0,
            cell_size: 2.0,
            building_density: 0.3,
            height_range: [8.0, 40.0],
            building_size: [10.0, 40.0],
            n_tx: 4,
            n_rx_per_tx: 100,
            frequency: 7.0e9,
            tx_height: 15.0,
            rx_height: 1.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return bad(format!("extent must be > 0, got {}", self.extent));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return bad(format!("cell_size must be > 0, got {}", self.cell_size));
        }
        if !(0.0..=1.0).contains(&self.building_density) {
            return bad(format!("building_density must be in [0, 1], got {}", self.building_density));
        }
        let [hmin, hmax] = self.height_range;
        if !(hmin.is_finite() && hmax.is_finite() && hmin >= 0.0 && hmin <= hmax) {
            return bad(format!("height_range must satisfy 0 <= min <= max, got [{hmin}, {hmax}]"));
        }
        if self.building_density > 0.0 && hmax <= 0.0 {
            return bad("height_range.max must be > 0 when building_density > 0".into());
        }
        let [smin, smax] = self.building_size;
        if !(smin.is_finite() && smax.is_finite() && smin > 0.0 && smin <= smax) {
            return bad(format!("building_size must satisfy 0 < min <= max, got [{smin}, {smax}]"));
        }
        if self.n_tx == 0 {
            return bad("n_tx must be >= 1".into());
        }
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return bad(format!("frequency must be > 0, got {}", self.frequency));
        }
        if !(self.tx_height > 0.0 && self.rx_height > 0.0) {
            return bad("tx_height and rx_height must be > 0".into());
        }
        let cells = (self.extent / self.cell_size).round() as usize;
        if cells < MIN_FIELD_CELLS {
            return bad(format!(
                "extent / cell_size gives {cells} cells per side, need at least {MIN_FIELD_CELLS}"
            ));
        }
        Ok(())
    }
}

/// Builds a seeded scene of axis-aligned rectangular buildings on flat ground
/// and places `n_tx` transmitters followed by `n_rx_per_tx` receivers.
///
/// Transmitters may stand on rooftops; receivers are placed on open ground
/// only. Every receiver is shared by all transmitters.
pub fn generate_scene(spec: &SceneSpec) -> Result<(HeightField, Vec<Site>)> {
    spec.validate()?;
    let n = (spec.extent / spec.cell_size).round() as usize;
    let mut field = HeightField::flat(n, n, spec.cell_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let target = (spec.building_density * (n * n) as f64).round() as usize;
    let mut covered = 0usize;
    let mut attempts = 0usize;
    while covered < target && attempts < MAX_BUILDING_ATTEMPTS {
        attempts += 1;
        let w = cells_for(rng.random_range(spec.building_size[0]..=spec.building_size[1]), spec.cell_size);
        let d = cells_for(rng.random_range(spec.building_size[0]..=spec.building_size[1]), spec.cell_size);
        let col0 = rng.random_range(0..n);
        let row0 = rng.random_range(0..n);
        let top = rng.random_range(spec.height_range[0]..=spec.height_range[1]);
        if top <= 0.0 {
            continue;
        }
        for row in row0..(row0 + d).min(n) {
            for col in col0..(col0 + w).min(n) {
                let old = field.get(row, col);
                if old == 0.0 {
                    covered += 1;
                }
                if top > old {
                    field.set(row, col, top);
                }
            }
        }
    }

    let extent = field.extent_x();
    let mut sites = Vec::with_capacity(spec.n_tx + spec.n_rx_per_tx);
    let margin = spec.cell_size;
    for _ in 0..spec.n_tx {
        let x = rng.random_range(margin..extent - margin);
        let y = rng.random_range(margin..extent - margin);
        let surface = field.height_or_ground(x, y);
        sites.push(Site::tx(x, y, surface + spec.tx_height));
    }
    for i in 0..spec.n_rx_per_tx {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let x = rng.random_range(0.0..extent);
            let y = rng.random_range(0.0..extent);
            if field.height_or_ground(x, y) > 0.0 || !field.contains(x, y) {
                continue;
            }
            let too_close = sites[..spec.n_tx]
                .iter()
                .any(|tx| (tx.x - x).hypot(tx.y - y) < MIN_TX_RX_SPACING);
            if !too_close {
                placed = Some(Site::rx(x, y, spec.rx_height));
                break;
            }
        }
        match placed {
            Some(site) => sites.push(site),
            None => {
                return Err(Error::Placement {
                    seed: spec.seed,
                    reason: format!("no open ground for receiver {i} after {PLACEMENT_RETRIES} draws"),
                })
            }
        }
    }
    Ok((field, sites))
}

fn cells_for(meters: f64, cell_size: f64) -> usize {
    ((meters / cell_size).round() as usize).max(1)
}

/// Serializes a scene in the plain-text `HF` / `SITES` format.
pub fn write_scene(field: &HeightField, sites: &[Site]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "HF {} {} {}", field.width, field.height, field.cell_size);
    for row in field.heights.chunks(field.width) {
        let line: Vec<String> = row.iter().map(|h| h.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let _ = writeln!(out, "SITES {}", sites.len());
    for s in sites {
        let _ = writeln!(out, "{} {} {} {}", s.kind, s.x, s.y, s.z);
    }
    out
}

pub fn read_scene(text: &str) -> Result<(HeightField, Vec<Site>)> {
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| {
        tokens
            .next()
            .ok_or_else(|| Error::Malformed(format!("scene text ended while reading {what}")))
    };
    fn parse<T: FromStr>(tok: &str, what: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| Error::Malformed(format!("cannot parse {what} from {tok:?}")))
    }

    let magic = next("header")?;
    if magic != "HF" {
        return Err(Error::Malformed(format!("scene must start with HF, found {magic:?}")));
    }
    let width: usize = parse(next("width")?, "width")?;
    let height: usize = parse(next("height")?, "height")?;
    let cell_size: f64 = parse(next("cell_size")?, "cell_size")?;
    let mut heights = Vec::with_capacity(width.saturating_mul(height).min(1 << 24));
    for _ in 0..width * height {
        heights.push(parse(next("height value")?, "height value")?);
    }
    let field = HeightField::new(width, height, cell_size, heights)?;

    let tag = next("SITES")?;
    if tag != "SITES" {
        return Err(Error::Malformed(format!("expected SITES, found {tag:?}")));
    }
    let count: usize = parse(next("site count")?, "site count")?;
    let mut sites = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let kind: SiteKind = next("site kind")?.parse()?;
        let x = parse(next("site x")?, "site x")?;
        let y = parse(next("site y")?, "site y")?;
        let z = parse(next("site z")?, "site z")?;
        sites.push(Site { x, y, z, kind });
    }
    if let Some(extra) = tokens.next() {
        return Err(Error::Malformed(format!("trailing token {extra:?} after site table")));
    }
    Ok((field, sites))
}

/// Transmitters in input order paired with their 1-based ids.
pub fn transmitters(sites: &[Site]) -> Vec<(usize, Site)> {
    numbered(sites, SiteKind::Tx)
}

/// Receivers in input order paired with their 1-based ids.
pub fn receivers(sites: &[Site]) -> Vec<(usize, Site)> {
    numbered(sites, SiteKind::Rx)
}

fn numbered(sites: &[Site], kind: SiteKind) -> Vec<(usize, Site)> {
    sites
        .iter()
        .filter(|s| s.kind == kind)
        .copied()
        .enumerate()
        .map(|(i, s)| (i + 1, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            extent: 100.0,
            n_rx_per_tx: 20,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_density_gives_empty_map() {
        let spec = SceneSpec {
            building_density: 0.0,
            ..small_spec()
        };
        let (field, _) = generate_scene(&spec).unwrap();
        assert!(field.heights().iter().all(|h| *h == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(write_scene(&a.0, &a.1), write_scene(&b.0, &b.1));
    }

    #[test]
    fn density_is_close_to_target() {
        let spec = SceneSpec {
            extent: 400.0,
            building_density: 0.3,
            ..small_spec()
        };
        let (field, _) = generate_scene(&spec).unwrap();
        let frac = field.built_fraction();
        assert!((frac - 0.3).abs() <= 0.1, "built fraction {frac}");
    }

    #[test]
    fn no_site_inside_a_building() {
        for seed in 0..5 {
            let spec = SceneSpec {
                seed,
                building_density: 0.5,
                ..small_spec()
            };
            let (field, sites) = generate_scene(&spec).unwrap();
            for s in &sites {
                s.validate(&field).unwrap();
                assert!(field.height_at(s.x, s.y).unwrap() < s.z);
            }
        }
    }

    #[test]
    fn full_density_fails_receiver_placement() {
        let spec = SceneSpec {
            seed: 99,
            building_density: 1.0,
            height_range: [10.0, 10.0],
            ..small_spec()
        };
        match generate_scene(&spec) {
            Err(Error::Placement { seed, .. }) => assert_eq!(seed, 99),
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn height_lookup_conventions() {
        let mut field = HeightField::flat(10, 10, 2.0).unwrap();
        assert_eq!(field.height_at(3.3, 7.9).unwrap(), 0.0);
        field.set(2, 3, 30.0);
        // cell (row 2, col 3) has its center at x = 7, y = 5
        assert_eq!(field.height_at(7.0, 5.0).unwrap(), 30.0);
        // the lower/left boundary belongs to the cell
        assert_eq!(field.height_at(6.0, 4.0).unwrap(), 30.0);
        // the upper boundary belongs to the next cell
        assert_eq!(field.height_at(8.0, 5.0).unwrap(), 0.0);
        assert!(matches!(field.height_at(20.0, 1.0), Err(Error::OutOfBounds { .. })));
        assert!(matches!(field.height_at(-0.1, 1.0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn height_at_matches_index_arithmetic() {
        let (field, _) = generate_scene(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = rng.random_range(0.0..field.extent_x());
            let y = rng.random_range(0.0..field.extent_y());
            let col = (x / field.cell_size()) as usize;
            let row = (y / field.cell_size()) as usize;
            assert_eq!(field.height_at(x, y).unwrap(), field.heights()[row * field.width() + col]);
        }
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(HeightField::flat(7, 10, 1.0).is_err());
        assert!(HeightField::flat(8, 8, 0.0).is_err());
        assert!(HeightField::new(8, 8, 1.0, vec![-1.0; 64]).is_err());
        assert!(HeightField::new(8, 8, 1.0, vec![f64::NAN; 64]).is_err());
    }

    #[test]
    fn scene_text_round_trip() {
        let (field, sites) = generate_scene(&small_spec()).unwrap();
        let text = write_scene(&field, &sites);
        assert!(text.starts_with(&format!("HF {} {} 2\n", field.width(), field.height())));
        let (f2, s2) = read_scene(&text).unwrap();
        assert_eq!(field, f2);
        assert_eq!(sites, s2);
    }

    #[test]
    fn truncated_scene_text_is_rejected() {
        let (field, sites) = generate_scene(&small_spec()).unwrap();
        let text = write_scene(&field, &sites);
        let cut = &text[..text.len() / 2];
        assert!(matches!(read_scene(cut), Err(Error::Malformed(_))));
    }
}
