//! Path-aligned feature maps.
//!
//! A square frame is cut around each Tx/Rx pair with its x-axis pointing from
//! Tx to Rx and the two antennas pinned at the first and third quartiles.
//! The frame is resampled (nearest cell) into four channels: Tx depth, Rx
//! depth, 3D distance from the Tx, and the weighting mask.

use serde::{Deserialize, Serialize};

use crate::env::{HeightField, Site};
use crate::error::{Error, Result};
use crate::NORMALIZATION;

pub const TX_ANCHOR_U: f64 = 0.25;
pub const RX_ANCHOR_U: f64 = 0.75;
pub const ANCHOR_V: f64 = 0.5;

pub const N_CHANNELS: usize = 4;

const FSTK_MAGIC: [u8; 4] = *b"FSTK";
pub const FSTK_VERSION: u16 = 1;
/// Bytes before the channel payload of an `FSTK` record.
pub const FSTK_HEADER_LEN: usize = 4 + 2 + 2 + 2 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Channel {
    TxDepth = 0,
    RxDepth = 1,
    Distance = 2,
    Weight = 3,
}

/// Square crop aligned with the Tx->Rx direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropFrame {
    /// World position of the frame corner at `(u, v) = (0, 0)`.
    pub origin: [f64; 2],
    pub center: [f64; 2],
    pub edge: f64,
    /// Angle of the frame u-axis, counter-clockwise from east.
    pub rotation: f64,
    pub tx_uv: [f64; 2],
    pub rx_uv: [f64; 2],
}

impl CropFrame {
    #[inline]
    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.rotation.sin_cos();
        ([c, s], [-s, c])
    }

    /// World point at normalized frame coordinates `(u, v)`.
    pub fn world(&self, u: f64, v: f64) -> [f64; 2] {
        let (eu, ev) = self.axes();
        let a = (u - 0.5) * self.edge;
        let b = (v - 0.5) * self.edge;
        [
            self.center[0] + a * eu[0] + b * ev[0],
            self.center[1] + a * eu[1] + b * ev[1],
        ]
    }

    /// World point at the center of output cell `(row, col)` on an `h x w` grid.
    pub fn cell_center(&self, row: usize, col: usize, h: usize, w: usize) -> [f64; 2] {
        self.world((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64)
    }
}

/// Frame with Tx and Rx at the quartile anchors. When the horizontal
/// separation is below `min_edge / 2`, the frame keeps `edge = min_edge`
/// centered on the midpoint; the anchors are still reported at the quartiles.
pub fn make_crop_frame(tx: &Site, rx: &Site, min_edge: f64) -> CropFrame {
    let dx = rx.x - tx.x;
    let dy = rx.y - tx.y;
    let dist = dx.hypot(dy);
    let rotation = if dist > 0.0 { dy.atan2(dx) } else { 0.0 };
    let edge = (2.0 * dist).max(min_edge);
    let center = [0.5 * (tx.x + rx.x), 0.5 * (tx.y + rx.y)];
    let (s, c) = rotation.sin_cos();
    let half = 0.5 * edge;
    CropFrame {
        origin: [center[0] - half * (c - s), center[1] - half * (s + c)],
        center,
        edge,
        rotation,
        tx_uv: [TX_ANCHOR_U, ANCHOR_V],
        rx_uv: [RX_ANCHOR_U, ANCHOR_V],
    }
}

/// `building_height - ref_height` in meters per output cell; off-map reads as ground.
pub fn rasterize_depth(field: &HeightField, frame: &CropFrame, ref_height: f64, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let p = frame.cell_center(row, col, h, w);
            out.push(field.height_or_ground(p[0], p[1]) - ref_height);
        }
    }
    out
}

/// 3D distance in meters from the Tx antenna to each cell center taken at
/// the Rx antenna height.
pub fn distance_channel(frame: &CropFrame, tx: &Site, rx_height: f64, h: usize, w: usize) -> Vec<f64> {
    let dz = rx_height - tx.z;
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let p = frame.cell_center(row, col, h, w);
            out.push((p[0] - tx.x).hypot(p[1] - tx.y).hypot(dz));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskParams {
    /// Along-path Gaussian width, in cells.
    pub sigma: f64,
    /// Cross-path inverse-square scale, in cells squared.
    pub kappa: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            sigma: 40.0,
            kappa: 150.0,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0 && self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::Config(format!(
                "mask sigma and kappa must be > 0, got sigma = {}, kappa = {}",
                self.sigma, self.kappa
            )));
        }
        Ok(())
    }
}

/// `W(x, y) = exp(-x^2 / (2 sigma^2)) / (1 + y^2 / kappa)` with `x` along the
/// path and `y` across it, both in cells from the grid center.
#[inline]
pub fn mask_value(p: &MaskParams, x: f64, y: f64) -> f64 {
    (-(x * x) / (2.0 * p.sigma * p.sigma)).exp() / (1.0 + y * y / p.kappa)
}

/// Weighting mask sampled on an `h x w` grid. Cell `(row, col)` sits at
/// `x = col - w/2`, `y = row - h/2` (integer division), so the center cell
/// carries exactly 1.
pub fn weight_mask(p: &MaskParams, h: usize, w: usize) -> Vec<f64> {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            out.push(mask_value(p, col as f64 - cx, row as f64 - cy));
        }
    }
    out
}

/// Ablation switches for the distance and mask channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub use_distance: bool,
    pub use_mask: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            use_distance: true,
            use_mask: true,
        }
    }
}

/// How the mask enters the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskFusion {
    /// Depth channels multiplied by the mask, raw mask stacked as a fourth channel.
    #[default]
    Multiply,
    /// Channels passed through unchanged; the mask is only a fourth channel.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub h: usize,
    pub w: usize,
    /// Frame edge for near-coincident pairs, meters.
    pub min_edge: f64,
    pub mask: MaskParams,
    pub fusion: MaskFusion,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            h: 80,
            w: 80,
            min_edge: 20.0,
            mask: MaskParams::default(),
            fusion: MaskFusion::Multiply,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.h > u16::MAX as usize || self.w > u16::MAX as usize {
            return Err(Error::Config(format!("feature grid {}x{} out of range", self.h, self.w)));
        }
        if !(self.min_edge.is_finite() && self.min_edge > 0.0) {
            return Err(Error::Config(format!("min_edge must be > 0, got {}", self.min_edge)));
        }
        self.mask.validate()
    }
}

/// Model input for one Tx/Rx pair: four `h x w` channels stored
/// channel-major, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    h: usize,
    w: usize,
    data: Vec<f32>,
    pub frequency: f64,
    /// True 3D Tx-Rx distance, meters.
    pub distance: f64,
}

impl FeatureStack {
    pub fn from_channels(h: usize, w: usize, data: Vec<f32>, frequency: f64, distance: f64) -> Result<Self> {
        if data.len() != N_CHANNELS * h * w {
            return Err(Error::Shape(format!(
                "feature stack {h}x{w} needs {} values, got {}",
                N_CHANNELS * h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("feature stack holds non-finite values".into()));
        }
        Ok(Self {
            h,
            w,
            data,
            frequency,
            distance,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, ch: Channel) -> &[f32] {
        let n = self.h * self.w;
        &self.data[ch as usize * n..(ch as usize + 1) * n]
    }

    fn channel_mut(&mut self, ch: Channel) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[ch as usize * n..(ch as usize + 1) * n]
    }

    /// Applies the ablation switches to an already built stack.
    pub fn ablated(&self, opts: FeatureOptions) -> FeatureStack {
        let mut out = self.clone();
        if !opts.use_distance {
            out.channel_mut(Channel::Distance).fill(0.0);
        }
        if !opts.use_mask {
            out.channel_mut(Channel::Weight).fill(1.0);
        }
        out
    }

    /// Writes the model input for this stack into `out` (`4 * h * w` values).
    pub fn write_model_input(&self, fusion: MaskFusion, out: &mut [f64]) {
        let n = self.h * self.w;
        assert_eq!(out.len(), N_CHANNELS * n, "model input buffer size");
        let weight = self.channel(Channel::Weight);
        for (ch, dst) in out.chunks_exact_mut(n).enumerate() {
            let src = &self.data[ch * n..(ch + 1) * n];
            let weighted = fusion == MaskFusion::Multiply && (ch == Channel::TxDepth as usize || ch == Channel::RxDepth as usize);
            if weighted {
                for ((d, s), m) in dst.iter_mut().zip(src).zip(weight) {
                    *d = f64::from(*s) * f64::from(*m);
                }
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = f64::from(*s);
                }
            }
        }
    }

    /// Encodes the stack as an `FSTK` record.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FSTK_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FSTK_MAGIC);
        out.extend_from_slice(&FSTK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.h as u16).to_le_bytes());
        out.extend_from_slice(&(self.w as u16).to_le_bytes());
        out.push(N_CHANNELS as u8);
        out.extend_from_slice(&self.frequency.to_le_bytes());
        out.extend_from_slice(&self.distance.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one `FSTK` record from the front of `bytes`, returning the
    /// stack and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(FeatureStack, usize)> {
        let need = |offset: usize, n: usize| {
            if bytes.len() < offset + n {
                Err(Error::Truncated {
                    offset,
                    needed: n,
                    available: bytes.len().saturating_sub(offset),
                })
            } else {
                Ok(())
            }
        };
        need(0, FSTK_HEADER_LEN)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != FSTK_MAGIC {
            return Err(Error::BadMagic {
                expected: FSTK_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FSTK_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FSTK_VERSION,
            });
        }
        let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let w = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let channels = bytes[10] as usize;
        if channels != N_CHANNELS {
            return Err(Error::Malformed(format!("FSTK record has {channels} channels, expected {N_CHANNELS}")));
        }
        let frequency = f64::from_le_bytes(bytes[11..19].try_into().unwrap());
        let distance = f64::from_le_bytes(bytes[19..27].try_into().unwrap());
        let n = channels * h * w;
        need(FSTK_HEADER_LEN, 4 * n)?;
        let data = bytes[FSTK_HEADER_LEN..FSTK_HEADER_LEN + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let stack = FeatureStack::from_channels(h, w, data, frequency, distance)?;
        Ok((stack, FSTK_HEADER_LEN + 4 * n))
    }
}

/// Builds the four-channel stack for one Tx/Rx pair.
///
/// Depth and distance channels are divided by [`NORMALIZATION`]; the mask is
/// stored as is. With `use_mask = false` the weight channel is all ones and
/// with `use_distance = false` the distance channel is all zeros.
pub fn build_feature_stack(
    field: &HeightField,
    tx: &Site,
    rx: &Site,
    frequency: f64,
    cfg: &FeatureConfig,
    opts: FeatureOptions,
) -> Result<FeatureStack> {
    field.height_at(tx.x, tx.y)?;
    field.height_at(rx.x, rx.y)?;
    let (h, w) = (cfg.h, cfg.w);
    let frame = make_crop_frame(tx, rx, cfg.min_edge);
    let n = h * w;
    let mut data = Vec::with_capacity(N_CHANNELS * n);
    let scale = 1.0 / NORMALIZATION;
    // both depth maps share one raster walk
    let mut rx_depth = Vec::with_capacity(n);
    for row in 0..h {
        for col in 0..w {
            let p = frame.cell_center(row, col, h, w);
            let b = field.height_or_ground(p[0], p[1]);
            data.push(((b - tx.z) * scale) as f32);
            rx_depth.push(((b - rx.z) * scale) as f32);
        }
    }
    data.extend_from_slice(&rx_depth);
    if opts.use_distance {
        data.extend(distance_channel(&frame, tx, rx.z, h, w).into_iter().map(|d| (d * scale) as f32));
    } else {
        data.extend(std::iter::repeat_n(0.0f32, n));
    }
    if opts.use_mask {
        data.extend(weight_mask(&cfg.mask, h, w).into_iter().map(|m| m as f32));
    } else {
        data.extend(std::iter::repeat_n(1.0f32, n));
    }
    FeatureStack::from_channels(h, w, data, frequency, tx.distance(rx))
}
