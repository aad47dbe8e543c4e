//! Bottleneck-residual CNN regressor.
//!
//! Stem (3x3 conv, BN, ReLU), four groups of bottleneck blocks, global
//! average pooling and a linear-ReLU-linear-ReLU-linear head producing one
//! normalized path-loss value per sample. Blocks whose input and output
//! shapes differ use a parameter-free skip (strided subsampling and zero
//! channel padding), so every block keeps an identity skip path.

mod checkpoint;
mod config;
pub mod ops;
mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, PLNW_VERSION};
pub use config::{NetConfig, N_GROUPS};
pub use ops::{ConvGeom, Tensor};
pub use tape::{BatchStats, NodeId, Tape};

use crate::error::{Error, Result};
use crate::preprocess::FeatureStack;

/// Momentum of the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics the normalization layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are queued on the tape.
    Train,
    /// Running statistics.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BnScale,
    BnShift,
    LinearWeight,
    LinearBias,
}

/// Location and shape of one parameter tensor in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub name: String,
    pub kind: LayerKind,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Input fan used by initialization (zero for non-weight slots).
    pub fan_in: usize,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with its per-layer index and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    layers: Vec<LayerSlot>,
    running: Vec<f64>,
    seed: u64,
}

impl ParamStore {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSlot> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Running `[mean; var]` blocks of every normalization layer.
    pub fn running(&self) -> &[f64] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [f64] {
        &mut self.running
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.running).all(|v| v.is_finite())
    }

    /// Folds queued batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats], momentum: f64) {
        for s in stats {
            let c = s.mean.len();
            let (mean, var) = self.running[s.running_offset..s.running_offset + 2 * c].split_at_mut(c);
            for (r, b) in mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in var.iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    pub(crate) fn from_parts(values: Vec<f64>, layers: Vec<LayerSlot>, running: Vec<f64>, seed: u64) -> Self {
        Self {
            values,
            layers,
            running,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    g: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct BnRef {
    gamma: usize,
    beta: usize,
    run: usize,
    c: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockRef {
    convs: [ConvRef; 3],
    bns: [BnRef; 3],
    stride: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearRef {
    w: usize,
    b: usize,
    fout: usize,
}

#[derive(Debug, Default)]
struct LayoutBuilder {
    layers: Vec<LayerSlot>,
    n_params: usize,
    n_running: usize,
}

impl LayoutBuilder {
    fn slot(&mut self, name: String, kind: LayerKind, shape: Vec<usize>, fan_in: usize) -> usize {
        let offset = self.n_params;
        let slot = LayerSlot {
            name,
            kind,
            offset,
            shape,
            fan_in,
        };
        self.n_params += slot.len();
        self.layers.push(slot);
        offset
    }

    fn conv(&mut self, name: &str, g: ConvGeom) -> ConvRef {
        let w = self.slot(
            format!("{name}.weight"),
            LayerKind::Conv,
            vec![g.cout, g.cin, g.k, g.k],
            g.cin * g.k * g.k,
        );
        ConvRef { w, g }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let gamma = self.slot(format!("{name}.gamma"), LayerKind::BnScale, vec![c], 0);
        let beta = self.slot(format!("{name}.beta"), LayerKind::BnShift, vec![c], 0);
        let run = self.n_running;
        self.n_running += 2 * c;
        BnRef { gamma, beta, run, c }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> LinearRef {
        let w = self.slot(format!("{name}.weight"), LayerKind::LinearWeight, vec![fout, fin], fin);
        let b = self.slot(format!("{name}.bias"), LayerKind::LinearBias, vec![fout], 0);
        LinearRef { w, b, fout }
    }
}

/// Node indices of one recorded forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardTrace {
    pub input: NodeId,
    /// `(block input, block output)` for each bottleneck block in order.
    pub blocks: Vec<(NodeId, NodeId)>,
    pub output: NodeId,
}

/// He-uniform `sqrt(6 / fan_in)` for convolutions, `1 / sqrt(fan_in)` for
/// fully connected layers.
pub fn init_bound(slot: &LayerSlot) -> f64 {
    match slot.kind {
        LayerKind::Conv => (6.0 / slot.fan_in as f64).sqrt(),
        _ => (1.0 / slot.fan_in as f64).sqrt(),
    }
}

/// A validated architecture with its parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    stem: ConvRef,
    stem_bn: BnRef,
    blocks: Vec<BlockRef>,
    head: [LinearRef; 3],
    layers: Vec<LayerSlot>,
    n_params: usize,
    n_running: usize,
}

impl Network {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = LayoutBuilder::default();
        let stem = b.conv(
            "stem.conv",
            ConvGeom {
                cin: cfg.in_channels,
                cout: cfg.stem_channels,
                k: 3,
                stride: cfg.stem_stride,
                pad: 1,
            },
        );
        let stem_bn = b.bn("stem.bn", cfg.stem_channels);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (gi, (&(n_blocks, width), &gstride)) in cfg.groups.iter().zip(&cfg.group_strides).enumerate() {
            let cout = width * cfg.expansion;
            for bi in 0..n_blocks {
                let stride = if bi == 0 { gstride } else { 1 };
                let name = format!("group{}.block{}", gi + 1, bi + 1);
                let c1 = b.conv(
                    &format!("{name}.conv1"),
                    ConvGeom {
                        cin,
                        cout: width,
                        k: 1,
                        stride: 1,
                        pad: 0,
                    },
                );
                let b1 = b.bn(&format!("{name}.bn1"), width);
                let c2 = b.conv(
                    &format!("{name}.conv2"),
                    ConvGeom {
                        cin: width,
                        cout: width,
                        k: 3,
                        stride,
                        pad: 1,
                    },
                );
                let b2 = b.bn(&format!("{name}.bn2"), width);
                let c3 = b.conv(
                    &format!("{name}.conv3"),
                    ConvGeom {
                        cin: width,
                        cout,
                        k: 1,
                        stride: 1,
                        pad: 0,
                    },
                );
                let b3 = b.bn(&format!("{name}.bn3"), cout);
                if cout < cin {
                    return Err(Error::Config(format!(
                        "net: {name} narrows {cin} to {cout} channels; the parameter-free skip needs cout >= cin"
                    )));
                }
                blocks.push(BlockRef {
                    convs: [c1, c2, c3],
                    bns: [b1, b2, b3],
                    stride,
                    cout,
                });
                cin = cout;
            }
        }
        let head = [
            b.linear("head.fc1", cin, cfg.fc_hidden),
            b.linear("head.fc2", cfg.fc_hidden, cfg.fc_hidden),
            b.linear("head.fc3", cfg.fc_hidden, 1),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            blocks,
            head,
            layers: b.layers,
            n_params: b.n_params,
            n_running: b.n_running,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Multiply-accumulates of one forward pass per sample, convolutions and
    /// fully connected layers only. Reported, never optimized against.
    pub fn macs_per_sample(&self) -> u64 {
        let (mut h, mut w) = self.cfg.input_hw;
        let mut total = 0u64;
        let mut conv = |g: &ConvGeom, h: &mut usize, w: &mut usize| {
            let (ho, wo) = g.out_hw(*h, *w);
            total += (g.n_weights() * ho * wo) as u64;
            (*h, *w) = (ho, wo);
        };
        conv(&self.stem.g, &mut h, &mut w);
        for b in &self.blocks {
            for c in &b.convs {
                conv(&c.g, &mut h, &mut w);
            }
        }
        let mut fin = self.blocks.last().map_or(self.cfg.stem_channels, |b| b.cout);
        for l in &self.head {
            total += (fin * l.fout) as u64;
            fin = l.fout;
        }
        total
    }

    pub fn n_running(&self) -> usize {
        self.n_running
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    /// Uniform weights within [`init_bound`], zero biases and shifts, unit scales.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.n_params];
        for slot in &self.layers {
            let dst = &mut values[slot.range()];
            match slot.kind {
                LayerKind::Conv | LayerKind::LinearWeight => {
                    let bound = init_bound(slot);
                    dst.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                LayerKind::BnScale => dst.fill(1.0),
                LayerKind::BnShift | LayerKind::LinearBias => dst.fill(0.0),
            }
        }
        ParamStore::from_parts(values, self.layers.clone(), self.initial_running(), seed)
    }

    /// Running statistics at initialization: zero means, unit variances.
    fn initial_running(&self) -> Vec<f64> {
        let mut running = vec![0.0; self.n_running];
        for bn in std::iter::once(&self.stem_bn).chain(self.blocks.iter().flat_map(|b| b.bns.iter())) {
            running[bn.run + bn.c..bn.run + 2 * bn.c].fill(1.0);
        }
        running
    }

    /// Checks that a store was laid out for this architecture.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.values.len() != self.n_params || params.running.len() != self.n_running || params.layers != self.layers {
            return Err(Error::Config(format!(
                "parameter store ({} values) does not match the network layout ({} values)",
                params.values.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    /// Packs feature stacks into a `C x N x H x W` input tensor.
    pub fn batch_input(&self, batch: &[FeatureStack]) -> Result<Tensor> {
        self.batch_input_refs(&batch.iter().collect::<Vec<_>>())
    }

    pub fn batch_input_refs(&self, batch: &[&FeatureStack]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::Config("forward called with an empty batch".into()));
        }
        let (h, w) = self.cfg.input_hw;
        let n = batch.len();
        let c = self.cfg.in_channels;
        let plane = h * w;
        let mut t = Tensor::zeros(c, n, h, w);
        let mut buf = vec![0.0; c * plane];
        for (i, s) in batch.iter().enumerate() {
            if (s.h(), s.w()) != (h, w) {
                return Err(Error::Config(format!(
                    "feature stack {i} is {}x{}, network expects {h}x{w}",
                    s.h(),
                    s.w()
                )));
            }
            s.write_model_input(self.cfg.fusion, &mut buf);
            for ch in 0..c {
                t.data[(ch * n + i) * plane..(ch * n + i + 1) * plane].copy_from_slice(&buf[ch * plane..(ch + 1) * plane]);
            }
        }
        Ok(t)
    }

    fn norm(&self, tape: &mut Tape, params: &ParamStore, x: NodeId, bn: &BnRef, mode: Mode) -> NodeId {
        let running = match mode {
            Mode::Train => None,
            Mode::Inference => {
                let r = &params.running[bn.run..bn.run + 2 * bn.c];
                Some(r.split_at(bn.c))
            }
        };
        tape.batch_norm(&params.values, x, bn.gamma, bn.beta, running, bn.run)
    }

    /// Records a forward pass of `input` on a cleared `tape`.
    pub fn record(&self, params: &ParamStore, input: Tensor, mode: Mode, tape: &mut Tape) -> Result<ForwardTrace> {
        self.check_params(params)?;
        let (h, w) = self.cfg.input_hw;
        if input.c != self.cfg.in_channels || input.h != h || input.w != w || input.n == 0 {
            return Err(Error::Config(format!(
                "input tensor {}x{}x{}x{} does not match the network ({}x_x{h}x{w})",
                input.c, input.n, input.h, input.w, self.cfg.in_channels
            )));
        }
        tape.clear(self.n_params);
        let p = &params.values;
        let x0 = tape.input(input);
        let mut x = tape.conv(p, x0, self.stem.w, self.stem.g);
        x = self.norm(tape, params, x, &self.stem_bn, mode);
        x = tape.relu(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let input = x;
            let mut y = x;
            for (i, (conv, bn)) in blk.convs.iter().zip(&blk.bns).enumerate() {
                y = tape.conv(p, y, conv.w, conv.g);
                y = self.norm(tape, params, y, bn, mode);
                if i < 2 {
                    y = tape.relu(y);
                }
            }
            let skip = tape.shortcut(input, blk.stride, blk.cout);
            let sum = tape.add(y, skip)?;
            x = tape.relu(sum);
            blocks.push((input, x));
        }
        x = tape.pool(x);
        for (i, fc) in self.head.iter().enumerate() {
            x = tape.linear(p, x, fc.w, fc.b, fc.fout);
            if i < 2 {
                x = tape.relu(x);
            }
        }
        Ok(ForwardTrace {
            input: x0,
            blocks,
            output: x,
        })
    }

    /// Inference-mode predictions in normalized units, one per stack.
    pub fn forward(&self, params: &ParamStore, batch: &[FeatureStack]) -> Result<Vec<f64>> {
        let input = self.batch_input(batch)?;
        let mut tape = Tape::new(self.n_params);
        let trace = self.record(params, input, Mode::Inference, &mut tape)?;
        Ok(tape.value(trace.output).data.clone())
    }
}

/// Deterministic initialization for `cfg`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    Ok(Network::new(cfg)?.init_params(seed))
}

/// Inference-mode forward pass; outputs are normalized path loss.
pub fn forward(cfg: &NetConfig, params: &ParamStore, batch: &[FeatureStack]) -> Result<Vec<f64>> {
    Network::new(cfg)?.forward(params, batch)
}

/// Gradient of the loss with respect to every parameter, given the loss
/// gradient with respect to each output of the recorded pass.
pub fn backward(tape: &mut Tape, params: &ParamStore, output_grad: &[f64]) -> Result<Vec<f64>> {
    tape.backward(params.values(), output_grad).map(<[f64]>::to_vec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_counts() {
        let net = Network::new(&NetConfig::default()).unwrap();
        let sum: usize = net.layers().iter().map(LayerSlot::len).sum();
        assert_eq!(sum, net.n_params());
        let p = net.init_params(1);
        assert_eq!(p.len(), net.n_params());
        assert!(p.is_finite());
    }

    #[test]
    fn tiny_net_is_small() {
        let net = Network::new(&NetConfig::tiny()).unwrap();
        assert!(net.n_params() <= 500, "{}", net.n_params());
    }

    #[test]
    fn shifts_start_at_zero_and_scales_at_one() {
        let p = init_params(&NetConfig::compact(), 3).unwrap();
        for l in p.layers() {
            let v = &p.values()[l.range()];
            match l.kind {
                LayerKind::BnShift | LayerKind::LinearBias => assert!(v.iter().all(|x| *x == 0.0)),
                LayerKind::BnScale => assert!(v.iter().all(|x| *x == 1.0)),
                _ => {
                    let b = init_bound(l);
                    assert!(v.iter().all(|x| x.abs() <= b));
                }
            }
        }
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let cfg = NetConfig::compact();
        let a = init_params(&cfg, 11).unwrap();
        let b = init_params(&cfg, 11).unwrap();
        let c = init_params(&cfg, 12).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn rejects_wrong_group_count() {
        let mut cfg = NetConfig::default();
        cfg.groups.pop();
        assert!(matches!(Network::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn running_update_uses_momentum() {
        let net = Network::new(&NetConfig::tiny()).unwrap();
        let mut p = net.init_params(0);
        let c = NetConfig::tiny().stem_channels;
        let stats = [BatchStats {
            running_offset: 0,
            mean: vec![1.0; c],
            var: vec![3.0; c],
        }];
        p.update_running(&stats, BN_MOMENTUM);
        assert!((p.running()[0] - 0.1).abs() < 1e-15);
        assert!((p.running()[c] - 1.2).abs() < 1e-15);
    }
}
