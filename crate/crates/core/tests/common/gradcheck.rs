//! Central finite-difference checks of the reverse-mode engine.

#![allow(dead_code)]

use plmap_core::nnet::{ConvGeom, LayerKind, Mode, Network, ParamStore, Tape, Tensor};
use plmap_core::NetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

fn rel_err(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A graph under test: builds the tape from `(params, input)` and returns
/// the output node's values.
pub type Build<'a> = dyn Fn(&mut Tape, &[f64], Tensor) -> Vec<f64> + 'a;

/// Scalar probe `L = sum r_i y_i`; checks parameter and input gradients.
pub fn check(build: &Build, params: &[f64], input: &Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new(params.len());
    let out = build(&mut tape, params, input.clone());
    let r = uniform(&mut rng, out.len(), -1.0, 1.0);
    let loss = |p: &[f64], x: Tensor| {
        let mut t = Tape::new(p.len());
        build(&mut t, p, x).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
    };
    let grad = tape.backward(params, &r).unwrap().to_vec();
    let dx = tape.input_gradient(0).cloned().unwrap_or_else(|| Tensor::zeros(input.c, input.n, input.h, input.w));

    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + STEP;
        let up = loss(&p, input.clone());
        p[i] = orig - STEP;
        let down = loss(&p, input.clone());
        p[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * STEP)));
    }
    for i in 0..input.data.len() {
        let mut x = input.clone();
        x.data[i] += STEP;
        let up = loss(params, x.clone());
        x.data[i] -= 2.0 * STEP;
        let down = loss(params, x);
        worst = worst.max(rel_err(dx.data[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

/// Worst relative error for each layer type, one small instance at a time.
pub fn layer_cases() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [
            ConvGeom { cin: 2, cout: 3, k: 3, stride: 1, pad: 1 },
            ConvGeom { cin: 2, cout: 2, k: 3, stride: 2, pad: 1 },
            ConvGeom { cin: 3, cout: 2, k: 1, stride: 1, pad: 0 },
        ] {
            let params = uniform(&mut rng, g.n_weights(), -1.0, 1.0);
            let x = Tensor::from_data(g.cin, 2, 5, 4, uniform(&mut rng, g.cin * 40, -1.0, 1.0));
            let build = move |t: &mut Tape, p: &[f64], x: Tensor| {
                let id = t.input(x);
                let y = t.conv(p, id, 0, g);
                t.value(y).data.clone()
            };
            let e = check(&build, &params, &x, 2);
            out.push((format!("conv {g:?}"), e));
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 3;
        let mut params = uniform(&mut rng, c, 0.5, 1.5);
        params.extend(uniform(&mut rng, c, -0.5, 0.5));
        let x = Tensor::from_data(c, 3, 2, 2, uniform(&mut rng, c * 12, -2.0, 2.0));
        let build = |t: &mut Tape, p: &[f64], x: Tensor| {
            let id = t.input(x);
            let y = t.batch_norm(p, id, 0, 3, None, 0);
            t.value(y).data.clone()
        };
        let e = check(&build, &params, &x, 4);
        out.push(("batch norm".to_string(), e));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = uniform(&mut rng, 24, -1.0, 1.0)
            .into_iter()
            .map(|v| if v.abs() < 1e-2 { v.signum() * 1e-2 + v } else { v })
            .collect();
        let x = Tensor::from_data(2, 3, 2, 2, data);
        let build = |t: &mut Tape, _: &[f64], x: Tensor| {
            let id = t.input(x);
            let y = t.relu(id);
            t.value(y).data.clone()
        };
        let e = check(&build, &[], &x, 6);
        out.push(("relu".to_string(), e));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (fin, fout) = (4, 3);
        let params = uniform(&mut rng, fin * fout + fout, -1.0, 1.0);
        let x = Tensor::from_data(fin, 5, 1, 1, uniform(&mut rng, fin * 5, -1.0, 1.0));
        let build = move |t: &mut Tape, p: &[f64], x: Tensor| {
            let id = t.input(x);
            let y = t.linear(p, id, 0, fin * fout, fout);
            t.value(y).data.clone()
        };
        let e = check(&build, &params, &x, 8);
        out.push(("linear".to_string(), e));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_data(2, 2, 5, 3, uniform(&mut rng, 60, -1.0, 1.0));
        let pool = |t: &mut Tape, _: &[f64], x: Tensor| {
            let id = t.input(x);
            let y = t.pool(id);
            t.value(y).data.clone()
        };
        let e = check(&pool, &[], &x, 10);
        out.push(("pool".to_string(), e));
        let skip = |t: &mut Tape, _: &[f64], x: Tensor| {
            let id = t.input(x);
            let y = t.shortcut(id, 2, 4);
            t.value(y).data.clone()
        };
        let e = check(&skip, &[], &x, 11);
        out.push(("shortcut".to_string(), e));
    }
    out
}

pub fn tiny_input(cfg: &NetConfig, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.input_hw;
    Tensor::from_data(cfg.in_channels, n, h, w, uniform(&mut rng, cfg.in_channels * n * h * w, 0.0, 1.0))
}

/// Random tiny network and input whose rectifier inputs all sit at least
/// `RELU_MARGIN` away from the kink; normalization scales, shifts and running
/// statistics are randomized so no activation is structurally zero.
pub fn smooth_draw(net: &Network, cfg: &NetConfig, n: usize, mode: Mode) -> (ParamStore, Tensor) {
    const RELU_MARGIN: f64 = 1e-2;
    for seed in 0..5000u64 {
        let mut store = net.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for l in net.layers().to_vec() {
            let v = &mut store.values_mut()[l.range()];
            match l.kind {
                LayerKind::BnScale => v.iter_mut().for_each(|x| *x = rng.random_range(0.5..1.5)),
                LayerKind::BnShift | LayerKind::LinearBias => v.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5)),
                _ => {}
            }
        }
        // fresh blocks hold zero means and unit variances
        for r in store.running_mut() {
            *r = if *r == 1.0 { rng.random_range(0.5..2.0) } else { rng.random_range(-0.3..0.3) };
        }
        let x = tiny_input(cfg, n, seed + 1000);
        let mut tape = Tape::new(net.n_params());
        net.record(&store, x.clone(), mode, &mut tape).unwrap();
        if tape.min_relu_margin() >= RELU_MARGIN {
            return (store, x);
        }
    }
    panic!("no draw with rectifier margin found");
}

/// Worst relative error of the whole tiny network in both modes.
pub fn network_cases() -> Vec<(String, f64)> {
    let cfg = NetConfig::tiny();
    let net = Network::new(&cfg).unwrap();
    assert!(net.n_params() <= 500, "tiny network has {} parameters", net.n_params());
    let mut out = Vec::new();
    for (mode, n) in [(Mode::Inference, 1), (Mode::Train, 2)] {
        let (store, x) = smooth_draw(&net, &cfg, n, mode);
        let build = |t: &mut Tape, p: &[f64], x: Tensor| {
            let mut s = store.clone();
            s.values_mut().copy_from_slice(p);
            let trace = net.record(&s, x, mode, t).unwrap();
            t.value(trace.output).data.clone()
        };
        let e = check(&build, store.values(), &x, 23);
        out.push((format!("network {mode:?}"), e));
    }
    out
}
