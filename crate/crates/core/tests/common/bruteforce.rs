//! Exhaustive path enumeration used to cross-check the image-method tracer.
//!
//! For every ordered wall sequence the reflection points are found by
//! minimising total plan-view path length over positions on the wall lines
//! (a convex problem whose stationary point is the specular path). Validity,
//! occlusion and power aggregation are re-implemented here from the
//! definitions rather than reusing the tracer's code paths.

use plmap_core::env::{HeightField, Site};
use plmap_core::oracle::{self, extract_walls, knife_edge_loss, OracleConfig, Wall};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: f64 = 299_792_458.0;

fn surface(field: &HeightField, x: f64, y: f64) -> f64 {
    let cs = field.cell_size();
    let (c, r) = ((x / cs).floor(), (y / cs).floor());
    if c < 0.0 || r < 0.0 || c as usize >= field.width() || r as usize >= field.height() {
        return 0.0;
    }
    field.heights()[r as usize * field.width() + c as usize]
}

/// Interior profile samples, step <= half a cell.
fn samples(field: &HeightField, p: [f64; 3], q: [f64; 3]) -> Vec<(f64, f64, f64)> {
    let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
    let n = ((2.0 * len / field.cell_size()).ceil() as usize).max(2);
    (1..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let x = p[0] + t * (q[0] - p[0]);
            let y = p[1] + t * (q[1] - p[1]);
            let z = p[2] + t * (q[2] - p[2]);
            (t, surface(field, x, y), z)
        })
        .collect()
}

fn clear(field: &HeightField, p: [f64; 3], q: [f64; 3]) -> bool {
    samples(field, p, q).iter().all(|&(_, h, z)| h < z)
}

fn signed_side(w: &Wall, p: [f64; 2]) -> f64 {
    (p[0] - w.a[0]) * w.normal[0] + (p[1] - w.a[1]) * w.normal[1]
}

/// Minimises sum of leg lengths for points constrained to the wall lines.
fn stationary_path(tx: [f64; 2], rx: [f64; 2], seq: &[&Wall]) -> Vec<[f64; 2]> {
    let k = seq.len();
    let dirs: Vec<[f64; 2]> = seq.iter().map(|w| [w.b[0] - w.a[0], w.b[1] - w.a[1]]).collect();
    let point = |t: &[f64], j: usize| [seq[j].a[0] + t[j] * dirs[j][0], seq[j].a[1] + t[j] * dirs[j][1]];
    let all = |t: &[f64]| {
        let mut v = vec![tx];
        v.extend((0..k).map(|j| point(t, j)));
        v.push(rx);
        v
    };
    let length = |t: &[f64]| {
        let p = all(t);
        p.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum::<f64>()
    };
    let mut t = vec![0.5; k];
    for _ in 0..200 {
        let p = all(&t);
        // unit vectors and lengths of legs 0..=k
        let legs: Vec<([f64; 2], f64)> = p
            .windows(2)
            .map(|w| {
                let v = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                let n = (v[0] * v[0] + v[1] * v[1]).sqrt().max(1e-300);
                ([v[0] / n, v[1] / n], n)
            })
            .collect();
        let proj = |d: [f64; 2], e: [f64; 2], leg: usize| {
            // d^T (I - u u^T) e / |v|
            let (u, n) = legs[leg];
            (d[0] * e[0] + d[1] * e[1] - (d[0] * u[0] + d[1] * u[1]) * (e[0] * u[0] + e[1] * u[1])) / n
        };
        let mut g = vec![0.0; k];
        let mut h = vec![vec![0.0; k]; k];
        for j in 0..k {
            let (u_in, _) = legs[j];
            let (u_out, _) = legs[j + 1];
            g[j] = dirs[j][0] * (u_in[0] - u_out[0]) + dirs[j][1] * (u_in[1] - u_out[1]);
            h[j][j] = proj(dirs[j], dirs[j], j) + proj(dirs[j], dirs[j], j + 1) + 1e-12;
            if j + 1 < k {
                let off = -proj(dirs[j], dirs[j + 1], j + 1);
                h[j][j + 1] = off;
                h[j + 1][j] = off;
            }
        }
        let step = solve(h, g.clone());
        let base = length(&t);
        let mut alpha = 1.0;
        let mut next: Vec<f64>;
        loop {
            next = t.iter().zip(&step).map(|(a, s)| a - alpha * s).collect();
            if length(&next) <= base || alpha < 1e-12 {
                break;
            }
            alpha *= 0.5;
        }
        let moved = step.iter().map(|s| (alpha * s).abs()).fold(0.0, f64::max);
        t = next;
        if moved < 1e-15 {
            break;
        }
    }
    all(&t)
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn sequences(n_walls: usize, depth: usize) -> Vec<Vec<usize>> {
    let mut out = vec![];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..depth {
        let mut next = vec![];
        for s in &frontier {
            for w in 0..n_walls {
                if s.last() != Some(&w) {
                    let mut t = s.clone();
                    t.push(w);
                    next.push(t);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Brute-force path loss in dB.
fn brute_force_pl(field: &HeightField, tx: &Site, rx: &Site, cfg: &OracleConfig) -> f64 {
    let walls = extract_walls(field);
    let lambda = C / cfg.frequency;
    let dz = rx.z - tx.z;
    let mut powers = vec![];

    let direct3 = ((rx.x - tx.x).powi(2) + (rx.y - tx.y).powi(2) + dz * dz).sqrt();
    let p_tx = [tx.x, tx.y, tx.z];
    let p_rx = [rx.x, rx.y, rx.z];
    let los = clear(field, p_tx, p_rx);
    let mut direct_loss = 0.0;
    if cfg.include_diffraction {
        let mut best: Option<f64> = None;
        for (t, h, z) in samples(field, p_tx, p_rx) {
            if h > 0.0 {
                let (d1, d2) = (t * direct3, (1.0 - t) * direct3);
                let nu = (h - z) * (2.0 * (d1 + d2) / (lambda * d1 * d2)).sqrt();
                best = Some(best.map_or(nu, |b: f64| b.max(nu)));
            }
        }
        direct_loss = best.map_or(0.0, knife_edge_loss);
    }
    if los || cfg.include_diffraction {
        let a = lambda / (4.0 * std::f64::consts::PI * direct3) * 10f64.powf(-direct_loss / 20.0);
        powers.push(a * a);
    }

    for seq in sequences(walls.len(), cfg.max_reflection_depth) {
        let ws: Vec<&Wall> = seq.iter().map(|&i| &walls[i]).collect();
        let pts = stationary_path([tx.x, tx.y], [rx.x, rx.y], &ws);
        let mut ok = true;
        for (j, w) in ws.iter().enumerate() {
            let p = pts[j + 1];
            let along = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
            let s = ((p[0] - w.a[0]) * along[0] + (p[1] - w.a[1]) * along[1])
                / (along[0] * along[0] + along[1] * along[1]);
            if !(0.0..=1.0).contains(&s) || signed_side(w, pts[j]) <= 1e-9 || signed_side(w, pts[j + 2]) <= 1e-9 {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt());
        }
        let total = *cum.last().unwrap();
        let z = |s: f64| tx.z + dz * s / total;
        if ws.iter().enumerate().any(|(j, w)| {
            let zj = z(cum[j + 1]);
            zj < w.bottom || zj > w.top
        }) {
            continue;
        }
        let blocked = (1..pts.len()).any(|i| {
            !clear(
                field,
                [pts[i - 1][0], pts[i - 1][1], z(cum[i - 1])],
                [pts[i][0], pts[i][1], z(cum[i])],
            )
        });
        if blocked {
            continue;
        }
        let len3 = (total * total + dz * dz).sqrt();
        let a = cfg.reflection_coefficient.powi(seq.len() as i32) * lambda / (4.0 * std::f64::consts::PI * len3);
        powers.push(a * a);
    }

    let strongest = powers.iter().cloned().fold(0.0, f64::max);
    let kept: f64 = powers.iter().filter(|&&p| p >= strongest * 1e-4 && p > 0.0).sum();
    if kept == 0.0 {
        return cfg.clip_ceiling_db;
    }
    let pl = -10.0 * kept.log10();
    if pl > cfg.clip_ceiling_db {
        cfg.clip_ceiling_db
    } else {
        pl
    }
}

fn random_scene(rng: &mut ChaCha8Rng) -> HeightField {
    let mut field = HeightField::flat(40, 40, 2.0).unwrap();
    let n_buildings = rng.random_range(1..=3);
    for _ in 0..n_buildings {
        let (r0, c0) = (rng.random_range(2..32), rng.random_range(2..32));
        let (dr, dc) = (rng.random_range(2..9), rng.random_range(2..9));
        let h = rng.random_range(5.0..30.0);
        for r in r0..(r0 + dr).min(40) {
            for c in c0..(c0 + dc).min(40) {
                field.set(r, c, h);
            }
        }
    }
    field
}

fn open_point(field: &HeightField, rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let (x, y) = (rng.random_range(0.5..79.5), rng.random_range(0.5..79.5));
        if surface(field, x, y) == 0.0 {
            return (x, y);
        }
    }
}

/// Compares tracer and brute force on random scenes of one to three
/// buildings; returns the worst absolute difference in dB.
pub fn check_equivalence(depth: usize, diffraction: bool, seeds: std::ops::Range<u64>, pairs: usize) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let mut with_reflections = 0;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = random_scene(&mut rng);
        let cfg = OracleConfig {
            frequency: rng.random_range(0.8e9..30e9),
            max_reflection_depth: depth,
            reflection_coefficient: rng.random_range(0.3..0.9),
            include_diffraction: diffraction,
            clip_ceiling_db: 160.0,
        };
        let tracer = oracle::Tracer::new(&field, cfg.clone()).unwrap();
        for _ in 0..pairs {
            let (tx_x, tx_y) = open_point(&field, &mut rng);
            let (rx_x, rx_y) = open_point(&field, &mut rng);
            let tx = Site::tx(tx_x, tx_y, rng.random_range(1.5..25.0));
            let rx = Site::rx(rx_x, rx_y, rng.random_range(1.0..10.0));
            let traced = tracer.trace(&tx, &rx).unwrap();
            if traced.components.iter().any(|c| c.n_reflections > 0) {
                with_reflections += 1;
            }
            let fast = traced.path_loss_db;
            let slow = brute_force_pl(&field, &tx, &rx, &cfg);
            let diff = (fast - slow).abs();
            worst = worst.max(diff);
            if diff > 1e-6 {
                return Err(format!("seed {seed}: tracer {fast} dB vs brute force {slow} dB"));
            }
        }
    }
    if with_reflections == 0 {
        return Err("no reflected paths exercised".into());
    }
    Ok(worst)
}

