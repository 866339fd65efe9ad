//! Finite-difference oracles for the block's vector-Jacobian products.

use icenet::block::{forward, init_params, vjp_theta, vjp_z, IebConfig, IebParams, Norm, Planes, PreparedBlock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_cfg(norm: Norm, seed: u64) -> IebConfig {
    IebConfig {
        hidden_width: 4,
        n_sub_blocks: 2,
        kernel_sizes: vec![3, 5],
        norm,
        seed,
        ..IebConfig::default()
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn planes(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Planes {
    Planes::new(rows, cols, gauss(rng, 2 * rows * cols)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shifted(p: &Planes, d: &Planes, s: f64) -> Planes {
    p.with_data(p.data.iter().zip(&d.data).map(|(a, b)| a + s * b).collect())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn jvp_fd(z: &Planes, x: &Planes, p: &IebParams, v: &Planes, h: f64) -> Vec<f64> {
    let fp = forward(&shifted(z, v, h), x, p).unwrap();
    let fm = forward(&shifted(z, v, -h), x, p).unwrap();
    fp.data.iter().zip(&fm.data).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

#[test]
fn adjoint_identity_both_norms() {
    for norm in [Norm::WeightScaled, Norm::GroupNorm] {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = init_params(&small_cfg(norm, seed)).unwrap();
            let (z, x) = (planes(&mut rng, 8, 4), planes(&mut rng, 8, 4));
            let (u, v) = (planes(&mut rng, 8, 4), planes(&mut rng, 8, 4));
            let lhs = dot(&vjp_z(&z, &x, &p, &u).unwrap().data, &v.data);
            let rhs = dot(&u.data, &jvp_fd(&z, &x, &p, &v, 1e-5));
            assert!(rel(lhs, rhs) <= 1e-5, "{norm:?} seed {seed}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn perturbation_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = init_params(&small_cfg(Norm::WeightScaled, 1)).unwrap();
    let (z, x, v) = (planes(&mut rng, 8, 4), planes(&mut rng, 8, 4), planes(&mut rng, 8, 4));
    let base = forward(&z, &x, &p).unwrap();
    let moved = forward(&shifted(&z, &v, 1e-4), &x, &p).unwrap();
    let jvp = jvp_fd(&z, &x, &p, &v, 1e-6);
    let diff: Vec<f64> = moved.data.iter().zip(&base.data).map(|(a, b)| a - b).collect();
    let pred: Vec<f64> = jvp.iter().map(|j| 1e-4 * j).collect();
    let err: f64 = diff.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = pred.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err / scale <= 1e-3, "{}", err / scale);
}

#[test]
fn vjp_z_columns_match_central_differences() {
    for norm in [Norm::WeightScaled, Norm::GroupNorm] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = init_params(&small_cfg(norm, 4)).unwrap();
        let (z, x, u) = (planes(&mut rng, 8, 4), planes(&mut rng, 8, 4), planes(&mut rng, 8, 4));
        let g = vjp_z(&z, &x, &p, &u).unwrap();
        for _ in 0..5 {
            let i = rng.random_range(0..z.data.len());
            let mut e = Planes::zeros(8, 4);
            e.data[i] = 1.0;
            let fd = dot(&u.data, &jvp_fd(&z, &x, &p, &e, 1e-5));
            assert!(
                rel(g.data[i], fd) <= 1e-3 || (g.data[i] - fd).abs() < 1e-8,
                "{norm:?} coord {i}: {} vs {fd}",
                g.data[i]
            );
        }
    }
}

#[test]
fn vjp_theta_directional_check() {
    for norm in [Norm::WeightScaled, Norm::GroupNorm] {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let p = init_params(&small_cfg(norm, seed)).unwrap();
            let (z, x, u) = (planes(&mut rng, 8, 4), planes(&mut rng, 8, 4), planes(&mut rng, 8, 4));
            let g = vjp_theta(&z, &x, &p, &u).unwrap();
            assert_eq!(g.len(), p.count());
            for _ in 0..5 {
                let d = gauss(&mut rng, p.count());
                let h = 1e-5;
                let move_by = |s: f64| {
                    let vals = p.values.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                    IebParams::from_values(&p.config, vals).unwrap()
                };
                let fp = forward(&z, &x, &move_by(h)).unwrap();
                let fm = forward(&z, &x, &move_by(-h)).unwrap();
                let fd = fp
                    .data
                    .iter()
                    .zip(&fm.data)
                    .zip(&u.data)
                    .map(|((a, b), w)| w * (a - b))
                    .sum::<f64>()
                    / (2.0 * h);
                let an = dot(&g, &d);
                assert!(rel(an, fd) <= 1e-3, "{norm:?} seed {seed}: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn vjp_both_agrees_with_separate_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = init_params(&small_cfg(Norm::GroupNorm, 2)).unwrap();
    let (z, x, u) = (planes(&mut rng, 6, 5), planes(&mut rng, 6, 5), planes(&mut rng, 6, 5));
    let prep = PreparedBlock::new(&p);
    let lin = prep.linearize(&z, &x).unwrap();
    let mut g = vec![0.0; p.count()];
    let dz = lin.vjp_both(&u, &mut g).unwrap();
    assert_eq!(dz, lin.vjp_z(&u).unwrap());
    assert_eq!(g, lin.vjp_theta(&u).unwrap());
}
