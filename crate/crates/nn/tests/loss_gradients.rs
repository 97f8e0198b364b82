use kneexr_nn::loss::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central difference of `f` along coordinate `i`.
fn numeric(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut p = x.to_vec();
    p[i] += H;
    let up = f(&p);
    p[i] -= 2.0 * H;
    (up - f(&p)) / (2.0 * H)
}

fn check_vector(name: &str, f: &dyn Fn(&[f64]) -> f64, grad: &[f64], x: &[f64]) {
    for i in 0..x.len() {
        let n = numeric(f, x, i);
        let e = rel_err(grad[i], n);
        assert!(e < TOL, "{name}: coord {i} analytic {} numeric {n} rel {e:e} at {x:?}", grad[i]);
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed)
}

#[test]
fn mse_gradient() {
    let mut r = rng();
    for _ in 0..100 {
        let n = r.gen_range(1..6);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let g = mse_grad(&x, &t).unwrap();
        check_vector("mse", &|p| mse(p, &t).unwrap(), &g.grad, &x);
    }
}

#[test]
fn focal_gradients() {
    let mut r = rng();
    for _ in 0..100 {
        let gamma = r.gen_range(0.0..3.0);
        let alpha = r.gen_range(0.05..0.95);
        let label = r.gen_bool(0.5);
        let p = r.gen_range(0.02..0.98);
        let a = focal_dprob(p, label, gamma, alpha);
        let n = numeric(&|v| focal(v[0], label, gamma, alpha), &[p], 0);
        assert!(rel_err(a, n) < TOL, "focal dprob {a} vs {n}");

        let z = r.gen_range(-6.0..6.0);
        let (_, dz) = focal_with_logits(z, label, gamma, alpha);
        let n = numeric(&|v| focal_with_logits(v[0], label, gamma, alpha).0, &[z], 0);
        assert!(rel_err(dz, n) < TOL, "focal dlogit {dz} vs {n} at z={z} gamma={gamma}");
    }
}

#[test]
fn focal_matches_probability_form() {
    let mut r = rng();
    for _ in 0..100 {
        let z: f64 = r.gen_range(-5.0..5.0);
        let label = r.gen_bool(0.5);
        let (l, _) = focal_with_logits(z, label, 2.0, 0.25);
        assert!((l - focal(sigmoid(z), label, 2.0, 0.25)).abs() < 1e-9);
    }
}

#[test]
fn smooth_l1_gradient() {
    let mut r = rng();
    let mut done = 0;
    while done < 100 {
        let beta = r.gen_range(0.2..2.0);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..4).map(|_| r.gen_range(-4.0..4.0)).collect();
        // Stay clear of the kinks at |d| = beta and d = 0.
        if x.iter().zip(&t).any(|(a, b)| ((a - b).abs() - beta).abs() < 1e-3 || (a - b).abs() < 1e-3) {
            continue;
        }
        let g = smooth_l1(&x, &t, beta).unwrap();
        check_vector("smooth_l1", &|p| smooth_l1(p, &t, beta).unwrap().value, &g.grad, &x);
        done += 1;
    }
}

#[test]
fn bce_gradients() {
    let mut r = rng();
    for _ in 0..100 {
        let p: Vec<f64> = (0..5).map(|_| r.gen_range(0.02..0.98)).collect();
        let y: Vec<f64> = (0..5).map(|_| if r.gen_bool(0.3) { r.gen_range(0.0..1.0) } else { r.gen_range(0..2) as f64 }).collect();
        let g = bce(&p, &y).unwrap();
        check_vector("bce", &|q| bce(q, &y).unwrap().value, &g.grad, &p);

        let z = r.gen_range(-8.0..8.0);
        let (_, dz) = bce_with_logits(z, y[0]);
        let n = numeric(&|v| bce_with_logits(v[0], y[0]).0, &[z], 0);
        assert!(rel_err(dz, n) < TOL);
    }
}

#[test]
fn dice_gradient() {
    let mut r = rng();
    for _ in 0..100 {
        let n = r.gen_range(1..12);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| r.gen_range(0..2) as f64).collect();
        let lg = dice_loss(&p, &g).unwrap();
        check_vector("dice", &|q| dice_loss(q, &g).unwrap().value, &lg.grad, &p);
    }
}

#[test]
fn cross_entropy_gradients() {
    let mut r = rng();
    for _ in 0..100 {
        let k = r.gen_range(2..6);
        let z: Vec<f64> = (0..k).map(|_| r.gen_range(-4.0..4.0)).collect();
        let label = r.gen_range(0..k);
        let g = cross_entropy_with_logits(&z, label).unwrap();
        check_vector("ce logits", &|q| cross_entropy_with_logits(q, label).unwrap().value, &g.grad, &z);

        let p = softmax(&z);
        let g = cross_entropy(&p, label).unwrap();
        check_vector("ce probs", &|q| cross_entropy(q, label).unwrap().value, &g.grad, &p);
    }
}

#[test]
fn focal_gamma_zero_half_alpha_is_half_bce() {
    let mut r = rng();
    for _ in 0..100 {
        let p: f64 = r.gen_range(0.001..0.999);
        let label = r.gen_bool(0.5);
        let b = bce(&[p], &[if label { 1.0 } else { 0.0 }]).unwrap().value;
        assert!((focal(p, label, 0.0, 0.5) - 0.5 * b).abs() < 1e-10);
        let z = r.gen_range(-10.0..10.0);
        let (fl, fd) = focal_with_logits(z, label, 0.0, 0.5);
        let (bl, bd) = bce_with_logits(z, if label { 1.0 } else { 0.0 });
        assert!((fl - 0.5 * bl).abs() < 1e-10 && (fd - 0.5 * bd).abs() < 1e-10);
    }
}

#[test]
fn loss_examples() {
    assert_eq!(mse(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), 2.0);
    assert!((smooth_l1(&[0.5], &[0.0], 1.0).unwrap().value - 0.125).abs() < 1e-15);
    assert!((smooth_l1(&[3.0], &[0.0], 1.0).unwrap().value - 2.5).abs() < 1e-15);
    assert!((cross_entropy(&[0.25; 4], 2).unwrap().value - 4f64.ln()).abs() < 1e-12);
    assert!(dice_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value.abs() < 1e-12);
    assert!(dice_loss(&[1.0], &[1.0, 0.0]).is_err());
}
