//! Finite-difference checks of every tape operation, plus scalar oracles for
//! attention and AdamW.

mod common;

use std::sync::Arc;

use pear::autodiff::{attention, AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{grad_check, project, random, FD_TOL};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn grad_matmul_and_linear() {
    let mut r = rng();
    let err = grad_check(&[random(&[2, 3, 4], &mut r), random(&[4, 5], &mut r), random(&[5], &mut r)], |t, v| {
        let y = t.linear(&v[0], &v[1], &v[2]).unwrap();
        project(t, &y)
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_bmm_both_layouts() {
    let mut r = rng();
    for trans_b in [false, true] {
        let b_shape = if trans_b { [2, 3, 5, 4] } else { [2, 3, 4, 5] };
        let err = grad_check(&[random(&[2, 3, 6, 4], &mut r), random(&b_shape, &mut r)], |t, v| {
            let y = t.bmm(&v[0], &v[1], trans_b).unwrap();
            project(t, &y)
        });
        assert!(err < FD_TOL, "trans_b {trans_b}: {err}");
    }
}

#[test]
fn grad_broadcast_add_mul_scale() {
    let mut r = rng();
    let err = grad_check(
        &[random(&[3, 2, 4, 4], &mut r), random(&[2, 4, 4], &mut r), random(&[3, 1, 4, 4], &mut r)],
        |t, v| {
            let a = t.add(&v[0], &v[1]).unwrap();
            let b = t.add(&a, &v[2]).unwrap();
            let c = t.mul(&b, &v[0]).unwrap();
            let d = t.scale(&c, -1.7);
            project(t, &d)
        },
    );
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_layout_ops() {
    let mut r = rng();
    let idx = Arc::new(vec![3, 0, 0, 5, 2, 1]);
    let err = grad_check(&[random(&[6, 2, 3], &mut r), random(&[6, 1, 3], &mut r)], |t, v| {
        let p = t.permute(&v[0], &[2, 0, 1]).unwrap();
        let p = t.reshape(&p, &[3, 12]).unwrap();
        let p = t.reshape(&p, &[3, 6, 2]).unwrap();
        let p = t.permute(&p, &[1, 2, 0]).unwrap(); // back to (6, 2, 3)
        let g = t.gather_rows(&p, &idx).unwrap();
        let c = t.concat(&[&g, &v[1]], 1).unwrap();
        let parts = t.split(&c, 1, &[1, 2]).unwrap();
        let n = t.narrow(&parts[1], 2, 1, 2).unwrap();
        let s0 = project(t, &parts[0]);
        let s1 = project(t, &n);
        t.add(&s0, &s1).unwrap()
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_gelu_softmax() {
    let mut r = rng();
    let err = grad_check(&[random(&[4, 7], &mut r)], |t, v| {
        let x = t.scale(&v[0], 3.0);
        let y = t.gelu(&x);
        let s = t.softmax(&y).unwrap();
        project(t, &s)
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_masked_softmax() {
    let mut r = rng();
    let mut mask = Tensor::<f64>::zeros(vec![2, 1, 3, 3]);
    mask.data_mut()[1] = -1e9;
    mask.data_mut()[9 + 5] = -1e9;
    let err = grad_check(&[random(&[2, 2, 3, 3], &mut r)], |t, v| {
        let m = t.constant(mask.clone());
        let s = t.softmax_with_mask(&v[0], Some(&m)).unwrap();
        project(t, &s)
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_layer_norm() {
    let mut r = rng();
    let err = grad_check(&[random(&[5, 6], &mut r), random(&[6], &mut r), random(&[6], &mut r)], |t, v| {
        let y = t.layer_norm(&v[0], &v[1], &v[2]).unwrap();
        project(t, &y)
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_reductions_and_l1() {
    let mut r = rng();
    let err = grad_check(&[random(&[3, 5], &mut r), random(&[3, 5], &mut r)], |t, v| {
        let l = t.l1(&v[0], &v[1]).unwrap();
        let m = t.mean(&v[0]);
        let s = t.sum(&v[1]);
        let a = t.add(&l, &m).unwrap();
        let a = t.scale(&a, 0.25);
        t.add(&a, &s).unwrap()
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn grad_attention() {
    let mut r = rng();
    let mut mask = Tensor::<f64>::zeros(vec![2, 1, 4, 4]);
    for i in 0..4 {
        for j in 0..4 {
            if (i < 2) != (j < 2) {
                mask.data_mut()[16 + i * 4 + j] = -1e9;
            }
        }
    }
    let err = grad_check(
        &[
            random(&[2, 3, 4, 5], &mut r),
            random(&[2, 3, 4, 5], &mut r),
            random(&[2, 3, 4, 5], &mut r),
            random(&[3, 4, 4], &mut r),
        ],
        |t, v| {
            let m = t.constant(mask.clone());
            let y = attention(t, &v[0], &v[1], &v[2], Some(&v[3]), Some(&m)).unwrap();
            project(t, &y)
        },
    );
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn softmax_uniform_and_one_hot() {
    let tape = Tape::<f64>::no_grad();
    let z = tape.constant(Tensor::zeros(vec![2, 5]));
    let s = tape.softmax_with_mask(&z, None).unwrap();
    assert!(s.value().data().iter().all(|v| (v - 0.2).abs() < 1e-15));

    let mut m = Tensor::full(vec![1, 5], -1e9);
    m.data_mut()[3] = 0.0;
    let m = tape.constant(m);
    let s = tape.softmax_with_mask(&z, Some(&m)).unwrap();
    for row in s.value().data().chunks(5) {
        assert_eq!(row, &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}

#[test]
fn masked_softmax_rows_sum_to_one_in_f32() {
    let mut r = rng();
    let tape = Tape::<f32>::no_grad();
    let logits = tape.constant(random(&[8, 16], &mut r).cast());
    let mut mask = Tensor::<f32>::zeros(vec![8, 16]);
    for (i, v) in mask.data_mut().iter_mut().enumerate() {
        if (i * 7) % 3 == 0 {
            *v = -1e9;
        }
    }
    let s = tape.softmax_with_mask(&logits, Some(&tape.constant(mask.clone()))).unwrap();
    for (row, mrow) in s.value().data().chunks(16).zip(mask.data().chunks(16)) {
        let total: f64 = row.iter().zip(mrow).filter(|(_, m)| **m == 0.0).map(|(v, _)| *v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_is_affine_invariant() {
    let mut r = rng();
    let tape = Tape::<f64>::no_grad();
    let xi = random(&[3, 8], &mut r);
    let gamma = tape.constant(random(&[8], &mut r));
    let beta = tape.constant(random(&[8], &mut r));
    let base = tape.layer_norm(&tape.constant(xi.clone()), &gamma, &beta).unwrap();
    let shifted: Vec<f64> = xi.data().iter().map(|v| 3.5 * v - 2.0).collect();
    let shifted = tape.constant(Tensor::new(vec![3, 8], shifted).unwrap());
    let other = tape.layer_norm(&shifted, &gamma, &beta).unwrap();
    // Exact up to the variance floor epsilon.
    for (a, b) in base.value().data().iter().zip(other.value().data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

/// Straight-line evaluation of softmax(q kᵀ/√d + b) v for one window.
fn scalar_attention(q: &[[f64; 2]; 3], k: &[[f64; 2]; 3], v: &[[f64; 2]; 3], b: &[[f64; 3]; 3]) -> [[f64; 2]; 3] {
    let mut out = [[0.0; 2]; 3];
    for i in 0..3 {
        let mut logits = [0.0; 3];
        for j in 0..3 {
            logits[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt() + b[i][j];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..3 {
            for c in 0..2 {
                out[i][c] += e[j] / z * v[j][c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_scalar_oracle() {
    let q = [[0.3, -1.2], [0.8, 0.1], [-0.5, 0.9]];
    let k = [[1.0, 0.2], [-0.7, 0.4], [0.25, -0.6]];
    let v = [[2.0, -1.0], [0.5, 0.5], [-1.5, 3.0]];
    let b = [[0.1, -0.2, 0.0], [0.4, 0.0, -0.3], [0.0, 0.2, 0.5]];
    let expected = scalar_attention(&q, &k, &v, &b);

    let tape = Tape::<f64>::no_grad();
    let flat = |m: &[[f64; 2]; 3]| tape.constant(Tensor::new(vec![1, 1, 3, 2], m.iter().flatten().copied().collect()).unwrap());
    let bias = tape.constant(Tensor::new(vec![1, 3, 3], b.iter().flatten().copied().collect()).unwrap());
    let out = attention(&tape, &flat(&q), &flat(&k), &flat(&v), Some(&bias), None).unwrap();
    for (got, want) in out.value().data().iter().zip(expected.iter().flatten()) {
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}

#[test]
fn attention_convexity_and_identity() {
    let mut r = rng();
    let tape = Tape::<f64>::no_grad();
    let q = tape.constant(random(&[2, 2, 4, 3], &mut r));
    let k = tape.constant(random(&[2, 2, 4, 3], &mut r));
    let bias = tape.constant(random(&[2, 4, 4], &mut r));
    let v = tape.constant(Tensor::full(vec![2, 2, 4, 3], 1.25));
    let out = attention(&tape, &q, &k, &v, Some(&bias), None).unwrap();
    assert!(out.value().data().iter().all(|x| (x - 1.25).abs() < 1e-12));

    let zeros = tape.constant(Tensor::zeros(vec![2, 2, 4, 3]));
    let mut diag = Tensor::full(vec![2, 4, 4], -1e9);
    for h in 0..2 {
        for i in 0..4 {
            diag.data_mut()[h * 16 + i * 5] = 0.0;
        }
    }
    let v = tape.constant(random(&[2, 2, 4, 3], &mut r));
    let out = attention(&tape, &zeros, &zeros, &v, Some(&tape.constant(diag)), None).unwrap();
    assert_eq!(out.value().data(), v.value().data());
}

fn single_param(x: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("x", Tensor::scalar(x));
    store
}

#[test]
fn adamw_constant_gradient_moves_by_lr() {
    let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
    let mut store = single_param(0.0);
    let mut opt = AdamW::new(cfg, &store);
    let mut prev = 0.0;
    for step in 0..200 {
        opt.step(&mut store, &[Tensor::scalar(0.37)]).unwrap();
        let x = store.get(pear::autodiff::params::ParamId(0)).item();
        let delta: f64 = x - prev;
        prev = x;
        if step > 100 {
            assert!((delta.abs() - 1e-3).abs() < 1e-7, "{delta}");
        }
    }
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
    let mut store = single_param(2.0);
    let mut opt = AdamW::new(cfg, &store);
    for _ in 0..10 {
        opt.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
    }
    let x = store.get(pear::autodiff::params::ParamId(0)).item();
    assert!((x - 2.0 * (1.0f64 - 0.05).powi(10)).abs() < 1e-12);
}

#[test]
fn adamw_matches_scalar_reference_on_quadratic() {
    // f(x) = 1.5 (x - 0.8)^2, reference transcribed from the update rule.
    let (lr, wd, b1, b2, eps) = (0.05, 0.01, 0.9, 0.999, 1e-8);
    let grad = |x: f64| 3.0 * (x - 0.8);
    let (mut x, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
    let mut reference = Vec::new();
    for t in 1..=10 {
        let g = grad(x);
        x -= lr * wd * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        reference.push(x);
    }

    let cfg = AdamWConfig { lr, weight_decay: wd, beta1: b1, beta2: b2, eps };
    let mut store = single_param(-1.0);
    let mut opt = AdamW::new(cfg, &store);
    for want in reference {
        let x = store.get(pear::autodiff::params::ParamId(0)).item();
        opt.step(&mut store, &[Tensor::scalar(grad(x))]).unwrap();
        let got = store.get(pear::autodiff::params::ParamId(0)).item();
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
    assert_eq!(opt.step_count(), 10);
}

#[test]
fn adamw_rejects_non_finite() {
    let mut store = single_param(1.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    assert!(opt.step(&mut store, &[Tensor::scalar(f64::NAN)]).is_err());
    assert_eq!(opt.step_count(), 0);
    assert_eq!(store.get(pear::autodiff::params::ParamId(0)).item(), 1.0);
}
