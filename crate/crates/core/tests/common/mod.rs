//! Oracles shared by the integration tests: pixel centers from the planar
//! projection of each base face sorted into rings without the library's ring
//! formulas, shift masks from voxel provenance, and central differences.
#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_4, PI};

use pear::autodiff::{Tape, Tensor, Var};
use pear::hpx::GridSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(z, phi)` of a nested pixel from the face-diamond projection.
pub fn projected_center(spec: GridSpec, p: u64) -> (f64, f64) {
    let n = spec.n_side() as f64;
    let (face, x, y) = spec.nest_to_xyf(p).unwrap();
    let (xf, yf) = match face {
        0..=3 => (FRAC_PI_4 + face as f64 * PI / 2.0, FRAC_PI_4),
        4..=7 => ((face - 4) as f64 * PI / 2.0, 0.0),
        _ => (FRAC_PI_4 + (face - 8) as f64 * PI / 2.0, -FRAC_PI_4),
    };
    let u = (x as f64 + 0.5) / n;
    let v = (y as f64 + 0.5) / n;
    let xs = xf + (u - v) * FRAC_PI_4;
    let ys = yf - FRAC_PI_4 + (u + v) * FRAC_PI_4;
    let (z, phi) = if ys.abs() <= FRAC_PI_4 {
        (8.0 * ys / (3.0 * PI), xs)
    } else {
        let sigma = 2.0 - 4.0 * ys.abs() / PI;
        let z = ys.signum() * (1.0 - sigma * sigma / 3.0);
        (z, xf + (xs - xf) / sigma)
    };
    let mut phi = phi.rem_euclid(2.0 * PI);
    if phi > 2.0 * PI - 1e-9 {
        phi = 0.0;
    }
    (z, phi)
}

/// Brute-force nested -> ring table: sort all centers by (z desc, phi asc).
pub fn brute_force_ring_order(spec: GridSpec) -> Vec<u64> {
    let n_pix = spec.n_pix();
    let mut centers: Vec<(u64, f64, f64)> = (0..n_pix)
        .map(|p| {
            let (z, phi) = projected_center(spec, p);
            (p, z, phi)
        })
        .collect();
    centers.sort_by(|a, b| {
        if (a.1 - b.1).abs() > 1e-9 {
            b.1.partial_cmp(&a.1).unwrap()
        } else {
            a.2.partial_cmp(&b.2).unwrap()
        }
    });
    let mut n2r = vec![0; n_pix as usize];
    for (r, (p, _, _)) in centers.iter().enumerate() {
        n2r[*p as usize] = r as u64;
    }
    n2r
}

/// Pre-shift `(ring position, level)` of the voxel that ends up at each
/// post-shift `(nested pixel, level)`, together with its post-shift ring
/// position.
pub struct Provenance {
    pub src: Vec<(usize, usize)>,
    pub dst_ring: Vec<usize>,
}

pub fn provenance(spec: GridSpec, depth: usize, shift_hp: usize, shift_d: usize) -> Provenance {
    let n2r: Vec<usize> = brute_force_ring_order(spec).into_iter().map(|r| r as usize).collect();
    let p_count = n2r.len();
    // Roll a grid of tags in ring space: after[r][l] = before[r + s][l + sd].
    let mut after = vec![(0, 0); p_count * depth];
    for r in 0..p_count {
        for l in 0..depth {
            after[r * depth + l] = ((r + shift_hp) % p_count, (l + shift_d) % depth);
        }
    }
    let mut src = vec![(0, 0); p_count * depth];
    let mut dst_ring = vec![0; p_count];
    for p in 0..p_count {
        dst_ring[p] = n2r[p];
        for l in 0..depth {
            src[p * depth + l] = after[n2r[p] * depth + l];
        }
    }
    Provenance { src, dst_ring }
}

/// Oracle mask: forbid pairs where exactly one voxel crossed the polar seam
/// or exactly one crossed the vertical seam.
pub fn oracle_masks(spec: GridSpec, depth: usize, w_hp: usize, w_d: usize, s_hp: usize, s_d: usize) -> Vec<Vec<Vec<bool>>> {
    let prov = provenance(spec, depth, s_hp, s_d);
    let p_count = spec.n_pix() as usize;
    let mut masks = Vec::new();
    for bh in 0..p_count / w_hp {
        for bd in 0..depth / w_d {
            let voxels: Vec<(bool, bool)> = (0..w_hp * w_d)
                .map(|v| {
                    let p = bh * w_hp + v / w_d;
                    let l = bd * w_d + v % w_d;
                    let (r_src, l_src) = prov.src[p * depth + l];
                    (r_src < prov.dst_ring[p], l_src < l)
                })
                .collect();
            masks.push(voxels.iter().map(|a| voxels.iter().map(|b| a != b).collect()).collect());
        }
    }
    masks
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with non-uniform upstream gradient.
pub fn project(tape: &Tape<f64>, out: &Var<f64>) -> Var<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = tape.constant(random(out.shape(), &mut rng));
    let prod = tape.mul(out, &r).unwrap();
    tape.sum(&prod)
}

/// Compares tape gradients of `f` against central differences, returning the
/// worst relative error over all inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(&loss).unwrap();

    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::no_grad();
        let vars: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = numeric.iter().zip(analytic.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = numeric
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}
