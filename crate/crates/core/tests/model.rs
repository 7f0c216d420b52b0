//! Network structure checks: convolution loop oracles for the patch layers,
//! per-voxel oracle for identity attention, linearity of the sampling pair,
//! equivariance under a quarter turn about the polar axis, and end-to-end
//! finite-difference gradients.

use pear::autodiff::params::ParamId;
use pear::autodiff::{Element, Tape, Tensor, Var};
use pear::hpx::GridSpec;
use pear::model::{ModelConfig, Pear, VolumetricState};
use pear::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor<T: Element>(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

fn random_state<T: Element>(cfg: &ModelConfig, seed: u64) -> VolumetricState<T> {
    let mut r = rng(seed);
    let n = cfg.grid().unwrap().n_pix() as usize;
    VolumetricState { surface: random_tensor(&[n, 4], &mut r), upper: random_tensor(&[n, 13, 5], &mut r) }
}

fn param<'a, T: Element>(model: &'a Pear<T>, name: &str) -> &'a Tensor<T> {
    model.params().get(model.params().find(name).unwrap_or_else(|| panic!("no {name}")))
}

fn set_param<T: Element>(model: &mut Pear<T>, name: &str, f: impl Fn(usize) -> f64) {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no {name}"));
    for (i, v) in model.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
        *v = T::from_f64(f(i));
    }
}

/// Randomizes every parameter, including biases and position tables that
/// start at zero.
fn randomize<T: Element>(model: &mut Pear<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for i in 0..model.params().len() {
        let name = model.params().name(ParamId(i)).to_string();
        let gain = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in model.params_mut().get_mut(ParamId(i)).data_mut() {
            *v = T::from_f64(gain + scale * r.gen_range(-1.0..1.0));
        }
    }
}

fn small_config() -> ModelConfig {
    ModelConfig { depths: [2, 2, 2], ..ModelConfig::desk() }
}

#[test]
fn patch_embed_matches_strided_convolution() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg.clone(), &mut rng(1)).unwrap();
    randomize(&mut model, 2, 0.3);
    let state = random_state::<f64>(&cfg, 3);
    let tape = Tape::no_grad();
    let net = model.bind(&tape);
    let out = net.patch_embed(&tape.constant(state.surface.clone()), &tape.constant(state.upper.clone())).unwrap();
    assert_eq!(out.shape(), &[48, 8, 48]);

    // Kernels indexed [input offset][output channel], input offset ordered
    // (pixel in patch, channel) for the surface and (pixel, level in slot,
    // channel) for the upper air.
    let ws = param(&model, "patch_embed.surface.weight").data();
    let bs = param(&model, "patch_embed.surface.bias").data();
    let wu = param(&model, "patch_embed.upper.weight").data();
    let bu = param(&model, "patch_embed.upper.bias").data();
    let s = state.surface.data();
    let u = state.upper.data();
    for p in 0..48 {
        for e in 0..48 {
            let mut acc = bs[e];
            for i in 0..16 {
                for c in 0..4 {
                    acc += ws[(i * 4 + c) * 48 + e] * s[(p * 16 + i) * 4 + c];
                }
            }
            assert!((out.value().data()[(p * 8) * 48 + e] - acc).abs() < 1e-12);
            for slot in 0..7 {
                let mut acc = bu[e];
                for i in 0..16 {
                    for dl in 0..2 {
                        let level = (2 * slot + dl).min(12);
                        for c in 0..5 {
                            acc += wu[((i * 2 + dl) * 5 + c) * 48 + e] * u[((p * 16 + i) * 13 + level) * 5 + c];
                        }
                    }
                }
                assert!((out.value().data()[(p * 8 + 1 + slot) * 48 + e] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_weights_give_bias() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg.clone(), &mut rng(1)).unwrap();
    set_param(&mut model, "patch_embed.surface.weight", |_| 0.0);
    set_param(&mut model, "patch_embed.upper.weight", |_| 0.0);
    set_param(&mut model, "patch_embed.surface.bias", |e| e as f64);
    set_param(&mut model, "patch_embed.upper.bias", |e| -(e as f64));
    let state = random_state::<f64>(&cfg, 4);
    let tape = Tape::no_grad();
    let out = model
        .bind(&tape)
        .patch_embed(&tape.constant(state.surface), &tape.constant(state.upper))
        .unwrap();
    for (i, v) in out.value().data().iter().enumerate() {
        let e = (i % 48) as f64;
        let slot = (i / 48) % 8;
        assert_eq!(*v, if slot == 0 { e } else { -e });
    }
}

#[test]
fn patch_recover_matches_transpose_convolution() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg.clone(), &mut rng(5)).unwrap();
    randomize(&mut model, 6, 0.3);
    let mut r = rng(7);
    let tape = Tape::no_grad();
    let x = tape.constant(random_tensor(&[48, 8, 48], &mut r));
    let skip = tape.constant(random_tensor(&[48, 8, 48], &mut r));
    let (surface, upper) = model.bind(&tape).patch_recover(&x, Some(&skip)).unwrap();
    assert_eq!(surface.shape(), &[768, 4]);
    assert_eq!(upper.shape(), &[768, 13, 5]);

    let ws = param(&model, "patch_recover.surface.weight").data();
    let bs = param(&model, "patch_recover.surface.bias").data();
    let wu = param(&model, "patch_recover.upper.weight").data();
    let bu = param(&model, "patch_recover.upper.bias").data();
    let latent = |p: usize, slot: usize, e: usize| {
        if e < 48 {
            x.value().data()[(p * 8 + slot) * 48 + e]
        } else {
            skip.value().data()[(p * 8 + slot) * 48 + e - 48]
        }
    };
    for p in 0..48 {
        for i in 0..16 {
            for c in 0..4 {
                let o = i * 4 + c;
                let mut acc = bs[o];
                for e in 0..96 {
                    acc += ws[e * 64 + o] * latent(p, 0, e);
                }
                assert!((surface.value().data()[(p * 16 + i) * 4 + c] - acc).abs() < 1e-12);
            }
            for level in 0..13 {
                let (slot, dl) = (level / 2, level % 2);
                for c in 0..5 {
                    let o = (i * 2 + dl) * 5 + c;
                    let mut acc = bu[o];
                    for e in 0..96 {
                        acc += wu[e * 160 + o] * latent(p, 1 + slot, e);
                    }
                    assert!((upper.value().data()[((p * 16 + i) * 13 + level) * 5 + c] - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_latent_recovers_zero_state() {
    let cfg = small_config();
    let model = Pear::<f32>::new(cfg, &mut rng(8)).unwrap();
    let tape = Tape::no_grad();
    let z = tape.constant(Tensor::zeros(vec![48, 8, 48]));
    let (s, u) = model.bind(&tape).patch_recover(&z, Some(&z)).unwrap();
    assert!(s.value().data().iter().chain(u.value().data()).all(|v| *v == 0.0));
}

#[test]
fn skip_is_required_and_decoder_can_be_empty() {
    let cfg = ModelConfig { depths: [2, 2, 0], ..ModelConfig::desk() };
    let model = Pear::<f32>::new(cfg.clone(), &mut rng(9)).unwrap();
    let state = random_state::<f32>(&cfg, 10);
    let out = model.forward(&state).unwrap();
    assert_eq!(out.surface.shape(), state.surface.shape());
    assert_eq!(out.upper.shape(), state.upper.shape());
    let tape = Tape::no_grad();
    let z = tape.constant(Tensor::zeros(vec![48, 8, 48]));
    assert!(matches!(model.bind(&tape).patch_recover(&z, None), Err(Error::Contract(_))));
}

#[test]
fn sampling_pair_is_linear() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg, &mut rng(11)).unwrap();
    set_param(&mut model, "downsample.bias", |_| 0.0);
    set_param(&mut model, "upsample.bias", |_| 0.0);
    let mut r = rng(12);
    let tape = Tape::no_grad();
    let net = model.bind(&tape);
    let x = tape.constant(random_tensor(&[48, 8, 48], &mut r));
    let y = tape.constant(random_tensor(&[48, 8, 48], &mut r));
    let f = |v: &Var<f64>| net.upsample(&net.downsample(v).unwrap()).unwrap();
    let down = net.downsample(&x).unwrap();
    assert_eq!(down.shape(), &[12, 8, 96]);
    let fx = f(&x);
    assert_eq!(fx.shape(), &[48, 8, 48]);
    let fxy = f(&tape.add(&x, &y).unwrap());
    let sum = tape.add(&fx, &f(&y)).unwrap();
    for (a, b) in fxy.value().data().iter().zip(sum.value().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn downsample_groups_nested_siblings() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg, &mut rng(13)).unwrap();
    // Weight picks channel 0 of sibling `k` into output channel `k`.
    set_param(&mut model, "downsample.weight", |i| {
        let (row, col) = (i / 96, i % 96);
        let (sibling, channel) = (row / 48, row % 48);
        (channel == 0 && col == sibling) as u8 as f64
    });
    set_param(&mut model, "downsample.bias", |_| 0.0);
    let tape = Tape::no_grad();
    let data: Vec<f64> = (0..48 * 8 * 48).map(|i| ((i / 48 / 8) * 10 + (i / 48) % 8) as f64).collect();
    let x = tape.constant(Tensor::new(vec![48, 8, 48], data).unwrap());
    let y = model.bind(&tape).downsample(&x).unwrap();
    for q in 0..12 {
        for d in 0..8 {
            for k in 0..4 {
                let want = ((4 * q + k) * 10 + d) as f64;
                assert_eq!(y.value().data()[(q * 8 + d) * 96 + k], want);
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i]).collect()
}

/// `x W[.., cols] + b[cols]` for a row-major `(n_in, n_out)` weight.
fn affine(x: &[f64], w: &[f64], b: &[f64], n_out: usize, cols: std::ops::Range<usize>) -> Vec<f64> {
    cols.map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * n_out + o]).sum::<f64>()).collect()
}

#[test]
fn identity_attention_reduces_block_to_per_voxel_mlp() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg, &mut rng(14)).unwrap();
    randomize(&mut model, 15, 0.2);
    let tokens = model.layouts()[0].0.window_len();
    for b in 0..2 {
        set_param(&mut model, &format!("stage1.block{b}.attn.bias_table"), |i| {
            let (r, c) = ((i / tokens) % tokens, i % tokens);
            if r == c { 0.0 } else { -1e9 }
        });
    }
    let mut r = rng(16);
    let x = random_tensor::<f64>(&[48, 8, 48], &mut r);
    let tape = Tape::no_grad();
    let y = model.bind(&tape).encoder(&tape.constant(x.clone())).unwrap();

    for v in 0..48 * 8 {
        let mut h = x.data()[v * 48..(v + 1) * 48].to_vec();
        for b in 0..2 {
            let p = |n: &str| param(&model, &format!("stage1.block{b}.{n}")).data();
            let value = affine(&h, p("attn.qkv.weight"), p("attn.qkv.bias"), 144, 96..144);
            let a = affine(&value, p("attn.proj.weight"), p("attn.proj.bias"), 48, 0..48);
            let a = layer_norm(&a, p("norm1.gamma"), p("norm1.beta"));
            let h1: Vec<f64> = h.iter().zip(&a).map(|(u, w)| u + w).collect();
            let m: Vec<f64> = affine(&h1, p("mlp.fc1.weight"), p("mlp.fc1.bias"), 192, 0..192).into_iter().map(gelu).collect();
            let m = affine(&m, p("mlp.fc2.weight"), p("mlp.fc2.bias"), 48, 0..48);
            let m = layer_norm(&m, p("norm2.gamma"), p("norm2.beta"));
            h = h1.iter().zip(&m).map(|(u, w)| u + w).collect();
        }
        for (got, want) in y.value().data()[v * 48..(v + 1) * 48].iter().zip(&h) {
            assert!((got - want).abs() < 1e-10, "voxel {v}: {got} vs {want}");
        }
    }
}

/// Nested index after a quarter turn about the polar axis: every face moves
/// to its eastern neighbour in the same face row, intra-face coordinates kept.
fn quarter_turn(spec: GridSpec) -> Vec<usize> {
    let fp = spec.face_pixels();
    (0..spec.n_pix())
        .map(|p| {
            let (face, within) = (p / fp, p % fp);
            let turned = face / 4 * 4 + (face + 1) % 4;
            (turned * fp + within) as usize
        })
        .collect()
}

fn permute_rows<T: Element>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let row = t.len() / perm.len();
    let mut out = vec![T::ZERO; t.len()];
    for (src, &dst) in perm.iter().enumerate() {
        out[dst * row..(dst + 1) * row].copy_from_slice(&t.data()[src * row..(src + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

#[test]
fn unshifted_model_commutes_with_quarter_turn() {
    // Windows of 4 patches stay inside one base face on both stage grids.
    let cfg = ModelConfig { n_side: 16, window_hp: 4, shift_windows: false, depths: [2, 2, 2], ..ModelConfig::default() };
    let mut model = Pear::<f64>::new(cfg.clone(), &mut rng(17)).unwrap();
    randomize(&mut model, 18, 0.2);
    let state = random_state::<f64>(&cfg, 19);
    let perm = quarter_turn(cfg.grid().unwrap());
    let turned = VolumetricState {
        surface: permute_rows(&state.surface, &perm),
        upper: permute_rows(&state.upper, &perm),
    };
    let a = model.forward(&turned).unwrap();
    let b = model.forward(&state).unwrap();
    for (x, y) in a.surface.data().iter().zip(permute_rows(&b.surface, &perm).data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.upper.data().iter().zip(permute_rows(&b.upper, &perm).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn shapes_are_conserved() {
    for cfg in [ModelConfig::desk(), ModelConfig { n_side: 16, depths: [2, 2, 2], ..ModelConfig::default() }] {
        let model = Pear::<f32>::new(cfg.clone(), &mut rng(20)).unwrap();
        let state = random_state::<f32>(&cfg, 21);
        let out = model.forward(&state).unwrap();
        out.check(&cfg).unwrap();
        assert!(out.all_finite());
    }
}

#[test]
fn rejects_non_finite_input() {
    let cfg = small_config();
    let model = Pear::<f32>::new(cfg.clone(), &mut rng(22)).unwrap();
    let mut state = random_state::<f32>(&cfg, 23);
    state.upper.data_mut()[17] = f32::NAN;
    assert!(matches!(model.forward(&state), Err(Error::NonFinite(_))));
}

#[test]
fn construction_is_seeded() {
    let a = Pear::<f32>::new(small_config(), &mut rng(24)).unwrap();
    let b = Pear::<f32>::new(small_config(), &mut rng(24)).unwrap();
    let c = Pear::<f32>::new(small_config(), &mut rng(25)).unwrap();
    let same = |x: &Pear<f32>, y: &Pear<f32>| x.params().iter().zip(y.params().iter()).all(|(p, q)| p.1 == q.1);
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
    let w = param(&a, "stage1.block0.attn.qkv.weight");
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    assert!(param(&a, "stage1.block0.attn.bias_table").data().iter().all(|v| *v == 0.0));
}

/// Random linear functional of the forecast; smooth, so central differences
/// are not disturbed by the kinks of the training loss.
fn probe_loss<T: Element>(model: &Pear<T>, tape: &Tape<T>, input: &VolumetricState<T>, weights: &VolumetricState<T>) -> (Var<T>, Vec<Var<T>>) {
    let net = model.bind(tape);
    let (s, u) = net.forward(&tape.constant(input.surface.clone()), &tape.constant(input.upper.clone())).unwrap();
    let ls = tape.sum(&tape.mul(&s, &tape.constant(weights.surface.clone())).unwrap());
    let lu = tape.sum(&tape.mul(&u, &tape.constant(weights.upper.clone())).unwrap());
    (tape.add(&ls, &lu).unwrap(), net.vars().to_vec())
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = small_config();
    let mut model = Pear::<f64>::new(cfg.clone(), &mut rng(26)).unwrap();
    randomize(&mut model, 27, 0.1);
    let input = random_state::<f64>(&cfg, 28);
    let weights = random_state::<f64>(&cfg, 29);
    let tape = Tape::new();
    let (loss, vars) = probe_loss(&model, &tape, &input, &weights);
    let grads = tape.backward(&loss).unwrap();

    let mut r = rng(30);
    let h = 1e-5;
    for _ in 0..5 {
        let id = r.gen_range(0..model.params().len());
        let dir = random_tensor::<f64>(model.params().get(ParamId(id)).shape(), &mut r);
        let analytic: f64 = grads.get_or_zeros(&vars[id]).data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
        let eval = |sign: f64| {
            let mut m = model.clone();
            for (v, d) in m.params_mut().get_mut(ParamId(id)).data_mut().iter_mut().zip(dir.data()) {
                *v += sign * h * d;
            }
            probe_loss(&m, &Tape::no_grad(), &input, &weights).0.value().item()
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-5, "{}: {analytic} vs {numeric}", model.params().name(ParamId(id)));
    }
}
