//! Reverse-mode gradients of a small attention block against central
//! differences in f64.

use pear::autodiff::{attention, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pear::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::<f64>::from_f64(shape.to_vec(), &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    };
    let (q, k, v) = (random(&[2, 3, 4, 5])?, random(&[2, 3, 4, 5])?, random(&[2, 3, 4, 5])?);
    let loss = |q: &Tensor<f64>, tape: &Tape<f64>| -> pear::Result<_> {
        let (q, k, v) = (tape.param(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = attention(tape, &q, &k, &v, None, None)?;
        Ok((tape.sum(&tape.mul(&out, &out)?), q))
    };

    let tape = Tape::new();
    let (l, qv) = loss(&q, &tape)?;
    let grads = tape.backward(&l)?;
    let analytic = grads.get_or_zeros(&qv);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..q.len() {
        let shifted = |d: f64| -> pear::Result<f64> {
            let mut p = q.clone();
            p.data_mut()[i] += d;
            Ok(loss(&p, &Tape::no_grad())?.0.value().item())
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12));
    }
    println!("{} query entries, worst relative error {worst:.2e}", q.len());
    Ok(())
}
