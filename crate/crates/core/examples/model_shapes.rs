//! Stage-by-stage tensor shapes and parameter counts for the default and the
//! desk configurations.

use pear::autodiff::Tape;
use pear::model::{ModelConfig, Pear, VolumetricState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trace(cfg: ModelConfig) -> pear::Result<()> {
    let model = Pear::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("n_side {}: {} parameters", cfg.n_side, model.parameter_count());
    let state = VolumetricState::<f32>::zeros(&cfg)?;
    let tape = Tape::no_grad();
    let net = model.bind(&tape);
    let (s, u) = (tape.constant(state.surface), tape.constant(state.upper));
    println!("  input          {:?} {:?}", s.shape(), u.shape());
    let x = net.patch_embed(&s, &u)?;
    println!("  patch embed    {:?}", x.shape());
    let skip = net.encoder(&x)?;
    println!("  encoder        {:?}", skip.shape());
    let down = net.downsample(&skip)?;
    println!("  downsample     {:?}", down.shape());
    let mid = net.bottleneck(&down)?;
    println!("  bottleneck     {:?}", mid.shape());
    let up = net.upsample(&mid)?;
    println!("  upsample       {:?}", up.shape());
    let dec = net.decoder(&up)?;
    println!("  decoder        {:?}", dec.shape());
    let (so, uo) = net.patch_recover(&dec, Some(&skip))?;
    println!("  patch recovery {:?} {:?}", so.shape(), uo.shape());
    Ok(())
}

fn main() -> pear::Result<()> {
    trace(ModelConfig::desk())?;
    trace(ModelConfig::default())
}
