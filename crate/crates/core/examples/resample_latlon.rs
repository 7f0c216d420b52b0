//! Lat-lon to HEALPix and back for an analytic field, with the round-trip
//! error and a PGM preview.

use pear::data::{hpx_to_latlon, latlon_to_hpx, write_pgm, LatLonGrid};
use pear::hpx::GridSpec;

fn main() -> pear::Result<()> {
    let field = |lat: f64, lon: f64, _c: usize| lat.to_radians().sin() + 0.5 * lat.to_radians().cos() * (2.0 * lon.to_radians()).cos();
    let src = LatLonGrid::from_fn(181, 360, 1, field)?;
    let out = std::env::temp_dir().join("pear_resample_example.pgm");
    for n_side in [8, 16, 32] {
        let spec = GridSpec::from_nside(n_side)?;
        let hpx = latlon_to_hpx(&src, spec)?;
        let back = hpx_to_latlon(&hpx, spec, 1, 91, 180)?;
        let mut worst = 0.0f64;
        for i in 0..back.n_lat() {
            for j in 0..back.n_lon() {
                worst = worst.max((back.get(i, j, 0) - field(back.lat(i), back.lon(j), 0)).abs());
            }
        }
        println!("n_side {n_side:>2}: {} pixels, max round-trip error {worst:.4}", hpx.len());
        if n_side == 32 {
            write_pgm(&out, &back, 0)?;
        }
    }
    println!("preview {}", out.display());
    Ok(())
}
