//! HEALPix geometry: ring census, nested/ring conversion, pixel lookup and
//! the nested hierarchy.

use pear::hpx::{GridSpec, PixelIndex, SphereCoord};

fn main() -> pear::Result<()> {
    for n_side in [1, 2, 4, 8, 64] {
        let spec = GridSpec::from_nside(n_side)?;
        println!(
            "n_side {n_side:>3}: {:>6} pixels, {:>3} rings, area {:.4e} sr, sum {:.15}",
            spec.n_pix(),
            spec.n_rings(),
            spec.pixel_area(),
            spec.pixel_area() * spec.n_pix() as f64
        );
    }
    println!("4 pi             {:.15}", 4.0 * std::f64::consts::PI);

    let spec = GridSpec::from_nside(4)?;
    println!("\nn_side 4 ring sizes {:?}", spec.ring_sizes());
    let p = spec.ang2nest(SphereCoord::new(1.0, 2.5));
    let c = spec.pixel_center(PixelIndex::nested(p))?;
    println!(
        "(theta 1.0, phi 2.5) -> nested {p}, ring {}, center lat {:.2} lon {:.2}",
        spec.nest2ring(p)?,
        c.lat_deg(),
        c.lon_deg()
    );
    println!("children at n_side 8 {:?}, parent at n_side 2 {}", spec.children(p)?, spec.parent(p)?);
    Ok(())
}
