//! Equiangular latitude-longitude grids and resampling to and from HEALPix.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hpx::{GridSpec, PixelIndex, SphereCoord};

/// Values on `n_lat` rows from +90° to -90° inclusive and `n_lon` columns
/// starting at 0° longitude, stored `(lat, lon, channel)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatLonGrid {
    n_lat: usize,
    n_lon: usize,
    channels: usize,
    values: Vec<f64>,
}

impl LatLonGrid {
    pub fn new(n_lat: usize, n_lon: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if n_lat < 2 || n_lon == 0 || channels == 0 {
            return Err(Error::Config(format!("lat-lon grid {n_lat} x {n_lon} x {channels} is degenerate")));
        }
        if values.len() != n_lat * n_lon * channels {
            return Err(Error::dim("lat-lon grid", format!("{} values for {n_lat} x {n_lon} x {channels}", values.len())));
        }
        Ok(Self { n_lat, n_lon, channels, values })
    }

    /// Samples `f(lat_deg, lon_deg)` into every channel slot.
    pub fn from_fn(n_lat: usize, n_lon: usize, channels: usize, f: impl Fn(f64, f64, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(n_lat * n_lon * channels);
        for i in 0..n_lat {
            for j in 0..n_lon {
                for c in 0..channels {
                    values.push(f(lat_of_row(i, n_lat), lon_of_col(j, n_lon), c));
                }
            }
        }
        Self::new(n_lat, n_lon, channels, values)
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lat(&self, i: usize) -> f64 {
        lat_of_row(i, self.n_lat)
    }

    pub fn lon(&self, j: usize) -> f64 {
        lon_of_col(j, self.n_lon)
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.n_lon + j) * self.channels + c]
    }

    pub fn lat_spacing(&self) -> f64 {
        180.0 / (self.n_lat - 1) as f64
    }

    pub fn lon_spacing(&self) -> f64 {
        360.0 / self.n_lon as f64
    }
}

fn lat_of_row(i: usize, n_lat: usize) -> f64 {
    90.0 - 180.0 * i as f64 / (n_lat - 1) as f64
}

fn lon_of_col(j: usize, n_lon: usize) -> f64 {
    360.0 * j as f64 / n_lon as f64
}

/// Bilinear interpolation in (lat, lon) at every pixel center, nested order,
/// `(n_pix, channels)` row-major. Longitudes wrap; each pole row is replaced
/// by its mean so the pole is single-valued.
pub fn latlon_to_hpx(grid: &LatLonGrid, spec: GridSpec) -> Result<Vec<f64>> {
    let pixel_deg = spec.pixel_area().sqrt().to_degrees();
    if grid.lat_spacing() > pixel_deg || grid.lon_spacing() > pixel_deg {
        log::warn!(
            "source grid {}x{} is coarser than HEALPix n_side {} ({pixel_deg:.3} deg pixels)",
            grid.n_lat,
            grid.n_lon,
            spec.n_side()
        );
    }
    let nan = grid.values.iter().filter(|v| v.is_nan()).count();
    if nan > 0 {
        log::warn!("{nan} NaN values in the source grid propagate into the resampled field");
    }

    let c = grid.channels;
    let mut poles = [vec![0.0; c], vec![0.0; c]];
    for (k, row) in [0, grid.n_lat - 1].into_iter().enumerate() {
        for j in 0..grid.n_lon {
            for (ch, acc) in poles[k].iter_mut().enumerate() {
                *acc += grid.get(row, j, ch);
            }
        }
        poles[k].iter_mut().for_each(|v| *v /= grid.n_lon as f64);
    }
    let value = |i: usize, j: usize, ch: usize| {
        if i == 0 {
            poles[0][ch]
        } else if i == grid.n_lat - 1 {
            poles[1][ch]
        } else {
            grid.get(i, j, ch)
        }
    };

    let n_pix = spec.n_pix();
    let mut out = Vec::with_capacity(n_pix as usize * c);
    for p in 0..n_pix {
        let center = spec.pixel_center(PixelIndex::nested(p))?;
        let y = (90.0 - center.lat_deg()) / grid.lat_spacing();
        let i0 = (y.floor() as usize).min(grid.n_lat - 2);
        let t = y - i0 as f64;
        let x = center.phi.to_degrees().rem_euclid(360.0) / grid.lon_spacing();
        let j0f = x.floor();
        let s = x - j0f;
        let j0 = (j0f as usize) % grid.n_lon;
        let j1 = (j0 + 1) % grid.n_lon;
        for ch in 0..c {
            let top = (1.0 - s) * value(i0, j0, ch) + s * value(i0, j1, ch);
            let bottom = (1.0 - s) * value(i0 + 1, j0, ch) + s * value(i0 + 1, j1, ch);
            out.push((1.0 - t) * top + t * bottom);
        }
    }
    Ok(out)
}

/// Nearest-pixel sampling of a nested `(n_pix, channels)` field onto a
/// lat-lon grid.
pub fn hpx_to_latlon(field: &[f64], spec: GridSpec, channels: usize, n_lat: usize, n_lon: usize) -> Result<LatLonGrid> {
    if field.len() != spec.n_pix() as usize * channels {
        return Err(Error::dim("hpx field", format!("{} values for n_side {} x {channels}", field.len(), spec.n_side())));
    }
    LatLonGrid::from_fn(n_lat, n_lon, channels, |lat, lon, c| {
        let p = spec.ang2nest(SphereCoord::new((90.0 - lat).to_radians(), lon.to_radians()));
        field[p as usize * channels + c]
    })
}

/// Writes one channel as an 8-bit binary PGM, scaled linearly from its
/// minimum (black) to its maximum (white). Non-finite values are black.
pub fn write_pgm(path: impl AsRef<Path>, grid: &LatLonGrid, channel: usize) -> Result<()> {
    let vals: Vec<f64> = (0..grid.n_lat * grid.n_lon).map(|k| grid.values[k * grid.channels + channel]).collect();
    let finite = vals.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", grid.n_lon, grid.n_lat).into_bytes();
    bytes.extend(vals.iter().map(|v| if v.is_finite() { ((v - lo) / range * 255.0).round() as u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes one channel as `lat,lon,value` rows.
pub fn write_csv(path: impl AsRef<Path>, grid: &LatLonGrid, channel: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "lat,lon,value")?;
    for i in 0..grid.n_lat {
        for j in 0..grid.n_lon {
            writeln!(out, "{},{},{}", grid.lat(i), grid.lon(j), grid.get(i, j, channel))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_coordinates() {
        let g = LatLonGrid::from_fn(5, 8, 1, |_, _, _| 0.0).unwrap();
        assert_eq!(g.lat(0), 90.0);
        assert_eq!(g.lat(4), -90.0);
        assert_eq!(g.lon(2), 90.0);
        assert!(LatLonGrid::new(1, 8, 1, vec![0.0; 8]).is_err());
    }

    #[test]
    fn pole_rows_collapse_to_their_mean() {
        let g = LatLonGrid::from_fn(3, 4, 1, |lat, lon, _| if lat.abs() == 90.0 { lon } else { 0.0 }).unwrap();
        let spec = GridSpec::from_nside(1).unwrap();
        let out = latlon_to_hpx(&g, spec).unwrap();
        // n_side = 1 cap centers lie between the pole row and the equator row.
        let (m, cap_t) = (135.0, (90.0 - (2.0f64 / 3.0).asin().to_degrees()) / 90.0);
        for p in 0..4 {
            assert!((out[p] - (1.0 - cap_t) * m).abs() < 1e-9);
        }
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let g = LatLonGrid::from_fn(3, 6, 1, |lat, _, _| lat).unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &g, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(bytes[11], 255);
        assert_eq!(*bytes.last().unwrap(), 0);
    }
}
