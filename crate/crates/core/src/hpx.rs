//! HEALPix geometry and index arithmetic.
//!
//! Pixels are addressed either in the *nested* scheme, where a pixel index is
//! `face * n_side² + interleave(x, y)` and blocks of `4^m` consecutive indices
//! form one pixel `m` levels coarser, or in the *ring* scheme, where pixels are
//! enumerated along iso-latitude rings from the north pole to the south pole.
//!
//! Base faces are numbered 0–3 around the north pole, 4–7 on the equator and
//! 8–11 around the south pole. Inside a face, `x` grows towards the north-east
//! and `y` towards the north-west; `(0, 0)` is the southern corner.
//!
//! All arithmetic is carried out in `u64`/`i64`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// Ring offset of each base face, in units of `n_side`.
const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
/// Azimuthal offset of each base face, in units of `n_side / 2` (in ring pixels).
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

/// Deepest level whose pixel count still fits comfortably in a `u64`.
pub const MAX_LEVEL: u32 = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Nested,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelIndex {
    pub scheme: Scheme,
    pub value: u64,
}

impl PixelIndex {
    pub fn nested(value: u64) -> Self {
        Self { scheme: Scheme::Nested, value }
    }

    pub fn ring(value: u64) -> Self {
        Self { scheme: Scheme::Ring, value }
    }
}

/// A point on the unit sphere. `theta` is the colatitude in `[0, π]`, `phi`
/// the azimuth in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereCoord {
    pub theta: f64,
    pub phi: f64,
}

impl SphereCoord {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Latitude in degrees, +90 at the north pole.
    pub fn lat_deg(&self) -> f64 {
        90.0 - self.theta.to_degrees()
    }

    pub fn lon_deg(&self) -> f64 {
        self.phi.to_degrees()
    }

    /// Great-circle distance in radians.
    pub fn angular_distance(&self, other: &SphereCoord) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        sin.atan2(cos)
    }
}

/// A HEALPix resolution, `n_side = 2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    k: u32,
}

impl GridSpec {
    pub fn new(k: u32) -> Result<Self> {
        if k > MAX_LEVEL {
            return Err(Error::InvalidLevel(format!("level {k} exceeds {MAX_LEVEL}")));
        }
        Ok(Self { k })
    }

    pub fn from_nside(n_side: u64) -> Result<Self> {
        if n_side == 0 || !n_side.is_power_of_two() {
            return Err(Error::InvalidLevel(format!(
                "n_side must be a power of two, got {n_side}"
            )));
        }
        Self::new(n_side.trailing_zeros())
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn n_side(&self) -> u64 {
        1 << self.k
    }

    /// Pixels per base face, `n_side²`.
    pub fn face_pixels(&self) -> u64 {
        1 << (2 * self.k)
    }

    pub fn n_pix(&self) -> u64 {
        12 * self.face_pixels()
    }

    /// Solid angle of every pixel, in steradians.
    pub fn pixel_area(&self) -> f64 {
        4.0 * PI / self.n_pix() as f64
    }

    /// Number of iso-latitude rings, `4 n_side - 1`.
    pub fn n_rings(&self) -> u64 {
        4 * self.n_side() - 1
    }

    /// Pixels in the north polar cap, `2 n_side (n_side - 1)`.
    fn n_cap(&self) -> u64 {
        let n = self.n_side();
        2 * n * (n - 1)
    }

    pub fn child(&self) -> Result<GridSpec> {
        GridSpec::new(self.k + 1)
    }

    pub fn parent_spec(&self) -> Result<GridSpec> {
        if self.k == 0 {
            return Err(Error::InvalidLevel("no coarser level below n_side = 1".into()));
        }
        GridSpec::new(self.k - 1)
    }

    fn check(&self, p: u64) -> Result<()> {
        if p >= self.n_pix() {
            Err(Error::Range { index: p, n_pix: self.n_pix() })
        } else {
            Ok(())
        }
    }

    /// Number of pixels on ring `i` (1-based, north to south).
    pub fn ring_size(&self, i: u64) -> u64 {
        let n = self.n_side();
        if i < n {
            4 * i
        } else if i <= 3 * n {
            4 * n
        } else {
            4 * (4 * n - i)
        }
    }

    /// Sizes of all rings from north to south.
    pub fn ring_sizes(&self) -> Vec<u64> {
        (1..=self.n_rings()).map(|i| self.ring_size(i)).collect()
    }

    /// Splits a nested index into `(face, x, y)`.
    pub fn nest_to_xyf(&self, p: u64) -> Result<(u64, u64, u64)> {
        self.check(p)?;
        let face = p >> (2 * self.k);
        let (x, y) = deinterleave(p & (self.face_pixels() - 1));
        Ok((face, x, y))
    }

    pub fn xyf_to_nest(&self, face: u64, x: u64, y: u64) -> Result<u64> {
        let n = self.n_side();
        if face >= 12 || x >= n || y >= n {
            return Err(Error::Range { index: face * n * n + x.max(y), n_pix: self.n_pix() });
        }
        Ok((face << (2 * self.k)) + interleave(x, y))
    }

    pub fn nest2ring(&self, p: u64) -> Result<u64> {
        let (face, x, y) = self.nest_to_xyf(p)?;
        let n = self.n_side() as i64;
        let (x, y, face) = (x as i64, y as i64, face as usize);
        let jr = JRLL[face] * n - x - y - 1;

        let (nr, n_before, kshift) = if jr < n {
            (jr, 2 * jr * (jr - 1), 0)
        } else if jr > 3 * n {
            let nr = 4 * n - jr;
            (nr, self.n_pix() as i64 - 2 * (nr + 1) * nr, 0)
        } else {
            (n, self.n_cap() as i64 + (jr - n) * 4 * n, (jr - n) & 1)
        };

        let mut jp = (JPLL[face] * nr + x - y + 1 + kshift) / 2;
        if jp > 4 * n {
            jp -= 4 * n;
        }
        if jp < 1 {
            jp += 4 * n;
        }
        Ok((n_before + jp - 1) as u64)
    }

    /// Ring number (1-based) and position within the ring (1-based) of a ring index.
    pub fn ring_position(&self, p: u64) -> Result<(u64, u64)> {
        self.check(p)?;
        let n = self.n_side();
        let n_cap = self.n_cap();
        let n_pix = self.n_pix();
        Ok(if p < n_cap {
            let i = (1 + isqrt(1 + 2 * p)) >> 1;
            (i, p + 1 - 2 * i * (i - 1))
        } else if p < n_pix - n_cap {
            let ip = p - n_cap;
            let tmp = ip / (4 * n);
            (tmp + n, ip - tmp * 4 * n + 1)
        } else {
            let ip = n_pix - p;
            let i = (1 + isqrt(2 * ip - 1)) >> 1;
            (4 * n - i, 4 * i + 1 - (ip - 2 * i * (i - 1)))
        })
    }

    pub fn ring2nest(&self, p: u64) -> Result<u64> {
        let (ring, iphi) = self.ring_position(p)?;
        let n = self.n_side() as i64;
        let (ring, iphi) = (ring as i64, iphi as i64);

        let (face, nr, kshift) = if ring < n {
            (((iphi - 1) / ring) as usize, ring, 0)
        } else if ring > 3 * n {
            let nr = 4 * n - ring;
            (8 + ((iphi - 1) / nr) as usize, nr, 0)
        } else {
            let ire = ring - n + 1;
            let irm = 2 * n + 2 - ire;
            let ifm = (iphi - ire / 2 + n - 1) / n;
            let ifp = (iphi - irm / 2 + n - 1) / n;
            let face = if ifp == ifm {
                ifp | 4
            } else if ifp < ifm {
                ifp
            } else {
                ifm + 8
            };
            (face as usize, n, (ring + n) & 1)
        };

        let irt = ring - JRLL[face] * n + 1;
        let mut ipt = 2 * iphi - JPLL[face] * nr - kshift - 1;
        if ipt >= 2 * n {
            ipt -= 8 * n;
        }
        let x = (ipt - irt) >> 1;
        let y = (-ipt - irt) >> 1;
        self.xyf_to_nest(face as u64, x as u64, y as u64)
    }

    pub fn to_ring(&self, p: PixelIndex) -> Result<PixelIndex> {
        match p.scheme {
            Scheme::Ring => {
                self.check(p.value)?;
                Ok(p)
            }
            Scheme::Nested => self.nest2ring(p.value).map(PixelIndex::ring),
        }
    }

    pub fn to_nested(&self, p: PixelIndex) -> Result<PixelIndex> {
        match p.scheme {
            Scheme::Nested => {
                self.check(p.value)?;
                Ok(p)
            }
            Scheme::Ring => self.ring2nest(p.value).map(PixelIndex::nested),
        }
    }

    /// `z = cos θ` and `φ` of a ring-scheme pixel center.
    fn ring_center_z_phi(&self, p: u64) -> Result<(f64, f64)> {
        let (ring, iphi) = self.ring_position(p)?;
        let n = self.n_side();
        let nf = n as f64;
        let (z, phi) = if ring < n {
            let r = ring as f64;
            (1.0 - r * r / (3.0 * nf * nf), (iphi as f64 - 0.5) * FRAC_PI_2 / r)
        } else if ring <= 3 * n {
            let z = 4.0 / 3.0 - 2.0 * ring as f64 / (3.0 * nf);
            let offset = if (ring + n) & 1 == 1 { 1.0 } else { 0.5 };
            (z, (iphi as f64 - offset) * FRAC_PI_2 / nf)
        } else {
            let r = (4 * n - ring) as f64;
            (-1.0 + r * r / (3.0 * nf * nf), (iphi as f64 - 0.5) * FRAC_PI_2 / r)
        };
        Ok((z, phi))
    }

    pub fn pixel_center(&self, p: PixelIndex) -> Result<SphereCoord> {
        let ring = self.to_ring(p)?.value;
        let (z, phi) = self.ring_center_z_phi(ring)?;
        Ok(SphereCoord::new(z.clamp(-1.0, 1.0).acos(), phi))
    }

    /// Nested index of the pixel containing the direction `coord`.
    pub fn ang2nest(&self, coord: SphereCoord) -> u64 {
        let n = self.n_side() as i64;
        let z = coord.theta.cos();
        let za = z.abs();
        let tt = (coord.phi / FRAC_PI_2).rem_euclid(4.0);
        let (face, x, y) = if za <= 2.0 / 3.0 {
            let t1 = n as f64 * (0.5 + tt);
            let t2 = n as f64 * (z * 0.75);
            let jp = (t1 - t2) as i64;
            let jm = (t1 + t2) as i64;
            let ifp = jp >> self.k;
            let ifm = jm >> self.k;
            let face = if ifp == ifm {
                ifp | 4
            } else if ifp < ifm {
                ifp
            } else {
                ifm + 8
            };
            (face, jm & (n - 1), n - (jp & (n - 1)) - 1)
        } else {
            let ntt = (tt as i64).min(3);
            let tp = tt - ntt as f64;
            let tmp = n as f64 * (3.0 * (1.0 - za)).sqrt();
            let jp = ((tp * tmp) as i64).min(n - 1);
            let jm = (((1.0 - tp) * tmp) as i64).min(n - 1);
            if z >= 0.0 {
                (ntt, n - jm - 1, n - jp - 1)
            } else {
                (ntt + 8, jp, jm)
            }
        };
        (face as u64) * self.face_pixels() + interleave(x as u64, y as u64)
    }

    /// The four nested children of `p` at the next finer level.
    pub fn children(&self, p: u64) -> Result<[u64; 4]> {
        self.check(p)?;
        self.child()?;
        Ok([4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3])
    }

    /// Nested index of the parent of `p` at the next coarser level.
    pub fn parent(&self, p: u64) -> Result<u64> {
        self.check(p)?;
        self.parent_spec()?;
        Ok(p >> 2)
    }
}

/// Precomputed nested↔ring permutation for one resolution.
#[derive(Debug, Clone)]
pub struct RingTable {
    spec: GridSpec,
    nest_to_ring: Vec<u64>,
    ring_to_nest: Vec<u64>,
}

impl RingTable {
    pub fn new(spec: GridSpec) -> Self {
        let n_pix = spec.n_pix() as usize;
        let mut nest_to_ring = vec![0; n_pix];
        let mut ring_to_nest = vec![0; n_pix];
        for p in 0..n_pix as u64 {
            let r = spec.nest2ring(p).expect("index in range");
            nest_to_ring[p as usize] = r;
            ring_to_nest[r as usize] = p;
        }
        Self { spec, nest_to_ring, ring_to_nest }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn nest_to_ring(&self) -> &[u64] {
        &self.nest_to_ring
    }

    pub fn ring_to_nest(&self) -> &[u64] {
        &self.ring_to_nest
    }
}

fn isqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Spreads the bits of `x` over the even positions and `y` over the odd ones.
pub fn interleave(x: u64, y: u64) -> u64 {
    spread(x) | (spread(y) << 1)
}

pub fn deinterleave(v: u64) -> (u64, u64) {
    (compact(v), compact(v >> 1))
}

fn spread(v: u64) -> u64 {
    let mut v = v & 0xFFFF_FFFF;
    v = (v | (v << 16)) & 0x0000_FFFF_0000_FFFF;
    v = (v | (v << 8)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v << 2)) & 0x3333_3333_3333_3333;
    (v | (v << 1)) & 0x5555_5555_5555_5555
}

fn compact(v: u64) -> u64 {
    let mut v = v & 0x5555_5555_5555_5555;
    v = (v | (v >> 1)) & 0x3333_3333_3333_3333;
    v = (v | (v >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v >> 4)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v >> 8)) & 0x0000_FFFF_0000_FFFF;
    (v | (v >> 16)) & 0x0000_0000_FFFF_FFFF
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_roundtrip() {
        for x in 0..64 {
            for y in 0..64 {
                assert_eq!(deinterleave(interleave(x, y)), (x, y));
            }
        }
        assert_eq!(interleave(1, 0), 1);
        assert_eq!(interleave(0, 1), 2);
        assert_eq!(interleave(3, 3), 15);
    }

    #[test]
    fn rejects_bad_nside() {
        assert!(GridSpec::from_nside(3).is_err());
        assert!(GridSpec::from_nside(0).is_err());
        assert!(GridSpec::new(MAX_LEVEL + 1).is_err());
    }

    #[test]
    fn out_of_range_indices() {
        let spec = GridSpec::from_nside(2).unwrap();
        assert!(matches!(spec.nest2ring(48), Err(Error::Range { .. })));
        assert!(matches!(spec.ring2nest(48), Err(Error::Range { .. })));
        assert!(spec.pixel_center(PixelIndex::nested(48)).is_err());
        assert!(spec.parent(48).is_err());
    }

    #[test]
    fn parent_and_children() {
        let s1 = GridSpec::from_nside(1).unwrap();
        let s2 = GridSpec::from_nside(2).unwrap();
        assert_eq!(s2.parent(5).unwrap(), 1);
        assert_eq!(s1.children(2).unwrap(), [8, 9, 10, 11]);
        assert!(matches!(s1.parent(3), Err(Error::InvalidLevel(_))));
    }

    #[test]
    fn cap_colatitude_at_base_resolution() {
        let spec = GridSpec::from_nside(1).unwrap();
        for face in 0..4 {
            let c = spec.pixel_center(PixelIndex::nested(face)).unwrap();
            assert!((c.theta - (2.0f64 / 3.0).acos()).abs() < 1e-15);
        }
        let c = spec.pixel_center(PixelIndex::nested(0)).unwrap();
        assert!((c.theta - 0.84107).abs() < 1e-5);
    }

    #[test]
    fn ang2nest_inverts_pixel_center() {
        for n in [1, 2, 4, 8, 16] {
            let spec = GridSpec::from_nside(n).unwrap();
            for p in 0..spec.n_pix() {
                let c = spec.pixel_center(PixelIndex::nested(p)).unwrap();
                assert_eq!(spec.ang2nest(c), p, "n_side {n} pixel {p}");
            }
        }
    }

    #[test]
    fn ring_table_matches_direct_conversion() {
        let spec = GridSpec::from_nside(4).unwrap();
        let table = RingTable::new(spec);
        for p in 0..spec.n_pix() {
            assert_eq!(table.nest_to_ring()[p as usize], spec.nest2ring(p).unwrap());
            assert_eq!(table.ring_to_nest()[table.nest_to_ring()[p as usize] as usize], p);
        }
    }
}
