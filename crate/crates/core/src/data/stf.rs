//! Sphere tensor files: `PEARSTF1`, a little-endian `u64` header length, a
//! JSON header, then the `f32` little-endian payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PEARSTF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    /// Nested pixel order.
    Healpix { n_side: u64 },
    /// Rows from +90° to -90° inclusive, columns from 0° eastwards.
    LatLon { n_lat: usize, n_lon: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub units: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTag {
    /// Days since the start of the sequence.
    pub step: u64,
    pub day_of_year: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StfHeader {
    pub grid: GridKind,
    pub shape: Vec<usize>,
    pub variables: Vec<Variable>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels_hpa: Vec<u32>,
    /// One entry per variable when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub normalization: Vec<NormStat>,
    /// One entry per leading index when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<TimeTag>,
}

impl StfHeader {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereTensorFile {
    pub header: StfHeader,
    pub data: Vec<f32>,
}

impl SphereTensorFile {
    pub fn new(header: StfHeader, data: Vec<f32>) -> Result<Self> {
        if header.element_count() != data.len() {
            return Err(Error::dim(
                "sphere tensor file",
                format!("header shape {:?} vs {} values", header.shape, data.len()),
            ));
        }
        Ok(Self { header, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("missing sphere tensor magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a sphere tensor file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Format("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
        let header: StfHeader = serde_json::from_slice(&header)?;
        let n = header.element_count();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!("payload has {} bytes, header declares {}", bytes.len(), n * 4)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { header, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SphereTensorFile {
        let header = StfHeader {
            grid: GridKind::Healpix { n_side: 1 },
            shape: vec![2, 12, 1],
            variables: vec![Variable { name: "t2m".into(), units: "K".into() }],
            levels_hpa: vec![],
            normalization: vec![NormStat { mean: 288.0, std: 15.0 }],
            times: vec![TimeTag { step: 0, day_of_year: 1 }, TimeTag { step: 1, day_of_year: 2 }],
        };
        let data = (0..24).map(|i| i as f32 * 0.1 - 1e-7).chain([]).collect();
        SphereTensorFile::new(header, data).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let f = sample();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        let g = SphereTensorFile::read_from(&bytes[..]).unwrap();
        assert_eq!(g.header, f.header);
        assert!(f.data.iter().zip(&g.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut again = Vec::new();
        g.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_bad_payload_length() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(SphereTensorFile::read_from(&bytes[..]), Err(Error::Format(_))));
        assert!(matches!(SphereTensorFile::read_from(&b"PEARCKPT"[..]), Err(Error::Format(_))));
        assert!(SphereTensorFile::new(sample().header, vec![0.0; 3]).is_err());
    }
}
