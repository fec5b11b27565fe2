//! Field persistence.
//!
//! Binary layout (all integers `u32` little endian, all reals `f64` little
//! endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `RLFD`                              |
//! | 4            | format version (1)                        |
//! | 4            | kind tag (1 scalar, 2 vector, 3 sym, 4 christoffel, 5 riemann) |
//! | 4            | dimension `n`                             |
//! | 4 * n        | points per axis `N_a`                     |
//! | 8 * n        | side lengths `L_a`                        |
//! | 4            | component count `c`                       |
//! | 8 * c * prod N | values, row-major points, components contiguous per point |
//!
//! CSV output has one row per point: `x0,..,x{n-1},c0,..,c{c-1}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::field::{Field, FieldKind};
use crate::grid::PeriodicGrid;

const MAGIC: &[u8; 4] = b"RLFD";
const VERSION: u32 = 1;

pub fn encode<K: FieldKind>(field: &Field<K>) -> Vec<u8> {
    let grid = field.grid();
    let mut out = Vec::with_capacity(32 + field.data().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&K::TAG.to_le_bytes());
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    for &n in grid.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &l in grid.side() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&(field.components() as u32).to_le_bytes());
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LabError::arg("truncated field file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<K: FieldKind>(bytes: &[u8]) -> Result<Field<K>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LabError::arg("not a field file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::arg(format!("unsupported field format version {version}")));
    }
    let tag = r.u32()?;
    if tag != K::TAG {
        return Err(LabError::arg(format!(
            "field file holds kind tag {tag}, expected {} ({})",
            K::TAG,
            K::NAME
        )));
    }
    let dim = r.u32()? as usize;
    if dim == 0 || dim > crate::grid::MAX_DIM {
        return Err(LabError::arg(format!("bad dimension {dim} in field file")));
    }
    let shape = (0..dim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let side = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let grid = PeriodicGrid::new(shape, side)?;
    let nc = r.u32()? as usize;
    if nc != K::components(dim) {
        return Err(LabError::arg("component count does not match kind"));
    }
    let n = grid.len() * nc;
    let raw = r.take(n * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Field::from_data(&grid, data)
}

pub fn write_binary<K: FieldKind>(field: &Field<K>, path: &Path) -> Result<()> {
    fs::write(path, encode(field)).map_err(|e| LabError::io(path, e))
}

pub fn read_binary<K: FieldKind>(path: &Path) -> Result<Field<K>> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes)
}

pub fn write_csv<K: FieldKind>(field: &Field<K>, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let grid = field.grid();
    let io = |e| LabError::io(path, e);
    let mut header: Vec<String> = (0..grid.dim()).map(|a| format!("x{a}")).collect();
    header.extend((0..field.components()).map(|c| format!("c{c}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for p in 0..grid.len() {
        let mut row: Vec<String> = grid.position(p).iter().map(|x| format!("{x}")).collect();
        row.extend(field.at(p).iter().map(|v| format!("{v:e}")));
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ScalarField, SymTensorField};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_roundtrip_is_exact(vals in proptest::collection::vec(-1e6f64..1e6, 64 * 3)) {
            let g = PeriodicGrid::new(vec![8, 8], vec![1.5, 2.0]).unwrap();
            let f = SymTensorField::from_data(&g, vals).unwrap();
            let back: SymTensorField = decode(&encode(&f)).unwrap();
            prop_assert_eq!(back.grid(), f.grid());
            prop_assert_eq!(back.data(), f.data());
        }
    }

    #[test]
    fn decode_rejects_wrong_kind_and_truncation() {
        let g = PeriodicGrid::cubic(2, 8, 1.0).unwrap();
        let f = ScalarField::constant(&g, 2.0);
        let bytes = encode(&f);
        assert!(decode::<crate::field::Vector>(&bytes).is_err());
        assert!(decode::<crate::field::Scalar>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<crate::field::Scalar>(b"nope").is_err());
    }

    #[test]
    fn header_layout_matches_documentation() {
        let g = PeriodicGrid::new(vec![8, 9], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&ScalarField::constant(&g, 1.0));
        assert_eq!(&bytes[0..4], b"RLFD");
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 9);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 44 + 72 * 8);
    }
}
