//! Binary little-endian model container ("M3DM", version 1).

use std::path::Path;

use super::{Basis, Landmark, MorphableModel};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"M3DM";
pub const CONTAINER_VERSION: u32 = 1;

pub fn write_model(model: &MorphableModel) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::new();
    out.extend_from_slice(&CONTAINER_MAGIC);
    for v in [
        CONTAINER_VERSION,
        dims.vertices as u32,
        dims.id as u32,
        dims.exp as u32,
        dims.tex as u32,
        model.triangles.len() as u32,
        model.landmarks.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let put_f64s = |out: &mut Vec<u8>, xs: &[f64]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    put_f64s(&mut out, &model.mean_shape);
    put_f64s(&mut out, &model.mean_texture);
    put_f64s(&mut out, model.basis_id.as_slice());
    put_f64s(&mut out, model.basis_exp.as_slice());
    put_f64s(&mut out, model.basis_tex.as_slice());
    let put_u32 = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u32).to_le_bytes());
    for tri in &model.triangles {
        for &i in tri {
            put_u32(&mut out, i);
        }
    }
    for lm in &model.landmarks {
        put_u32(&mut out, lm.vertex);
    }
    for lm in &model.landmarks {
        out.extend_from_slice(&lm.weight.to_le_bytes());
    }
    put_u32(&mut out, model.skin_region.len());
    for &i in &model.skin_region {
        put_u32(&mut out, i);
    }
    put_u32(&mut out, model.nose_tip);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if n > available {
            return Err(Error::TruncatedContainer {
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn index(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::InvariantViolation(format!("array length {n} overflows")))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a container and checks the model invariants.
pub fn read_model(bytes: &[u8]) -> Result<MorphableModel> {
    let mut r = Reader { bytes, offset: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let v = r.index()?;
    let (k_id, k_exp, k_tex) = (r.index()?, r.index()?, r.index()?);
    let (t, n) = (r.index()?, r.index()?);

    let mean_shape = r.f64s(3 * v)?;
    let mean_texture = r.f64s(3 * v)?;
    let basis_id = Basis::from_column_major(3 * v, k_id, r.f64s(3 * v * k_id)?)?;
    let basis_exp = Basis::from_column_major(3 * v, k_exp, r.f64s(3 * v * k_exp)?)?;
    let basis_tex = Basis::from_column_major(3 * v, k_tex, r.f64s(3 * v * k_tex)?)?;
    let mut triangles = Vec::with_capacity(t);
    for _ in 0..t {
        triangles.push([r.index()?, r.index()?, r.index()?]);
    }
    let mut vertices = Vec::with_capacity(n);
    for _ in 0..n {
        vertices.push(r.index()?);
    }
    let weights = r.f64s(n)?;
    let landmarks = vertices
        .into_iter()
        .zip(weights)
        .map(|(vertex, weight)| Landmark { vertex, weight })
        .collect();
    let skin_count = r.index()?;
    let mut skin_region = Vec::with_capacity(skin_count.min(bytes.len() / 4));
    for _ in 0..skin_count {
        skin_region.push(r.index()?);
    }
    let nose_tip = r.index()?;
    if r.offset != bytes.len() {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after container",
            bytes.len() - r.offset
        )));
    }
    let model = MorphableModel {
        mean_shape,
        mean_texture,
        basis_id,
        basis_exp,
        basis_tex,
        triangles,
        landmarks,
        skin_region,
        nose_tip,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &MorphableModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::write_atomic(path, &write_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MorphableModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synthesize_toy_model;

    #[test]
    fn save_load_is_bit_exact() {
        let m = synthesize_toy_model(100, 8, 6, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.m3dm");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.mean_shape), bits(&m.mean_shape));
        assert_eq!(bits(back.basis_tex.as_slice()), bits(m.basis_tex.as_slice()));
    }

    #[test]
    fn truncated_container() {
        let m = synthesize_toy_model(20, 2, 2, 2, 1).unwrap();
        let bytes = write_model(&m);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(read_model(&bytes[..cut]), Err(Error::TruncatedContainer { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let m = synthesize_toy_model(20, 2, 2, 2, 1).unwrap();
        let mut bytes = write_model(&m);
        bytes[4] = 2;
        assert!(matches!(read_model(&bytes), Err(Error::UnsupportedVersion(2))));
        bytes[0] = b'X';
        assert!(matches!(read_model(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn out_of_range_triangle_index_is_reported() {
        let mut m = synthesize_toy_model(20, 2, 2, 2, 1).unwrap();
        m.triangles[3][2] = 57;
        let bytes = write_model(&m);
        match read_model(&bytes) {
            Err(Error::IndexOutOfRange {
                what: "triangle",
                index: 57,
                limit: 20,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
