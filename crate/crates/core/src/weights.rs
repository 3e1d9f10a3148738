//! Binary weights file: magic "STDW", version, tensor count, then per
//! tensor a length-prefixed UTF-8 name, rank, dims, and 32-bit IEEE-754
//! little-endian values in row-major order. Merged-form tensors are
//! recognizable by their `merged.` name prefix.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"STDW";
pub const VERSION: u32 = 1;

pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        file.write_all(&(name.len() as u32).to_le_bytes())?;
        file.write_all(name)?;
        file.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            file.write_all(&(d as u32).to_le_bytes())?;
        }
        let expected: usize = t.dims.iter().product();
        if expected != t.values.len() {
            return Err(Error::contract(format!(
                "tensor '{}' dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.values.len()
            )));
        }
        for v in &t.values {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {pos}, file has {}",
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let read_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
        let s = take(pos, 4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    let version = read_u32(&mut pos, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = read_u32(&mut pos, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut pos, "name length")? as usize;
        let name_bytes = take(&mut pos, name_len, "name")?.to_vec();
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(format!("tensor {i} name is not UTF-8")))?;
        let rank = read_u32(&mut pos, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos, "dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, n * 4, &format!("values of '{name}'"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, dims, values });
    }
    if pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

/// Write every parameter and buffer of the model (32-bit storage).
pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let tensors: Vec<NamedTensor> = model
        .store
        .iter()
        .map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            dims: p.value.shape().to_vec(),
            values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect();
    save_tensors(path, &tensors)
}

/// Rebuild a model from a file; the head form (training vs merged) is
/// detected from tensor names. Every stored tensor must match a model slot
/// and vice versa.
pub fn load_model<T: Real>(cfg: &Config, path: &Path) -> Result<Model<T>> {
    let tensors = load_tensors(path)?;
    let merged = tensors.iter().any(|t| t.name.starts_with("merged."));
    let mut model = if merged {
        Model::new_merged_uninit(cfg)?
    } else {
        Model::new(cfg, 0)?
    };
    let mut used = vec![false; tensors.len()];
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let idx = tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("weights file lacks tensor '{name}'")))?;
        used[idx] = true;
        let t = &tensors[idx];
        if t.dims != model.store.get(id).value.shape() {
            return Err(Error::DimensionMismatch {
                op: "load_model",
                lhs: model.store.get(id).value.shape().to_vec(),
                rhs: t.dims.clone(),
            });
        }
        let values: Vec<T> = t.values.iter().map(|&v| T::from_f64(v as f64)).collect();
        model
            .store
            .set_value(id, Tensor::new(t.dims.clone(), values)?)?;
    }
    if let Some(unused) = used.iter().position(|&u| !u) {
        return Err(Error::format(format!(
            "weights file tensor '{}' does not belong to this configuration",
            tensors[unused].name
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("stdtrack_weights_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let path = tmp("rt.stdw");
        let tensors = vec![
            NamedTensor {
                name: "a.weight".into(),
                dims: vec![2, 3],
                values: vec![1.0, -2.5, 3.25, 0.1, f32::MIN_POSITIVE, 1e30],
            },
            NamedTensor {
                name: "b".into(),
                dims: vec![1],
                values: vec![-0.0],
            },
        ];
        save_tensors(&path, &tensors).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in tensors.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            assert_eq!(
                a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let path = tmp("magic.stdw");
        save_tensors(&path, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_tensors(&path), Err(Error::BadMagic(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let path = tmp("trunc.stdw");
        save_tensors(
            &path,
            &[NamedTensor {
                name: "w".into(),
                dims: vec![4],
                values: vec![1.0; 4],
            }],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(load_tensors(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn full_model_round_trip_is_bit_exact() {
        let mut cfg = Config::default();
        cfg.embed_dim = 16;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.search_size = 32;
        cfg.template_size = 16;
        cfg.head_blocks = 2;
        let model: Model<f32> = Model::new(&cfg, 42).unwrap();
        let path = tmp("model_rt.stdw");
        save_model(&model, &path).unwrap();
        let back: Model<f32> = load_model(&cfg, &path).unwrap();
        assert_eq!(model.store.len(), back.store.len());
        for (id, p) in model.store.iter() {
            let q = back.store.get(back.store.find(&p.name).unwrap());
            let a: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "tensor {} changed across save/load", p.name);
            let _ = id;
        }
        // a shape-incompatible config is rejected with a dimension error
        let mut other = cfg.clone();
        other.embed_dim = 32;
        assert!(load_model::<f32>(&other, &path).is_err());
    }

    #[test]
    fn count_header_mismatch_is_a_truncation_error() {
        let path = tmp("count.stdw");
        save_tensors(
            &path,
            &[NamedTensor {
                name: "w".into(),
                dims: vec![2],
                values: vec![1.0, 2.0],
            }],
        )
        .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // claim two tensors while only one follows
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_tensors(&path), Err(Error::Truncated(_))));
    }
}
