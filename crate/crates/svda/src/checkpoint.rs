//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SVDA"
//! version u32      currently 1
//! config  10 u32   image_h, image_w, channels, patch, embed, layers,
//!                  heads, mlp, classes, variant (0 = baseline, 1 = svda)
//! count   u32      number of named arrays
//! arrays  repeated name_len u32, name bytes (UTF-8),
//!                  ndim u32, extents u32 each,
//!                  data f64 little-endian
//! ```
//!
//! Arrays appear in the model's canonical parameter order. Floats are
//! written bit-for-bit, so save/load round-trips are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{VitConfig, VitModel};

pub const MAGIC: &[u8; 4] = b"SVDA";
pub const VERSION: u32 = 1;

pub fn save(model: &VitModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let c = &model.config;
    let variant_code = match c.variant {
        AttentionVariant::Baseline => 0u32,
        AttentionVariant::Svda => 1u32,
    };
    for field in [
        c.image_height,
        c.image_width,
        c.channels,
        c.patch_size,
        c.embed_dim,
        c.layers,
        c.heads,
        c.mlp_dim,
        c.classes,
    ] {
        w.write_all(&(field as u32).to_le_bytes())?;
    }
    w.write_all(&variant_code.to_le_bytes())?;

    let params = model.visit_params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, reason: &str) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            reason: reason.to_string(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return self.fail(&format!("truncated while reading {what}"));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<VitModel> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
        path,
    };

    if cur.take(4, "magic")? != MAGIC {
        cur.offset = 0;
        return cur.fail("bad magic bytes (expected \"SVDA\")");
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return cur.fail(&format!("unsupported version {version}"));
    }
    let mut fields = [0usize; 9];
    for (i, name) in [
        "image_height",
        "image_width",
        "channels",
        "patch_size",
        "embed_dim",
        "layers",
        "heads",
        "mlp_dim",
        "classes",
    ]
    .iter()
    .enumerate()
    {
        fields[i] = cur.u32(name)? as usize;
    }
    let variant = match cur.u32("variant")? {
        0 => AttentionVariant::Baseline,
        1 => AttentionVariant::Svda,
        other => return cur.fail(&format!("unknown variant code {other}")),
    };
    let config = VitConfig {
        image_height: fields[0],
        image_width: fields[1],
        channels: fields[2],
        patch_size: fields[3],
        embed_dim: fields[4],
        layers: fields[5],
        heads: fields[6],
        mlp_dim: fields[7],
        classes: fields[8],
        variant,
    };
    config
        .validate()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            reason: format!("invalid stored config: {e}"),
        })?;

    let count = cur.u32("array count")? as usize;
    let mut model = VitModel::init(config, 0)?;
    let expected = model
        .visit_params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect::<Vec<_>>();
    if count != expected.len() {
        return cur.fail(&format!(
            "array count {count} does not match config ({} expected)",
            expected.len()
        ));
    }

    for expect_name in expected {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "array name")?;
        let name = match std::str::from_utf8(name_bytes) {
            Ok(s) => s.to_string(),
            Err(_) => return cur.fail("array name is not UTF-8"),
        };
        if name != expect_name {
            return cur.fail(&format!(
                "array {name:?} out of order (expected {expect_name:?})"
            ));
        }
        let ndim = cur.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8, "array data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        let tensor = Tensor::from_vec(shape.clone(), data).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: cur.offset as u64,
            reason: format!("array {name} has inconsistent shape {shape:?}"),
        })?;
        let mut params = model.visit_params_mut();
        let slot = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .expect("name already validated");
        if slot.1.shape() != tensor.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: cur.offset as u64,
                reason: format!(
                    "array {name} shape {:?} does not match config shape {:?}",
                    tensor.shape(),
                    slot.1.shape()
                ),
            });
        }
        *slot.1 = tensor;
    }
    if cur.offset != bytes.len() {
        return cur.fail("trailing bytes after last array");
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("svda-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for variant in [AttentionVariant::Svda, AttentionVariant::Baseline] {
            let model = VitModel::init(VitConfig::miniature(variant), 42).unwrap();
            let path = tmpfile(&format!("roundtrip-{}.svda", variant.as_str()));
            save(&model, &path).unwrap();
            let loaded = load(&path).unwrap();
            assert_eq!(model, loaded);

            // re-saving the loaded model reproduces the file byte for byte
            let path2 = tmpfile(&format!("roundtrip2-{}.svda", variant.as_str()));
            save(&loaded, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }

    #[test]
    fn bad_magic_is_format_error_with_offset() {
        let path = tmpfile("bad-magic.svda");
        std::fs::write(&path, b"NOPE....").unwrap();
        match load(&path) {
            Err(Error::Format { offset, reason, .. }) => {
                assert_eq!(offset, 0);
                assert!(reason.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let model = VitModel::init(VitConfig::miniature(AttentionVariant::Svda), 1).unwrap();
        let path = tmpfile("truncated.svda");
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn baseline_checkpoint_has_no_sigma_and_converts() {
        let model = VitModel::init(VitConfig::miniature(AttentionVariant::Baseline), 3).unwrap();
        let path = tmpfile("baseline.svda");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        let svda = loaded.to_variant(AttentionVariant::Svda);
        for layer in &svda.layers {
            for head in &layer.heads {
                assert!(head.sigma.data().iter().all(|&v| v == 1.0));
            }
        }
    }
}
