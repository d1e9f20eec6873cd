//! Binary parameter checkpoints and model persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "MDCK"
//! 4..6    format version u16 = 1
//! 6       dtype tag u8 (1 = f32, 2 = f64)
//! 7..39   architecture digest, 32 bytes
//! 39..43  segment count u32
//! then per segment:
//!         name length u16, name bytes (UTF-8),
//!         rank u8, dims u32 * rank,
//!         values (dtype * product of dims)
//! last 4  CRC-32 of every preceding byte
//! ```
//!
//! Decoding verifies the checksum before looking at any field, so any
//! single corrupted byte is rejected rather than parsed.

use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::params::{ParamVector, Segment};
use crate::tensor::{Dtype, Scalar};
use crate::trainer::{Provenance, TrainedModel};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes parameters with the architecture digest they belong to.
pub fn encode_checkpoint<T: Scalar>(digest: &[u8; 32], params: &ParamVector<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for seg in params.segments() {
        let name = seg.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(seg.shape.len() as u8);
        for &d in &seg.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &seg.values {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data("checkpoint truncated inside a segment".into())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn checked_header(bytes: &[u8]) -> Result<(Dtype, [u8; 32], Cursor<'_>)> {
    // Smallest well-formed file: header plus empty segment list and CRC.
    if bytes.len() < 4 + 2 + 1 + 32 + 4 + 4 {
        return Err(Error::Data(format!("checkpoint too short: {} bytes", bytes.len())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Data(format!(
            "checkpoint checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint: bad magic".into()));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let dtype = Dtype::from_tag(cur.u8()?)?;
    let mut digest = [0u8; 32];
    digest.copy_from_slice(cur.take(32)?);
    Ok((dtype, digest, cur))
}

fn parse_segments<T: Scalar>(mut cur: Cursor<'_>) -> Result<ParamVector<T>> {
    let n_segments = cur.u32()? as usize;
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("segment name is not UTF-8".into()))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Data("segment shape overflows".into()))?;
            shape.push(d);
        }
        let width = T::DTYPE.size_bytes();
        let raw = cur.take(count * width)?;
        let values = raw.chunks_exact(width).map(T::read_le).collect();
        segments.push(Segment { name, shape, values });
    }
    if cur.pos != cur.bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes after the last segment",
            cur.bytes.len() - cur.pos
        )));
    }
    ParamVector::new(segments)
}

/// Decodes a checkpoint of the expected precision.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<([u8; 32], ParamVector<T>)> {
    let (dtype, digest, cur) = checked_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint holds {dtype:?} values, caller expected {:?}",
            T::DTYPE
        )));
    }
    Ok((digest, parse_segments::<T>(cur)?))
}

/// Parameters of whichever precision a checkpoint holds.
#[derive(Debug, Clone)]
pub enum AnyParams {
    F32(ParamVector<f32>),
    F64(ParamVector<f64>),
}

pub fn decode_checkpoint_any(bytes: &[u8]) -> Result<([u8; 32], AnyParams)> {
    let (dtype, digest, cur) = checked_header(bytes)?;
    let params = match dtype {
        Dtype::F32 => AnyParams::F32(parse_segments::<f32>(cur)?),
        Dtype::F64 => AnyParams::F64(parse_segments::<f64>(cur)?),
    };
    Ok((digest, params))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    digest: &[u8; 32],
    params: &ParamVector<T>,
) -> Result<()> {
    let bytes = encode_checkpoint(digest, params);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<([u8; 32], ParamVector<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON sidecar describing a saved model; weights live in the named
/// checkpoint file next to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub spec: NetworkSpec,
    pub depth_range: (f64, f64),
    pub provenance: Provenance,
    /// Checkpoint file name, relative to the manifest's directory.
    pub weights: String,
    /// Hex digest of the architecture, duplicated from the weights file.
    pub spec_digest: String,
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.mdck`; returns the
/// manifest path.
pub fn save_model<T: Scalar>(dir: &Path, name: &str, model: &TrainedModel<T>) -> Result<PathBuf> {
    if name.is_empty() || name.contains('/') || name.contains('\\') {
        return Err(Error::Config(format!("model name {name:?} must be a bare file stem")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = model.spec.digest();
    let weights_name = format!("{name}.mdck");
    save_checkpoint(&dir.join(&weights_name), &digest, &model.params)?;
    let manifest = ModelManifest {
        schema_version: 1,
        spec: model.spec.clone(),
        depth_range: model.depth_range,
        provenance: model.provenance.clone(),
        weights: weights_name,
        spec_digest: hex(&digest),
    };
    let json_path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("serializing model manifest: {e}")))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

fn read_manifest(json_path: &Path) -> Result<(ModelManifest, Vec<u8>)> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("model manifest {}: {e}", json_path.display())))?;
    if manifest.schema_version != 1 {
        return Err(Error::Data(format!(
            "unsupported model manifest schema {}",
            manifest.schema_version
        )));
    }
    manifest.spec.validate()?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let weights_path = dir.join(&manifest.weights);
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    Ok((manifest, bytes))
}

fn check_digest(manifest: &ModelManifest, stored: &[u8; 32]) -> Result<()> {
    let expect = manifest.spec.digest();
    if *stored != expect || manifest.spec_digest != hex(&expect) {
        return Err(Error::Data(
            "weights belong to a different architecture than the manifest describes".into(),
        ));
    }
    Ok(())
}

pub fn load_model<T: Scalar>(json_path: &Path) -> Result<TrainedModel<T>> {
    let (manifest, bytes) = read_manifest(json_path)?;
    let (stored, params) = decode_checkpoint::<T>(&bytes)?;
    check_digest(&manifest, &stored)?;
    // Reject weights whose layout does not fit the declared network.
    let net = crate::net::Network::new(manifest.spec.clone())?;
    net.param_template::<T>().check_same_layout(&params)?;
    Ok(TrainedModel {
        spec: manifest.spec,
        params,
        depth_range: manifest.depth_range,
        provenance: manifest.provenance,
    })
}

/// A model of whichever precision its checkpoint holds.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(TrainedModel<f32>),
    F64(TrainedModel<f64>),
}

pub fn load_model_any(json_path: &Path) -> Result<AnyModel> {
    let (manifest, bytes) = read_manifest(json_path)?;
    let (stored, params) = decode_checkpoint_any(&bytes)?;
    check_digest(&manifest, &stored)?;
    let net = crate::net::Network::new(manifest.spec.clone())?;
    Ok(match params {
        AnyParams::F32(p) => {
            net.param_template::<f32>().check_same_layout(&p)?;
            AnyModel::F32(TrainedModel {
                spec: manifest.spec,
                params: p,
                depth_range: manifest.depth_range,
                provenance: manifest.provenance,
            })
        }
        AnyParams::F64(p) => {
            net.param_template::<f64>().check_same_layout(&p)?;
            AnyModel::F64(TrainedModel {
                spec: manifest.spec,
                params: p,
                depth_range: manifest.depth_range,
                provenance: manifest.provenance,
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamVector<f64> {
        ParamVector::new(vec![
            Segment {
                name: "enc0.w".into(),
                shape: vec![2, 3],
                values: vec![0.0, -0.0, 1.5e-300, -3.25, f64::MIN_POSITIVE, 1e300],
            },
            Segment { name: "enc0.b".into(), shape: vec![2], values: vec![0.125, -7.0] },
        ])
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let params = sample_params();
        let digest = [7u8; 32];
        let bytes = encode_checkpoint(&digest, &params);
        let (d2, p2) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(d2, digest);
        // Re-encoding the decoded parameters must reproduce the file.
        assert_eq!(encode_checkpoint(&d2, &p2), bytes);
        assert_eq!(p2.segments()[0].values[0].to_bits(), 0.0f64.to_bits());
        assert_eq!(p2.segments()[0].values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let params = sample_params();
        let bytes = encode_checkpoint(&[3u8; 32], &params);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            let err = decode_checkpoint::<f64>(&bad).unwrap_err();
            assert!(
                matches!(err, Error::Data(_)),
                "byte {i}: corruption must surface as a data error"
            );
        }
    }

    #[test]
    fn truncation_and_extension_are_rejected() {
        let bytes = encode_checkpoint(&[0u8; 32], &sample_params());
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f64>(&bytes[..10]).is_err());
        assert!(decode_checkpoint::<f64>(&[]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint::<f64>(&longer).is_err());
    }

    #[test]
    fn dtype_mismatch_is_an_error_and_any_dispatches() {
        let params = sample_params();
        let bytes = encode_checkpoint(&[1u8; 32], &params);
        let err = decode_checkpoint::<f32>(&bytes).unwrap_err();
        assert!(format!("{err}").contains("F64"), "got: {err}");
        match decode_checkpoint_any(&bytes).unwrap().1 {
            AnyParams::F64(p) => assert_eq!(p.len(), params.len()),
            AnyParams::F32(_) => panic!("wrong precision"),
        }
        let f32_params = params.cast::<f32>();
        let bytes32 = encode_checkpoint(&[1u8; 32], &f32_params);
        assert!(matches!(decode_checkpoint_any(&bytes32).unwrap().1, AnyParams::F32(_)));
    }

    #[test]
    fn header_fields_sit_where_documented() {
        let bytes = encode_checkpoint(&[9u8; 32], &sample_params());
        assert_eq!(&bytes[0..4], b"MDCK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], Dtype::F64.tag());
        assert_eq!(&bytes[7..39], &[9u8; 32]);
        assert_eq!(u32::from_le_bytes([bytes[39], bytes[40], bytes[41], bytes[42]]), 2);
    }

    #[test]
    fn model_roundtrip_preserves_everything() {
        let spec = NetworkSpec::desk();
        let (_, params) = crate::net::build_network::<f32>(&spec, 11).unwrap();
        let model = TrainedModel {
            spec: spec.clone(),
            params,
            depth_range: (0.3, 10.0),
            provenance: Provenance {
                stage1: "reptile".into(),
                master_seed: 42,
                config_hash: "abc123".into(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let json = save_model(dir.path(), "model", &model).unwrap();
        let loaded = load_model::<f32>(&json).unwrap();
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.params.max_abs_diff(&model.params).unwrap(), 0.0);
        assert_eq!(loaded.depth_range, model.depth_range);
        assert_eq!(loaded.provenance, model.provenance);
        match load_model_any(&json).unwrap() {
            AnyModel::F32(m) => assert_eq!(m.params.max_abs_diff(&model.params).unwrap(), 0.0),
            AnyModel::F64(_) => panic!("wrong precision"),
        }
    }

    #[test]
    fn manifest_spec_tampering_is_detected() {
        let spec = NetworkSpec::desk();
        let (_, params) = crate::net::build_network::<f32>(&spec, 11).unwrap();
        let model = TrainedModel {
            spec,
            params,
            depth_range: (0.3, 10.0),
            provenance: Provenance::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let json = save_model(dir.path(), "m", &model).unwrap();
        let text = std::fs::read_to_string(&json).unwrap();
        // Change the declared head widths without touching the weights.
        let tampered = text.replace("\"head_channels\": [\n      16,\n      8\n    ]", "\"head_channels\": [\n      8,\n      16\n    ]");
        assert_ne!(tampered, text, "tamper target not found; update the test");
        std::fs::write(&json, tampered).unwrap();
        assert!(load_model::<f32>(&json).is_err());
    }

    #[test]
    fn missing_files_surface_as_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_model::<f32>(&dir.path().join("absent.json")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("absent.mdck")).unwrap_err(),
            Error::Io { .. }
        ));
    }
}
