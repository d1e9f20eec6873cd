//! On-disk dataset format.
//!
//! A split directory contains:
//! - `img_NNNNN.png`: 8-bit RGB frames;
//! - `depth_NNNNN.mdld`: binary depth maps (see below);
//! - `manifest.json`: pair list, provenance and region annotations.
//!
//! Depth file layout (`MDLD`), little endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MDLD"
//! 4       2     format version (currently 1), u16
//! 6       2     height, u16
//! 8       2     width, u16
//! 10      6     reserved, zero
//! 16      4*H*W depth values, f32, row major
//! ```

use super::{
    Dataset, DatasetMeta, FineGrainedTask, FrameRegions, RegionAnnotation, RegionKind,
    SceneGenConfig, Split,
};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MDLD_MAGIC: &[u8; 4] = b"MDLD";
const MDLD_VERSION: u16 = 1;
const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    split: Split,
    config_hash: String,
    seed: u64,
    image_size: (usize, usize),
    depth_range: (f64, f64),
    pairs: Vec<ManifestPair>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPair {
    image: String,
    depth: String,
    scene_id: usize,
    frame_id: usize,
    regions: Vec<ManifestRegion>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRegion {
    kind: RegionKind,
    rle: Vec<(u32, u32)>,
}

/// Encodes a `[1, H, W]` depth tensor into the MDLD byte layout.
pub fn encode_depth<T: Scalar>(depth: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match depth.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("depth tensor {s:?}, want [1, H, W]"))),
    };
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Config(format!("depth map {h}x{w} exceeds format limit")));
    }
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(MDLD_MAGIC);
    out.extend_from_slice(&MDLD_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&[0u8; 6]);
    for v in depth.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes MDLD bytes into a `[1, H, W]` depth tensor.
pub fn decode_depth<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 16 {
        return Err(Error::Data(format!("depth file truncated at {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MDLD_MAGIC {
        return Err(Error::Data("depth file magic mismatch, not an MDLD file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MDLD_VERSION {
        return Err(Error::Data(format!(
            "depth file version {version}, this build reads version {MDLD_VERSION}"
        )));
    }
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let w = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let want = 16 + 4 * h * w;
    if bytes.len() != want {
        return Err(Error::Data(format!(
            "depth file is {} bytes, header implies {want}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Writes a `[3, H, W]` unit-range image as an 8-bit PNG.
pub fn write_png<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("image tensor {s:?}, want [3, H, W]"))),
    };
    let n = h * w;
    let mut buf = vec![0u8; 3 * n];
    let d = image.data();
    for i in 0..n {
        for c in 0..3 {
            let v = d[c * n + i].as_f64().clamp(0.0, 1.0);
            buf[3 * i + c] = (v * 255.0).round() as u8;
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Data(format!("writing png {}: {e}", path.display())))
}

/// Loads an 8-bit PNG as a `[3, H, W]` tensor with values in [0, 1].
pub fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("reading png {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![T::zero(); 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = T::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn region_to_manifest(r: &RegionAnnotation) -> ManifestRegion {
    ManifestRegion { kind: r.kind, rle: r.mask.to_rle() }
}

/// Writes one split (images, depth maps, manifest) into `dir`, creating it
/// if needed.
pub fn save_dataset<T: Scalar>(
    ds: &Dataset<T>,
    regions: &FrameRegions,
    dir: &Path,
) -> Result<()> {
    if regions.len() != ds.len() {
        return Err(Error::Shape(format!(
            "{} region lists for {} tasks",
            regions.len(),
            ds.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::with_capacity(ds.len());
    for (i, (task, regs)) in ds.tasks.iter().zip(regions).enumerate() {
        let img_name = format!("img_{i:05}.png");
        let depth_name = format!("depth_{i:05}.mdld");
        write_png(&task.image, &dir.join(&img_name))?;
        let depth_bytes = encode_depth(&task.depth)?;
        fs::write(dir.join(&depth_name), depth_bytes)
            .map_err(|e| Error::io(dir.join(&depth_name), e))?;
        pairs.push(ManifestPair {
            image: img_name,
            depth: depth_name,
            scene_id: task.scene_id,
            frame_id: task.frame_id,
            regions: regs.iter().map(region_to_manifest).collect(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        split: ds.meta.split,
        config_hash: ds.meta.config_hash.clone(),
        seed: ds.meta.seed,
        image_size: ds.meta.image_size,
        depth_range: ds.meta.depth_range,
        pairs,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("encoding manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json)
        .map_err(|e| Error::io(dir.join("manifest.json"), e))
}

/// Loads a split saved by [`save_dataset`]. Validity masks are recomputed
/// from the stored depth and the manifest's depth range.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, FrameRegions)> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("parsing {}: {e}", manifest_path.display())))?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(Error::Data(format!(
            "manifest schema {} unsupported (this build reads {MANIFEST_SCHEMA})",
            manifest.schema_version
        )));
    }
    let (h, w) = manifest.image_size;
    let mut tasks = Vec::with_capacity(manifest.pairs.len());
    let mut regions = Vec::with_capacity(manifest.pairs.len());
    for pair in &manifest.pairs {
        let image = read_png::<T>(&dir.join(&pair.image))?;
        if image.shape() != [3, h, w] {
            return Err(Error::Data(format!(
                "{}: image is {:?}, manifest says {h}x{w}",
                pair.image,
                image.shape()
            )));
        }
        let depth_bytes =
            fs::read(dir.join(&pair.depth)).map_err(|e| Error::io(dir.join(&pair.depth), e))?;
        let depth = decode_depth::<T>(&depth_bytes)?;
        if depth.shape() != [1, h, w] {
            return Err(Error::Data(format!(
                "{}: depth is {:?}, manifest says {h}x{w}",
                pair.depth,
                depth.shape()
            )));
        }
        let valid_bits = depth
            .data()
            .iter()
            .map(|d| d.as_f64() > 0.0 && d.as_f64() <= manifest.depth_range.1)
            .collect();
        tasks.push(FineGrainedTask {
            image,
            depth,
            valid: Mask::new(h, w, valid_bits)?,
            scene_id: pair.scene_id,
            frame_id: pair.frame_id,
        });
        let mut regs = Vec::with_capacity(pair.regions.len());
        for r in &pair.regions {
            regs.push(RegionAnnotation { kind: r.kind, mask: Mask::from_rle(h, w, &r.rle)? });
        }
        regions.push(regs);
    }
    Ok((
        Dataset {
            tasks,
            meta: DatasetMeta {
                split: manifest.split,
                config_hash: manifest.config_hash,
                seed: manifest.seed,
                image_size: manifest.image_size,
                depth_range: manifest.depth_range,
            },
        },
        regions,
    ))
}

/// Saves both splits of a generation run under `dir/train` and `dir/test`.
pub fn save_generated<T: Scalar>(
    data: &super::GeneratedData<T>,
    dir: &Path,
) -> Result<()> {
    save_dataset(&data.train, &data.train_regions, &dir.join("train"))?;
    save_dataset(&data.test, &data.test_regions, &dir.join("test"))
}

/// Convenience wrapper checking that a loaded split matches a generator
/// configuration (same config hash).
pub fn check_matches_config<T: Scalar>(ds: &Dataset<T>, cfg: &SceneGenConfig) -> Result<()> {
    if ds.meta.config_hash != cfg.hash() {
        return Err(Error::Data(format!(
            "dataset was generated with config {} but current config hashes to {}",
            ds.meta.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}
