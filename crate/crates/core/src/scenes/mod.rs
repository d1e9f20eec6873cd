//! Procedural RGB-D scenes and fine-grained task datasets.
//!
//! A fine-grained task is a single RGB-D pair. Scenes are axis-aligned
//! rooms containing boxes; each frame renders the scene from a random
//! camera pose. Brightness carries genuine depth information (headlight
//! shading with distance falloff), while wall textures modulate colour
//! only, never depth, which is what makes texture an identifiable
//! spurious cue.

pub mod gen;
pub mod io;
pub mod sampler;

pub use gen::generate_dataset;
pub use io::{check_matches_config, load_dataset, save_dataset, save_generated};
pub use sampler::BatchSampler;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// One task: a single RGB-D pair with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGrainedTask<T: Scalar> {
    /// RGB image, `[3, H, W]`, values in [0, 1].
    pub image: Tensor<T>,
    /// Metric depth, `[1, H, W]`; non-positive values mean "no depth".
    pub depth: Tensor<T>,
    /// Pixels with usable depth: `0 < depth <= depth_range.1`.
    pub valid: Mask,
    pub scene_id: usize,
    pub frame_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: Split,
    /// Hex SHA-256 of the generator configuration.
    pub config_hash: String,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub depth_range: (f64, f64),
}

/// An ordered collection of fine-grained tasks plus provenance.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub tasks: Vec<FineGrainedTask<T>>,
    pub meta: DatasetMeta,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Stacks the indexed tasks into batch tensors: images `[B, 3, H, W]`,
    /// depths `[B, 1, H, W]` and one mask per task.
    pub fn assemble_batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<Mask>)> {
        if indices.is_empty() {
            return Err(Error::EmptySupport("empty batch of task indices".into()));
        }
        let (h, w) = self.meta.image_size;
        let b = indices.len();
        let mut images = Vec::with_capacity(b * 3 * h * w);
        let mut depths = Vec::with_capacity(b * h * w);
        let mut masks = Vec::with_capacity(b);
        for &i in indices {
            let task = self.tasks.get(i).ok_or_else(|| {
                Error::Data(format!("task index {i} out of range (dataset has {})", self.len()))
            })?;
            images.extend_from_slice(task.image.data());
            depths.extend_from_slice(task.depth.data());
            masks.push(task.valid.clone());
        }
        Ok((
            Tensor::new(vec![b, 3, h, w], images)?,
            Tensor::new(vec![b, 1, h, w], depths)?,
            masks,
        ))
    }
}

/// What a region annotation marks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Pixels on a textured planar patch: colour varies, depth follows the
    /// plane exactly (affine inverse depth).
    TexturedPlane,
    /// Pixels straddling a depth discontinuity at an object silhouette.
    ObjectBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub kind: RegionKind,
    pub mask: Mask,
}

/// Region annotations for every frame of a dataset, parallel to
/// `Dataset::tasks`.
pub type FrameRegions = Vec<Vec<RegionAnnotation>>;

/// Scene generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenConfig {
    /// Training scenes; scene ids `0..num_scenes`.
    pub num_scenes: usize,
    /// Held-out scenes; ids `num_scenes..num_scenes + test_scenes`.
    #[serde(default = "default_test_scenes")]
    pub test_scenes: usize,
    pub frames_per_scene: usize,
    /// (height, width) of rendered frames.
    pub image_size: (usize, usize),
    /// (min, max) metric depth in meters; rooms are scaled so that no
    /// rendered depth exceeds the maximum.
    pub depth_range: (f64, f64),
    /// 0 = repetitive scenes, 1 = maximal variation in layout and colour.
    pub variety: f64,
    /// Fraction of each wall face covered by its procedural texture patch.
    pub texture_density: f64,
    /// Master seed for the generator stream.
    #[serde(default)]
    pub seed: u64,
}

fn default_test_scenes() -> usize {
    4
}

impl SceneGenConfig {
    /// Small configuration for fast desk-scale experiments.
    pub fn desk() -> Self {
        SceneGenConfig {
            num_scenes: 8,
            test_scenes: 4,
            frames_per_scene: 32,
            image_size: (32, 32),
            depth_range: (0.3, 10.0),
            variety: 0.25,
            texture_density: 0.6,
            seed: 0,
        }
    }

    /// Production-scale configuration matching the full network input.
    pub fn full() -> Self {
        SceneGenConfig {
            num_scenes: 64,
            test_scenes: 16,
            frames_per_scene: 64,
            image_size: (256, 256),
            depth_range: (0.3, 10.0),
            variety: 0.5,
            texture_density: 0.6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 || self.test_scenes == 0 || self.frames_per_scene == 0 {
            return Err(Error::Config(
                "scene, test-scene and frame counts must be positive".into(),
            ));
        }
        let (h, w) = self.image_size;
        if h < 4 || w < 4 {
            return Err(Error::Config(format!("image size {h}x{w} too small, need >= 4x4")));
        }
        let (dmin, dmax) = self.depth_range;
        if !(dmin > 0.0) || !(dmax > dmin) || !dmax.is_finite() {
            return Err(Error::Config(format!(
                "depth range ({dmin}, {dmax}) must satisfy 0 < min < max"
            )));
        }
        for (name, v) in [("variety", self.variety), ("texture_density", self.texture_density)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("scene config serialises");
        let mut h = Sha256::new();
        h.update(&json);
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything `generate_dataset` produces.
#[derive(Debug, Clone)]
pub struct GeneratedData<T: Scalar> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub train_regions: FrameRegions,
    pub test_regions: FrameRegions,
}
