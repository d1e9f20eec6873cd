//! Pinhole camera geometry: planar depth vs ray distance, backprojection
//! into camera-space points and ASCII PLY export.
//!
//! Depth throughout this crate is the planar Z coordinate. The ray
//! distance to a pixel is `Z * sqrt(1 + u^2 + v^2)` with `u = (x-cx)/fx`
//! and `v = (y-cy)/fy`, so distance is never smaller than depth.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Scalar, Tensor};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// The convention the scene renderer uses: focal length equal to the
    /// image width, principal point at the pixel-grid centre.
    pub fn default_for(width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image dimensions must be positive".into()));
        }
        for (v, name) in [(self.fx, "fx"), (self.fy, "fy")] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (v, name) in [(self.cx, "cx"), (self.cy, "cy")] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Ratio of ray distance to planar depth at pixel `(x, y)`; always
    /// at least 1, exactly 1 where the ray meets the principal point.
    pub fn ray_scale(&self, x: usize, y: usize) -> f64 {
        let u = (x as f64 - self.cx) / self.fx;
        let v = (y as f64 - self.cy) / self.fy;
        (1.0 + u * u + v * v).sqrt()
    }

    /// Camera-space point for pixel `(x, y)` at planar depth `z`.
    pub fn backproject(&self, x: usize, y: usize, z: f64) -> [f64; 3] {
        let u = (x as f64 - self.cx) / self.fx;
        let v = (y as f64 - self.cy) / self.fy;
        [u * z, v * z, z]
    }

    fn check_map_shape(&self, shape: &[usize]) -> Result<()> {
        let ok = matches!(shape, [h, w] if *h == self.height && *w == self.width)
            || matches!(shape, [1, h, w] if *h == self.height && *w == self.width);
        if !ok {
            return Err(Error::Shape(format!(
                "depth map {shape:?} does not match camera {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Converts a planar depth map to per-pixel ray distances.
pub fn depth_to_distance<T: Scalar>(depth: &Tensor<T>, intr: &CameraIntrinsics) -> Result<Tensor<T>> {
    intr.validate()?;
    intr.check_map_shape(depth.shape())?;
    let mut out = depth.clone();
    let (w, data) = (intr.width, out.data_mut());
    for (i, v) in data.iter_mut().enumerate() {
        let (y, x) = (i / w, i % w);
        *v = *v * T::from_f64(intr.ray_scale(x, y));
    }
    Ok(out)
}

/// Inverse of [`depth_to_distance`].
pub fn distance_to_depth<T: Scalar>(
    distance: &Tensor<T>,
    intr: &CameraIntrinsics,
) -> Result<Tensor<T>> {
    intr.validate()?;
    intr.check_map_shape(distance.shape())?;
    let mut out = distance.clone();
    let (w, data) = (intr.width, out.data_mut());
    for (i, v) in data.iter_mut().enumerate() {
        let (y, x) = (i / w, i % w);
        *v = *v / T::from_f64(intr.ray_scale(x, y));
    }
    Ok(out)
}

/// Camera-space points with per-point colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Backprojects every valid pixel of a depth map, coloring points from
/// the `[3, H, W]` image (values in [0, 1]).
pub fn backproject_to_cloud<T: Scalar>(
    image: &Tensor<T>,
    depth: &Tensor<T>,
    valid: &Mask,
    intr: &CameraIntrinsics,
) -> Result<PointCloud> {
    intr.validate()?;
    intr.check_map_shape(depth.shape())?;
    let (h, w) = (intr.height, intr.width);
    if image.shape() != [3, h, w] {
        return Err(Error::Shape(format!(
            "image {:?} does not match camera {h}x{w}",
            image.shape()
        )));
    }
    if valid.h() != h || valid.w() != w {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match camera {h}x{w}",
            valid.h(),
            valid.w()
        )));
    }
    let plane = h * w;
    let mut cloud = PointCloud::default();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid.as_slice()[i] {
                continue;
            }
            let z = depth.data()[i].as_f64();
            if !(z > 0.0) || !z.is_finite() {
                return Err(Error::Degenerate(format!(
                    "valid pixel ({x}, {y}) has non-positive depth {z}"
                )));
            }
            let p = intr.backproject(x, y, z);
            cloud.points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
            let quant = |c: usize| {
                let v = image.data()[c * plane + i].as_f64().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            cloud.colors.push([quant(0), quant(1), quant(2)]);
        }
    }
    Ok(cloud)
}

/// Writes an ASCII PLY with float positions and uchar colors. Output is
/// deterministic for identical clouds.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    if cloud.points.len() != cloud.colors.len() {
        return Err(Error::Data(format!(
            "point cloud has {} points but {} colors",
            cloud.points.len(),
            cloud.colors.len()
        )));
    }
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    text.push_str(&format!("element vertex {}\n", cloud.points.len()));
    text.push_str("property float x\nproperty float y\nproperty float z\n");
    text.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    text.push_str("end_header\n");
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        text.push_str(&format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], c[0], c[1], c[2]));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
