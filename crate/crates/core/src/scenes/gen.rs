//! Scene sampling and ray-cast rendering.
//!
//! World frame: right-handed with +Y pointing down (so the floor is the
//! y = Ly face). A camera at zero yaw/pitch has its axes aligned with the
//! world: x right, y down (image rows), z forward. Rays are cast as
//! `dir_cam = ((x - cx)/fx, (y - cy)/fy, 1)` rotated into the world, so
//! the ray parameter at a hit *is* the camera-space depth.
//!
//! Colour = albedo x texture x shading. Shading combines incidence angle
//! with distance falloff, which makes brightness an honest depth cue.
//! Texture modulates albedo only and never geometry.

use super::{
    Dataset, DatasetMeta, FineGrainedTask, FrameRegions, GeneratedData, RegionAnnotation,
    RegionKind, SceneGenConfig, Split,
};
use crate::error::Result;
use crate::par;
use crate::seeds::{self, Stream};
use crate::tensor::{Mask, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Multiplicative texture swings albedo by this factor; large enough to
/// survive 8-bit image quantisation everywhere in the scene.
const TEXTURE_AMPLITUDE: f64 = 0.3;
/// Regions smaller than this many pixels are too noisy to annotate.
const MIN_REGION_PIXELS: usize = 12;
/// Minimum camera clearance from walls and boxes, in meters.
const CAMERA_MARGIN: f64 = 0.45;

#[derive(Debug, Clone, Copy)]
struct Patch {
    u0: f64,
    v0: f64,
    u1: f64,
    v1: f64,
    /// Cycles across the face.
    freq: f64,
    phase: f64,
    checker: bool,
}

#[derive(Debug, Clone, Copy)]
struct Box3 {
    min: [f64; 3],
    max: [f64; 3],
    albedo: [f64; 3],
}

#[derive(Debug, Clone)]
pub(crate) struct Scene {
    /// Room extents (Lx, Ly, Lz); interior is [0,Lx] x [0,Ly] x [0,Lz].
    dims: [f64; 3],
    boxes: Vec<Box3>,
    wall_albedos: [[f64; 3]; 6],
    wall_patches: [Option<Patch>; 6],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CameraPose {
    pos: [f64; 3],
    yaw: f64,
    pitch: f64,
}

/// Hit surface id: walls 0..6 (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz), then
/// boxes from 6 upward.
type SurfaceId = usize;

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>()
}

fn symm(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>() * 2.0 - 1.0
}

/// Samples scene geometry, colours and textures. Draw order is fixed;
/// changing it invalidates previously generated datasets.
pub(crate) fn sample_scene(cfg: &SceneGenConfig, scene_seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let v = cfg.variety;

    let spread = 0.05 + 0.40 * v;
    let mut dims = [
        4.0 * (1.0 + spread * symm(&mut rng)),
        2.7 * (1.0 + 0.15 * v * symm(&mut rng)),
        5.0 * (1.0 + spread * symm(&mut rng)),
    ];
    // Keep every possible depth within the generator's maximum.
    let diag = (dims[0] * dims[0] + dims[1] * dims[1] + dims[2] * dims[2]).sqrt();
    let limit = 0.95 * cfg.depth_range.1;
    if diag > limit {
        let k = limit / diag;
        for d in &mut dims {
            *d *= k;
        }
    }

    // Albedo floor keeps texture contrast above one 8-bit level even on
    // the farthest, grazing-lit wall; ceiling keeps highlights unclipped.
    let albedo = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let range = 0.3 + 0.7 * v;
        [
            (0.47 + 0.25 * range * symm(rng)).clamp(0.22, 0.72),
            (0.47 + 0.25 * range * symm(rng)).clamp(0.22, 0.72),
            (0.47 + 0.25 * range * symm(rng)).clamp(0.22, 0.72),
        ]
    };
    let wall_albedos = [
        albedo(&mut rng),
        albedo(&mut rng),
        albedo(&mut rng),
        albedo(&mut rng),
        albedo(&mut rng),
        albedo(&mut rng),
    ];

    let mut wall_patches = [None; 6];
    if cfg.texture_density > 0.0 {
        let side = cfg.texture_density.sqrt().min(1.0);
        for patch in &mut wall_patches {
            let u0 = unit(&mut rng) * (1.0 - side);
            let v0 = unit(&mut rng) * (1.0 - side);
            *patch = Some(Patch {
                u0,
                v0,
                u1: u0 + side,
                v1: v0 + side,
                freq: 4.0 + 8.0 * unit(&mut rng),
                phase: unit(&mut rng) * std::f64::consts::TAU,
                checker: unit(&mut rng) < 0.5,
            });
        }
    }

    let n_boxes = 2 + (unit(&mut rng) * (1.0 + 4.0 * v)).floor() as usize;
    let mut boxes = Vec::new();
    for _ in 0..n_boxes.min(6) {
        let sx = 0.5 + 0.7 * unit(&mut rng) * (0.4 + 0.6 * v);
        let sz = 0.5 + 0.7 * unit(&mut rng) * (0.4 + 0.6 * v);
        let sy = 0.4 + 1.1 * unit(&mut rng);
        let margin = 0.2;
        let cx = margin + sx / 2.0 + unit(&mut rng) * (dims[0] - 2.0 * margin - sx).max(0.0);
        let cz = margin + sz / 2.0 + unit(&mut rng) * (dims[2] - 2.0 * margin - sz).max(0.0);
        // Boxes stand on the floor (y = Ly face, since +y points down).
        boxes.push(Box3 {
            min: [cx - sx / 2.0, dims[1] - sy.min(dims[1] - 0.2), cz - sz / 2.0],
            max: [cx + sx / 2.0, dims[1], cz + sz / 2.0],
            albedo: albedo(&mut rng),
        });
    }

    Scene { dims, boxes, wall_albedos, wall_patches }
}

/// Samples a camera pose strictly inside the room, clear of walls and
/// boxes. Draw order is fixed.
pub(crate) fn sample_pose(scene: &Scene, variety: f64, frame_seed: u64) -> CameraPose {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
    let m = CAMERA_MARGIN;
    let [lx, ly, lz] = scene.dims;
    let mut pos = [lx / 2.0, ly / 2.0, lz / 2.0];
    for _attempt in 0..64 {
        let cand = [
            m + unit(&mut rng) * (lx - 2.0 * m).max(0.0),
            // Eye height band above the floor (floor is at y = Ly).
            (ly - 1.8 + unit(&mut rng) * 0.6).clamp(m, ly - m),
            m + unit(&mut rng) * (lz - 2.0 * m).max(0.0),
        ];
        let clear = scene.boxes.iter().all(|b| {
            (0..3).any(|a| cand[a] < b.min[a] - m || cand[a] > b.max[a] + m)
        });
        if clear {
            pos = cand;
            break;
        }
    }
    let yaw = unit(&mut rng) * std::f64::consts::TAU;
    let pitch = symm(&mut rng) * 0.15 * (0.3 + 0.7 * variety);
    CameraPose { pos, yaw, pitch }
}

/// World-from-camera rotation: yaw about +Y (down), then pitch about the
/// camera x axis.
fn rotation(yaw: f64, pitch: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    // R = Ry(yaw) * Rx(pitch), column-major application to camera vectors.
    [
        [cy, sy * sp, sy * cp],
        [0.0, cp, -sp],
        [-sy, cy * sp, cy * cp],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

struct Hit {
    t: f64,
    surface: SurfaceId,
    point: [f64; 3],
    /// Outward-facing unit normal (towards the camera side).
    normal: [f64; 3],
}

fn intersect(scene: &Scene, origin: [f64; 3], dir: [f64; 3]) -> Hit {
    const EPS: f64 = 1e-9;
    let mut best_t = f64::INFINITY;
    let mut best: Option<(SurfaceId, [f64; 3])> = None;

    // Room faces, seen from inside.
    for axis in 0..3 {
        for (side, c) in [(0usize, 0.0), (1usize, scene.dims[axis])] {
            if dir[axis].abs() < 1e-12 {
                continue;
            }
            let t = (c - origin[axis]) / dir[axis];
            if t <= EPS || t >= best_t {
                continue;
            }
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
            let (a1, a2) = other_axes(axis);
            let tol = 1e-9 * (1.0 + scene.dims[a1].max(scene.dims[a2]));
            if p[a1] < -tol
                || p[a1] > scene.dims[a1] + tol
                || p[a2] < -tol
                || p[a2] > scene.dims[a2] + tol
            {
                continue;
            }
            let mut n = [0.0; 3];
            n[axis] = if side == 0 { 1.0 } else { -1.0 };
            best_t = t;
            best = Some((axis * 2 + side, n));
        }
    }

    // Boxes, slab test, seen from outside.
    for (bi, b) in scene.boxes.iter().enumerate() {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut near_axis = 0usize;
        let mut ok = true;
        for axis in 0..3 {
            if dir[axis].abs() < 1e-12 {
                if origin[axis] < b.min[axis] || origin[axis] > b.max[axis] {
                    ok = false;
                    break;
                }
                continue;
            }
            let inv = 1.0 / dir[axis];
            let (mut t0, mut t1) = ((b.min[axis] - origin[axis]) * inv, (b.max[axis] - origin[axis]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > t_near {
                t_near = t0;
                near_axis = axis;
            }
            t_far = t_far.min(t1);
            if t_near > t_far {
                ok = false;
                break;
            }
        }
        if ok && t_near > EPS && t_near < best_t {
            let mut n = [0.0; 3];
            n[near_axis] = -dir[near_axis].signum();
            best_t = t_near;
            best = Some((6 + bi, n));
        }
    }

    let (surface, normal) = best.expect("a ray from inside the room always exits through a face");
    let t = best_t;
    Hit {
        t,
        surface,
        point: [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]],
        normal,
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Face-local UV in [0,1]^2 for a wall hit point.
fn wall_uv(scene: &Scene, wall: usize, p: [f64; 3]) -> (f64, f64) {
    let [lx, ly, lz] = scene.dims;
    let (u, v) = match wall / 2 {
        0 => (p[2] / lz, p[1] / ly),
        1 => (p[0] / lx, p[2] / lz),
        _ => (p[0] / lx, p[1] / ly),
    };
    (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
}

/// +1/-1 texture field inside a patch.
fn texture_sign(patch: &Patch, u: f64, v: f64) -> f64 {
    let fu = (u - patch.u0) / (patch.u1 - patch.u0);
    let fv = (v - patch.v0) / (patch.v1 - patch.v0);
    if patch.checker {
        let s = (fu * patch.freq).floor() as i64 + (fv * patch.freq).floor() as i64;
        if s.rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    } else if ((fu * patch.freq * std::f64::consts::TAU) + patch.phase).sin() >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub(crate) struct RenderedFrame {
    /// RGB in [0,1], row-major per channel.
    rgb: Vec<f64>,
    /// Camera-space depth per pixel.
    depth: Vec<f64>,
    surfaces: Vec<SurfaceId>,
    /// Per pixel: hit lies inside the wall's texture patch.
    textured: Vec<bool>,
}

pub(crate) fn render(scene: &Scene, pose: &CameraPose, h: usize, w: usize) -> RenderedFrame {
    let rot = rotation(pose.yaw, pose.pitch);
    // Pinhole with focal length = image width and mid-image principal
    // point, matching the geometry module's defaults.
    let fx = w as f64;
    let fy = w as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let n = h * w;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut surfaces = vec![0usize; n];
    let mut textured = vec![false; n];

    for py in 0..h {
        for px in 0..w {
            let dir_cam = [
                (px as f64 - cx) / fx,
                (py as f64 - cy) / fy,
                1.0,
            ];
            let dir = mat_vec(&rot, dir_cam);
            let hit = intersect(scene, pose.pos, dir);
            let i = py * w + px;
            depth[i] = hit.t;
            surfaces[i] = hit.surface;

            let mut albedo;
            let mut tex = 1.0;
            if hit.surface < 6 {
                albedo = scene.wall_albedos[hit.surface];
                if let Some(patch) = &scene.wall_patches[hit.surface] {
                    let (u, v) = wall_uv(scene, hit.surface, hit.point);
                    if u >= patch.u0 && u <= patch.u1 && v >= patch.v0 && v <= patch.v1 {
                        textured[i] = true;
                        tex = 1.0 + TEXTURE_AMPLITUDE * texture_sign(patch, u, v);
                    }
                }
            } else {
                albedo = scene.boxes[hit.surface - 6].albedo;
            }

            // Headlight shading: incidence cosine times distance falloff.
            let dir_len =
                (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            let cos_inc = (dir[0] * hit.normal[0]
                + dir[1] * hit.normal[1]
                + dir[2] * hit.normal[2])
                .abs()
                / dir_len;
            let dist = hit.t * dir_len;
            let shade = (0.40 + 0.60 * cos_inc) / (1.0 + 0.03 * dist * dist);

            for c in 0..3 {
                albedo[c] = (albedo[c] * tex * shade).clamp(0.0, 1.0);
            }
            rgb[i] = albedo[0];
            rgb[n + i] = albedo[1];
            rgb[2 * n + i] = albedo[2];
        }
    }

    RenderedFrame { rgb, depth, surfaces, textured }
}

fn regions_for_frame(frame: &RenderedFrame, h: usize, w: usize) -> Vec<RegionAnnotation> {
    let mut out = Vec::new();

    // Textured-plane regions: one per wall with enough textured pixels.
    for wall in 0..6usize {
        let mut bits = vec![false; h * w];
        let mut count = 0usize;
        for i in 0..h * w {
            if frame.surfaces[i] == wall && frame.textured[i] {
                bits[i] = true;
                count += 1;
            }
        }
        if count >= MIN_REGION_PIXELS {
            out.push(RegionAnnotation {
                kind: RegionKind::TexturedPlane,
                mask: Mask::new(h, w, bits).expect("region mask sized to frame"),
            });
        }
    }

    // Object boundary: pixels whose 4-neighbourhood crosses a box edge.
    let mut bits = vec![false; h * w];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let s = frame.surfaces[y * w + x];
            let mut edge = false;
            if x + 1 < w {
                let r = frame.surfaces[y * w + x + 1];
                edge |= r != s && (r >= 6 || s >= 6);
            }
            if y + 1 < h {
                let d = frame.surfaces[(y + 1) * w + x];
                edge |= d != s && (d >= 6 || s >= 6);
            }
            if edge {
                for (yy, xx) in [(y, x), (y, (x + 1).min(w - 1)), ((y + 1).min(h - 1), x)] {
                    let i = yy * w + xx;
                    if !bits[i] {
                        bits[i] = true;
                        count += 1;
                    }
                }
            }
        }
    }
    if count >= MIN_REGION_PIXELS {
        out.push(RegionAnnotation {
            kind: RegionKind::ObjectBoundary,
            mask: Mask::new(h, w, bits).expect("region mask sized to frame"),
        });
    }
    out
}

fn make_task<T: Scalar>(
    cfg: &SceneGenConfig,
    scene: &Scene,
    scene_id: usize,
    frame_id: usize,
    frame_seed: u64,
) -> (FineGrainedTask<T>, Vec<RegionAnnotation>) {
    let (h, w) = cfg.image_size;
    let pose = sample_pose(scene, cfg.variety, frame_seed);
    let frame = render(scene, &pose, h, w);
    let regions = regions_for_frame(&frame, h, w);

    let image = Tensor::new(
        vec![3, h, w],
        frame.rgb.iter().map(|&v| T::from_f64(v)).collect(),
    )
    .expect("rendered image has declared shape");
    let depth = Tensor::new(
        vec![1, h, w],
        frame.depth.iter().map(|&v| T::from_f64(v)).collect(),
    )
    .expect("rendered depth has declared shape");
    let valid_bits =
        frame.depth.iter().map(|&d| d > 0.0 && d <= cfg.depth_range.1).collect();
    let valid = Mask::new(h, w, valid_bits).expect("mask sized to frame");

    (FineGrainedTask { image, depth, valid, scene_id, frame_id }, regions)
}

/// Renders the train and test splits described by `cfg`.
///
/// Scene ids `0..num_scenes` form the training split and
/// `num_scenes..num_scenes+test_scenes` the held-out split, so the two are
/// disjoint by construction. Frames render in parallel; output order is
/// fixed by (scene, frame) index regardless of thread count.
pub fn generate_dataset<T: Scalar>(cfg: &SceneGenConfig) -> Result<GeneratedData<T>> {
    cfg.validate()?;
    let hash = cfg.hash();

    let build_split = |first_scene: usize, n_scenes: usize, split: Split| -> (Dataset<T>, FrameRegions) {
        let scenes: Vec<Scene> = (first_scene..first_scene + n_scenes)
            .map(|sid| {
                sample_scene(cfg, seeds::derive_indexed(cfg.seed, Stream::Generator, sid as u64))
            })
            .collect();
        let total = n_scenes * cfg.frames_per_scene;
        let rendered = par::map_indexed(total, |gi| {
            let local_scene = gi / cfg.frames_per_scene;
            let frame_id = gi % cfg.frames_per_scene;
            let scene_id = first_scene + local_scene;
            // Frame seeds live in a distinct index space from scene seeds.
            let frame_seed = seeds::derive_indexed(
                cfg.seed,
                Stream::Generator,
                (1 + scene_id as u64) << 20 | frame_id as u64,
            );
            make_task::<T>(cfg, &scenes[local_scene], scene_id, frame_id, frame_seed)
        });
        let mut tasks = Vec::with_capacity(total);
        let mut regions = Vec::with_capacity(total);
        for (t, r) in rendered {
            tasks.push(t);
            regions.push(r);
        }
        (
            Dataset {
                tasks,
                meta: DatasetMeta {
                    split,
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                    image_size: cfg.image_size,
                    depth_range: cfg.depth_range,
                },
            },
            regions,
        )
    };

    let (train, train_regions) = build_split(0, cfg.num_scenes, Split::Train);
    let (test, test_regions) = build_split(cfg.num_scenes, cfg.test_scenes, Split::Test);
    Ok(GeneratedData { train, test, train_regions, test_regions })
}
