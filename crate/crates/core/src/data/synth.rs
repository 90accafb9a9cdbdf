//! Procedural scenes with mutually consistent semantic, depth and surface
//! normal targets.
//!
//! A pinhole camera sits at the origin looking down `+z` (`x` right, `y`
//! down). Every scene has a ground plane at `y = 1` and a back wall at
//! `z = 9`, both labelled class 0, plus 2 to 5 spheres and tilted rectangles
//! carrying object classes. Each pixel's class, depth and normal all come
//! from the first surface its ray hits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DemtError, Result};
use crate::tensor::Tensor;

pub const GROUND_Y: f64 = 1.0;
pub const WALL_Z: f64 = 9.0;

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        center: V3,
        radius: f64,
    },
    /// Planar rectangle spanned by unit axes `u`, `v` with half extents.
    Rect {
        center: V3,
        u: V3,
        v: V3,
        half_u: f64,
        half_v: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub class: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Wall,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Distance along the unit ray.
    pub t: f64,
    /// Unit normal facing the camera.
    pub normal: V3,
    pub class: u16,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// `H·W` class labels.
    pub semseg: Vec<u16>,
    /// `[H, W]`, strictly positive ray depth.
    pub depth: Tensor,
    /// `[H, W, 3]` unit normals.
    pub normal: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

impl Scene {
    pub fn random(seed: u64, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(DemtError::InvalidArgument(format!(
                "need at least 2 classes (background + object), got {num_classes}"
            )));
        }
        if num_classes > 255 {
            return Err(DemtError::InvalidArgument(format!(
                "at most 255 classes fit the label format, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(2..=5);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let z = rng.gen_range(3.0..7.0);
            let x = rng.gen_range(-0.35..0.35) * z;
            let class = rng.gen_range(1..num_classes) as u16;
            let shape = if rng.gen_bool(0.5) {
                let radius = rng.gen_range(0.35..0.8);
                Shape::Sphere {
                    center: [x, GROUND_Y - radius, z],
                    radius,
                }
            } else {
                let yaw: f64 = rng.gen_range(-0.8..0.8);
                let tilt: f64 = rng.gen_range(-0.5..0.5);
                let u = [yaw.cos(), 0.0, yaw.sin()];
                let across = cross(u, [0.0, 1.0, 0.0]);
                let v = normalize([tilt.sin() * across[0], tilt.cos(), tilt.sin() * across[2]]);
                let half_u = rng.gen_range(0.3..0.7);
                let half_v = rng.gen_range(0.3..0.8);
                let lift = rng.gen_range(0.0..0.5);
                Shape::Rect {
                    center: [x, GROUND_Y - half_v - lift, z],
                    u,
                    v,
                    half_u,
                    half_v,
                }
            };
            objects.push(Object { shape, class });
        }
        Ok(Self {
            objects,
            noise_seed: rng.gen(),
        })
    }

    /// Unit ray through the centre of pixel `(row, col)`.
    pub fn ray(h: usize, w: usize, row: usize, col: usize) -> V3 {
        let f = 1.1 * w.max(h) as f64;
        normalize([
            (col as f64 + 0.5 - w as f64 / 2.0) / f,
            (row as f64 + 0.5 - h as f64 / 2.0) / f,
            1.0,
        ])
    }

    /// Nearest surface along the unit ray `d` from the camera.
    pub fn trace(&self, d: V3) -> Hit {
        let mut best = Hit {
            t: WALL_Z / d[2],
            normal: [0.0, 0.0, -1.0],
            class: 0,
            surface: Surface::Wall,
        };
        if d[1] > 0.0 {
            let t = GROUND_Y / d[1];
            if t < best.t {
                best = Hit {
                    t,
                    normal: [0.0, -1.0, 0.0],
                    class: 0,
                    surface: Surface::Ground,
                };
            }
        }
        for (i, obj) in self.objects.iter().enumerate() {
            let Some((t, normal)) = intersect(&obj.shape, d) else {
                continue;
            };
            if t < best.t {
                best = Hit {
                    t,
                    normal,
                    class: obj.class,
                    surface: Surface::Object(i),
                };
            }
        }
        best
    }

    pub fn render(&self, h: usize, w: usize) -> Result<Sample> {
        if h == 0 || w == 0 {
            return Err(DemtError::InvalidArgument(format!(
                "invalid image size {h}x{w}"
            )));
        }
        let light = normalize([-0.5, -1.0, -0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut image = Vec::with_capacity(h * w * 3);
        let mut semseg = Vec::with_capacity(h * w);
        let mut depth = Vec::with_capacity(h * w);
        let mut normal = Vec::with_capacity(h * w * 3);
        for row in 0..h {
            for col in 0..w {
                let hit = self.trace(Self::ray(h, w, row, col));
                let albedo = albedo(hit.surface, hit.class);
                let shade = 0.2 + 0.8 * dot(hit.normal, light).max(0.0);
                for a in albedo {
                    let v = (a * shade + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                    image.push(v as f32 as f64);
                }
                semseg.push(hit.class);
                depth.push(hit.t as f32 as f64);
                normal.extend(hit.normal.iter().map(|&n| n as f32 as f64));
            }
        }
        Ok(Sample {
            image: Tensor::new(&[h, w, 3], image)?,
            semseg,
            depth: Tensor::new(&[h, w], depth)?,
            normal: Tensor::new(&[h, w, 3], normal)?,
        })
    }
}

fn intersect(shape: &Shape, d: V3) -> Option<(f64, V3)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            // |t·d − c|² = r² with |d| = 1.
            let b = dot(d, center);
            let disc = b * b - dot(center, center) + radius * radius;
            if disc < 0.0 {
                return None;
            }
            let t = b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            Some((t, scale(sub(scale(d, t), center), 1.0 / radius)))
        }
        Shape::Rect {
            center,
            u,
            v,
            half_u,
            half_v,
        } => {
            let mut n = normalize(cross(u, v));
            let denom = dot(n, d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = dot(n, center) / denom;
            if t <= 0.0 {
                return None;
            }
            let rel = sub(scale(d, t), center);
            if dot(rel, u).abs() > half_u || dot(rel, v).abs() > half_v {
                return None;
            }
            if denom > 0.0 {
                n = scale(n, -1.0);
            }
            Some((t, n))
        }
    }
}

const PALETTE: [V3; 8] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.7, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.2],
    [0.7, 0.3, 0.8],
    [0.2, 0.8, 0.8],
    [0.95, 0.55, 0.2],
    [0.6, 0.6, 0.6],
];

fn albedo(surface: Surface, class: u16) -> V3 {
    match surface {
        Surface::Ground => [0.5, 0.45, 0.4],
        Surface::Wall => [0.4, 0.45, 0.55],
        Surface::Object(_) => {
            let base = PALETTE[(class as usize - 1) % PALETTE.len()];
            let dim = 1.0 / (1.0 + ((class as usize - 1) / PALETTE.len()) as f64);
            scale(base, dim)
        }
    }
}

/// One deterministic sample for `seed`.
pub fn generate_scene(seed: u64, h: usize, w: usize, num_classes: usize) -> Result<Sample> {
    Scene::random(seed, num_classes)?.render(h, w)
}

/// Seed of sample `index` within a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
