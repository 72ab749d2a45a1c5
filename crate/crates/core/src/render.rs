//! Analytic ray caster used to synthesize OLAT scans and to serve as the
//! ground truth for arbitrary light directions.
//!
//! Shading is Lambertian plus Blinn-Phong under a single unit-irradiance
//! directional light, with hard shadows from one shadow ray. There is no
//! interreflection and one sample per pixel through the pixel center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scan::{OlatScan, ScanMeta};
use crate::stage::LightStage;
use crate::{Error, Image, Result, Vec3};

const SHADOW_OFFSET: f64 = 1e-6;
const T_MIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Plane { point: Vec3, normal: Vec3 },
    Box { min: Vec3, max: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub specular_strength: f64,
    pub shininess: f64,
    pub is_specular: bool,
}

impl Material {
    pub fn matte(albedo: [f64; 3]) -> Self {
        Self {
            albedo,
            specular_strength: 0.0,
            shininess: 1.0,
            is_specular: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub vertical_fov: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub camera: Camera,
    pub background: [f64; 3],
}

struct Ray {
    origin: Vec3,
    dir: Vec3,
}

struct Hit {
    t: f64,
    normal: Vec3,
    primitive: usize,
}

impl Shape {
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > T_MIN { -b - sq } else { -b + sq };
                if t <= T_MIN {
                    return None;
                }
                let n = (ray.origin + ray.dir * t - center) / *radius;
                Some((t, n))
            }
            Shape::Plane { point, normal } => {
                let denom = normal.dot(&ray.dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - ray.origin).dot(normal) / denom;
                (t > T_MIN).then_some((t, *normal))
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for axis in 0..3 {
                    let o = ray.origin[axis];
                    let d = ray.dir[axis];
                    if d.abs() < 1e-15 {
                        if o < min[axis] || o > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((min[axis] - o) / d, (max[axis] - o) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = axis;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = axis;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > T_MIN {
                    (t_near, near_axis)
                } else if t_far > T_MIN {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[axis] = if ray.dir[axis] > 0.0 { -1.0 } else { 1.0 };
                if t == t_far && t_near <= T_MIN {
                    n = -n;
                }
                Some((t, n))
            }
        }
    }
}

struct CameraBasis {
    position: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half: f64,
}

impl CameraBasis {
    fn new(cam: &Camera) -> Result<Self> {
        let forward = cam.look_at - cam.position;
        if forward.norm() < 1e-12 {
            return Err(Error::DegenerateCamera("look_at equals position".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&cam.up);
        if right.norm() < 1e-9 {
            return Err(Error::DegenerateCamera("up is parallel to the view direction".into()));
        }
        if !(cam.vertical_fov > 0.0 && cam.vertical_fov < 180.0) {
            return Err(Error::DegenerateCamera(format!("vertical fov {}", cam.vertical_fov)));
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        Ok(Self {
            position: cam.position,
            forward,
            right,
            up,
            tan_half: (cam.vertical_fov.to_radians() / 2.0).tan(),
        })
    }

    fn ray(&self, x: usize, y: usize, width: usize, height: usize) -> Ray {
        let aspect = width as f64 / height as f64;
        let px = (2.0 * (x as f64 + 0.5) / width as f64 - 1.0) * self.tan_half * aspect;
        let py = (1.0 - 2.0 * (y as f64 + 0.5) / height as f64) * self.tan_half;
        Ray {
            origin: self.position,
            dir: (self.forward + self.right * px + self.up * py).normalize(),
        }
    }
}

impl Scene {
    fn closest_hit(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(ray) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    fn occluded(&self, ray: &Ray) -> bool {
        self.primitives.iter().any(|p| p.shape.intersect(ray).is_some())
    }

    /// Unclamped radiance seen along `ray` under the given lights.
    fn shade(&self, ray: &Ray, lights: &[Vec3]) -> [f64; 3] {
        let Some(hit) = self.closest_hit(ray) else {
            return self.background;
        };
        let p = ray.origin + ray.dir * hit.t;
        let mut n = hit.normal;
        if n.dot(&ray.dir) > 0.0 {
            n = -n;
        }
        let view = -ray.dir;
        let mat = &self.primitives[hit.primitive].material;
        let mut out = [0.0; 3];
        for l in lights {
            let cos = n.dot(l);
            // facing away from the light counts as self-shadowed
            if cos <= 0.0 {
                continue;
            }
            let shadow = Ray {
                origin: p + n * SHADOW_OFFSET,
                dir: *l,
            };
            if self.occluded(&shadow) {
                continue;
            }
            let spec = if mat.is_specular {
                let h = (l + view).normalize();
                mat.specular_strength * n.dot(&h).max(0.0).powf(mat.shininess)
            } else {
                0.0
            };
            for c in 0..3 {
                out[c] += mat.albedo[c] * cos + spec;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            if p.material.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument("albedo outside [0, 1]".into()));
            }
            let inside = match &p.shape {
                Shape::Sphere { center, radius } => (self.camera.position - center).norm() < *radius,
                Shape::Box { min, max } => (0..3).all(|a| {
                    self.camera.position[a] > min[a] && self.camera.position[a] < max[a]
                }),
                Shape::Plane { .. } => false,
            };
            if inside {
                return Err(Error::DegenerateCamera("camera inside a primitive".into()));
            }
        }
        CameraBasis::new(&self.camera).map(|_| ())
    }
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!("zero-area image {width}x{height}")));
    }
    Ok(())
}

/// Renders the scene lit by one unit-irradiance directional light.
pub fn render_scene(scene: &Scene, light_dir: &Vec3, width: usize, height: usize) -> Result<Image> {
    render_lights(scene, std::slice::from_ref(light_dir), width, height)
}

/// Renders with several lights accumulated before the final clamp.
pub fn render_lights(scene: &Scene, lights: &[Vec3], width: usize, height: usize) -> Result<Image> {
    check_size(width, height)?;
    let basis = CameraBasis::new(&scene.camera)?;
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let rgb = scene.shade(&basis.ray(x, y, width, height), lights);
            data.extend(rgb.iter().map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    Image::from_vec(width, height, 3, data)
}

/// Foreground mask: 1 where the primary ray hits a primitive.
pub fn render_mask(scene: &Scene, width: usize, height: usize) -> Result<Image> {
    let normals = surface_normals(scene, width, height)?;
    let data = normals.iter().map(|n| if n.is_some() { 1.0 } else { 0.0 }).collect();
    Image::from_vec(width, height, 1, data)
}

/// Viewer-facing surface normal at each pixel's primary hit.
pub fn surface_normals(scene: &Scene, width: usize, height: usize) -> Result<Vec<Option<Vec3>>> {
    check_size(width, height)?;
    let basis = CameraBasis::new(&scene.camera)?;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let ray = basis.ray(x, y, width, height);
            out.push(scene.closest_hit(&ray).map(|h| {
                if h.normal.dot(&ray.dir) > 0.0 {
                    -h.normal
                } else {
                    h.normal
                }
            }));
        }
    }
    Ok(out)
}

/// Renders one image per stage light, in light order.
pub fn generate_olat(scene: &Scene, stage: &LightStage, width: usize, height: usize) -> Result<OlatScan> {
    scene.validate()?;
    let images = stage
        .lights()
        .par_iter()
        .map(|l| render_scene(scene, l, width, height))
        .collect::<Result<Vec<_>>>()?;
    let mask = render_mask(scene, width, height)?;
    OlatScan::new(
        stage.clone(),
        images,
        mask,
        ScanMeta {
            name: scene.name.clone(),
            seed: 0,
        },
    )
}

pub const PRESETS: [&str; 3] = ["sphere_plane", "occluder_edge", "specular_ball"];

/// Geometry of the `occluder_edge` preset: a thin black slab hangs over the
/// ground plane covering `x < 0`, and a camera below the slab looks straight
/// down. The slab's edge casts a straight shadow line at `x = -h tan(theta)`
/// for a light tilted by `theta` in the xz-plane.
pub mod occluder {
    pub const SLAB_BOTTOM: f64 = 1.0;
    pub const SLAB_THICKNESS: f64 = 0.002;
    pub const CAMERA_HEIGHT: f64 = 0.9;
    /// Half-width of the visible ground strip.
    pub const HALF_EXTENT: f64 = 0.6;

    /// Light direction tilted by `theta` (radians) from the zenith toward +x.
    pub fn light(theta: f64) -> crate::Vec3 {
        crate::Vec3::new(theta.sin(), 0.0, theta.cos())
    }

    /// Closed-form shadow-edge column (pixel-index units) for an image of
    /// the given width, for a light tilted by `theta`.
    pub fn edge_column(theta: f64, width: usize) -> f64 {
        let x = -SLAB_BOTTOM * theta.tan();
        let w = width as f64;
        w / 2.0 * (1.0 + x / HALF_EXTENT) - 0.5
    }
}

/// Builds one of the named scenes. The seed perturbs material colors only.
pub fn preset(name: &str, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |base: [f64; 3]| -> [f64; 3] {
        if seed == 0 {
            return base;
        }
        base.map(|c: f64| (c + rng.random_range(-0.1..0.1)).clamp(0.05, 0.95))
    };
    let scene = match name {
        "sphere_plane" => Scene {
            name: name.into(),
            primitives: vec![
                Primitive {
                    shape: Shape::Plane {
                        point: Vec3::zeros(),
                        normal: Vec3::z(),
                    },
                    material: Material::matte(jitter([0.7, 0.7, 0.7])),
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Vec3::new(0.0, 0.0, 0.9),
                        radius: 0.5,
                    },
                    material: Material::matte(jitter([0.8, 0.45, 0.3])),
                },
            ],
            camera: Camera {
                position: Vec3::new(0.0, -4.0, 1.6),
                look_at: Vec3::new(0.0, 0.0, 0.6),
                up: Vec3::z(),
                vertical_fov: 40.0,
            },
            background: [0.0; 3],
        },
        "occluder_edge" => {
            use occluder::*;
            let fov = 2.0 * (HALF_EXTENT / CAMERA_HEIGHT).atan().to_degrees();
            Scene {
                name: name.into(),
                primitives: vec![
                    Primitive {
                        shape: Shape::Plane {
                            point: Vec3::zeros(),
                            normal: Vec3::z(),
                        },
                        material: Material::matte(jitter([0.8, 0.8, 0.8])),
                    },
                    Primitive {
                        shape: Shape::Box {
                            min: Vec3::new(-10.0, -10.0, SLAB_BOTTOM),
                            max: Vec3::new(0.0, 10.0, SLAB_BOTTOM + SLAB_THICKNESS),
                        },
                        material: Material::matte([0.0; 3]),
                    },
                ],
                camera: Camera {
                    position: Vec3::new(0.0, 0.0, CAMERA_HEIGHT),
                    look_at: Vec3::zeros(),
                    up: Vec3::y(),
                    vertical_fov: fov,
                },
                background: [0.0; 3],
            }
        }
        "specular_ball" => Scene {
            name: name.into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: Vec3::zeros(),
                    radius: 1.0,
                },
                material: Material {
                    albedo: jitter([0.45, 0.25, 0.2]),
                    specular_strength: 0.5,
                    shininess: 40.0,
                    is_specular: true,
                },
            }],
            camera: Camera {
                position: Vec3::new(0.0, 0.0, 4.0),
                look_at: Vec3::zeros(),
                up: Vec3::y(),
                vertical_fov: 35.0,
            },
            background: [0.0; 3],
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(scene)
}

/// Sub-pixel column where the row crosses 50% of its local intensity range.
///
/// The row must contain exactly one crossing; the result is linearly
/// interpolated between the two pixels that straddle the threshold, in
/// pixel-index units (pixel `i` has its center at `i`).
pub fn shadow_edge_position(image: &Image, scan_row: usize) -> Result<f64> {
    if scan_row >= image.height() {
        return Err(Error::InvalidArgument(format!(
            "row {scan_row} outside image of height {}",
            image.height()
        )));
    }
    let c = image.channels();
    let row: Vec<f64> = (0..image.width())
        .map(|x| (0..c).map(|ch| image.get(x, scan_row, ch) as f64).sum::<f64>() / c as f64)
        .collect();
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-6 {
        return Err(Error::NoCrossing(scan_row));
    }
    let threshold = lo + 0.5 * (hi - lo);
    let mut crossings = Vec::new();
    for x in 0..row.len() - 1 {
        let (a, b) = (row[x] - threshold, row[x + 1] - threshold);
        if (a < 0.0 && b >= 0.0) || (a >= 0.0 && b < 0.0) {
            crossings.push(x as f64 + (threshold - row[x]) / (row[x + 1] - row[x]));
        }
    }
    match crossings.len() {
        0 => Err(Error::NoCrossing(scan_row)),
        1 => Ok(crossings[0]),
        count => Err(Error::AmbiguousCrossing { row: scan_row, count }),
    }
}
