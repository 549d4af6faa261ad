//! Analytic rasterizer: one shaded object over a gray floor gradient.
//!
//! Screen coordinates have y pointing down; surface normals use camera space
//! with y up and z toward the viewer.

use alloc::vec;
use alloc::vec::Vec;

use super::{mix64, Image, Light, Material, SceneSpec, Shape, IMAGE_SIZE};

/// Identifies the rasterizer revision recorded in dataset manifests.
pub const RENDERER_VERSION: &str = "sslab-raster-1";

/// Maximum absolute per-pixel noise added to every channel.
pub const NOISE_BOUND: i32 = 2;

const AMBIENT: f32 = 0.3;
const CUBE_SIDE: f32 = 1.2;
const CUBE_DEPTH: f32 = 0.35;
const CYL_HALF_WIDTH: f32 = 0.8;
const CYL_HEIGHT: f32 = 1.4;
const CONE_HALF_WIDTH: f32 = 0.9;
const CONE_HEIGHT: f32 = 1.8;
/// Ellipse flattening of circular caps seen from slightly above.
const CAP_RATIO: f32 = 0.3;

/// Floor intensity at a pixel before noise and shadow.
pub fn background_value(x: usize, y: usize) -> f32 {
    let s = IMAGE_SIZE as f32;
    let t = (y as f32 + 0.5) / s;
    let u = (x as f32 + 0.5) / s - 0.5;
    72.0 + 88.0 * t - 20.0 * u * u
}

fn noise(seed: u64, x: usize, y: usize) -> i32 {
    let h = mix64(seed ^ ((y * IMAGE_SIZE + x) as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    (h % (2 * NOISE_BOUND as u64 + 1)) as i32 - NOISE_BOUND
}

/// Pixel offsets `[left, right, top, bottom]` of the silhouette around the
/// object center for radius `r` in pixels.
pub(crate) fn extents(shape: Shape, r: f32) -> [f32; 4] {
    match shape {
        Shape::Sphere => [r; 4],
        Shape::Cube => {
            let a = CUBE_SIDE * r;
            let half = a * (1.0 + CUBE_DEPTH) / 2.0;
            [half; 4]
        }
        Shape::Cylinder => {
            let w = CYL_HALF_WIDTH * r;
            let v = CYL_HEIGHT * r / 2.0 + CAP_RATIO * w;
            [w, w, v, v]
        }
        Shape::Cone => {
            let w = CONE_HALF_WIDTH * r;
            let h = CONE_HEIGHT * r / 2.0;
            [w, w, h, h + CAP_RATIO * w]
        }
    }
}

fn normalize(v: [f32; 3]) -> [f32; 3] {
    let n = libm::sqrtf(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Surface normal at screen offset `(dx, dy)` from the center, if the point
/// lies on the object.
fn surface_normal(shape: Shape, r: f32, dx: f32, dy: f32) -> Option<[f32; 3]> {
    match shape {
        Shape::Sphere => {
            let (u, v) = (dx / r, -dy / r);
            let q = u * u + v * v;
            (q <= 1.0).then(|| [u, v, libm::sqrtf(1.0 - q)])
        }
        Shape::Cube => {
            let a = CUBE_SIDE * r;
            let o = CUBE_DEPTH * a;
            let x0 = -(a + o) / 2.0;
            let y0 = x0 + o;
            if (x0..=x0 + a).contains(&dx) && (y0..=y0 + a).contains(&dy) {
                return Some([0.0, 0.0, 1.0]);
            }
            let t = -(dy - y0) / o;
            let s = (dx - x0 - t * o) / a;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&s) {
                return Some([0.0, 1.0, 0.0]);
            }
            let t = (dx - x0 - a) / o;
            let s = (dy - y0 + t * o) / a;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&s) {
                return Some([1.0, 0.0, 0.0]);
            }
            None
        }
        Shape::Cylinder => {
            let w = CYL_HALF_WIDTH * r;
            let e = CAP_RATIO * w;
            let half = CYL_HEIGHT * r / 2.0;
            let u = dx / w;
            let cap = (dy + half) / e;
            if u * u + cap * cap <= 1.0 {
                return Some(normalize([0.0, 0.9, 0.44]));
            }
            if u.abs() <= 1.0 && dy >= -half {
                let c = libm::sqrtf(1.0 - u * u);
                if dy <= half + e * c {
                    return Some([u, 0.0, c]);
                }
            }
            None
        }
        Shape::Cone => {
            let w = CONE_HALF_WIDTH * r;
            let h = CONE_HEIGHT * r;
            let apex = -h / 2.0;
            let e = CAP_RATIO * w;
            let inside = if dy >= apex && dy <= h / 2.0 {
                dx.abs() <= w * (dy - apex) / h
            } else if dy > h / 2.0 && dx.abs() <= w {
                let u = dx / w;
                dy <= h / 2.0 + e * libm::sqrtf(1.0 - u * u)
            } else {
                false
            };
            if !inside {
                return None;
            }
            let local = w * ((dy.min(h / 2.0) - apex) / h).max(1e-3);
            let u = (dx / local).clamp(-1.0, 1.0);
            let slant = libm::sqrtf(w * w + h * h);
            let (up, out) = (w / slant, h / slant);
            Some([u * out, up, libm::sqrtf(1.0 - u * u) * out])
        }
    }
}

/// Brightness multiplier and additive white highlight for a surface point.
fn shade(n: [f32; 3], light: &Light, material: Material) -> (f32, f32) {
    let l = light.direction;
    let lambert = dot(n, l).max(0.0);
    match material {
        Material::Rubber => (AMBIENT + (1.0 - AMBIENT) * light.intensity * lambert, 0.0),
        Material::Metallic => {
            let h = normalize([l[0], l[1], l[2] + 1.0]);
            let spec = libm::powf(dot(n, h).max(0.0), 24.0);
            (
                AMBIENT + 0.85 * (1.0 - AMBIENT) * light.intensity * lambert,
                0.6 * light.intensity * spec,
            )
        }
    }
}

/// Multiplicative floor darkening from the soft contact shadow.
fn shadow(spec: &SceneSpec, shape: Shape, x: f32, y: f32) -> f32 {
    let s = IMAGE_SIZE as f32;
    let r = spec.size * s;
    let [left, right, _, bottom] = extents(shape, r);
    let half = (left + right) / 2.0;
    let cx = spec.position[0] * s - spec.light.direction[0] * half * 0.6;
    let cy = spec.position[1] * s + bottom - 0.1 * half;
    let (sx, sy) = (1.25 * half, 0.35 * half);
    let d = ((x - cx) / sx) * ((x - cx) / sx) + ((y - cy) / sy) * ((y - cy) / sy);
    if d >= 1.0 {
        1.0
    } else {
        1.0 - 0.5 * (1.0 - d) * (1.0 - d)
    }
}

fn to_u8(v: f32, n: i32) -> u8 {
    (libm::roundf(v) as i32 + n).clamp(0, 255) as u8
}

/// Renders a scene and returns the object mask alongside the image.
pub fn render_with_mask(spec: &SceneSpec) -> (Image, Vec<bool>) {
    let size = IMAGE_SIZE;
    let mut img = Image::new(size, size);
    let mut mask = vec![false; size * size];
    let s = size as f32;
    let r = spec.size * s;
    let (cx, cy) = (spec.position[0] * s, spec.position[1] * s);
    let base = spec.color.rgb();
    for y in 0..size {
        for x in 0..size {
            let n = noise(spec.seed, x, y);
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let normal = spec
                .shape
                .and_then(|shape| surface_normal(shape, r, px - cx, py - cy));
            let rgb = match normal {
                Some(nrm) => {
                    mask[y * size + x] = true;
                    let (k, hl) = shade(nrm, &spec.light, spec.material);
                    let mut out = [0u8; 3];
                    for c in 0..3 {
                        out[c] = to_u8(base[c] as f32 * k + 255.0 * hl, n);
                    }
                    out
                }
                None => {
                    let f = spec.shape.map_or(1.0, |shape| shadow(spec, shape, px, py));
                    let g = to_u8(background_value(x, y) * f, n);
                    [g, g, g]
                }
            };
            img.set_pixel(x, y, rgb);
        }
    }
    (img, mask)
}

pub fn render_scene(spec: &SceneSpec) -> Image {
    render_with_mask(spec).0
}

#[cfg(test)]
mod tests {
    use super::super::Color;
    use super::*;

    #[test]
    fn extents_bound_the_mask() {
        for shape in [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone] {
            let spec = SceneSpec::centered(shape, Color::Blue, 0.3, Material::Rubber);
            let (_, mask) = render_with_mask(&spec);
            let r = 0.3 * IMAGE_SIZE as f32;
            let [l, rt, t, b] = extents(shape, r);
            let c = IMAGE_SIZE as f32 / 2.0;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if mask[y * IMAGE_SIZE + x] {
                        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                        assert!(px >= c - l && px <= c + rt, "{shape} x={x}");
                        assert!(py >= c - t && py <= c + b, "{shape} y={y}");
                    }
                }
            }
        }
    }

    #[test]
    fn noise_is_bounded() {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                assert!(noise(99, x, y).abs() <= NOISE_BOUND);
            }
        }
    }
}
