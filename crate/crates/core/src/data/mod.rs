//! Procedural single-object scenes, compositional splits, templated
//! questions and out-of-distribution image sets.

mod image;
mod ood;
mod question;
mod render;
mod splits;

pub use image::{center_crop_resize, Image};
pub use ood::{generate_ood_set, OodKind, OodSet};
pub use question::{generate_question, tokenize, QaExample, Vocabulary, TEMPLATES, UNK};
pub use render::{background_value, render_scene, render_with_mask, NOISE_BOUND, RENDERER_VERSION};
pub use splits::{
    combo_set, generate_split, generate_splits, ComboSet, Example, Split, SplitConfig, SplitKind,
    SplitScheme,
};

use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Side length of every rendered image.
pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl Shape {
    /// Shapes that appear in the question-answering splits, in answer order.
    pub const ANSWERS: [Shape; 3] = [Shape::Sphere, Shape::Cube, Shape::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
        }
    }

    /// Index in the answer set, `None` for cones.
    pub fn answer_index(self) -> Option<usize> {
        Self::ANSWERS.iter().position(|&s| s == self)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown shape {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Gray,
    Red,
    Blue,
    Green,
    Brown,
    Purple,
    Cyan,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Gray,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Cyan,
        Color::Yellow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Gray => "gray",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Brown => "brown",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Gray => [87, 87, 87],
            Color::Red => [173, 35, 35],
            Color::Blue => [42, 75, 215],
            Color::Green => [29, 105, 20],
            Color::Brown => [129, 74, 25],
            Color::Purple => [129, 38, 192],
            Color::Cyan => [41, 208, 208],
            Color::Yellow => [255, 238, 51],
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Color {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown color {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Material {
    Rubber,
    Metallic,
}

impl Material {
    pub fn name(self) -> &'static str {
        match self {
            Material::Rubber => "rubber",
            Material::Metallic => "metallic",
        }
    }
}

impl fmt::Display for Material {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Material {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rubber" => Ok(Material::Rubber),
            "metallic" => Ok(Material::Metallic),
            _ => Err(Error::Invalid(alloc::format!("unknown material {s}"))),
        }
    }
}

/// Directional light. `direction` points from the surface toward the light
/// in camera space (x right, y up, z toward the viewer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Light {
    pub direction: [f32; 3],
    pub intensity: f32,
}

impl Default for Light {
    fn default() -> Self {
        Self::new([-0.45, 0.65, 0.6], 1.0)
    }
}

impl Light {
    pub fn new(dir: [f32; 3], intensity: f32) -> Self {
        let n = libm::sqrtf(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).max(1e-6);
        Self {
            direction: [dir[0] / n, dir[1] / n, dir[2] / n],
            intensity,
        }
    }
}

pub const MIN_SIZE: f32 = 0.15;
pub const MAX_SIZE: f32 = 0.35;

/// One object (or none, for background-only renders) on a gray floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: Option<Shape>,
    pub color: Color,
    /// Radius as a fraction of image width.
    pub size: f32,
    /// Object center as fractions of image width and height.
    pub position: [f32; 2],
    pub material: Material,
    pub light: Light,
    pub seed: u64,
}

impl SceneSpec {
    /// Centered object with default lighting.
    pub fn centered(shape: Shape, color: Color, size: f32, material: Material) -> Self {
        Self {
            shape: Some(shape),
            color,
            size,
            position: [0.5, 0.5],
            material,
            light: Light::default(),
            seed: 0,
        }
    }

    pub fn background(light: Light, seed: u64) -> Self {
        Self {
            shape: None,
            color: Color::Gray,
            size: 0.0,
            position: [0.5, 0.5],
            material: Material::Rubber,
            light,
            seed,
        }
    }

    /// Samples size, position, material and lighting for the given object.
    pub fn random<R: Rng + ?Sized>(shape: Shape, color: Color, rng: &mut R) -> Self {
        let size = rng.random_range(MIN_SIZE..=MAX_SIZE);
        let material = if rng.random_bool(0.5) {
            Material::Metallic
        } else {
            Material::Rubber
        };
        let r = size * IMAGE_SIZE as f32;
        let [left, right, top, bottom] = render::extents(shape, r);
        let s = IMAGE_SIZE as f32;
        let cx = rng.random_range(left + 1.0..=s - 1.0 - right);
        let cy = rng.random_range(top + 1.0..=s - 1.0 - bottom);
        let azimuth = rng.random_range(-0.6f32..0.6);
        let light = Light::new(
            [
                -0.45 + azimuth,
                rng.random_range(0.5..0.8),
                rng.random_range(0.45..0.75),
            ],
            rng.random_range(0.85..1.15),
        );
        Self {
            shape: Some(shape),
            color,
            size,
            position: [cx / s, cy / s],
            material,
            light,
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(shape) = self.shape {
            if !(MIN_SIZE..=MAX_SIZE).contains(&self.size) {
                return Err(Error::Invalid(alloc::format!(
                    "object size {} out of range",
                    self.size
                )));
            }
            let s = IMAGE_SIZE as f32;
            let r = self.size * s;
            let [l, rt, t, b] = render::extents(shape, r);
            let (cx, cy) = (self.position[0] * s, self.position[1] * s);
            if cx - l < 0.0 || cx + rt > s || cy - t < 0.0 || cy + b > s {
                return Err(Error::Invalid("object not fully inside the frame".into()));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; used to derive independent per-item seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stream `stream` under a global seed.
pub fn item_seed(global: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(global) ^ stream) ^ index)
}
