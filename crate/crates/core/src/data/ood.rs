use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{item_seed, render_scene, Color, Image, Light, SceneSpec, Shape, IMAGE_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OodKind {
    /// Independent uniform bytes per channel.
    Noise,
    /// Object-free floor renders.
    Background,
    /// Cones, a shape never seen in training, in any color.
    Cone,
}

impl OodKind {
    pub const ALL: [OodKind; 3] = [OodKind::Noise, OodKind::Background, OodKind::Cone];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::Noise => "noise",
            OodKind::Background => "background",
            OodKind::Cone => "cone",
        }
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown OOD kind {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodSet {
    pub kind: OodKind,
    /// Scene per image; `None` for noise.
    pub specs: Vec<Option<SceneSpec>>,
    pub images: Vec<Image>,
}

pub fn generate_ood_set(kind: OodKind, n: usize, seed: u64) -> Result<OodSet> {
    if n == 0 {
        return Err(Error::Config("OOD set size must be positive".into()));
    }
    let mut specs = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, 64 + kind as u64, i as u64));
        match kind {
            OodKind::Noise => {
                let mut img = Image::new(IMAGE_SIZE, IMAGE_SIZE);
                rng.fill(img.data.as_mut_slice());
                specs.push(None);
                images.push(img);
            }
            OodKind::Background => {
                let light = Light::new(
                    [rng.random_range(-1.0..0.2), rng.random_range(0.5..0.8), 0.6],
                    rng.random_range(0.85..1.15),
                );
                let spec = SceneSpec::background(light, rng.random());
                images.push(render_scene(&spec));
                specs.push(Some(spec));
            }
            OodKind::Cone => {
                let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
                let spec = SceneSpec::random(Shape::Cone, color, &mut rng);
                images.push(render_scene(&spec));
                specs.push(Some(spec));
            }
        }
    }
    Ok(OodSet {
        kind,
        specs,
        images,
    })
}
