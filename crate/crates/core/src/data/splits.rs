use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    generate_question, item_seed, render_scene, Color, Image, QaExample, SceneSpec, Shape,
    Vocabulary,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Pretrain,
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Pretrain,
        SplitKind::Train,
        SplitKind::Validation,
        SplitKind::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Pretrain => "pretrain",
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split {s}")))
    }
}

/// How shape/color combinations are divided between training and test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitScheme {
    /// Training cubes and spheres use disjoint color sets that are swapped at
    /// test time, so color alone predicts the answer during training.
    Shortcut,
    /// Spheres take any color everywhere; cube and cylinder colors are
    /// disjoint and swapped between training and test.
    SphereAnchor,
}

impl SplitScheme {
    pub fn name(self) -> &'static str {
        match self {
            SplitScheme::Shortcut => "shortcut",
            SplitScheme::SphereAnchor => "sphere-anchor",
        }
    }
}

impl FromStr for SplitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shortcut" => Ok(SplitScheme::Shortcut),
            "sphere-anchor" => Ok(SplitScheme::SphereAnchor),
            _ => Err(Error::Invalid(format!("unknown split scheme {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComboSet {
    /// Every answer shape in every color.
    All,
    /// Training combinations.
    Seen,
    /// Held-out combinations.
    Unseen,
}

const WARM: [Color; 4] = [Color::Gray, Color::Blue, Color::Brown, Color::Yellow];
const COOL: [Color; 4] = [Color::Red, Color::Green, Color::Purple, Color::Cyan];

/// Combinations grouped by shape: `(shape, allowed colors)`.
fn groups(scheme: SplitScheme, set: ComboSet) -> Vec<(Shape, Vec<Color>)> {
    let any = Color::ALL.to_vec();
    match (scheme, set) {
        (_, ComboSet::All) => Shape::ANSWERS.iter().map(|&s| (s, any.clone())).collect(),
        (SplitScheme::Shortcut, ComboSet::Seen) => {
            alloc::vec![(Shape::Sphere, COOL.to_vec()), (Shape::Cube, WARM.to_vec())]
        }
        (SplitScheme::Shortcut, ComboSet::Unseen) => {
            alloc::vec![(Shape::Sphere, WARM.to_vec()), (Shape::Cube, COOL.to_vec())]
        }
        (SplitScheme::SphereAnchor, ComboSet::Seen) => alloc::vec![
            (Shape::Sphere, any),
            (Shape::Cube, WARM.to_vec()),
            (Shape::Cylinder, COOL.to_vec())
        ],
        (SplitScheme::SphereAnchor, ComboSet::Unseen) => alloc::vec![
            (Shape::Sphere, any),
            (Shape::Cube, COOL.to_vec()),
            (Shape::Cylinder, WARM.to_vec())
        ],
    }
}

/// Flat list of the `(shape, color)` pairs in a combination set.
pub fn combo_set(scheme: SplitScheme, set: ComboSet) -> Vec<(Shape, Color)> {
    groups(scheme, set)
        .into_iter()
        .flat_map(|(s, cs)| cs.into_iter().map(move |c| (s, c)))
        .collect()
}

/// The `i`-th combination of a set, cycling over shapes first so answers
/// stay balanced, then over each shape's colors.
fn round_robin(groups: &[(Shape, Vec<Color>)], i: usize) -> (Shape, Color) {
    let (shape, colors) = &groups[i % groups.len()];
    (*shape, colors[(i / groups.len()) % colors.len()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub pretrain: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Candidates per combination in the pretraining pool before scaling.
    pub pool_per_combo: usize,
    /// Multiplies every count.
    pub scale: f64,
    pub seed: u64,
    pub scheme: SplitScheme,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            pretrain: 12000,
            train: 3600,
            validation: 800,
            test: 3600,
            pool_per_combo: 2000,
            scale: 1.0,
            seed: 0,
            scheme: SplitScheme::Shortcut,
        }
    }
}

impl SplitConfig {
    fn scaled(&self, n: usize) -> usize {
        libm::round(n as f64 * self.scale) as usize
    }

    pub fn count(&self, kind: SplitKind) -> usize {
        self.scaled(match kind {
            SplitKind::Pretrain => self.pretrain,
            SplitKind::Train => self.train,
            SplitKind::Validation => self.validation,
            SplitKind::Test => self.test,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "data.scale must be positive, got {}",
                self.scale
            )));
        }
        for k in SplitKind::ALL {
            if self.count(k) == 0 {
                return Err(Error::Config(format!(
                    "data.scale {} leaves the {k} split empty",
                    self.scale
                )));
            }
        }
        let pool = self.scaled(self.pool_per_combo) * combo_set(self.scheme, ComboSet::All).len();
        if pool < self.count(SplitKind::Pretrain) {
            return Err(Error::Config(format!(
                "pretraining pool of {pool} is smaller than the requested {}",
                self.count(SplitKind::Pretrain)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub index: usize,
    pub spec: SceneSpec,
    pub qa: Option<QaExample>,
}

impl Example {
    pub fn render(&self) -> Image {
        render_scene(&self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub examples: Vec<Example>,
}

fn make_example(
    cfg: &SplitConfig,
    kind: SplitKind,
    index: usize,
    seed_index: u64,
    combo: (Shape, Color),
    vocab: &Vocabulary,
) -> Result<Example> {
    let stream = kind.stream() + 16 * cfg.scheme as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, stream, seed_index));
    let spec = SceneSpec::random(combo.0, combo.1, &mut rng);
    let qa = match kind {
        SplitKind::Pretrain => None,
        _ => Some(generate_question(&spec, vocab, &mut rng)?),
    };
    Ok(Example { index, spec, qa })
}

/// Builds one split. Every example is a pure function of the config seed,
/// the split and its index.
pub fn generate_split(cfg: &SplitConfig, kind: SplitKind) -> Result<Split> {
    cfg.validate()?;
    let vocab = Vocabulary::default();
    let n = cfg.count(kind);
    let seen = groups(cfg.scheme, ComboSet::Seen);
    let unseen = groups(cfg.scheme, ComboSet::Unseen);
    let mut examples = Vec::with_capacity(n);
    match kind {
        SplitKind::Pretrain => {
            let all = combo_set(cfg.scheme, ComboSet::All);
            let per = cfg.scaled(cfg.pool_per_combo);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 0, 0));
            let picks = rand::seq::index::sample(&mut rng, per * all.len(), n);
            for (i, j) in picks.into_iter().enumerate() {
                examples.push(make_example(cfg, kind, i, j as u64, all[j / per], &vocab)?);
            }
        }
        SplitKind::Train => {
            for i in 0..n {
                examples.push(make_example(
                    cfg,
                    kind,
                    i,
                    i as u64,
                    round_robin(&seen, i),
                    &vocab,
                )?);
            }
        }
        SplitKind::Validation => {
            for i in 0..n {
                let set = if i % 2 == 0 { &seen } else { &unseen };
                let combo = round_robin(set, i / 2);
                examples.push(make_example(cfg, kind, i, i as u64, combo, &vocab)?);
            }
        }
        SplitKind::Test => {
            for i in 0..n {
                examples.push(make_example(
                    cfg,
                    kind,
                    i,
                    i as u64,
                    round_robin(&unseen, i),
                    &vocab,
                )?);
            }
        }
    }
    Ok(Split { kind, examples })
}

/// Pretraining, training, validation and test splits, in that order.
pub fn generate_splits(cfg: &SplitConfig) -> Result<Vec<Split>> {
    SplitKind::ALL
        .iter()
        .map(|&k| generate_split(cfg, k))
        .collect()
}
