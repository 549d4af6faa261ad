use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use super::{Color, SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::nn::PAD;

/// Index of the unknown-word token.
pub const UNK: usize = 1;

/// Question templates; `{c}` is replaced by the object's color.
pub const TEMPLATES: [&str; 4] = [
    "there is a {c} object in the image ; what is it ?",
    "what shape is the {c} object ?",
    "the object in the image is {c} ; what shape is it ?",
    "which shape does the {c} object have ?",
];

/// Lowercases and splits on whitespace, with `;`, `?`, `,` and `.` as
/// standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if matches!(ch, ';' | '?' | ',' | '.') {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.extend(ch.to_lowercase());
        }
    }
    spaced.split_whitespace().map(ToString::to_string).collect()
}

/// Closed token vocabulary built from the templates and color names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<unk>"].iter().map(|s| s.to_string()).collect();
        let mut push = |w: String| {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        };
        for t in TEMPLATES {
            for w in tokenize(t) {
                if w != "{c}" {
                    push(w);
                }
            }
        }
        for c in Color::ALL {
            push(c.name().to_string());
        }
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.index(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect();
        words.join(" ")
    }
}

/// A question about a scene together with its answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub question: String,
    pub tokens: Vec<usize>,
    pub answer: Shape,
    /// Color named in the question.
    pub color: Color,
}

impl QaExample {
    pub fn answer_index(&self) -> usize {
        self.answer.answer_index().unwrap_or(0)
    }
}

/// Fills a random template with the scene's color; the answer is its shape.
pub fn generate_question<R: Rng + ?Sized>(
    spec: &SceneSpec,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<QaExample> {
    let shape = spec
        .shape
        .ok_or_else(|| Error::Invalid("cannot ask about an empty scene".into()))?;
    if shape.answer_index().is_none() {
        return Err(Error::Invalid(format!("{shape} is not in the answer set")));
    }
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let question = template.replace("{c}", spec.color.name());
    Ok(QaExample {
        tokens: vocab.encode(&question),
        question,
        answer: shape,
        color: spec.color,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Material;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenizer_separates_punctuation() {
        assert_eq!(tokenize("What is it?"), ["what", "is", "it", "?"]);
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let v = Vocabulary::default();
        assert_eq!(v.index("<pad>"), PAD);
        assert_eq!(v.index("<unk>"), UNK);
        assert_eq!(v.index("zebra"), UNK);
        assert!(v.len() <= 30);
        for t in TEMPLATES {
            for c in Color::ALL {
                let ids = v.encode(&t.replace("{c}", c.name()));
                assert!(ids.iter().all(|&i| i != UNK));
            }
        }
    }

    #[test]
    fn cone_is_rejected() {
        let spec = SceneSpec::centered(Shape::Cone, Color::Red, 0.2, Material::Rubber);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_question(&spec, &Vocabulary::default(), &mut rng).is_err());
    }
}
