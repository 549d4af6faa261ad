use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{Conv, GroupNorm, Linear};
use crate::error::{shape_err, Error, Result};
use crate::kv::KvMap;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Residual CNN image encoder layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Stride of the stem convolution (1 keeps full resolution).
    pub stem_stride: usize,
    /// Each stage halves resolution with 2x2 average pooling and doubles channels.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
    pub norm_groups: usize,
    pub slope: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            stem_channels: 32,
            stem_stride: 1,
            stages: 2,
            blocks_per_stage: 2,
            embed_dim: 128,
            norm_groups: 8,
            slope: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn downsample(&self) -> usize {
        self.stem_stride << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 {
            return bad("encoder.embed_dim must be positive".into());
        }
        if self.stem_stride == 0 || self.stem_channels == 0 || self.in_channels == 0 {
            return bad("encoder stem must have positive stride and channels".into());
        }
        if self.input_size == 0 || self.input_size % self.downsample() != 0 {
            return bad(format!(
                "encoder.input_size {} not divisible by total downsampling {}",
                self.input_size,
                self.downsample()
            ));
        }
        if self.norm_groups == 0 || self.stem_channels % self.norm_groups != 0 {
            return bad("encoder.norm_groups must divide encoder.stem_channels".into());
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return bad("encoder.slope must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(format!("{prefix}.input_size"), self.input_size);
        kv.set(format!("{prefix}.in_channels"), self.in_channels);
        kv.set(format!("{prefix}.stem_channels"), self.stem_channels);
        kv.set(format!("{prefix}.stem_stride"), self.stem_stride);
        kv.set(format!("{prefix}.stages"), self.stages);
        kv.set(format!("{prefix}.blocks_per_stage"), self.blocks_per_stage);
        kv.set(format!("{prefix}.embed_dim"), self.embed_dim);
        kv.set(format!("{prefix}.norm_groups"), self.norm_groups);
        kv.set(format!("{prefix}.slope"), self.slope);
    }

    pub fn read_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        let c = Self {
            input_size: kv.get(&format!("{prefix}.input_size"))?,
            in_channels: kv.get(&format!("{prefix}.in_channels"))?,
            stem_channels: kv.get(&format!("{prefix}.stem_channels"))?,
            stem_stride: kv.get(&format!("{prefix}.stem_stride"))?,
            stages: kv.get(&format!("{prefix}.stages"))?,
            blocks_per_stage: kv.get(&format!("{prefix}.blocks_per_stage"))?,
            embed_dim: kv.get(&format!("{prefix}.embed_dim"))?,
            norm_groups: kv.get(&format!("{prefix}.norm_groups"))?,
            slope: kv.get(&format!("{prefix}.slope"))?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Pre-activation residual block: `x + conv(act(gn(conv(act(gn(x))))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn forward<T: Scalar>(&self, t: &mut Tape<T>, x: Var, slope: T) -> Result<Var> {
        let h = self.norm1.forward(t, x)?;
        let h = t.leaky_relu(h, slope)?;
        let h = self.conv1.forward(t, h)?;
        let h = self.norm2.forward(t, h)?;
        let h = t.leaky_relu(h, slope)?;
        let h = self.conv2.forward(t, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(t, x)?,
            None => x,
        };
        t.add(skip, h)
    }
}

/// `f_I`: images `[N, C, S, S]` in `[-1, 1]` to embeddings `[N, d]`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    stem: Conv,
    stem_norm: GroupNorm,
    stages: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    fc: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let gain = 2.0 / (1.0 + cfg.slope * cfg.slope);
        let stem = Conv::new(
            store,
            &format!("{prefix}.stem"),
            cfg.in_channels,
            cfg.stem_channels,
            3,
            cfg.stem_stride,
            rng,
            gain,
        );
        let stem_norm = GroupNorm::new(store, &format!("{prefix}.stem_norm"), cfg.stem_channels, g);
        let mut ch = cfg.stem_channels;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let out = cfg.stem_channels << s;
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let name = format!("{prefix}.stage{s}.block{b}");
                let shortcut = (ch != out).then(|| {
                    Conv::new(store, &format!("{name}.shortcut"), ch, out, 1, 1, rng, 1.0)
                });
                blocks.push(ResBlock {
                    norm1: GroupNorm::new(store, &format!("{name}.norm1"), ch, g),
                    conv1: Conv::new(store, &format!("{name}.conv1"), ch, out, 3, 1, rng, gain),
                    norm2: GroupNorm::new(store, &format!("{name}.norm2"), out, g),
                    // Residual branches start small so the identity path dominates.
                    conv2: Conv::new(
                        store,
                        &format!("{name}.conv2"),
                        out,
                        out,
                        3,
                        1,
                        rng,
                        gain * 0.25,
                    ),
                    shortcut,
                });
                ch = out;
            }
            stages.push(blocks);
        }
        let out_norm = GroupNorm::new(store, &format!("{prefix}.out_norm"), ch, g);
        let fc = Linear::new(store, &format!("{prefix}.fc"), ch, cfg.embed_dim, rng, 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            stages,
            out_norm,
            fc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != self.cfg.in_channels || shape[2] != s || shape[3] != s {
            return Err(shape_err(
                "encode_image",
                shape,
                &[0, self.cfg.in_channels, s, s],
            ));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(t.shape(x))?;
        let slope = <T as Scalar>::from_f32(self.cfg.slope);
        let mut h = self.stem.forward(t, x)?;
        h = self.stem_norm.forward(t, h)?;
        h = t.leaky_relu(h, slope)?;
        for blocks in &self.stages {
            h = t.avg_pool2d(h, 2)?;
            for b in blocks {
                h = b.forward(t, h, slope)?;
            }
        }
        h = self.out_norm.forward(t, h)?;
        h = t.leaky_relu(h, slope)?;
        let s = t.shape(h).to_vec();
        let flat = t.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = t.mean_axis(flat, 2)?;
        self.fc.forward(t, pooled)
    }

    /// Embeddings for a batch without recording gradients.
    pub fn encode(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        super::eval_with(store, |t| {
            let x = t.constant(images.clone());
            self.forward(t, x)
        })
    }
}
