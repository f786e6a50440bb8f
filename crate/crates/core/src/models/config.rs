//! Model hyperparameters and their `key = value` file form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::diffusion::GuidanceMode;
use crate::error::{format_err, invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalCondition {
    None,
    Text,
    Pq,
}

impl GlobalCondition {
    pub fn name(self) -> &'static str {
        match self {
            GlobalCondition::None => "none",
            GlobalCondition::Text => "text",
            GlobalCondition::Pq => "pq",
        }
    }
}

impl FromStr for GlobalCondition {
    type Err = crate::error::CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GlobalCondition::None),
            "text" => Ok(GlobalCondition::Text),
            "pq" => Ok(GlobalCondition::Pq),
            other => invalid(format!("unknown global condition `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSubset {
    All,
    LinearOnly,
}

impl TrainableSubset {
    pub fn name(self) -> &'static str {
        match self {
            TrainableSubset::All => "all",
            TrainableSubset::LinearOnly => "linear_only",
        }
    }
}

impl FromStr for TrainableSubset {
    type Err = crate::error::CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainableSubset::All),
            "linear_only" => Ok(TrainableSubset::LinearOnly),
            other => invalid(format!("unknown trainable subset `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub widths: [usize; 3],
    pub patch: usize,
    pub attn_dim: usize,
    pub norm_groups: usize,
    pub he_width: usize,
    pub he_blocks: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub steps: usize,
    pub lambda_s: f64,
    pub guidance: GuidanceMode,
    pub drop_p: f64,
    pub ae_enabled: bool,
    pub ae_channels: usize,
    pub local_cond: bool,
    pub global: GlobalCondition,
    pub pq_m: usize,
    pub pq_size: usize,
    pub trainable: TrainableSubset,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            grid_h: 4,
            grid_w: 4,
            codebook_size: 256,
            code_dim: 32,
            widths: [64, 128, 128],
            patch: 4,
            attn_dim: 64,
            norm_groups: 8,
            he_width: 32,
            he_blocks: 9,
            text_dim: 64,
            max_tokens: 32,
            vocab_size: 4096,
            steps: 50,
            lambda_s: 3.0,
            guidance: GuidanceMode::TextOnly,
            drop_p: 0.1,
            ae_enabled: false,
            ae_channels: 4,
            local_cond: true,
            global: GlobalCondition::Text,
            pq_m: 16,
            pq_size: 1024,
            trainable: TrainableSubset::All,
        }
    }
}

pub const AE_FACTOR: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

impl ModelConfig {
    /// A few-thousand-parameter model on 16×16 images for smoke tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            grid_h: 2,
            grid_w: 2,
            codebook_size: 64,
            code_dim: 8,
            widths: [8, 16, 16],
            patch: 2,
            attn_dim: 8,
            norm_groups: 4,
            he_width: 8,
            he_blocks: 2,
            text_dim: 8,
            max_tokens: 8,
            vocab_size: 64,
            steps: 10,
            ..ModelConfig::default()
        }
    }

    /// Channels and side of the space the diffusion model works in.
    pub fn latent_shape(&self) -> (usize, usize) {
        if self.ae_enabled {
            (self.ae_channels, self.image_size / AE_FACTOR)
        } else {
            (IMAGE_CHANNELS, self.image_size)
        }
    }

    /// Bits per pixel of the spatial stream.
    pub fn spatial_bpp(&self) -> f64 {
        crate::bitstream::bpp_spatial(self.grid_h, self.grid_w, self.codebook_size, self.image_size, self.image_size)
    }

    /// Sampling steps used when none are requested: 20 below 0.05 bpp, 5 above.
    pub fn default_decode_steps(&self) -> usize {
        if self.spatial_bpp() < 0.05 {
            20
        } else {
            5
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (_, side) = self.latent_shape();
        if self.ae_enabled && self.image_size % AE_FACTOR != 0 {
            return invalid(format!("image size {} not divisible by the autoencoder factor", self.image_size));
        }
        if self.grid_h == 0 || self.grid_w == 0 || side % self.grid_h != 0 || side % self.grid_w != 0 {
            return invalid(format!("grid {}×{} does not divide latent side {side}", self.grid_h, self.grid_w));
        }
        if self.grid_h != self.grid_w {
            return invalid("only square grids are supported");
        }
        let f = side / self.grid_h;
        if !f.is_power_of_two() {
            return invalid(format!("downsampling factor {f} is not a power of two"));
        }
        if self.patch == 0 || side % (self.patch * 4) != 0 {
            return invalid(format!("patch {} leaves no room for two downsamplings of side {side}", self.patch));
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            return invalid("codebook needs at least 2 codes of positive dimension");
        }
        if self.steps < 2 || !(0.0..=1.0).contains(&self.drop_p) || self.lambda_s < 0.0 {
            return invalid("steps ≥ 2, drop_p ∈ [0, 1] and lambda_s ≥ 0 are required");
        }
        if self.widths.iter().any(|&w| w == 0) || self.attn_dim == 0 || self.text_dim == 0 || self.he_width == 0 {
            return invalid("all widths must be positive");
        }
        if self.global == GlobalCondition::Pq {
            if !self.ae_enabled {
                return invalid("the pq global condition uses autoencoder features");
            }
            if PQ_FEATURE_DIM % self.pq_m != 0 {
                return invalid(format!("pq_m {} does not divide {PQ_FEATURE_DIM}", self.pq_m));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("widths", self.widths.map(|w| w.to_string()).join(",")),
            ("patch", self.patch.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("norm_groups", self.norm_groups.to_string()),
            ("he_width", self.he_width.to_string()),
            ("he_blocks", self.he_blocks.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lambda_s", self.lambda_s.to_string()),
            ("guidance", self.guidance.name().to_string()),
            ("drop_p", self.drop_p.to_string()),
            ("ae_enabled", self.ae_enabled.to_string()),
            ("ae_channels", self.ae_channels.to_string()),
            ("local_cond", self.local_cond.to_string()),
            ("global", self.global.name().to_string()),
            ("pq_m", self.pq_m.to_string()),
            ("pq_size", self.pq_size.to_string()),
            ("trainable", self.trainable.name().to_string()),
        ]
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<X: FromStr>(key: &str, v: &str) -> Result<X> {
            v.parse().or_else(|_| format_err("config", format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "grid_h" => self.grid_h = num(key, value)?,
            "grid_w" => self.grid_w = num(key, value)?,
            "grid" => {
                let g = num(key, value)?;
                self.grid_h = g;
                self.grid_w = g;
            }
            "codebook_size" => self.codebook_size = num(key, value)?,
            "code_dim" => self.code_dim = num(key, value)?,
            "widths" => {
                let ws: Vec<usize> = value.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?;
                self.widths = ws
                    .try_into()
                    .or_else(|_| format_err("config", "`widths` takes exactly three values"))?;
            }
            "patch" => self.patch = num(key, value)?,
            "attn_dim" => self.attn_dim = num(key, value)?,
            "norm_groups" => self.norm_groups = num(key, value)?,
            "he_width" => self.he_width = num(key, value)?,
            "he_blocks" => self.he_blocks = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "max_tokens" => self.max_tokens = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lambda_s" => self.lambda_s = num(key, value)?,
            "guidance" => self.guidance = value.parse()?,
            "drop_p" => self.drop_p = num(key, value)?,
            "ae_enabled" => self.ae_enabled = num(key, value)?,
            "ae_channels" => self.ae_channels = num(key, value)?,
            "local_cond" => self.local_cond = num(key, value)?,
            "global" => self.global = value.parse()?,
            "pq_m" => self.pq_m = num(key, value)?,
            "pq_size" => self.pq_size = num(key, value)?,
            "trainable" => self.trainable = value.parse()?,
            other => return format_err("config", format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parse and validate `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = match line.split_once('=') {
                Some(kv) => kv,
                None => return format_err("config", format!("line {}: expected `key = value`", n + 1)),
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Width of the pooled autoencoder features used as the global embedding.
pub const PQ_FEATURE_DIM: usize = 64;
