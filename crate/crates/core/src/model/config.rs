use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::blocks::{DilationTag, FfnKind, GateFn};
use crate::fusion::CfmMode;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Dilation assignment across the transformer blocks of one decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DilationPolicy {
    /// Local, global, local, global, ...
    Alternating,
    Local,
    Global,
}

impl DilationPolicy {
    pub fn tag(self, block: usize) -> DilationTag {
        match self {
            DilationPolicy::Alternating if block.is_multiple_of(2) => DilationTag::Local,
            DilationPolicy::Alternating | DilationPolicy::Global => DilationTag::Global,
            DilationPolicy::Local => DilationTag::Local,
        }
    }
}

/// Network hyper-parameters. Level 1 is full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    /// Decoder transformer blocks per level.
    pub blocks: [usize; 3],
    pub heads: [usize; 3],
    /// Encoder residual blocks per level.
    pub res_blocks: usize,
    pub kernel_size: usize,
    pub dilation: DilationPolicy,
    pub leaky_slope: f64,
    pub use_bias: bool,
    pub cfm_mode: CfmMode,
    pub ffn: FfnKind,
}

impl ModelConfig {
    pub fn small() -> Self {
        Self {
            channels: [64, 128, 256],
            blocks: [4, 6, 8],
            heads: [2, 4, 8],
            res_blocks: 2,
            kernel_size: 7,
            dilation: DilationPolicy::Alternating,
            leaky_slope: 0.2,
            use_bias: true,
            cfm_mode: CfmMode::Project,
            ffn: FfnKind::Dmfn,
        }
    }

    pub fn large() -> Self {
        Self {
            blocks: [6, 12, 18],
            res_blocks: 3,
            ..Self::small()
        }
    }

    pub fn tiny() -> Self {
        Self {
            channels: [8, 16, 16],
            blocks: [2, 2, 2],
            heads: [1, 2, 2],
            res_blocks: 1,
            kernel_size: 3,
            ..Self::small()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" | "small" => Some(Self::small()),
            "l" | "large" => Some(Self::large()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        for l in 0..3 {
            let (c, n, h) = (self.channels[l], self.blocks[l], self.heads[l]);
            if c == 0 {
                return bad(format!("level {} has zero channels", l + 1));
            }
            if n % 2 == 1 {
                return bad(format!("level {} block count {n} must be even", l + 1));
            }
            if h == 0 || c % h != 0 {
                return bad(format!(
                    "level {} channels {c} not divisible by {h} heads",
                    l + 1
                ));
            }
        }
        if self.cfm_mode == CfmMode::Split && self.channels.iter().any(|c| c % 2 == 1) {
            return bad("cfm_mode = split needs even channels".into());
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        Ok(())
    }

    /// Serializes to flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize; 3]| format!("{}, {}, {}", v[0], v[1], v[2]);
        let mut s = String::new();
        let _ = writeln!(s, "channels = {}", list(&self.channels));
        let _ = writeln!(s, "blocks = {}", list(&self.blocks));
        let _ = writeln!(s, "heads = {}", list(&self.heads));
        let _ = writeln!(s, "res_blocks = {}", self.res_blocks);
        let _ = writeln!(s, "kernel_size = {}", self.kernel_size);
        let _ = writeln!(s, "dilation = {}", dilation_name(self.dilation));
        let _ = writeln!(s, "leaky_slope = {:?}", self.leaky_slope);
        let _ = writeln!(s, "use_bias = {}", self.use_bias);
        let _ = writeln!(s, "cfm_mode = {}", cfm_name(self.cfm_mode));
        let _ = writeln!(s, "ffn = {}", ffn_name(self.ffn));
        s
    }

    /// Parses `key = value` lines over the defaults of `base`. `#` starts a comment.
    pub fn parse_with(text: &str, base: Self) -> Result<Self, ConfigError> {
        let mut cfg = base;
        let mut seen = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), idx + 1) {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    reason: format!("`{key}` already set on line {prev}"),
                });
            }
            let bad = |reason: String| ConfigError::BadValue {
                key: key.to_string(),
                reason,
            };
            match key {
                "channels" => cfg.channels = triple(value).map_err(bad)?,
                "blocks" => cfg.blocks = triple(value).map_err(bad)?,
                "heads" => cfg.heads = triple(value).map_err(bad)?,
                "res_blocks" => cfg.res_blocks = scalar(value).map_err(bad)?,
                "kernel_size" => cfg.kernel_size = scalar(value).map_err(bad)?,
                "leaky_slope" => cfg.leaky_slope = scalar(value).map_err(bad)?,
                "use_bias" => cfg.use_bias = scalar(value).map_err(bad)?,
                "dilation" => {
                    cfg.dilation = match value {
                        "alternating" => DilationPolicy::Alternating,
                        "local" => DilationPolicy::Local,
                        "global" => DilationPolicy::Global,
                        _ => {
                            return Err(bad(format!(
                                "expected alternating|local|global, got `{value}`"
                            )))
                        }
                    }
                }
                "cfm_mode" => {
                    cfg.cfm_mode = match value {
                        "project" => CfmMode::Project,
                        "split" => CfmMode::Split,
                        _ => return Err(bad(format!("expected project|split, got `{value}`"))),
                    }
                }
                "ffn" => {
                    cfg.ffn = match value {
                        "dmfn" => FfnKind::Dmfn,
                        "gdfn" => FfnKind::Gdfn(GateFn::Gelu),
                        "gdfn_identity" => FfnKind::Gdfn(GateFn::Identity),
                        _ => {
                            return Err(bad(format!(
                                "expected dmfn|gdfn|gdfn_identity, got `{value}`"
                            )))
                        }
                    }
                }
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl FromStr for ModelConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with(s, Self::default())
    }
}

fn scalar<V: FromStr>(s: &str) -> Result<V, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

fn triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| scalar(p.trim()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn dilation_name(d: DilationPolicy) -> &'static str {
    match d {
        DilationPolicy::Alternating => "alternating",
        DilationPolicy::Local => "local",
        DilationPolicy::Global => "global",
    }
}

fn cfm_name(m: CfmMode) -> &'static str {
    match m {
        CfmMode::Project => "project",
        CfmMode::Split => "split",
    }
}

fn ffn_name(f: FfnKind) -> &'static str {
    match f {
        FfnKind::Dmfn => "dmfn",
        FfnKind::Gdfn(GateFn::Gelu) => "gdfn",
        FfnKind::Gdfn(GateFn::Identity) => "gdfn_identity",
    }
}
