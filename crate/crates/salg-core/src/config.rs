//! Model configuration: structural hyperparameters, presets, and the flat
//! `key = value` config file format.

use std::fmt;
use std::path::Path;

use crate::error::{Result, SalgError};

/// How AGR tokens exchange information between regions after each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    /// Multi-head self-attention over the AGR tokens (deep interaction,
    /// extra parameters per block).
    Msa,
    /// Averaging pooling: the mean AGR vector is assigned to every region.
    Ap,
    /// No propagation (the local-only ablation).
    None,
}

impl fmt::Display for Propagation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Propagation::Msa => "msa",
            Propagation::Ap => "ap",
            Propagation::None => "none",
        })
    }
}

impl std::str::FromStr for Propagation {
    type Err = SalgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msa" => Ok(Propagation::Msa),
            "ap" => Ok(Propagation::Ap),
            "none" => Ok(Propagation::None),
            other => Err(SalgError::Config(format!("unknown propagation mode {other:?}"))),
        }
    }
}

/// Structural hyperparameters of one model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Stage-1 channel dim C; stages run at C, 2C, 4C, 8C.
    pub base_dim: usize,
    /// Transformer blocks per stage (exactly 4 stages).
    pub blocks: [usize; 4],
    /// Segmentation window side, shared by the three SALG stages.
    pub window: usize,
    /// Coverage expansion per SALG stage.
    pub pads: [usize; 3],
    pub propagation: Propagation,
    /// False switches the first three stages to regular-window partitions
    /// (the `Base*` ablation variants).
    pub segmentation: bool,
    pub num_classes: usize,
    /// Square input side in pixels; must divide by 4 for the patch embedding.
    pub input_size: usize,
}

impl ModelConfig {
    /// Super-tiny preset: C = 48, blocks {2, 2, 2, 2}.
    pub fn preset_st() -> Self {
        ModelConfig {
            base_dim: 48,
            blocks: [2, 2, 2, 2],
            window: 7,
            pads: [1, 2, 1],
            propagation: Propagation::Ap,
            segmentation: true,
            num_classes: 1000,
            input_size: 224,
        }
    }

    /// Tiny preset: C = 96, blocks {2, 2, 6, 2}.
    pub fn preset_t() -> Self {
        ModelConfig { base_dim: 96, blocks: [2, 2, 6, 2], ..Self::preset_st() }
    }

    /// Small preset: C = 96, blocks {2, 2, 18, 2}.
    pub fn preset_s() -> Self {
        ModelConfig { base_dim: 96, blocks: [2, 2, 18, 2], ..Self::preset_st() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "st" => Ok(Self::preset_st()),
            "t" => Ok(Self::preset_t()),
            "s" => Ok(Self::preset_s()),
            other => Err(SalgError::Config(format!(
                "unknown preset {other:?} (expected st, t or s)"
            ))),
        }
    }

    /// Desk-scale configuration used by gradient checks and toy training.
    pub fn micro() -> Self {
        ModelConfig {
            base_dim: 32,
            blocks: [1, 1, 1, 1],
            window: 4,
            pads: [1, 1, 1],
            propagation: Propagation::Ap,
            segmentation: true,
            num_classes: 10,
            input_size: 32,
        }
    }

    /// Channel dim of stage `i` (0-based): C * 2^i.
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.base_dim << stage
    }

    /// Token-grid side of stage `i` before padding: input / (4 * 2^i).
    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_size / (4 << stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(SalgError::Config(format!(
                "input_size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.window == 0 {
            return Err(SalgError::Config("window must be >= 1".into()));
        }
        if self.base_dim == 0 || self.base_dim % 2 != 0 {
            return Err(SalgError::Config(format!(
                "base_dim {} must be positive and even",
                self.base_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(SalgError::Config("num_classes must be >= 1".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(SalgError::Config("every stage needs at least one block".into()));
        }
        for stage in 0..4 {
            let dim = self.stage_dim(stage);
            if dim % heads_for(dim) != 0 {
                return Err(SalgError::Config(format!(
                    "stage {stage} dim {dim} not divisible by its head count"
                )));
            }
            if self.stage_side(stage) == 0 {
                return Err(SalgError::Config(format!(
                    "input_size {} leaves stage {stage} without tokens",
                    self.input_size
                )));
            }
        }
        Ok(())
    }

    /// Parses the flat `key = value` format (one pair per line, `#` comments).
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::micro();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SalgError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                SalgError::Config(format!("line {}: bad {what}: {value:?}", lineno + 1))
            };
            match key {
                "base_dim" => cfg.base_dim = value.parse().map_err(|_| bad("base_dim"))?,
                "blocks" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("blocks"))?;
                    cfg.blocks = parts
                        .try_into()
                        .map_err(|_| SalgError::Config("blocks needs exactly 4 entries".into()))?;
                }
                "window" => cfg.window = value.parse().map_err(|_| bad("window"))?,
                "pads" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("pads"))?;
                    cfg.pads = parts
                        .try_into()
                        .map_err(|_| SalgError::Config("pads needs exactly 3 entries".into()))?;
                }
                "propagation" => cfg.propagation = value.parse()?,
                "segmentation" => {
                    cfg.segmentation = match value.to_ascii_lowercase().as_str() {
                        "true" | "1" | "on" => true,
                        "false" | "0" | "off" => false,
                        _ => return Err(bad("segmentation")),
                    }
                }
                "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad("num_classes"))?,
                "input_size" => cfg.input_size = value.parse().map_err(|_| bad("input_size"))?,
                other => {
                    return Err(SalgError::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
            seen.push(key.to_string());
        }
        if seen.is_empty() {
            return Err(SalgError::Config("empty config".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_key_values(&text)
    }

    /// Renders the flat `key = value` form (parseable back).
    pub fn to_key_values(&self) -> String {
        format!(
            "base_dim = {}\nblocks = {},{},{},{}\nwindow = {}\npads = {},{},{}\n\
             propagation = {}\nsegmentation = {}\nnum_classes = {}\ninput_size = {}\n",
            self.base_dim,
            self.blocks[0],
            self.blocks[1],
            self.blocks[2],
            self.blocks[3],
            self.window,
            self.pads[0],
            self.pads[1],
            self.pads[2],
            self.propagation,
            self.segmentation,
            self.num_classes,
            self.input_size
        )
    }
}

/// Heads per attention layer: one head per 32 channels, floored, at least
/// one. When the dim divides by 32 this is exactly dim/32 (head dim 32).
pub fn heads_for(dim: usize) -> usize {
    (dim / 32).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_tables() {
        let st = ModelConfig::preset_st();
        assert_eq!((st.base_dim, st.blocks), (48, [2, 2, 2, 2]));
        let t = ModelConfig::preset_t();
        assert_eq!((t.base_dim, t.blocks), (96, [2, 2, 6, 2]));
        let s = ModelConfig::preset_s();
        assert_eq!((s.base_dim, s.blocks), (96, [2, 2, 18, 2]));
        for cfg in [st, t, s] {
            assert_eq!(cfg.window, 7);
            assert_eq!(cfg.pads, [1, 2, 1]);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn head_rule() {
        assert_eq!(heads_for(32), 1);
        assert_eq!(heads_for(48), 1);
        assert_eq!(heads_for(96), 3);
        assert_eq!(heads_for(384), 12);
        assert_eq!(heads_for(768), 24);
    }

    #[test]
    fn key_value_round_trip() {
        let cfg = ModelConfig::preset_t();
        let text = cfg.to_key_values();
        let back = ModelConfig::from_key_values(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(ModelConfig::from_key_values("").is_err());
        assert!(ModelConfig::from_key_values("base_dim 48").is_err());
        assert!(ModelConfig::from_key_values("unknown = 1").is_err());
        assert!(ModelConfig::from_key_values("blocks = 1,2,3").is_err());
        assert!(ModelConfig::from_key_values("propagation = sideways").is_err());
        // input 30 is not a multiple of 4
        assert!(ModelConfig::from_key_values("input_size = 30").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ModelConfig::from_key_values(
            "# tiny run\nbase_dim = 32 # trailing\n\ninput_size = 64\n",
        )
        .unwrap();
        assert_eq!(cfg.base_dim, 32);
        assert_eq!(cfg.input_size, 64);
    }

    #[test]
    fn stage_geometry() {
        let cfg = ModelConfig::preset_st();
        assert_eq!(cfg.stage_side(0), 56);
        assert_eq!(cfg.stage_side(1), 28);
        assert_eq!(cfg.stage_side(2), 14);
        assert_eq!(cfg.stage_side(3), 7);
        assert_eq!(cfg.stage_dim(3), 384);
    }
}
