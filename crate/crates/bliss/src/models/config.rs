//! Model shape configuration and its sidecar manifest format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{BlissError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Proxy,
    Target,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Proxy => "proxy",
            ModelFamily::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "proxy" => Ok(ModelFamily::Proxy),
            "target" => Ok(ModelFamily::Target),
            other => Err(BlissError::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// Decoder shape. The feed-forward width is fixed at 2 * d_model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub family: ModelFamily,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(BlissError::Config("vocab_size must be >= 2".into()));
        }
        if self.seq_len < 2 {
            return Err(BlissError::Config("seq_len must be >= 2".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(BlissError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(BlissError::Config("n_layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.d_model
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "family = {}", self.family.as_str());
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut vocab_size = None;
        let mut seq_len = None;
        let mut d_model = None;
        let mut n_layers = None;
        let mut n_heads = None;
        let mut family = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| BlissError::Format {
                path: path.display().to_string(),
                detail: format!("bad manifest line '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = |v: &str| {
                v.parse::<usize>().map_err(|_| BlissError::Format {
                    path: path.display().to_string(),
                    detail: format!("bad value for {key}: '{v}'"),
                })
            };
            match key {
                "vocab_size" => vocab_size = Some(parse_usize(value)?),
                "seq_len" => seq_len = Some(parse_usize(value)?),
                "d_model" => d_model = Some(parse_usize(value)?),
                "n_layers" => n_layers = Some(parse_usize(value)?),
                "n_heads" => n_heads = Some(parse_usize(value)?),
                "family" => family = Some(ModelFamily::parse(value)?),
                other => {
                    return Err(BlissError::Format {
                        path: path.display().to_string(),
                        detail: format!("unknown manifest key '{other}'"),
                    })
                }
            }
        }
        let missing = |k: &str| BlissError::Format {
            path: path.display().to_string(),
            detail: format!("missing manifest key '{k}'"),
        };
        let cfg = ModelConfig {
            vocab_size: vocab_size.ok_or_else(|| missing("vocab_size"))?,
            seq_len: seq_len.ok_or_else(|| missing("seq_len"))?,
            d_model: d_model.ok_or_else(|| missing("d_model"))?,
            n_layers: n_layers.ok_or_else(|| missing("n_layers"))?,
            n_heads: n_heads.ok_or_else(|| missing("n_heads"))?,
            family: family.ok_or_else(|| missing("family"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
