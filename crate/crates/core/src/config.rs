//! Flat `key: value` configuration files and the model configuration record.
//!
//! A config file holds one `key: value` pair per line with dotted keys
//! (`decoder.depth: 4`). Blank lines and lines starting with `#` are ignored.
//! Every key must be consumed by some section; leftovers are reported as
//! unknown keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cells::{CellKind, ResidualMode};
use crate::error::{Error, Result};

/// Parsed key/value pairs with consumption tracking.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    source: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, source: impl Into<PathBuf>) -> Result<Self> {
        let source = source.into();
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.clone(),
                line: idx + 1,
                msg,
            };
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `key: value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(key.to_string(), (idx + 1, value.to_string())).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(KeyValues { source, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    /// Remove and parse `key`, if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| Error::Parse {
                path: self.source.clone(),
                line,
                msg: format!("bad value `{raw}` for `{key}`: {e}"),
            }),
        }
    }

    pub fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Remove `key` and split its value on commas.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: fmt::Display,
    {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: V::Err| Error::Parse {
                    path: self.source.clone(),
                    line: 0,
                    msg: format!("bad list item `{s}` for `{key}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Insert or replace `key`, keeping the original line number if present.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let line = self.entries.get(key).map_or(0, |(l, _)| *l);
        self.entries.insert(key.to_string(), (line, value.into()));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Fail if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                path: self.source,
                line,
                msg: format!("unknown key `{key}`"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Uni,
    Bidi,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Uni => "uni",
            Direction::Bidi => "bidi",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(Direction::Uni),
            "bidi" => Ok(Direction::Bidi),
            other => Err(Error::Config(format!("unknown encoder direction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionType {
    /// `<W1 h, W2 s>`
    Mul,
    /// `<v, tanh(W1 h + W2 s)>`
    Add,
    /// No attention; the decoder starts from the final encoder state.
    NoneState,
    /// No attention; the final encoder state is appended to every decoder input.
    NoneInput,
}

impl AttentionType {
    pub fn uses_attention(self) -> bool {
        matches!(self, AttentionType::Mul | AttentionType::Add)
    }
}

impl fmt::Display for AttentionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionType::Mul => "mul",
            AttentionType::Add => "add",
            AttentionType::NoneState => "none-state",
            AttentionType::NoneInput => "none-input",
        })
    }
}

impl FromStr for AttentionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(AttentionType::Mul),
            "add" => Ok(AttentionType::Add),
            "none-state" => Ok(AttentionType::NoneState),
            "none-input" => Ok(AttentionType::NoneInput),
            other => Err(Error::Config(format!("unknown attention type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub direction: Direction,
    /// Total layer count; a bidirectional encoder splits it evenly between
    /// the two directions.
    pub depth: usize,
    pub reverse_source: bool,
    pub cell: CellKind,
    pub residual: ResidualMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub cell: CellKind,
    pub residual: ResidualMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionType,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub units: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub attention: AttentionConfig,
    pub dropout: f64,
    pub forget_bias: f64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    /// The baseline: 512-unit GRUs, a bidirectional encoder with one layer per
    /// direction, a 2-layer decoder, multiplicative attention and input
    /// dropout 0.2.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 37_000,
            embedding_dim: 512,
            units: 512,
            encoder: EncoderConfig {
                direction: Direction::Bidi,
                depth: 2,
                reverse_source: false,
                cell: CellKind::Gru,
                residual: ResidualMode::None,
            },
            decoder: DecoderConfig {
                depth: 2,
                cell: CellKind::Gru,
                residual: ResidualMode::None,
            },
            attention: AttentionConfig {
                kind: AttentionType::Mul,
                dim: 512,
            },
            dropout: 0.2,
            forget_bias: 1.0,
            init_scale: crate::tensor::DEFAULT_INIT_SCALE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= crate::vocab::RESERVED {
            return fail(format!("vocab.size must exceed {} reserved ids", crate::vocab::RESERVED));
        }
        if self.embedding_dim == 0 || self.units == 0 {
            return fail("embedding.dim and model.units must be positive".into());
        }
        if self.encoder.depth == 0 || self.decoder.depth == 0 {
            return fail("encoder.depth and decoder.depth must be positive".into());
        }
        if self.encoder.direction == Direction::Bidi && self.encoder.depth % 2 != 0 {
            return fail(format!(
                "a bidirectional encoder needs an even total depth, got {}",
                self.encoder.depth
            ));
        }
        if self.attention.kind.uses_attention() && self.attention.dim == 0 {
            return fail("attention.dim must be positive for mul/add attention".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidDropout(self.dropout));
        }
        if !(self.init_scale > 0.0) {
            return fail("model.init_scale must be positive".into());
        }
        Ok(())
    }

    /// Width of one encoder annotation vector.
    pub fn state_dim(&self) -> usize {
        match self.encoder.direction {
            Direction::Uni => self.units,
            Direction::Bidi => 2 * self.units,
        }
    }

    /// Layers per encoder direction.
    pub fn encoder_layers_per_direction(&self) -> usize {
        match self.encoder.direction {
            Direction::Uni => self.encoder.depth,
            Direction::Bidi => self.encoder.depth / 2,
        }
    }

    /// Width of the extra decoder input appended to the target embedding.
    pub fn decoder_feed_dim(&self) -> usize {
        match self.attention.kind {
            AttentionType::Mul | AttentionType::Add | AttentionType::NoneInput => self.state_dim(),
            AttentionType::NoneState => 0,
        }
    }

    /// Whether none-state attention needs a learned map from the encoder
    /// summary to the decoder width.
    pub fn needs_bridge(&self) -> bool {
        self.attention.kind == AttentionType::NoneState && self.state_dim() != self.units
    }

    /// Read model keys out of `kv`, starting from `self`.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        self.vocab_size = kv.take_or("vocab.size", self.vocab_size)?;
        self.embedding_dim = kv.take_or("embedding.dim", self.embedding_dim)?;
        self.units = kv.take_or("model.units", self.units)?;
        self.dropout = kv.take_or("model.dropout", self.dropout)?;
        self.forget_bias = kv.take_or("model.forget_bias", self.forget_bias)?;
        self.init_scale = kv.take_or("model.init_scale", self.init_scale)?;
        self.encoder.direction = kv.take_or("encoder.direction", self.encoder.direction)?;
        self.encoder.depth = kv.take_or("encoder.depth", self.encoder.depth)?;
        self.encoder.reverse_source = kv.take_or("encoder.reverse", self.encoder.reverse_source)?;
        self.encoder.cell = kv.take_or("encoder.cell", self.encoder.cell)?;
        self.encoder.residual = kv.take_or("encoder.residual", self.encoder.residual)?;
        self.decoder.depth = kv.take_or("decoder.depth", self.decoder.depth)?;
        self.decoder.cell = kv.take_or("decoder.cell", self.decoder.cell)?;
        self.decoder.residual = kv.take_or("decoder.residual", self.decoder.residual)?;
        self.attention.kind = kv.take_or("attention.type", self.attention.kind)?;
        self.attention.dim = kv.take_or("attention.dim", self.attention.dim)?;
        Ok(())
    }

    /// Canonical `key: value` rendering; parsing it back gives an equal config.
    pub fn render(&self) -> String {
        let pairs: [(&str, String); 16] = [
            ("vocab.size", self.vocab_size.to_string()),
            ("embedding.dim", self.embedding_dim.to_string()),
            ("model.units", self.units.to_string()),
            ("model.dropout", self.dropout.to_string()),
            ("model.forget_bias", self.forget_bias.to_string()),
            ("model.init_scale", self.init_scale.to_string()),
            ("encoder.direction", self.encoder.direction.to_string()),
            ("encoder.depth", self.encoder.depth.to_string()),
            ("encoder.reverse", self.encoder.reverse_source.to_string()),
            ("encoder.cell", self.encoder.cell.to_string()),
            ("encoder.residual", self.encoder.residual.to_string()),
            ("decoder.depth", self.decoder.depth.to_string()),
            ("decoder.cell", self.decoder.cell.to_string()),
            ("decoder.residual", self.decoder.residual.to_string()),
            ("attention.type", self.attention.kind.to_string()),
            ("attention.dim", self.attention.dim.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    /// SHA-256 of the canonical rendering.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }
}
