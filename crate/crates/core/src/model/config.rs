use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// `key = value` lines; `#` starts a comment. Later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ModelError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().trim_matches('"').to_string());
    }
    Ok(out)
}

/// Parses `map[key]` if present.
pub fn kv_get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, ModelError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| ModelError::Config(format!("bad value for {key}: {v}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub k: usize,
    pub max_layers: usize,
    pub n_heads: usize,
    /// One decoder layer reused at every depth.
    pub layer_shared: bool,
    pub encoder_depth: usize,
    pub seed: u64,
    /// Add sinusoidal positions to token embeddings.
    pub positional: bool,
    /// Reserve an extra operand class for `None` rows.
    pub operand_pad: bool,
    /// Transformer feed-forward width as a multiple of `d`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            k: 6,
            max_layers: 8,
            n_heads: 4,
            layer_shared: false,
            encoder_depth: 2,
            seed: 0,
            positional: true,
            operand_pad: false,
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 10] = [
        "d",
        "k",
        "max_layers",
        "n_heads",
        "layer_shared",
        "encoder_depth",
        "seed",
        "positional",
        "operand_pad",
        "ffn_mult",
    ];

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d == 0 || self.k == 0 || self.ffn_mult == 0 {
            return bad("d, k and ffn_mult must be positive");
        }
        if self.max_layers == 0 {
            return bad("max_layers must be at least 1");
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad("d must be divisible by n_heads");
        }
        Ok(())
    }

    /// Defaults overridden by whichever model keys appear in `map`.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let mut c = ModelConfig::default();
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv_get(map, stringify!($f))? {
                    c.$f = v;
                }
            )*};
        }
        take!(d, k, max_layers, n_heads, layer_shared, encoder_depth, seed, positional, operand_pad, ffn_mult);
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "max_layers = {}", self.max_layers);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "layer_shared = {}", self.layer_shared);
        let _ = writeln!(s, "encoder_depth = {}", self.encoder_depth);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "positional = {}", self.positional);
        let _ = writeln!(s, "operand_pad = {}", self.operand_pad);
        let _ = writeln!(s, "ffn_mult = {}", self.ffn_mult);
        s
    }
}
