//! SGMAGNet and the plain encoder-decoder baseline.
//!
//! SGMAGNet turns a `[B,C,H,W]` multi-channel patch into a `[B,N,D,H,W]`
//! per-voxel phase probability volume in four stages: a 2D conv encoder,
//! a learnable per-layer height embedding lifted onto the feature map, a
//! multi-scale 3D conv generator, and a softmax gating head.

mod baseline;
mod sgmagnet;
#[cfg(test)]
#[path = "tests.rs"]
mod net_tests;

pub use baseline::baseline_forward;
pub use sgmagnet::{
    encode_spatial, forward, fuse, height_features, multiscale_generate, phase_gate,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::config;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown architecture '{0}'")]
    UnknownArch(String),
    #[error(transparent)]
    Config(#[from] crate::io::IoError),
}

/// A resampling factor expressed as a rational, e.g. `1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Self {
        Scale { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("bad scale '{s}'"));
        match s.split_once('/') {
            Some((n, d)) => Ok(Scale::new(parse(n)?, parse(d)?)),
            None => Ok(Scale::new(parse(s)?, 1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Sgmagnet,
    Baseline,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Sgmagnet => write!(f, "sgmagnet"),
            Arch::Baseline => write!(f, "baseline"),
        }
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgmagnet" => Ok(Arch::Sgmagnet),
            "baseline" => Ok(Arch::Baseline),
            other => Err(ModelError::UnknownArch(other.to_string())),
        }
    }
}

/// Architecture hyperparameters.
///
/// The default input is 16 spectral channels plus the 4 auxiliary planes
/// `[lat, lon, cos_solar_zenith, night_flag]`, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub height_dim: usize,
    pub num_classes: usize,
    pub scales: Vec<Scale>,
    pub encoder_depth: usize,
    pub gen_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 20,
            embed_dim: 32,
            height_dim: 38,
            num_classes: 4,
            scales: vec![Scale::ONE, Scale::new(1, 2), Scale::new(1, 4)],
            encoder_depth: 3,
            gen_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.in_channels == 0
            || self.embed_dim == 0
            || self.height_dim == 0
            || self.gen_channels == 0
            || self.encoder_depth == 0
        {
            return bad("all dimensions must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.scales.is_empty() {
            return bad("scales must be non-empty");
        }
        if !self.scales[0].is_one() {
            return bad("first scale must be 1");
        }
        if self.scales.iter().any(|s| s.num == 0 || s.den == 0) {
            return bad("every scale must be > 0");
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("in_channels".into(), self.in_channels.to_string());
        map.insert("embed_dim".into(), self.embed_dim.to_string());
        map.insert("height_dim".into(), self.height_dim.to_string());
        map.insert("num_classes".into(), self.num_classes.to_string());
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        map.insert("scales".into(), scales.join(","));
        map.insert("encoder_depth".into(), self.encoder_depth.to_string());
        map.insert("gen_channels".into(), self.gen_channels.to_string());
        map
    }

    /// Reads the config from a parsed INI map; missing keys keep defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        if let Some(v) = config::get_parsed(map, "in_channels")? {
            cfg.in_channels = v;
        }
        if let Some(v) = config::get_parsed(map, "embed_dim")? {
            cfg.embed_dim = v;
        }
        if let Some(v) = config::get_parsed(map, "height_dim")? {
            cfg.height_dim = v;
        }
        if let Some(v) = config::get_parsed(map, "num_classes")? {
            cfg.num_classes = v;
        }
        if let Some(raw) = map.get("scales") {
            let scales: Result<Vec<Scale>, String> =
                raw.split(',').map(|s| s.trim().parse()).collect();
            cfg.scales = scales.map_err(ModelError::InvalidConfig)?;
        }
        if let Some(v) = config::get_parsed(map, "encoder_depth")? {
            cfg.encoder_depth = v;
        }
        if let Some(v) = config::get_parsed(map, "gen_channels")? {
            cfg.gen_channels = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors of a network, all with `requires_grad` set.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    map: BTreeMap<String, Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
        .expect("sampled data matches shape")
        .with_grad()
}

fn conv_init(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> (Tensor, Tensor) {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (1.0 / fan_in as f64).sqrt();
    let cout = shape[0];
    let w = uniform(rng, shape, bound);
    let b = uniform(rng, vec![cout], bound);
    (w, b)
}

impl ModelParameters {
    /// Initializes SGMAGNet parameters: weights uniform in
    /// `+/- sqrt(1/fan_in)`, drawn in a fixed named order so a seed pins
    /// every value.
    pub fn init_sgmagnet(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut map = BTreeMap::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.encoder_depth {
            let (w, b) = conv_init(rng, vec![cfg.embed_dim, cin, 3, 3]);
            map.insert(format!("enc{i}.weight"), w);
            map.insert(format!("enc{i}.bias"), b);
            cin = cfg.embed_dim;
        }
        let bound = (1.0 / cfg.embed_dim as f64).sqrt();
        map.insert(
            "height_embed".to_string(),
            uniform(rng, vec![1, cfg.height_dim, cfg.embed_dim], bound),
        );
        for (i, _) in cfg.scales.iter().enumerate() {
            let (w, b) = conv_init(rng, vec![cfg.gen_channels, cfg.embed_dim, 3, 3, 3]);
            map.insert(format!("scale{i}.weight"), w);
            map.insert(format!("scale{i}.bias"), b);
        }
        let (w, b) = conv_init(
            rng,
            vec![cfg.gen_channels, cfg.gen_channels * cfg.scales.len(), 1, 1, 1],
        );
        map.insert("fuse.weight".to_string(), w);
        map.insert("fuse.bias".to_string(), b);
        let (w, b) = conv_init(rng, vec![cfg.gen_channels, cfg.gen_channels, 3, 3, 3]);
        map.insert("gate0.weight".to_string(), w);
        map.insert("gate0.bias".to_string(), b);
        let (w, b) = conv_init(rng, vec![cfg.num_classes, cfg.gen_channels, 1, 1, 1]);
        map.insert("gate1.weight".to_string(), w);
        map.insert("gate1.bias".to_string(), b);
        Ok(ModelParameters { map })
    }

    /// Plain 2D encoder baseline: two 3x3 conv blocks and a 1x1 head that
    /// emits all `num_classes * height_dim` outputs per pixel.
    pub fn init_baseline(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut map = BTreeMap::new();
        let mut cin = cfg.in_channels;
        for i in 0..2 {
            let (w, b) = conv_init(rng, vec![cfg.embed_dim, cin, 3, 3]);
            map.insert(format!("base_enc{i}.weight"), w);
            map.insert(format!("base_enc{i}.bias"), b);
            cin = cfg.embed_dim;
        }
        let (w, b) = conv_init(
            rng,
            vec![cfg.num_classes * cfg.height_dim, cfg.embed_dim, 1, 1],
        );
        map.insert("base_head.weight".to_string(), w);
        map.insert("base_head.bias".to_string(), b);
        Ok(ModelParameters { map })
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ModelParameters { map }
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.map
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on a graph, returning name -> Var.
    pub fn register(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.map.iter().map(|(k, t)| (k.clone(), g.leaf(t))).collect()
    }
}

/// Runs the configured architecture end to end.
pub fn forward_arch(
    g: &mut Graph,
    arch: Arch,
    x: Var,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Var> {
    match arch {
        Arch::Sgmagnet => forward(g, x, vars, cfg),
        Arch::Baseline => baseline_forward(g, x, vars, cfg),
    }
}
