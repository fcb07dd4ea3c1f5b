//! Run configuration: presets, flat key=value config files, environment
//! overrides and the canonical fingerprint that ties checkpoints to the
//! settings that produced them.
//!
//! Sources apply in order: preset < config file < `DEEPGIN_*` environment
//! variables < explicit `--set key=value` overrides. Unknown keys are
//! rejected.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::critic::DiscConfig;
use crate::error::{Error, Result};
use crate::loss::{ExtractorMode, LossWeights};
use crate::model::{BlockStyle, ModelConfig};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "DEEPGIN_";

/// Everything a training or inference run needs to know.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub disc: DiscConfig,
    pub extractor: ExtractorMode,
}

impl RunSettings {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(RunSettings {
                model: ModelConfig::paper(),
                train: TrainConfig::default(),
                loss: LossWeights::default(),
                disc: DiscConfig::default(),
                extractor: ExtractorMode::Stub { seed: 1337 },
            }),
            "toy" => Ok(RunSettings {
                model: ModelConfig::toy(),
                train: TrainConfig::toy(),
                loss: LossWeights::default(),
                disc: DiscConfig::toy(),
                extractor: ExtractorMode::Stub { seed: 1337 },
            }),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (toy or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    /// Deterministic flat text rendering; the checkpoint fingerprint is the
    /// sha256 of this.
    pub fn canonical_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        let d = &self.disc;
        let rates = |r: &[usize]| {
            r.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let style = match m.blocks {
            BlockStyle::Std => "std",
            BlockStyle::Dilated => "dilated",
            BlockStyle::Spd => "spd",
        };
        let extractor = match &self.extractor {
            ExtractorMode::Stub { seed } => format!("stub:{seed}"),
            ExtractorMode::Pretrained { path } => format!("pretrained:{}", path.display()),
            ExtractorMode::Identity => "identity".into(),
        };
        format!(
            "batch_images={}\nbeta1={}\nbeta2={}\nblock_style={}\nblocks_per_stage={}\n\
             coarse_rates={}\nconst_epochs={}\nd_lr={}\nd_out_channels={}\nd_widths={}\n\
             decay_epochs={}\nextractor={}\ng1_base={}\ng2_base={}\ng_lr={}\nimage_size={}\n\
             init_scale={}\nlambda_adv={}\nlambda_hole={}\nlambda_perceptual={}\nlambda_style={}\n\
             lambda_tv={}\nleaky_slope={}\nlr_head_width={}\nmain_epochs={}\nmssa_width={}\n\
             refine_rates={}\nseed={}\nuse_bp={}\nuse_mssa={}\nuse_sa={}\nwarmup_epochs={}\n",
            t.batch_images,
            t.beta1,
            t.beta2,
            style,
            m.blocks_per_stage,
            rates(&m.coarse_rates),
            t.const_epochs,
            t.d_lr,
            d.out_channels,
            rates(&d.widths.to_vec()),
            t.decay_epochs,
            extractor,
            m.g1_base,
            m.g2_base,
            t.g_lr,
            m.image_size,
            t.init_scale,
            l.adv,
            l.hole,
            l.perceptual,
            l.style,
            l.tv,
            d.leaky_slope,
            m.lr_head_width,
            t.main_epochs,
            m.mssa_width,
            rates(&m.refine_rates),
            t.seed,
            m.use_bp,
            m.use_mssa,
            m.use_sa,
            t.warmup_epochs,
        )
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_text().as_bytes());
        hex(&h.finalize())
    }

    /// Apply one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("key {key}: '{v}' is not an integer")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("key {key}: '{v}' is not a number")))
        };
        let parse_u64 = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Config(format!("key {key}: '{v}' is not an integer")))
        };
        let parse_bool = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(Error::Config(format!("key {key}: '{v}' is not a bool"))),
        };
        let parse_rates = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("key {key}: bad rate list '{v}'")))
                })
                .collect()
        };
        match key {
            "preset" => *self = RunSettings::preset(value)?,
            "image_size" => self.model.image_size = parse_usize(value)?,
            "g1_base" => self.model.g1_base = parse_usize(value)?,
            "g2_base" => self.model.g2_base = parse_usize(value)?,
            "blocks_per_stage" => self.model.blocks_per_stage = parse_usize(value)?,
            "coarse_rates" => self.model.coarse_rates = parse_rates(value)?,
            "refine_rates" => self.model.refine_rates = parse_rates(value)?,
            "mssa_width" => self.model.mssa_width = parse_usize(value)?,
            "lr_head_width" => self.model.lr_head_width = parse_usize(value)?,
            "block_style" => {
                self.model.blocks = match value {
                    "std" => BlockStyle::Std,
                    "dilated" => BlockStyle::Dilated,
                    "spd" => BlockStyle::Spd,
                    _ => {
                        return Err(Error::Config(format!(
                            "block_style '{value}' (std, dilated or spd)"
                        )))
                    }
                }
            }
            "use_sa" => self.model.use_sa = parse_bool(value)?,
            "use_mssa" => self.model.use_mssa = parse_bool(value)?,
            "use_bp" => self.model.use_bp = parse_bool(value)?,
            "warmup_epochs" => self.train.warmup_epochs = parse_usize(value)?,
            "main_epochs" => self.train.main_epochs = parse_usize(value)?,
            "const_epochs" => self.train.const_epochs = parse_usize(value)?,
            "decay_epochs" => self.train.decay_epochs = parse_usize(value)?,
            "g_lr" => self.train.g_lr = parse_f64(value)?,
            "d_lr" => self.train.d_lr = parse_f64(value)?,
            "beta1" => self.train.beta1 = parse_f64(value)?,
            "beta2" => self.train.beta2 = parse_f64(value)?,
            "batch_images" => self.train.batch_images = parse_usize(value)?,
            "init_scale" => self.train.init_scale = parse_f64(value)?,
            "seed" => self.train.seed = parse_u64(value)?,
            "lambda_hole" => self.loss.hole = parse_f64(value)?,
            "lambda_adv" => self.loss.adv = parse_f64(value)?,
            "lambda_perceptual" => self.loss.perceptual = parse_f64(value)?,
            "lambda_style" => self.loss.style = parse_f64(value)?,
            "lambda_tv" => self.loss.tv = parse_f64(value)?,
            "d_widths" => {
                let r = parse_rates(value)?;
                if r.len() != 3 {
                    return Err(Error::Config("d_widths needs three values".into()));
                }
                self.disc.widths = [r[0], r[1], r[2]];
            }
            "d_out_channels" => self.disc.out_channels = parse_usize(value)?,
            "leaky_slope" => self.disc.leaky_slope = parse_f64(value)?,
            "extractor" => {
                self.extractor = match value {
                    "stub" => ExtractorMode::Stub { seed: 1337 },
                    "identity" => ExtractorMode::Identity,
                    other => {
                        if let Some(seed) = other.strip_prefix("stub:") {
                            ExtractorMode::Stub {
                                seed: parse_u64(seed)?,
                            }
                        } else if let Some(path) = other.strip_prefix("pretrained:") {
                            ExtractorMode::Pretrained { path: path.into() }
                        } else {
                            return Err(Error::Config(format!(
                                "extractor '{other}' (stub, stub:<seed>, identity, \
                                 pretrained:<path>, or set extractor_weights)"
                            )));
                        }
                    }
                }
            }
            "extractor_seed" => {
                self.extractor = ExtractorMode::Stub {
                    seed: parse_u64(value)?,
                }
            }
            "extractor_weights" => {
                self.extractor = ExtractorMode::Pretrained {
                    path: value.into(),
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of arbitrary bytes (checkpoints use this for their embedded
/// config text).
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

impl RunSettings {
    /// Rebuild settings from a canonical-text rendering (e.g. embedded in a
    /// checkpoint). Round-trip fidelity is verified.
    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut s = RunSettings::preset("paper")?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("bad canonical line '{line}'")));
            };
            s.set(k, v)?;
        }
        if s.canonical_text() != text {
            return Err(Error::Config(
                "canonical config text did not round-trip".into(),
            ));
        }
        Ok(s)
    }
}

/// Parse a flat `key = value` config file: one pair per line, `#` comments.
pub fn parse_config_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                ln + 1
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Known keys, checked before env lookup so unrelated DEEPGIN_* vars fail
/// loudly rather than being ignored.
const KEYS: &[&str] = &[
    "preset",
    "image_size",
    "g1_base",
    "g2_base",
    "blocks_per_stage",
    "coarse_rates",
    "refine_rates",
    "mssa_width",
    "lr_head_width",
    "block_style",
    "use_sa",
    "use_mssa",
    "use_bp",
    "warmup_epochs",
    "main_epochs",
    "const_epochs",
    "decay_epochs",
    "g_lr",
    "d_lr",
    "beta1",
    "beta2",
    "batch_images",
    "init_scale",
    "seed",
    "lambda_hole",
    "lambda_adv",
    "lambda_perceptual",
    "lambda_style",
    "lambda_tv",
    "d_widths",
    "d_out_channels",
    "leaky_slope",
    "extractor",
    "extractor_seed",
    "extractor_weights",
];

/// Resolve settings from all sources in precedence order.
pub fn resolve(
    preset: &str,
    config_file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunSettings> {
    let mut s = RunSettings::preset(preset)?;
    if let Some(path) = config_file {
        for (k, v) in parse_config_file(path)? {
            s.set(&k, &v)?;
        }
    }
    for key in KEYS {
        let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Ok(v) = std::env::var(&var) {
            s.set(key, &v)?;
        }
    }
    for (k, v) in overrides {
        s.set(k, v)?;
    }
    s.validate()?;
    Ok(s)
}
