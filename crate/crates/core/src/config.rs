//! Run configuration: a small INI dialect with strict key checking.
//!
//! A config names one of two base profiles (`desk`, a laptop-scale setup,
//! or `paper`, the full-scale setup) and overrides individual keys. Unknown
//! sections or keys are hard errors that name the offending key, so typos
//! never silently fall back to defaults. `dump` emits every effective key,
//! and `parse(dump(c)) == c` holds for any config.

use std::fmt;
use thiserror::Error;

use crate::geom::{GeometryError, ScanGeometry};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("config syntax error on line {line}: {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration section: [{0}]")]
    UnknownSection(String),
    #[error("unknown configuration key: [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("bad value for [{section}] {key}: {value:?} ({reason})")]
    BadValue { section: String, key: String, value: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorSource {
    Oracle,
    Net,
}

impl fmt::Display for PosteriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorSource::Oracle => "oracle",
            PosteriorSource::Net => "net",
        })
    }
}

/// Complete run configuration. `0` means "derive automatically" for
/// `n_detectors` (diagonal coverage rounded up to a multiple of 16) and
/// `pixel_spacing` (2 / image_size).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [geometry]
    pub image_size: usize,
    pub n_angles: usize,
    pub n_detectors: usize,
    pub pixel_spacing: f64,
    // [noise]
    pub s_ladder: Vec<f64>,
    pub epsilon: f64,
    pub k: f64,
    pub bit_depth: u32,
    // [train]
    pub profile: Profile,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub threads: usize,
    /// Flat learning rate; `0` selects the built-in warmup + decay schedule.
    pub lr: f64,
    pub preset_g1: String,
    pub preset_g2: String,
    pub bridge_channels: usize,
    pub posterior_source: PosteriorSource,
    pub posterior_steps: usize,
    pub refine_iters: usize,
    pub refine_lr: f64,
    pub phantom: String,
    pub n_ellipses_min: usize,
    pub n_ellipses_max: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub mask_threshold_hu: f64,
    pub checkpoint_every: usize,
    // [gan]
    pub lambda: f64,
    pub n_critic: usize,
    pub z_channels: usize,
    pub gan_preset_g1: String,
    pub gan_preset_g2: String,
    pub gan_steps: usize,
    pub critic_stages: usize,
    pub critic_base: usize,
    // [paths]
    pub run_dir: String,
    pub data_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Laptop-scale defaults: everything trains in minutes on CPU.
    pub fn desk() -> Self {
        RunConfig {
            image_size: 64,
            n_angles: 96,
            n_detectors: 0,
            pixel_spacing: 0.0,
            s_ladder: vec![100f64.ln(), 1000f64.ln(), 10000f64.ln()],
            epsilon: 100.0,
            k: 40.0,
            bit_depth: 8,
            profile: Profile::Desk,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            threads: 0,
            lr: 1e-3,
            preset_g1: "t16".into(),
            preset_g2: "t32".into(),
            bridge_channels: 16,
            posterior_source: PosteriorSource::Oracle,
            posterior_steps: 600,
            refine_iters: 200,
            refine_lr: 1e-4,
            phantom: "random_ellipses".into(),
            n_ellipses_min: 4,
            n_ellipses_max: 10,
            intensity_min: 0.2,
            intensity_max: 0.9,
            mask_threshold_hu: crate::data::DEFAULT_MASK_THRESHOLD_HU,
            checkpoint_every: 500,
            lambda: 0.05,
            n_critic: 5,
            z_channels: 8,
            gan_preset_g1: "t16".into(),
            gan_preset_g2: "t16".into(),
            gan_steps: 500,
            critic_stages: 4,
            critic_base: 16,
            run_dir: "runs/desk".into(),
            data_dir: String::new(),
        }
    }

    /// Full-scale defaults. Geometry is fixed at 256 pixels; training
    /// refuses this profile at any other resolution.
    pub fn paper() -> Self {
        RunConfig {
            image_size: 256,
            n_angles: 1024,
            n_detectors: 384,
            batch_size: 16,
            steps: 120_000,
            lr: 0.0,
            preset_g1: "s".into(),
            preset_g2: "l".into(),
            bridge_channels: 32,
            z_channels: 32,
            gan_preset_g1: "s".into(),
            gan_preset_g2: "s".into(),
            gan_steps: 40_000,
            critic_stages: 5,
            critic_base: 64,
            checkpoint_every: 5000,
            profile: Profile::Paper,
            run_dir: "runs/paper".into(),
            ..RunConfig::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Paper => RunConfig::paper(),
        }
    }

    /// Scan geometry with the automatic fields resolved.
    pub fn geometry(&self) -> Result<ScanGeometry, ConfigError> {
        let detectors = if self.n_detectors == 0 {
            // Full diagonal coverage, rounded up to a multiple of 16 so the
            // sinogram survives repeated 2x down/upsampling in the networks.
            let cover = (self.image_size as f64 * std::f64::consts::SQRT_2).ceil() as usize;
            cover.div_ceil(16) * 16
        } else {
            self.n_detectors
        };
        let mut g =
            ScanGeometry::with_detectors(self.image_size, self.n_angles, detectors)?;
        let spacing =
            if self.pixel_spacing == 0.0 { 2.0 / self.image_size as f64 } else { self.pixel_spacing };
        g = g.pixel_spacing(spacing)?;
        Ok(g)
    }

    /// Parses INI text over the profile base it names (defaulting to desk).
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let pairs = tokenize(text)?;
        // The profile key selects the base config, so scan for it first.
        let mut base = Profile::Desk;
        for (section, key, value, line) in &pairs {
            if section == "train" && key == "profile" {
                base = match value.as_str() {
                    "desk" => Profile::Desk,
                    "paper" => Profile::Paper,
                    other => {
                        return Err(ConfigError::BadValue {
                            section: section.clone(),
                            key: key.clone(),
                            value: other.into(),
                            reason: format!("expected desk or paper (line {line})"),
                        })
                    }
                };
            }
        }
        let mut cfg = RunConfig::for_profile(base);
        for (section, key, value, _) in &pairs {
            cfg.apply(section, key, value)?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key = value` override.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            section: section.into(),
            key: key.into(),
            value: value.into(),
            reason,
        };
        macro_rules! parse_as {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(e.to_string()))?
            };
        }
        match section {
            "geometry" => match key {
                "image_size" => self.image_size = parse_as!(usize),
                "n_angles" => self.n_angles = parse_as!(usize),
                "n_detectors" => self.n_detectors = parse_as!(usize),
                "pixel_spacing" => self.pixel_spacing = parse_as!(f64),
                _ => return Err(unknown_key(section, key)),
            },
            "noise" => match key {
                "s_ladder" => {
                    let mut ladder = Vec::new();
                    for part in value.split(',') {
                        ladder.push(
                            part.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?,
                        );
                    }
                    if ladder.is_empty() {
                        return Err(bad("ladder must not be empty".into()));
                    }
                    self.s_ladder = ladder;
                }
                "epsilon" => {
                    let v = parse_as!(f64);
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(bad("epsilon must be finite and >= 0".into()));
                    }
                    self.epsilon = v;
                }
                "k" => {
                    let v = parse_as!(f64);
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(bad("k must be finite and > 0".into()));
                    }
                    self.k = v;
                }
                "bit_depth" => {
                    let v = parse_as!(u32);
                    if !(1..=16).contains(&v) {
                        return Err(bad("bit depth must be in 1..=16".into()));
                    }
                    self.bit_depth = v;
                }
                _ => return Err(unknown_key(section, key)),
            },
            "train" => match key {
                "profile" => {} // consumed during base selection
                "batch_size" => self.batch_size = parse_as!(usize),
                "steps" => self.steps = parse_as!(usize),
                "seed" => self.seed = parse_as!(u64),
                "threads" => self.threads = parse_as!(usize),
                "lr" => {
                    let v = parse_as!(f64);
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(bad("learning rate must be finite and >= 0".into()));
                    }
                    self.lr = v;
                }
                "preset_g1" => self.preset_g1 = value.to_lowercase(),
                "preset_g2" => self.preset_g2 = value.to_lowercase(),
                "bridge_channels" => self.bridge_channels = parse_as!(usize),
                "posterior_source" => {
                    self.posterior_source = match value {
                        "oracle" => PosteriorSource::Oracle,
                        "net" => PosteriorSource::Net,
                        _ => return Err(bad("expected oracle or net".into())),
                    }
                }
                "posterior_steps" => self.posterior_steps = parse_as!(usize),
                "refine_iters" => self.refine_iters = parse_as!(usize),
                "refine_lr" => {
                    let v = parse_as!(f64);
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(bad("learning rate must be finite and > 0".into()));
                    }
                    self.refine_lr = v;
                }
                "phantom" => match value {
                    "shepp_logan" | "random_ellipses" => self.phantom = value.into(),
                    _ => return Err(bad("expected shepp_logan or random_ellipses".into())),
                },
                "n_ellipses_min" => self.n_ellipses_min = parse_as!(usize),
                "n_ellipses_max" => self.n_ellipses_max = parse_as!(usize),
                "intensity_min" => self.intensity_min = parse_as!(f64),
                "intensity_max" => self.intensity_max = parse_as!(f64),
                "mask_threshold_hu" => self.mask_threshold_hu = parse_as!(f64),
                "checkpoint_every" => self.checkpoint_every = parse_as!(usize),
                _ => return Err(unknown_key(section, key)),
            },
            "gan" => match key {
                "lambda" => self.lambda = parse_as!(f64),
                "n_critic" => {
                    let v = parse_as!(usize);
                    if v == 0 {
                        return Err(bad("n_critic must be >= 1".into()));
                    }
                    self.n_critic = v;
                }
                "z_channels" => self.z_channels = parse_as!(usize),
                "preset_g1" => self.gan_preset_g1 = value.to_lowercase(),
                "preset_g2" => self.gan_preset_g2 = value.to_lowercase(),
                "steps" => self.gan_steps = parse_as!(usize),
                "critic_stages" => self.critic_stages = parse_as!(usize),
                "critic_base" => self.critic_base = parse_as!(usize),
                _ => return Err(unknown_key(section, key)),
            },
            "paths" => match key {
                "run_dir" => self.run_dir = value.into(),
                "data_dir" => self.data_dir = value.into(),
                _ => return Err(unknown_key(section, key)),
            },
            _ => return Err(ConfigError::UnknownSection(section.into())),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override (the `--set` flag form).
    pub fn apply_dotted(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let syntax = || ConfigError::Syntax { line: 0, text: assignment.into() };
        let (path, value) = assignment.split_once('=').ok_or_else(syntax)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(syntax)?;
        self.apply(section.trim(), key.trim(), value.trim())
    }

    /// Serializes every effective key. `parse(dump(c))` reproduces `c`.
    pub fn dump(&self) -> String {
        let ladder =
            self.s_ladder.iter().map(|v| format!("{v:.17}")).collect::<Vec<_>>().join(",");
        format!(
            "[geometry]\n\
             image_size = {}\n\
             n_angles = {}\n\
             n_detectors = {}\n\
             pixel_spacing = {}\n\
             \n\
             [noise]\n\
             s_ladder = {}\n\
             epsilon = {}\n\
             k = {}\n\
             bit_depth = {}\n\
             \n\
             [train]\n\
             profile = {}\n\
             batch_size = {}\n\
             steps = {}\n\
             seed = {}\n\
             threads = {}\n\
             lr = {}\n\
             preset_g1 = {}\n\
             preset_g2 = {}\n\
             bridge_channels = {}\n\
             posterior_source = {}\n\
             posterior_steps = {}\n\
             refine_iters = {}\n\
             refine_lr = {}\n\
             phantom = {}\n\
             n_ellipses_min = {}\n\
             n_ellipses_max = {}\n\
             intensity_min = {}\n\
             intensity_max = {}\n\
             mask_threshold_hu = {}\n\
             checkpoint_every = {}\n\
             \n\
             [gan]\n\
             lambda = {}\n\
             n_critic = {}\n\
             z_channels = {}\n\
             preset_g1 = {}\n\
             preset_g2 = {}\n\
             steps = {}\n\
             critic_stages = {}\n\
             critic_base = {}\n\
             \n\
             [paths]\n\
             run_dir = {}\n\
             data_dir = {}\n",
            self.image_size,
            self.n_angles,
            self.n_detectors,
            self.pixel_spacing,
            ladder,
            self.epsilon,
            self.k,
            self.bit_depth,
            self.profile,
            self.batch_size,
            self.steps,
            self.seed,
            self.threads,
            self.lr,
            self.preset_g1,
            self.preset_g2,
            self.bridge_channels,
            self.posterior_source,
            self.posterior_steps,
            self.refine_iters,
            self.refine_lr,
            self.phantom,
            self.n_ellipses_min,
            self.n_ellipses_max,
            self.intensity_min,
            self.intensity_max,
            self.mask_threshold_hu,
            self.checkpoint_every,
            self.lambda,
            self.n_critic,
            self.z_channels,
            self.gan_preset_g1,
            self.gan_preset_g2,
            self.gan_steps,
            self.critic_stages,
            self.critic_base,
            self.run_dir,
            self.data_dir,
        )
    }
}

fn unknown_key(section: &str, key: &str) -> ConfigError {
    ConfigError::UnknownKey { section: section.into(), key: key.into() }
}

/// Splits INI text into (section, key, value, line) tuples.
fn tokenize(text: &str) -> Result<Vec<(String, String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find(['#', ';']) {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax { line: line_no, text: raw.into() })?;
            section = name.trim().to_lowercase();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: line_no, text: raw.into() })?;
        if section.is_empty() {
            return Err(ConfigError::Syntax { line: line_no, text: raw.into() });
        }
        out.push((
            section.clone(),
            key.trim().to_lowercase(),
            value.trim().to_string(),
            line_no,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_resolve_geometry() {
        let cfg = RunConfig::desk();
        let g = cfg.geometry().unwrap();
        assert_eq!(g.image_size(), 64);
        assert_eq!(g.n_angles(), 96);
        assert_eq!(g.n_detectors(), 96); // ceil(64 * sqrt(2)) = 91, up to 96
        assert!((g.spacing() - 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn parse_overrides_and_profile_base() {
        let text = "\
[train]
profile = paper
batch_size = 4

[geometry]
n_angles = 512
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.image_size, 256); // from the paper base
        assert_eq!(cfg.batch_size, 4); // overridden
        assert_eq!(cfg.n_angles, 512); // overridden
        assert_eq!(cfg.n_detectors, 384); // paper base survives
    }

    #[test]
    fn unknown_key_is_rejected_and_named() {
        let err = RunConfig::parse("[noise]\nkk = 40\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kk"), "{msg}");
        assert!(msg.contains("noise"), "{msg}");

        let err = RunConfig::parse("[nosuch]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nosuch"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("[noise]\nk = -3\n").is_err());
        assert!(RunConfig::parse("[noise]\nbit_depth = 19\n").is_err());
        assert!(RunConfig::parse("[noise]\nepsilon = nanana\n").is_err());
        assert!(RunConfig::parse("[train]\nposterior_source = psychic\n").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::desk();
        cfg.apply_dotted("noise.k = 12.5").unwrap();
        cfg.apply_dotted("gan.lambda=0.1").unwrap();
        cfg.apply_dotted("train.preset_g1=XS").unwrap();
        cfg.apply_dotted("gan.preset_g2=xxs").unwrap();
        assert_eq!(cfg.preset_g1, "xs");
        assert_eq!(cfg.gan_preset_g2, "xxs");
        let text = cfg.dump();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);

        let paper = RunConfig::paper();
        assert_eq!(RunConfig::parse(&paper.dump()).unwrap(), paper);
    }

    #[test]
    fn comments_and_whitespace_are_tolerated() {
        let text = "\
# top comment
[geometry]   ; trailing comment
image_size = 32   # inline
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.image_size, 32);
    }

    #[test]
    fn ladder_parses_as_list() {
        let cfg = RunConfig::parse("[noise]\ns_ladder = 1.0, 2.5,3\n").unwrap();
        assert_eq!(cfg.s_ladder, vec![1.0, 2.5, 3.0]);
    }
}
