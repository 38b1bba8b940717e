//! INI-style pipeline configuration: `[section]` headers and `key = value`
//! lines, parsed strictly (unknown sections/keys and bad values are errors
//! with line numbers). All stage randomness flows from the single root
//! seed in `[train]`; stage seeds are derived with the library's seed
//! splitter.

use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;
use vgan_core::augment::AugmentSpec;
use vgan_core::gan::{DiscriminatorConfig, GeneratorConfig, TrainConfig};
use vgan_core::rng::derive_seed;

/// Salt for the augmentation stage's derived seed.
pub const AUGMENT_SEED_SALT: u64 = 11;
/// Salt for phantom generation seeds.
pub const PHANTOM_SEED_SALT: u64 = 12;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value` or `[section]`")]
    MalformedLine { line: usize },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: bad value for `{key}`: {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("line {line}: key `{key}` outside any section")]
    KeyOutsideSection { line: usize, key: String },
    #[error("missing required path `{key}`: {path}")]
    MissingPath { key: &'static str, path: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataConfig {
    pub mr_dir: Option<PathBuf>,
    pub ct_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentConfig {
    pub window_lo: f32,
    pub window_hi: f32,
    pub median_radius: usize,
    pub keep_components: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        // the default window isolates soft tissue + bone in the phantom's
        // CT intensity map
        SegmentConfig {
            window_lo: -0.5,
            window_hi: 1.0,
            median_radius: 1,
            keep_components: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateConfig {
    pub landmarks: Option<PathBuf>,
    pub icp_iters: usize,
    /// Optional manual initial alignment: 9 rotation entries (row-major)
    /// followed by 3 translation components; overrides prealignment.
    pub init_transform: Option<[f64; 12]>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            landmarks: None,
            icp_iters: 100,
            init_transform: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub segment: SegmentConfig,
    pub validate: ValidateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataConfig::default(),
            augment: AugmentSpec::default(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            segment: SegmentConfig::default(),
            validate: ValidateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text)?;
        // relative paths resolve against the config file's directory
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.data.mr_dir,
                &mut cfg.data.ct_dir,
                &mut cfg.data.test_dir,
                &mut cfg.data.output_dir,
                &mut cfg.validate.landmarks,
            ] {
                if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                    *p = Some(base.join(rel));
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "augment", "train", "model", "segment", "validate"]
                    .contains(&name)
                {
                    return Err(ConfigError::UnknownSection {
                        line,
                        section: name.to_string(),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or(ConfigError::MalformedLine { line })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let section = section
                .as_deref()
                .ok_or_else(|| ConfigError::KeyOutsideSection {
                    line,
                    key: key.clone(),
                })?;
            cfg.set(section, &key, &value, line)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        match (section, key) {
            ("data", "mr_dir") => self.data.mr_dir = Some(PathBuf::from(value)),
            ("data", "ct_dir") => self.data.ct_dir = Some(PathBuf::from(value)),
            ("data", "test_dir") => self.data.test_dir = Some(PathBuf::from(value)),
            ("data", "output_dir") => self.data.output_dir = Some(PathBuf::from(value)),

            ("augment", "rotation_max_deg") => self.augment.rotation_max_deg = num!(),
            ("augment", "noise_sigma") => self.augment.noise_sigma = num!(),
            ("augment", "elastic_grid") => self.augment.elastic_grid = num!(),
            ("augment", "elastic_sigma_mm") => self.augment.elastic_sigma_mm = num!(),
            ("augment", "stretch_lo") => self.augment.stretch_pcts.0 = num!(),
            ("augment", "stretch_hi") => self.augment.stretch_pcts.1 = num!(),
            ("augment", "multiplier") => self.augment.multiplier = num!(),

            ("train", "steps") => self.train.steps = num!(),
            ("train", "batch_size") => self.train.batch_size = num!(),
            ("train", "learning_rate") => self.train.learning_rate = num!(),
            ("train", "beta1") => self.train.beta1 = num!(),
            ("train", "beta2") => self.train.beta2 = num!(),
            ("train", "lambda_cycle") => self.train.weights.lambda_cycle = num!(),
            ("train", "gamma_gc") => self.train.weights.gamma_gc = num!(),
            ("train", "seed") => self.train.seed = num!(),
            ("train", "checkpoint_every") => self.train.checkpoint_every = num!(),
            ("train", "history_buffer") => self.train.history_buffer = num!(),
            ("train", "saturating_generator_loss") => {
                self.train.saturating_generator_loss = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad()),
                }
            }

            ("model", "generator_base_channels") => self.generator.base_channels = num!(),
            ("model", "generator_res_blocks") => self.generator.n_res_blocks = num!(),
            ("model", "generator_downsamples") => self.generator.n_down = num!(),
            ("model", "discriminator_base_channels") => self.discriminator.base_channels = num!(),
            ("model", "discriminator_layers") => self.discriminator.n_layers = num!(),

            ("segment", "window_lo") => self.segment.window_lo = num!(),
            ("segment", "window_hi") => self.segment.window_hi = num!(),
            ("segment", "median_radius") => self.segment.median_radius = num!(),
            ("segment", "keep_components") => self.segment.keep_components = num!(),

            ("validate", "landmarks") => self.validate.landmarks = Some(PathBuf::from(value)),
            ("validate", "icp_iters") => self.validate.icp_iters = num!(),
            ("validate", "init_transform") => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|p| p.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                let arr: [f64; 12] = parts.try_into().map_err(|_| bad())?;
                self.validate.init_transform = Some(arr);
            }

            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    section: section.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Root seed; every stage derives its own stream from it.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }

    /// Augmentation spec with its derived stage seed filled in.
    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            seed: derive_seed(self.seed(), &[AUGMENT_SEED_SALT]),
            ..self.augment.clone()
        }
    }

    pub fn require_dir(&self, key: &'static str) -> Result<&Path, ConfigError> {
        let path = match key {
            "mr_dir" => &self.data.mr_dir,
            "ct_dir" => &self.data.ct_dir,
            "test_dir" => &self.data.test_dir,
            "output_dir" => &self.data.output_dir,
            _ => unreachable!("unknown dir key"),
        };
        match path {
            Some(p) if key == "output_dir" || p.is_dir() => Ok(p),
            Some(p) => Err(ConfigError::MissingPath {
                key,
                path: p.display().to_string(),
            }),
            None => Err(ConfigError::MissingPath {
                key,
                path: "(unset)".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "\
[data]
mr_dir = mr
ct_dir = ct
test_dir = test
output_dir = out

[augment]
rotation_max_deg = 5
noise_sigma = 0.02
multiplier = 3

[train]
steps = 100
learning_rate = 1e-3
seed = 42
lambda_cycle = 8.5

[model]
generator_base_channels = 8

[segment]
window_lo = -0.4
window_hi = 0.9
median_radius = 2
keep_components = 10

[validate]
landmarks = lm.csv
icp_iters = 50
";

    #[test]
    fn parses_all_sections() {
        let cfg = PipelineConfig::parse(FULL).unwrap();
        assert_eq!(cfg.data.mr_dir.as_deref(), Some(Path::new("mr")));
        assert_eq!(cfg.augment.rotation_max_deg, 5.0);
        assert_eq!(cfg.augment.multiplier, 3);
        assert_eq!(cfg.train.steps, 100);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.weights.lambda_cycle, 8.5);
        assert_eq!(cfg.generator.base_channels, 8);
        assert_eq!(cfg.segment.window_lo, -0.4);
        assert_eq!(cfg.segment.keep_components, 10);
        assert_eq!(cfg.validate.icp_iters, 50);
        assert_eq!(
            cfg.validate.landmarks.as_deref(),
            Some(Path::new("lm.csv"))
        );
        // defaults survive for unspecified keys
        assert_eq!(cfg.train.beta1, 0.5);
        assert_eq!(cfg.augment.elastic_grid, 8);
    }

    #[test]
    fn derived_augment_seed_changes_with_root() {
        let mut cfg = PipelineConfig::parse(FULL).unwrap();
        let s1 = cfg.augment_spec().seed;
        cfg.set_seed(43);
        let s2 = cfg.augment_spec().seed;
        assert_ne!(s1, s2);
        assert_ne!(s1, 42);
    }

    #[test]
    fn unknown_section_with_line() {
        let err = PipelineConfig::parse("[data]\nmr_dir = x\n\n[bogus]\n").unwrap_err();
        match err {
            ConfigError::UnknownSection { line, section } => {
                assert_eq!(line, 4);
                assert_eq!(section, "bogus");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn unknown_key_with_line() {
        let err = PipelineConfig::parse("[train]\nstep_count = 7\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, section, key } => {
                assert_eq!(line, 2);
                assert_eq!(section, "train");
                assert_eq!(key, "step_count");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn bad_value_with_line() {
        let err = PipelineConfig::parse("[train]\nsteps = lots\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 2, .. }));
    }

    #[test]
    fn key_outside_section() {
        let err = PipelineConfig::parse("steps = 7\n").unwrap_err();
        assert!(matches!(err, ConfigError::KeyOutsideSection { line: 1, .. }));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = PipelineConfig::parse("# top\n\n[train]\n; note\nsteps = 9\n").unwrap();
        assert_eq!(cfg.train.steps, 9);
    }

    #[test]
    fn init_transform_parses_twelve_numbers() {
        let cfg = PipelineConfig::parse(
            "[validate]\ninit_transform = 1 0 0 0 1 0 0 0 1 5 -2 0.5\n",
        )
        .unwrap();
        let t = cfg.validate.init_transform.unwrap();
        assert_eq!(t[0], 1.0);
        assert_eq!(t[9], 5.0);
        assert_eq!(t[11], 0.5);
        assert!(PipelineConfig::parse("[validate]\ninit_transform = 1 2 3\n").is_err());
    }
}
