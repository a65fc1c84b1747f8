//! Experiment configuration: a flat `key = value` text format with
//! `[data]`, `[model]`, `[trainer]`, and `[method]` sections.
//!
//! Unknown sections and keys are hard errors so a typo never silently falls
//! back to a default. Parsing the serialized form of a config yields the
//! same config.

use std::fmt::Write as _;

use crate::calibration::CalibratorKind;
use crate::data::{Representation, SynthDomainSpec};
use crate::error::{CatError, Result};
use crate::nets::NetConfig;
use crate::trainer::TrainerConfig;

/// Which training recipe to run. The starred variants add the class
/// confusion penalty and sharpness-aware steps on top of the base recipe;
/// the `Cat*` variants additionally calibrate the teacher in phase 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SourceOnly,
    Dann,
    DannStar,
    AtStar,
    CatTempScaling,
    CatCpcs,
    CatVectorScaling,
    CatMatrixScaling,
}

pub const ALL_METHODS: [Method; 8] = [
    Method::SourceOnly,
    Method::Dann,
    Method::DannStar,
    Method::AtStar,
    Method::CatTempScaling,
    Method::CatCpcs,
    Method::CatVectorScaling,
    Method::CatMatrixScaling,
];

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::Dann => "dann",
            Method::DannStar => "dann-star",
            Method::AtStar => "at-star",
            Method::CatTempScaling => "cat-tempscaling",
            Method::CatCpcs => "cat-cpcs",
            Method::CatVectorScaling => "cat-vectorscaling",
            Method::CatMatrixScaling => "cat-matrixscaling",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        ALL_METHODS
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                CatError::Config(format!(
                    "unknown method `{}`; expected one of {}",
                    s,
                    ALL_METHODS.map(|m| m.as_str()).join(", ")
                ))
            })
    }

    /// Calibrator fitted in phase 3. Identity for every non-calibrated
    /// recipe, including the adaptive-teacher baseline.
    pub fn calibrator_kind(&self) -> CalibratorKind {
        match self {
            Method::CatTempScaling => CalibratorKind::Temperature,
            Method::CatCpcs => CalibratorKind::Cpcs,
            Method::CatVectorScaling => CalibratorKind::Vector,
            Method::CatMatrixScaling => CalibratorKind::Matrix,
            _ => CalibratorKind::Identity,
        }
    }

    pub fn starred(&self) -> bool {
        !matches!(self, Method::SourceOnly | Method::Dann)
    }

    /// Specialize a base schedule for this recipe: source-only collapses
    /// every phase boundary to the end, the purely adversarial recipes never
    /// enter self-training, and the starred recipes enable the class
    /// confusion penalty plus sharpness-aware steps.
    pub fn trainer_config(&self, base: &TrainerConfig) -> TrainerConfig {
        let mut cfg = base.clone();
        cfg.calibrator_kind = self.calibrator_kind();
        cfg.mcc_enabled = self.starred();
        cfg.sdat_enabled = self.starred();
        match self {
            Method::SourceOnly => {
                cfg.t_da = cfg.total_epochs;
                cfg.t_pl = cfg.total_epochs;
                cfg.t_cal = cfg.total_epochs;
            }
            Method::Dann | Method::DannStar => {
                cfg.t_pl = cfg.total_epochs;
                cfg.t_cal = cfg.total_epochs;
            }
            _ => {}
        }
        cfg
    }
}

/// Synthetic transfer-task description: one class layout observed under two
/// operating speeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub sample_length: usize,
    pub samples_per_class: usize,
    pub source_speed: f64,
    pub target_speed: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub representation: Representation,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 5,
            sample_length: 1024,
            samples_per_class: 200,
            source_speed: 1.0,
            target_speed: 1.4,
            noise_sigma: 0.5,
            train_fraction: 0.8,
            representation: Representation::Time,
            data_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CatError::Config("need at least 2 classes".into()));
        }
        if self.samples_per_class < 2 {
            return Err(CatError::Config(
                "need at least 2 samples per class to split".into(),
            ));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(CatError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        self.domain_spec(self.source_speed).validate()?;
        self.domain_spec(self.target_speed).validate()?;
        Ok(())
    }

    pub fn domain_spec(&self, speed: f64) -> SynthDomainSpec {
        let mut spec = SynthDomainSpec::standard(self.classes, speed, self.noise_sigma);
        spec.sample_length = self.sample_length;
        spec
    }

    /// Short name identifying the transfer task, used for run directories.
    pub fn task_name(&self) -> String {
        format!(
            "speed{}to{}-{}",
            self.source_speed,
            self.target_speed,
            self.representation.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: NetConfig,
    pub trainer: TrainerConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let data = DataConfig::default();
        Config {
            model: NetConfig {
                input_length: data.sample_length,
                classes: data.classes,
            },
            data,
            trainer: TrainerConfig::default(),
            method: Method::CatTempScaling,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.trainer.validate()?;
        if self.model.input_length != self.data.sample_length {
            return Err(CatError::Config(format!(
                "model input_length {} does not match data sample_length {}",
                self.model.input_length, self.data.sample_length
            )));
        }
        if self.model.classes != self.data.classes {
            return Err(CatError::Config(format!(
                "model classes {} does not match data classes {}",
                self.model.classes, self.data.classes
            )));
        }
        if self.seeds.is_empty() {
            return Err(CatError::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// The fully gated schedule for one seed of the configured method.
    pub fn trainer_for_seed(&self, seed: u64) -> TrainerConfig {
        let mut cfg = self.method.trainer_config(&self.trainer);
        cfg.seed = seed;
        cfg
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        writeln!(s, "[data]").unwrap();
        writeln!(s, "classes = {}", d.classes).unwrap();
        writeln!(s, "sample_length = {}", d.sample_length).unwrap();
        writeln!(s, "samples_per_class = {}", d.samples_per_class).unwrap();
        writeln!(s, "source_speed = {}", d.source_speed).unwrap();
        writeln!(s, "target_speed = {}", d.target_speed).unwrap();
        writeln!(s, "noise_sigma = {}", d.noise_sigma).unwrap();
        writeln!(s, "train_fraction = {}", d.train_fraction).unwrap();
        writeln!(s, "representation = {}", d.representation.as_str()).unwrap();
        writeln!(s, "data_seed = {}", d.data_seed).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "[model]").unwrap();
        writeln!(s, "input_length = {}", self.model.input_length).unwrap();
        writeln!(s, "classes = {}", self.model.classes).unwrap();
        writeln!(s).unwrap();
        let t = &self.trainer;
        writeln!(s, "[trainer]").unwrap();
        writeln!(s, "total_epochs = {}", t.total_epochs).unwrap();
        writeln!(s, "batch_size = {}", t.batch_size).unwrap();
        writeln!(s, "t_da = {}", t.t_da).unwrap();
        writeln!(s, "t_pl = {}", t.t_pl).unwrap();
        writeln!(s, "t_cal = {}", t.t_cal).unwrap();
        writeln!(s, "tau = {}", t.tau).unwrap();
        writeln!(s, "ema_alpha = {}", t.ema_alpha).unwrap();
        writeln!(s, "base_lr = {}", t.base_lr).unwrap();
        writeln!(s, "lr_drop_1 = {}", t.lr_drop_epochs.0).unwrap();
        writeln!(s, "lr_drop_2 = {}", t.lr_drop_epochs.1).unwrap();
        writeln!(s, "weight_decay = {}", t.weight_decay).unwrap();
        writeln!(s, "mcc_temperature = {}", t.mcc_temperature).unwrap();
        writeln!(s, "sam_rho = {}", t.sam_rho).unwrap();
        writeln!(s, "checkpoint_every = {}", t.checkpoint_every).unwrap();
        writeln!(s, "seed = {}", t.seed).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "[method]").unwrap();
        writeln!(s, "name = {}", self.method.as_str()).unwrap();
        let seeds: Vec<String> = self.seeds.iter().map(|x| x.to_string()).collect();
        writeln!(s, "seeds = {}", seeds.join(", ")).unwrap();
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CatError::Config(format!("invalid value `{}` for key `{}`", v, key)))
}

/// Parse a config document. Keys omitted from the text keep their defaults.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut model_len: Option<usize> = None;
    let mut model_classes: Option<usize> = None;
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            match name {
                "data" | "model" | "trainer" | "method" => section = name.to_string(),
                _ => {
                    return Err(CatError::Config(format!(
                        "line {}: unknown section [{}]",
                        lineno + 1,
                        name
                    )))
                }
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CatError::Config(format!("line {}: expected `key = value`, got `{}`", lineno + 1, line))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if section.is_empty() {
            return Err(CatError::Config(format!(
                "line {}: key `{}` appears before any section header",
                lineno + 1,
                key
            )));
        }
        match (section.as_str(), key) {
            ("data", "classes") => cfg.data.classes = parse_num(key, value)?,
            ("data", "sample_length") => cfg.data.sample_length = parse_num(key, value)?,
            ("data", "samples_per_class") => cfg.data.samples_per_class = parse_num(key, value)?,
            ("data", "source_speed") => cfg.data.source_speed = parse_num(key, value)?,
            ("data", "target_speed") => cfg.data.target_speed = parse_num(key, value)?,
            ("data", "noise_sigma") => cfg.data.noise_sigma = parse_num(key, value)?,
            ("data", "train_fraction") => cfg.data.train_fraction = parse_num(key, value)?,
            ("data", "representation") => cfg.data.representation = Representation::parse(value)?,
            ("data", "data_seed") => cfg.data.data_seed = parse_num(key, value)?,
            ("model", "input_length") => model_len = Some(parse_num(key, value)?),
            ("model", "classes") => model_classes = Some(parse_num(key, value)?),
            ("trainer", "total_epochs") => cfg.trainer.total_epochs = parse_num(key, value)?,
            ("trainer", "batch_size") => cfg.trainer.batch_size = parse_num(key, value)?,
            ("trainer", "t_da") => cfg.trainer.t_da = parse_num(key, value)?,
            ("trainer", "t_pl") => cfg.trainer.t_pl = parse_num(key, value)?,
            ("trainer", "t_cal") => cfg.trainer.t_cal = parse_num(key, value)?,
            ("trainer", "tau") => cfg.trainer.tau = parse_num(key, value)?,
            ("trainer", "ema_alpha") => cfg.trainer.ema_alpha = parse_num(key, value)?,
            ("trainer", "base_lr") => cfg.trainer.base_lr = parse_num(key, value)?,
            ("trainer", "lr_drop_1") => cfg.trainer.lr_drop_epochs.0 = parse_num(key, value)?,
            ("trainer", "lr_drop_2") => cfg.trainer.lr_drop_epochs.1 = parse_num(key, value)?,
            ("trainer", "weight_decay") => cfg.trainer.weight_decay = parse_num(key, value)?,
            ("trainer", "mcc_temperature") => {
                cfg.trainer.mcc_temperature = parse_num(key, value)?
            }
            ("trainer", "sam_rho") => cfg.trainer.sam_rho = parse_num(key, value)?,
            ("trainer", "checkpoint_every") => {
                cfg.trainer.checkpoint_every = parse_num(key, value)?
            }
            ("trainer", "seed") => cfg.trainer.seed = parse_num(key, value)?,
            ("method", "name") => cfg.method = Method::parse(value)?,
            ("method", "seeds") => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    seeds.push(parse_num("seeds", part.trim())?);
                }
                cfg.seeds = seeds;
            }
            (sec, key) => {
                return Err(CatError::Config(format!(
                    "line {}: unknown key `{}` in section [{}]",
                    lineno + 1,
                    key,
                    sec
                )))
            }
        }
    }
    cfg.model = NetConfig {
        input_length: model_len.unwrap_or(cfg.data.sample_length),
        classes: model_classes.unwrap_or(cfg.data.classes),
    };
    // The calibrator and regularizer gating always comes from the method,
    // so a parsed base config carries the neutral settings.
    cfg.trainer.calibrator_kind = CalibratorKind::Identity;
    cfg.trainer.mcc_enabled = false;
    cfg.trainer.sdat_enabled = false;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = Config::default();
        cfg.data.target_speed = 1.7;
        cfg.data.representation = Representation::Frequency;
        cfg.trainer.t_pl = 100;
        cfg.method = Method::CatCpcs;
        cfg.seeds = vec![3, 14, 15];
        let text = cfg.serialize();
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parse_config(&parsed.serialize()).unwrap(), parsed);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(parse_config("[data]\nclases = 5\n").is_err());
        assert!(parse_config("[datas]\nclasses = 5\n").is_err());
        assert!(parse_config("classes = 5\n").is_err());
        assert!(parse_config("[trainer]\nbatch size 64\n").is_err());
        // Comments and blank lines are fine.
        assert!(parse_config("# comment\n\n[data]\nclasses = 5\n").is_ok());
    }

    #[test]
    fn method_names_round_trip() {
        for m in ALL_METHODS {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("cat").is_err());
    }

    #[test]
    fn method_gating_matches_the_roster() {
        let base = TrainerConfig::default();
        let so = Method::SourceOnly.trainer_config(&base);
        assert_eq!(so.t_da, so.total_epochs);
        assert!(!so.mcc_enabled && !so.sdat_enabled);

        let dann = Method::Dann.trainer_config(&base);
        assert_eq!(dann.t_da, 50);
        assert_eq!(dann.t_pl, dann.total_epochs);
        assert!(!dann.mcc_enabled);

        let dann_star = Method::DannStar.trainer_config(&base);
        assert!(dann_star.mcc_enabled && dann_star.sdat_enabled);
        assert_eq!(dann_star.t_pl, dann_star.total_epochs);

        let at = Method::AtStar.trainer_config(&base);
        assert_eq!(at.calibrator_kind, CalibratorKind::Identity);
        assert_eq!(at.t_pl, 50);
        assert_eq!(at.t_cal, 150);
        assert!(at.mcc_enabled && at.sdat_enabled);

        let cat = Method::CatTempScaling.trainer_config(&base);
        assert_eq!(cat.calibrator_kind, CalibratorKind::Temperature);
        // The calibrated run shares every schedule knob with the
        // uncalibrated teacher baseline.
        assert_eq!(
            TrainerConfig {
                calibrator_kind: CalibratorKind::Identity,
                ..cat.clone()
            },
            at
        );
        assert_eq!(
            Method::CatMatrixScaling.trainer_config(&base).calibrator_kind,
            CalibratorKind::Matrix
        );
    }

    #[test]
    fn validation_cross_checks_model_against_data() {
        let mut cfg = Config::default();
        assert!(cfg.validate().is_ok());
        cfg.model.classes = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn task_name_is_stable() {
        let d = DataConfig::default();
        assert_eq!(d.task_name(), "speed1to1.4-time");
    }
}
