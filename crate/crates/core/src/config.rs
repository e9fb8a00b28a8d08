//! Experiment configuration.
//!
//! The file is line oriented. Blank lines and lines starting with `#` are
//! ignored, `[name]` opens a section, and every other line is
//! `key = value`. Keys are addressed as `section.key`; unknown keys,
//! duplicates and keys outside a section are errors. Lists are
//! comma-separated. Every key has a default, so an empty file is a valid
//! (full-size) experiment.
//!
//! ```text
//! [cohort]
//! seed = 7
//! n_participants = 40
//! identity_signal_strength = 0.0
//!
//! [target]
//! epochs = 300
//!
//! [attack]
//! feature_config = PLUS_3GRAD_LOSS_LABEL
//! label_mode = both
//! ```

use crate::attack::{AttackHyper, FeatureConfig};
use crate::cohort::{CohortConfig, FeatureDims, TargetAssignment};
use crate::error::{Error, Result};
use crate::evalstat::LabelMode;
use crate::inference::SvmParams;
use crate::nnet::fmt_f64;
use crate::target::{TargetConfig, TargetTraining};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelModes {
    Instance,
    Person,
    Both,
}

impl LabelModes {
    pub fn modes(self) -> Vec<LabelMode> {
        match self {
            LabelModes::Instance => vec![LabelMode::Instance],
            LabelModes::Person => vec![LabelMode::Person],
            LabelModes::Both => vec![LabelMode::Instance, LabelMode::Person],
        }
    }

    fn name(self) -> &'static str {
        match self {
            LabelModes::Instance => "instance",
            LabelModes::Person => "person",
            LabelModes::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub cohort: CohortConfig,
    pub assignment: TargetAssignment,
    pub split_ratios: [f64; 3],
    pub cohort_seed: u64,

    pub eyes_layers: Vec<usize>,
    pub face_layers: Vec<usize>,
    pub grid_layers: Vec<usize>,
    pub combiner_hidden: Vec<usize>,
    pub target_epochs: usize,
    pub target_learning_rate: f64,
    pub target_batch_size: usize,
    pub target_seed: u64,

    pub feature_config: FeatureConfig,
    pub attack: AttackHyper,
    pub label_modes: LabelModes,
    pub attack_seed: u64,

    pub svm: SvmParams,
    pub svm_seed: u64,
    pub null_band_draws: usize,
    pub null_band_level: f64,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: CohortConfig::default(),
            assignment: TargetAssignment {
                fraction: 0.5,
                exact_count: true,
                forced_multi: 10,
            },
            split_ratios: [0.4, 0.28, 0.32],
            cohort_seed: 1,
            eyes_layers: vec![64, 16],
            face_layers: vec![64, 16],
            grid_layers: vec![32, 8],
            combiner_hidden: vec![32, 16, 8],
            target_epochs: 200,
            target_learning_rate: 0.01,
            target_batch_size: 16,
            target_seed: 2,
            feature_config: FeatureConfig::Plus3GradLossLabel,
            attack: AttackHyper::default(),
            label_modes: LabelModes::Both,
            attack_seed: 3,
            svm: SvmParams::default(),
            svm_seed: 4,
            null_band_draws: 2000,
            null_band_level: 0.95,
            output_dir: PathBuf::from("miaaudit-out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{value}` is not a valid {}", std::any::type_name::<T>()))
}

fn parse_real(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_num(value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{value}` is not finite"))
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{value}` is not `true` or `false`")),
    }
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Every recognised `section.key`, in echo order.
    pub const KEYS: [&'static str; 38] = [
        "cohort.seed",
        "cohort.n_participants",
        "cohort.multi_participants",
        "cohort.recordings_per_multi",
        "cohort.frames_min",
        "cohort.frames_max",
        "cohort.eye_dim",
        "cohort.face_dim",
        "cohort.face_grid_dim",
        "cohort.identity_signal_strength",
        "cohort.noise_scale",
        "cohort.target_fraction",
        "cohort.exact_count",
        "cohort.forced_multi",
        "cohort.split_ratios",
        "target.seed",
        "target.eyes_layers",
        "target.face_layers",
        "target.grid_layers",
        "target.combiner_hidden",
        "target.epochs",
        "target.learning_rate",
        "target.batch_size",
        "attack.seed",
        "attack.feature_config",
        "attack.label_mode",
        "attack.encoder_hidden",
        "attack.classifier_hidden",
        "attack.epochs",
        "attack.learning_rate",
        "attack.batch_size",
        "svm.seed",
        "svm.lambda",
        "svm.epochs",
        "svm.learning_rate",
        "svm.null_band_draws",
        "svm.null_band_level",
        "output.dir",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen_at = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line: line_no,
                    field: line.to_string(),
                    message: "unterminated section header".into(),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                field: line.to_string(),
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let field = match &section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            let err = |message: String| Error::Config {
                line: line_no,
                field: field.clone(),
                message,
            };
            if section.is_none() {
                return Err(err("key outside of any section".into()));
            }
            if seen_at.insert(field.clone(), line_no).is_some() {
                return Err(err("duplicate key".into()));
            }
            cfg.apply(&field, value.trim()).map_err(err)?;
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { field, message, .. } => Error::Config {
                line: seen_at.get(&field).copied().unwrap_or(0),
                field,
                message,
            },
            other => Error::Config {
                line: 0,
                field: "cohort".into(),
                message: other.to_string(),
            },
        })?;
        Ok(cfg)
    }

    /// Sets one `section.key` from its textual value.
    pub fn set(&mut self, field: &str, value: &str) -> Result<()> {
        self.apply(field, value).map_err(|message| Error::Config {
            line: 0,
            field: field.to_string(),
            message,
        })?;
        self.validate()
    }

    fn apply(&mut self, field: &str, v: &str) -> std::result::Result<(), String> {
        match field {
            "cohort.seed" => self.cohort_seed = parse_num(v)?,
            "cohort.n_participants" => self.cohort.n_participants = parse_num(v)?,
            "cohort.multi_participants" => self.cohort.multi_participants = parse_num(v)?,
            "cohort.recordings_per_multi" => self.cohort.recordings_per_multi = parse_num(v)?,
            "cohort.frames_min" => self.cohort.frames_min = parse_num(v)?,
            "cohort.frames_max" => self.cohort.frames_max = parse_num(v)?,
            "cohort.eye_dim" => self.cohort.dims.eye = parse_num(v)?,
            "cohort.face_dim" => self.cohort.dims.face = parse_num(v)?,
            "cohort.face_grid_dim" => self.cohort.dims.face_grid = parse_num(v)?,
            "cohort.identity_signal_strength" => {
                self.cohort.identity_signal_strength = parse_real(v)?
            }
            "cohort.noise_scale" => self.cohort.noise_scale = parse_real(v)?,
            "cohort.target_fraction" => self.assignment.fraction = parse_real(v)?,
            "cohort.exact_count" => self.assignment.exact_count = parse_bool(v)?,
            "cohort.forced_multi" => self.assignment.forced_multi = parse_num(v)?,
            "cohort.split_ratios" => {
                let r = v
                    .split(',')
                    .map(|s| parse_real(s.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                self.split_ratios = r
                    .try_into()
                    .map_err(|_| "expected three ratios (train, valid, test)".to_string())?;
            }
            "target.seed" => self.target_seed = parse_num(v)?,
            "target.eyes_layers" => self.eyes_layers = parse_list(v)?,
            "target.face_layers" => self.face_layers = parse_list(v)?,
            "target.grid_layers" => self.grid_layers = parse_list(v)?,
            "target.combiner_hidden" => self.combiner_hidden = parse_list(v)?,
            "target.epochs" => self.target_epochs = parse_num(v)?,
            "target.learning_rate" => self.target_learning_rate = parse_real(v)?,
            "target.batch_size" => self.target_batch_size = parse_num(v)?,
            "attack.seed" => self.attack_seed = parse_num(v)?,
            "attack.feature_config" => {
                self.feature_config = FeatureConfig::parse(v).ok_or_else(|| {
                    let names: Vec<&str> = FeatureConfig::ALL.iter().map(|c| c.name()).collect();
                    format!(
                        "unknown feature config `{v}`; expected one of {}",
                        names.join(", ")
                    )
                })?
            }
            "attack.label_mode" => {
                self.label_modes = match v {
                    "instance" => LabelModes::Instance,
                    "person" => LabelModes::Person,
                    "both" => LabelModes::Both,
                    _ => return Err(format!("`{v}` is not instance, person or both")),
                }
            }
            "attack.encoder_hidden" => self.attack.encoder_hidden = parse_num(v)?,
            "attack.classifier_hidden" => self.attack.classifier_hidden = parse_list(v)?,
            "attack.epochs" => self.attack.epochs = parse_num(v)?,
            "attack.learning_rate" => self.attack.learning_rate = parse_real(v)?,
            "attack.batch_size" => self.attack.batch_size = parse_num(v)?,
            "svm.seed" => self.svm_seed = parse_num(v)?,
            "svm.lambda" => self.svm.lambda = parse_real(v)?,
            "svm.epochs" => self.svm.epochs = parse_num(v)?,
            "svm.learning_rate" => self.svm.learning_rate = parse_real(v)?,
            "svm.null_band_draws" => self.null_band_draws = parse_num(v)?,
            "svm.null_band_level" => self.null_band_level = parse_real(v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                line: 0,
                field: field.into(),
                message: message.into(),
            })
        };
        self.cohort.validate()?;
        if !(self.assignment.fraction > 0.0 && self.assignment.fraction < 1.0) {
            return bad(
                "cohort.target_fraction",
                "must lie strictly between 0 and 1",
            );
        }
        if self.assignment.forced_multi > self.cohort.multi_participants {
            return bad("cohort.forced_multi", "exceeds cohort.multi_participants");
        }
        if self.split_ratios.iter().any(|r| *r < 0.0)
            || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("cohort.split_ratios", "must be non-negative and sum to 1");
        }
        for (field, layers) in [
            ("target.eyes_layers", &self.eyes_layers),
            ("target.face_layers", &self.face_layers),
            ("target.grid_layers", &self.grid_layers),
        ] {
            if layers.is_empty() || layers.contains(&0) {
                return bad(field, "layer widths must be positive");
            }
        }
        if self.combiner_hidden.len() < 2 || self.combiner_hidden.contains(&0) {
            return bad(
                "target.combiner_hidden",
                "need at least two positive widths",
            );
        }
        if !(self.target_learning_rate > 0.0) || self.target_batch_size == 0 {
            return bad(
                "target.learning_rate",
                "learning rate and batch size must be positive",
            );
        }
        if self.attack.classifier_hidden.len() != 3 {
            return bad("attack.classifier_hidden", "need exactly three widths");
        }
        if !(self.attack.learning_rate > 0.0) || self.attack.batch_size == 0 {
            return bad(
                "attack.learning_rate",
                "learning rate and batch size must be positive",
            );
        }
        if !(self.svm.lambda > 0.0) || !(self.svm.learning_rate > 0.0) {
            return bad("svm.lambda", "lambda and learning rate must be positive");
        }
        if self.null_band_draws == 0 || !(self.null_band_level > 0.0 && self.null_band_level < 1.0)
        {
            return bad(
                "svm.null_band_level",
                "need positive draws and a level in (0, 1)",
            );
        }
        self.target_config().validate()
    }

    pub fn target_config(&self) -> TargetConfig {
        let dims: FeatureDims = self.cohort.dims;
        let with_input = |input: usize, layers: &[usize]| {
            std::iter::once(input)
                .chain(layers.iter().copied())
                .collect::<Vec<_>>()
        };
        let branch_out = self.eyes_layers.last().copied().unwrap_or(0)
            + self.face_layers.last().copied().unwrap_or(0)
            + self.grid_layers.last().copied().unwrap_or(0);
        let mut combiner = with_input(branch_out, &self.combiner_hidden);
        combiner.push(2);
        TargetConfig {
            feature_dims: dims,
            eyes_widths: with_input(2 * dims.eye, &self.eyes_layers),
            face_widths: with_input(dims.face, &self.face_layers),
            grid_widths: with_input(dims.face_grid, &self.grid_layers),
            combiner_widths: combiner,
        }
    }

    pub fn target_training(&self) -> TargetTraining {
        TargetTraining {
            epochs: self.target_epochs,
            learning_rate: self.target_learning_rate,
            batch_size: self.target_batch_size,
            seed: self.target_seed,
        }
    }

    /// Textual value of every key except the output directory, so echoes are
    /// identical wherever the run writes.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let c = &self.cohort;
        let a = &self.attack;
        let pairs: Vec<(&str, String)> = vec![
            ("cohort.seed", self.cohort_seed.to_string()),
            ("cohort.n_participants", c.n_participants.to_string()),
            (
                "cohort.multi_participants",
                c.multi_participants.to_string(),
            ),
            (
                "cohort.recordings_per_multi",
                c.recordings_per_multi.to_string(),
            ),
            ("cohort.frames_min", c.frames_min.to_string()),
            ("cohort.frames_max", c.frames_max.to_string()),
            ("cohort.eye_dim", c.dims.eye.to_string()),
            ("cohort.face_dim", c.dims.face.to_string()),
            ("cohort.face_grid_dim", c.dims.face_grid.to_string()),
            (
                "cohort.identity_signal_strength",
                fmt_f64(c.identity_signal_strength),
            ),
            ("cohort.noise_scale", fmt_f64(c.noise_scale)),
            ("cohort.target_fraction", fmt_f64(self.assignment.fraction)),
            (
                "cohort.exact_count",
                self.assignment.exact_count.to_string(),
            ),
            (
                "cohort.forced_multi",
                self.assignment.forced_multi.to_string(),
            ),
            (
                "cohort.split_ratios",
                self.split_ratios
                    .iter()
                    .map(|r| fmt_f64(*r))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("target.seed", self.target_seed.to_string()),
            ("target.eyes_layers", list(&self.eyes_layers)),
            ("target.face_layers", list(&self.face_layers)),
            ("target.grid_layers", list(&self.grid_layers)),
            ("target.combiner_hidden", list(&self.combiner_hidden)),
            ("target.epochs", self.target_epochs.to_string()),
            ("target.learning_rate", fmt_f64(self.target_learning_rate)),
            ("target.batch_size", self.target_batch_size.to_string()),
            ("attack.seed", self.attack_seed.to_string()),
            (
                "attack.feature_config",
                self.feature_config.name().to_string(),
            ),
            ("attack.label_mode", self.label_modes.name().to_string()),
            ("attack.encoder_hidden", a.encoder_hidden.to_string()),
            ("attack.classifier_hidden", list(&a.classifier_hidden)),
            ("attack.epochs", a.epochs.to_string()),
            ("attack.learning_rate", fmt_f64(a.learning_rate)),
            ("attack.batch_size", a.batch_size.to_string()),
            ("svm.seed", self.svm_seed.to_string()),
            ("svm.lambda", fmt_f64(self.svm.lambda)),
            ("svm.epochs", self.svm.epochs.to_string()),
            ("svm.learning_rate", fmt_f64(self.svm.learning_rate)),
            ("svm.null_band_draws", self.null_band_draws.to_string()),
            ("svm.null_band_level", fmt_f64(self.null_band_level)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
