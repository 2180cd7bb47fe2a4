//! `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are rejected. Command-line flags are applied on
//! top of the file with [`RunConfig::set`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use stormchip::augment::AugmentConfig;
use stormchip::datapipe::{CropConfig, QualityThresholds, SplitSpec};
use stormchip::network::{ActivationVariant, DropoutVariant, NetVariant};
use stormchip::optim::{OptimizerConfig, OptimizerKind, TrainConfig};
use stormchip::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelKind {
    /// The four-block custom network.
    #[default]
    Cnn,
    /// Logistic regression on features of a trained network.
    Lr,
    Vgg16,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Lr => "lr",
            ModelKind::Vgg16 => "vgg16",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "lr" => Ok(ModelKind::Lr),
            "vgg16" => Ok(ModelKind::Vgg16),
            _ => Err(Error::Config(format!("model must be cnn, lr or vgg16, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub variant: NetVariant,
    /// Side of the square network input; chips are resized to it.
    pub input_px: usize,
    pub train: TrainConfig,
    /// `None` picks the optimizer's own default.
    pub epsilon: Option<f64>,
    pub split: SplitSpec,
    pub crop: CropConfig,
    /// Decision threshold on the damaged probability.
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Cnn,
            variant: NetVariant::default(),
            input_px: 150,
            train: TrainConfig::default(),
            epsilon: None,
            split: SplitSpec::default(),
            crop: CropConfig::default(),
            threshold: 0.5,
        }
    }
}

pub const KEYS: &[&str] = &[
    "model",
    "activation",
    "dropout",
    "input_px",
    "batch_size",
    "epochs",
    "seed",
    "optimizer",
    "learning_rate",
    "epsilon",
    "rmsprop_decay",
    "adam_beta1",
    "adam_beta2",
    "l2_lambda",
    "augment",
    "rotation_deg",
    "horizontal_flip",
    "shift_frac",
    "shear_frac",
    "zoom_frac",
    "window_px",
    "black_pixel",
    "cloud_luma",
    "cloud_spread",
    "totally_black",
    "max_black_fraction",
    "max_cloud_score",
    "train_per_class",
    "val_per_class",
    "balanced_test_per_class",
    "unbalanced_negatives",
    "unbalanced_ratio",
    "split_seed",
    "threshold",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value, got {raw:?}", origin.display(), n + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Loads `path` when given, otherwise starts from the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let a = &mut t.augmentation;
        let q = &mut self.crop.thresholds;
        let s = &mut self.split;
        match key {
            "model" => self.model = value.parse()?,
            "activation" => {
                self.variant.activation = match value {
                    "relu" => ActivationVariant::Relu,
                    "leaky_relu" | "leaky" => ActivationVariant::Leaky,
                    _ => return Err(Error::Config(format!("activation must be relu or leaky_relu, got {value:?}"))),
                }
            }
            "dropout" => {
                self.variant.dropout = match value {
                    "none" => DropoutVariant::None,
                    "dense" => DropoutVariant::Dense,
                    "full" => DropoutVariant::Full,
                    _ => return Err(Error::Config(format!("dropout must be none, dense or full, got {value:?}"))),
                }
            }
            "input_px" => self.input_px = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "optimizer" => {
                let keep = t.optimizer.clone();
                t.optimizer = match value {
                    "adam" => OptimizerConfig::adam(),
                    "rmsprop" => OptimizerConfig::rmsprop(),
                    _ => return Err(Error::Config(format!("optimizer must be adam or rmsprop, got {value:?}"))),
                };
                t.optimizer.learning_rate = keep.learning_rate;
                t.optimizer.l2_lambda = keep.l2_lambda;
                t.optimizer.rmsprop_decay = keep.rmsprop_decay;
                t.optimizer.adam_beta1 = keep.adam_beta1;
                t.optimizer.adam_beta2 = keep.adam_beta2;
            }
            "learning_rate" => t.optimizer.learning_rate = parse(key, value)?,
            "epsilon" => self.epsilon = Some(parse(key, value)?),
            "rmsprop_decay" => t.optimizer.rmsprop_decay = parse(key, value)?,
            "adam_beta1" => t.optimizer.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.optimizer.adam_beta2 = parse(key, value)?,
            "l2_lambda" => t.optimizer.l2_lambda = parse(key, value)?,
            "augment" => a.enabled = parse_bool(key, value)?,
            "rotation_deg" => a.rotation_deg_max = parse(key, value)?,
            "horizontal_flip" => a.horizontal_flip = parse_bool(key, value)?,
            "shift_frac" => a.shift_frac_max = parse(key, value)?,
            "shear_frac" => a.shear_frac_max = parse(key, value)?,
            "zoom_frac" => a.zoom_frac_max = parse(key, value)?,
            "window_px" => self.crop.window_px = parse(key, value)?,
            "black_pixel" => q.black_pixel = parse(key, value)?,
            "cloud_luma" => q.cloud_luma = parse(key, value)?,
            "cloud_spread" => q.cloud_spread = parse(key, value)?,
            "totally_black" => q.totally_black = parse(key, value)?,
            "max_black_fraction" => q.max_black_fraction = parse(key, value)?,
            "max_cloud_score" => q.max_cloud_score = parse(key, value)?,
            "train_per_class" => s.train_per_class = parse(key, value)?,
            "val_per_class" => s.val_per_class = parse(key, value)?,
            "balanced_test_per_class" => s.balanced_test_per_class = parse(key, value)?,
            "unbalanced_negatives" => s.unbalanced_negatives = parse(key, value)?,
            "unbalanced_ratio" => s.unbalanced_ratio = parse(key, value)?,
            "split_seed" => s.seed = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Effective training settings with the variant and epsilon folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.variant = self.variant;
        if let Some(eps) = self.epsilon {
            t.optimizer.epsilon = eps;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        self.train_config().validate().map_err(config)?;
        self.crop.thresholds.validate().map_err(config)?;
        self.split.validate().map_err(config)?;
        if self.crop.window_px == 0 {
            return Err(Error::Config("window_px must be positive".into()));
        }
        if self.input_px < 32 {
            return Err(Error::Config(format!("input_px must be at least 32, got {}", self.input_px)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = self.train_config();
        let o = &t.optimizer;
        let a = &t.augmentation;
        let q = &self.crop.thresholds;
        let s = &self.split;
        let values: Vec<String> = vec![
            self.model.as_str().into(),
            match self.variant.activation {
                ActivationVariant::Relu => "relu",
                ActivationVariant::Leaky => "leaky_relu",
            }
            .into(),
            match self.variant.dropout {
                DropoutVariant::None => "none",
                DropoutVariant::Dense => "dense",
                DropoutVariant::Full => "full",
            }
            .into(),
            self.input_px.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.seed.to_string(),
            match o.kind {
                OptimizerKind::Adam => "adam",
                OptimizerKind::RmsProp => "rmsprop",
            }
            .into(),
            o.learning_rate.to_string(),
            o.epsilon.to_string(),
            o.rmsprop_decay.to_string(),
            o.adam_beta1.to_string(),
            o.adam_beta2.to_string(),
            o.l2_lambda.to_string(),
            a.enabled.to_string(),
            a.rotation_deg_max.to_string(),
            a.horizontal_flip.to_string(),
            a.shift_frac_max.to_string(),
            a.shear_frac_max.to_string(),
            a.zoom_frac_max.to_string(),
            self.crop.window_px.to_string(),
            q.black_pixel.to_string(),
            q.cloud_luma.to_string(),
            q.cloud_spread.to_string(),
            q.totally_black.to_string(),
            q.max_black_fraction.to_string(),
            q.max_cloud_score.to_string(),
            s.train_per_class.to_string(),
            s.val_per_class.to_string(),
            s.balanced_test_per_class.to_string(),
            s.unbalanced_negatives.to_string(),
            s.unbalanced_ratio.to_string(),
            s.seed.to_string(),
            self.threshold.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.train.augmentation
    }

    pub fn thresholds(&self) -> &QualityThresholds {
        &self.crop.thresholds
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_output_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.set("optimizer", "rmsprop").unwrap();
        cfg.set("learning_rate", "0.001").unwrap();
        cfg.set("dropout", "full").unwrap();
        let text = cfg.to_string();
        assert!(text.contains("epsilon = 0.0000001\n") || text.contains("epsilon = 1e-7\n"));
        let back = RunConfig::parse(&text, Path::new("resolved")).unwrap();
        assert_eq!(back.train_config(), cfg.train_config());
        assert_eq!(back.variant, cfg.variant);
        assert_eq!(cfg.entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let p = Path::new("c.cfg");
        assert!(matches!(RunConfig::parse("epochz = 3\n", p), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs 3\n", p), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs = three\n", p), Err(Error::Config(_))));
        let ok = RunConfig::parse("# comment\n\nepochs = 3 # trailing\nwindow_px=64\n", p).unwrap();
        assert_eq!((ok.train.epochs, ok.crop.window_px), (3, 64));
    }

    #[test]
    fn optimizer_switch_keeps_learning_rate_and_epsilon_default() {
        let mut cfg = RunConfig::default();
        cfg.set("learning_rate", "0.01").unwrap();
        cfg.set("optimizer", "rmsprop").unwrap();
        let t = cfg.train_config();
        assert_eq!(t.optimizer.learning_rate, 0.01);
        assert_eq!(t.optimizer.epsilon, 1e-7);
        cfg.set("optimizer", "adam").unwrap();
        assert_eq!(cfg.train_config().optimizer.epsilon, 1e-8);
    }

    #[test]
    fn validation_reports_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.set("batch_size", "0").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
    }
}
