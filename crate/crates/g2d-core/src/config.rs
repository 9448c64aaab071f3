//! INI-style experiment configuration.
//!
//! Sections `[synthesis]`, `[teacher]`, `[encoder]`, `[reformer]`,
//! `[classifier]`, `[eval]` plus a global `seed` (and `threads`) before the
//! first section. Unknown keys are errors; missing keys take the defaults
//! below. The fully resolved config is echoed into every output directory.

use crate::error::{CoreError, Result};
use crate::losses::GpForm;

/// Optimizer selection for the SGD-style stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

fn parse_optimizer(section: &str, value: &str) -> Result<OptimizerKind> {
    match value.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(CoreError::Config(format!(
            "[{section}] optimizer: expected 'sgd' or 'adam', got '{value}'"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSection {
    pub identities: usize,
    pub views: usize,
    pub templates: usize,
    pub image_size: usize,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            identities: 16,
            views: 40,
            templates: 5,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSection {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_halve_every: usize,
    pub feature_dim: usize,
    pub augment: bool,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            epochs: 20,
            batch: 64,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_halve_every: 16,
            feature_dim: 64,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
    pub gp_form: GpForm,
    pub adv_weight: f64,
    pub hidden_channels: usize,
    pub grid_channels: usize,
    pub decoder_channels: usize,
    pub augment: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            gp_weight: 1.0,
            gp_form: GpForm::ZeroCentered,
            adv_weight: 1.0,
            hidden_channels: 16,
            grid_channels: 32,
            decoder_channels: 16,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReformerSection {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_halve_every: usize,
    pub channels: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub huber_delta: f64,
}

impl Default for ReformerSection {
    fn default() -> Self {
        ReformerSection {
            epochs: 48,
            batch: 64,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_halve_every: 16,
            channels: 32,
            blocks: 2,
            embed_dim: 64,
            alpha: 0.01,
            beta: 0.02,
            huber_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_halve_every: usize,
    /// Epoch budget of the CE-only ablation that trains reformer and
    /// classifier jointly from scratch.
    pub ce_epochs: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            epochs: 20,
            batch: 64,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_halve_every: 16,
            ce_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub bins: usize,
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            genuine_pairs: 300,
            impostor_pairs: 300,
            bins: 40,
            split: "val".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub synthesis: SynthesisSection,
    pub teacher: TeacherSection,
    pub encoder: EncoderSection,
    pub reformer: ReformerSection,
    pub classifier: ClassifierSection,
    pub eval: EvalSection,
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        CoreError::Config(format!("[{section}] {key}: cannot parse '{value}'"))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CoreError::Config(format!(
            "[{section}] {key}: expected a boolean, got '{value}'"
        ))),
    }
}

fn parse_gp_form(value: &str) -> Result<GpForm> {
    match value.to_ascii_lowercase().as_str() {
        "zero" | "zero-centered" | "zero_centered" => Ok(GpForm::ZeroCentered),
        "one" | "one-centered" | "one_centered" => Ok(GpForm::OneCentered),
        _ => Err(CoreError::Config(format!(
            "[encoder] gp_form: expected 'zero' or 'one', got '{value}'"
        ))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with(';') || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    CoreError::Config(format!("line {}: malformed section header", lineno + 1))
                })?;
                section = name.trim().to_ascii_lowercase();
                match section.as_str() {
                    "synthesis" | "teacher" | "encoder" | "reformer" | "classifier" | "eval" => {}
                    other => {
                        return Err(CoreError::Config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::Config(format!(
                    "line {}: expected 'key = value'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim();
            cfg.apply(&section, &key, value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || {
            Err(CoreError::Config(format!(
                "unknown key '{key}' in section '[{}]'",
                if section.is_empty() { "<global>" } else { section }
            )))
        };
        match section {
            "" => match key {
                "seed" => self.seed = parse_value(section, key, value)?,
                "threads" => self.threads = parse_value(section, key, value)?,
                _ => return unknown(),
            },
            "synthesis" => {
                let s = &mut self.synthesis;
                match key {
                    "identities" => s.identities = parse_value(section, key, value)?,
                    "views" => s.views = parse_value(section, key, value)?,
                    "templates" => s.templates = parse_value(section, key, value)?,
                    "image_size" => s.image_size = parse_value(section, key, value)?,
                    _ => return unknown(),
                }
            }
            "teacher" => {
                let s = &mut self.teacher;
                match key {
                    "epochs" => s.epochs = parse_value(section, key, value)?,
                    "batch" => s.batch = parse_value(section, key, value)?,
                    "optimizer" => s.optimizer = parse_optimizer(section, value)?,
                    "lr" => s.lr = parse_value(section, key, value)?,
                    "momentum" => s.momentum = parse_value(section, key, value)?,
                    "weight_decay" => s.weight_decay = parse_value(section, key, value)?,
                    "lr_halve_every" => s.lr_halve_every = parse_value(section, key, value)?,
                    "feature_dim" => s.feature_dim = parse_value(section, key, value)?,
                    "augment" => s.augment = parse_bool(section, key, value)?,
                    _ => return unknown(),
                }
            }
            "encoder" => {
                let s = &mut self.encoder;
                match key {
                    "epochs" => s.epochs = parse_value(section, key, value)?,
                    "batch" => s.batch = parse_value(section, key, value)?,
                    "lr" => s.lr = parse_value(section, key, value)?,
                    "beta1" => s.beta1 = parse_value(section, key, value)?,
                    "beta2" => s.beta2 = parse_value(section, key, value)?,
                    "gp_weight" => s.gp_weight = parse_value(section, key, value)?,
                    "gp_form" => s.gp_form = parse_gp_form(value)?,
                    "adv_weight" => s.adv_weight = parse_value(section, key, value)?,
                    "hidden_channels" => s.hidden_channels = parse_value(section, key, value)?,
                    "grid_channels" => s.grid_channels = parse_value(section, key, value)?,
                    "decoder_channels" => s.decoder_channels = parse_value(section, key, value)?,
                    "augment" => s.augment = parse_bool(section, key, value)?,
                    _ => return unknown(),
                }
            }
            "reformer" => {
                let s = &mut self.reformer;
                match key {
                    "epochs" => s.epochs = parse_value(section, key, value)?,
                    "batch" => s.batch = parse_value(section, key, value)?,
                    "optimizer" => s.optimizer = parse_optimizer(section, value)?,
                    "lr" => s.lr = parse_value(section, key, value)?,
                    "momentum" => s.momentum = parse_value(section, key, value)?,
                    "weight_decay" => s.weight_decay = parse_value(section, key, value)?,
                    "lr_halve_every" => s.lr_halve_every = parse_value(section, key, value)?,
                    "channels" => s.channels = parse_value(section, key, value)?,
                    "blocks" => s.blocks = parse_value(section, key, value)?,
                    "embed_dim" => s.embed_dim = parse_value(section, key, value)?,
                    "alpha" => s.alpha = parse_value(section, key, value)?,
                    "beta" => s.beta = parse_value(section, key, value)?,
                    "huber_delta" => s.huber_delta = parse_value(section, key, value)?,
                    _ => return unknown(),
                }
            }
            "classifier" => {
                let s = &mut self.classifier;
                match key {
                    "epochs" => s.epochs = parse_value(section, key, value)?,
                    "batch" => s.batch = parse_value(section, key, value)?,
                    "optimizer" => s.optimizer = parse_optimizer(section, value)?,
                    "lr" => s.lr = parse_value(section, key, value)?,
                    "momentum" => s.momentum = parse_value(section, key, value)?,
                    "weight_decay" => s.weight_decay = parse_value(section, key, value)?,
                    "lr_halve_every" => s.lr_halve_every = parse_value(section, key, value)?,
                    "ce_epochs" => s.ce_epochs = parse_value(section, key, value)?,
                    _ => return unknown(),
                }
            }
            "eval" => {
                let s = &mut self.eval;
                match key {
                    "genuine_pairs" => s.genuine_pairs = parse_value(section, key, value)?,
                    "impostor_pairs" => s.impostor_pairs = parse_value(section, key, value)?,
                    "bins" => s.bins = parse_value(section, key, value)?,
                    "split" => s.split = value.to_string(),
                    _ => return unknown(),
                }
            }
            _ => unreachable!("section names validated at header parse"),
        }
        Ok(())
    }

    /// Fully resolved INI text, suitable for echoing into output
    /// directories and for re-parsing.
    pub fn to_ini(&self) -> String {
        let gp = match self.encoder.gp_form {
            GpForm::ZeroCentered => "zero",
            GpForm::OneCentered => "one",
        };
        format!(
            "; g2d {} resolved configuration\n\
             seed = {}\n\
             threads = {}\n\
             \n[synthesis]\n\
             identities = {}\nviews = {}\ntemplates = {}\nimage_size = {}\n\
             \n[teacher]\n\
             epochs = {}\nbatch = {}\noptimizer = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\n\
             lr_halve_every = {}\nfeature_dim = {}\naugment = {}\n\
             \n[encoder]\n\
             epochs = {}\nbatch = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\ngp_weight = {}\n\
             gp_form = {}\nadv_weight = {}\nhidden_channels = {}\ngrid_channels = {}\n\
             decoder_channels = {}\naugment = {}\n\
             \n[reformer]\n\
             epochs = {}\nbatch = {}\noptimizer = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\n\
             lr_halve_every = {}\nchannels = {}\nblocks = {}\nembed_dim = {}\n\
             alpha = {}\nbeta = {}\nhuber_delta = {}\n\
             \n[classifier]\n\
             epochs = {}\nbatch = {}\noptimizer = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\n\
             lr_halve_every = {}\nce_epochs = {}\n\
             \n[eval]\n\
             genuine_pairs = {}\nimpostor_pairs = {}\nbins = {}\nsplit = {}\n",
            crate::VERSION,
            self.seed,
            self.threads,
            self.synthesis.identities,
            self.synthesis.views,
            self.synthesis.templates,
            self.synthesis.image_size,
            self.teacher.epochs,
            self.teacher.batch,
            self.teacher.optimizer.as_str(),
            self.teacher.lr,
            self.teacher.momentum,
            self.teacher.weight_decay,
            self.teacher.lr_halve_every,
            self.teacher.feature_dim,
            self.teacher.augment,
            self.encoder.epochs,
            self.encoder.batch,
            self.encoder.lr,
            self.encoder.beta1,
            self.encoder.beta2,
            self.encoder.gp_weight,
            gp,
            self.encoder.adv_weight,
            self.encoder.hidden_channels,
            self.encoder.grid_channels,
            self.encoder.decoder_channels,
            self.encoder.augment,
            self.reformer.epochs,
            self.reformer.batch,
            self.reformer.optimizer.as_str(),
            self.reformer.lr,
            self.reformer.momentum,
            self.reformer.weight_decay,
            self.reformer.lr_halve_every,
            self.reformer.channels,
            self.reformer.blocks,
            self.reformer.embed_dim,
            self.reformer.alpha,
            self.reformer.beta,
            self.reformer.huber_delta,
            self.classifier.epochs,
            self.classifier.batch,
            self.classifier.optimizer.as_str(),
            self.classifier.lr,
            self.classifier.momentum,
            self.classifier.weight_decay,
            self.classifier.lr_halve_every,
            self.classifier.ce_epochs,
            self.eval.genuine_pairs,
            self.eval.impostor_pairs,
            self.eval.bins,
            self.eval.split,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.synthesis.identities, 16);
        assert_eq!(c.teacher.lr, 0.1);
        assert_eq!(c.encoder.batch, 16);
        assert_eq!(c.encoder.lr, 1e-3);
        assert_eq!(c.reformer.epochs, 48);
        assert_eq!(c.reformer.alpha, 0.01);
        assert_eq!(c.reformer.beta, 0.02);
        assert_eq!(c.reformer.lr_halve_every, 16);
        assert_eq!(c.classifier.weight_decay, 5e-4);
        assert_eq!(c.eval.genuine_pairs, 300);
    }

    #[test]
    fn parse_overrides_and_keeps_defaults() {
        let text = "seed = 42\n[reformer]\nalpha = 0.5\n[eval]\nbins = 10\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.reformer.alpha, 0.5);
        assert_eq!(c.reformer.beta, 0.02);
        assert_eq!(c.eval.bins, 10);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[teacher]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn resolved_echo_reparses_to_the_same_config() {
        let text = "seed = 9\n[encoder]\ngp_form = one\nlr = 0.00001\n[teacher]\naugment = false\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let echoed = ExperimentConfig::parse(&c.to_ini()).unwrap();
        assert_eq!(c, echoed);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored()  {
        let text = "; comment\n# another\n\nseed = 3\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 3);
    }
}
