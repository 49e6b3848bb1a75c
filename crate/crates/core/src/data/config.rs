//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are errors. `seed` and `d_embed` are shared by
//! the training and synthetic-data sections.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `strategy` | `gacoop` | `coop`, `locoop` or `gacoop` |
//! | `epochs` | 50 | training epochs |
//! | `lr` | 0.002 | base learning rate |
//! | `batch_size` | 32 | samples per step |
//! | `lambda` | 0.25 | weight of the regularization loss |
//! | `tau` | 0.01 | softmax temperature |
//! | `k_rank` | `auto` | rank threshold for region selection; `auto` is `n_classes / 2` |
//! | `ctx_len` | 16 | number of context tokens |
//! | `d_token` | 8 | width of each token |
//! | `d_embed` | 64 | joint embedding width |
//! | `seed` | 0 | single source of all randomness |
//! | `lr_schedule` | `cosine` | `cosine` or `constant` |
//! | `ctx_init` | `gaussian` | `gaussian` or `zeros` |
//! | `ctx_init_std` | 0.02 | std of the Gaussian context init |
//! | `add_ood_gradient` | `false` | ablation: also descend along the aligned regularization gradient |
//! | `raw_ood_gradient` | `false` | ablation: align against the gradient without λ |
//! | `n_classes` | 20 | synthetic ID classes |
//! | `n_regions` | 9 | regions per image |
//! | `shots` | 4 | training images per class |
//! | `test_per_class` | 50 | ID test images per class |
//! | `alpha` | 0.8 | signal weight against noise |
//! | `rho` | 0.6 | probability a region carries class signal |
//! | `beta` | 0.3 | probability a class region is corrupted toward background |
//! | `n_background` | 8 | size of the background direction pool |
//! | `n_ood` | 500 | OOD test images |
//! | `ood_classes` | 10 | held-out OOD prototypes |
//! | `ood_margin` | 0.3 | max cosine between OOD and ID prototypes |
//! | `text_alignment` | 0.4 | pull of ID prototypes toward the frozen text directions |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::model::CtxInit;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

pub const KEYS: &[&str] = &[
    "strategy",
    "epochs",
    "lr",
    "batch_size",
    "lambda",
    "tau",
    "k_rank",
    "ctx_len",
    "d_token",
    "d_embed",
    "seed",
    "lr_schedule",
    "ctx_init",
    "ctx_init_std",
    "add_ood_gradient",
    "raw_ood_gradient",
    "n_classes",
    "n_regions",
    "shots",
    "test_per_class",
    "alpha",
    "rho",
    "beta",
    "n_background",
    "n_ood",
    "ood_classes",
    "ood_margin",
    "text_alignment",
];

pub fn default_config() -> RunConfig {
    RunConfig::default()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, s) = (&mut self.train, &mut self.synth);
        match key {
            "strategy" => t.strategy = value.parse()?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "k_rank" => {
                t.k_rank = if value == "auto" { None } else { Some(parse(key, value)?) };
            }
            "ctx_len" => t.ctx_len = parse(key, value)?,
            "d_token" => t.d_token = parse(key, value)?,
            "d_embed" => {
                t.d_embed = parse(key, value)?;
                s.d_embed = t.d_embed;
            }
            "seed" => {
                t.seed = parse(key, value)?;
                s.seed = t.seed;
            }
            "lr_schedule" => t.lr_schedule = value.parse()?,
            "ctx_init" => {
                t.ctx_init = match value {
                    "zeros" => CtxInit::Zeros,
                    "gaussian" => match t.ctx_init {
                        CtxInit::Gaussian { std } => CtxInit::Gaussian { std },
                        CtxInit::Zeros => CtxInit::default(),
                    },
                    other => return Err(Error::config(key, format!("unknown init `{other}`"))),
                }
            }
            "ctx_init_std" => {
                let std = parse(key, value)?;
                if let CtxInit::Gaussian { .. } = t.ctx_init {
                    t.ctx_init = CtxInit::Gaussian { std };
                }
            }
            "add_ood_gradient" => t.add_ood_gradient = parse_bool(key, value)?,
            "raw_ood_gradient" => t.raw_ood_gradient = parse_bool(key, value)?,
            "n_classes" => s.n_classes = parse(key, value)?,
            "n_regions" => s.n_regions = parse(key, value)?,
            "shots" => s.shots = parse(key, value)?,
            "test_per_class" => s.test_per_class = parse(key, value)?,
            "alpha" => s.alpha = parse(key, value)?,
            "rho" => s.rho = parse(key, value)?,
            "beta" => s.beta = parse(key, value)?,
            "n_background" => s.n_background = parse(key, value)?,
            "n_ood" => s.n_ood = parse(key, value)?,
            "ood_classes" => s.ood_classes = parse(key, value)?,
            "ood_margin" => s.ood_margin = parse(key, value)?,
            "text_alignment" => s.text_alignment = parse(key, value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()
    }

    /// Effective configuration in the file format, every key present.
    pub fn dump(&self) -> String {
        let (t, s) = (&self.train, &self.synth);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("strategy", t.strategy.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lambda", t.lambda.to_string());
        kv("tau", t.tau.to_string());
        kv("k_rank", t.k_rank.map_or("auto".to_string(), |k| k.to_string()));
        kv("ctx_len", t.ctx_len.to_string());
        kv("d_token", t.d_token.to_string());
        kv("d_embed", t.d_embed.to_string());
        kv("seed", t.seed.to_string());
        kv("lr_schedule", t.lr_schedule.to_string());
        match t.ctx_init {
            CtxInit::Gaussian { std } => {
                kv("ctx_init", "gaussian".into());
                kv("ctx_init_std", std.to_string());
            }
            CtxInit::Zeros => kv("ctx_init", "zeros".into()),
        }
        kv("add_ood_gradient", t.add_ood_gradient.to_string());
        kv("raw_ood_gradient", t.raw_ood_gradient.to_string());
        kv("n_classes", s.n_classes.to_string());
        kv("n_regions", s.n_regions.to_string());
        kv("shots", s.shots.to_string());
        kv("test_per_class", s.test_per_class.to_string());
        kv("alpha", s.alpha.to_string());
        kv("rho", s.rho.to_string());
        kv("beta", s.beta.to_string());
        kv("n_background", s.n_background.to_string());
        kv("n_ood", s.n_ood.to_string());
        kv("ood_classes", s.ood_classes.to_string());
        kv("ood_margin", s.ood_margin.to_string());
        kv("text_alignment", s.text_alignment.to_string());
        out
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    let mut deferred_std = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::config(key, "given more than once"));
        }
        // Order-independent: apply the std after ctx_init is known.
        if key == "ctx_init_std" {
            deferred_std = Some(value.to_string());
            continue;
        }
        cfg.set(key, value)?;
    }
    if let Some(v) = deferred_std {
        cfg.set("ctx_init_std", &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{LrSchedule, Strategy};

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, default_config());
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.ctx_len, 16);
        assert_eq!(cfg.synth.n_classes, 20);
    }

    #[test]
    fn negative_lr_rejected() {
        match parse_config("lr = -1") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lr"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn override_shows_in_dump() {
        let cfg = parse_config("lambda = 0.5\n# comment\n  strategy = locoop  # trailing\n").unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.strategy, Strategy::Locoop);
        assert!(cfg.dump().contains("lambda = 0.5\n"));
    }

    #[test]
    fn dump_round_trips() {
        let cfg = parse_config("seed = 9\nk_rank = 3\nlr_schedule = constant\nctx_init = zeros\nbeta = 0.1").unwrap();
        assert_eq!(cfg.train.lr_schedule, LrSchedule::Constant);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(parse_config(&cfg.dump()).unwrap(), cfg);
        for key in KEYS.iter().filter(|k| **k != "ctx_init_std") {
            assert!(cfg.dump().contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn strictness() {
        assert!(matches!(parse_config("bogus = 1"), Err(Error::Config { .. })));
        assert!(matches!(parse_config("lr = 0.1\nlr = 0.2"), Err(Error::Config { .. })));
        assert!(matches!(parse_config("lr 0.1"), Err(Error::Config { .. })));
        assert!(matches!(parse_config("epochs = two"), Err(Error::Config { .. })));
        assert!(matches!(parse_config("rho = 2"), Err(Error::Config { .. })));
    }

    #[test]
    fn ctx_std_order_independent() {
        let a = parse_config("ctx_init_std = 0.1\nctx_init = gaussian").unwrap();
        assert_eq!(a.train.ctx_init, CtxInit::Gaussian { std: 0.1 });
    }
}
