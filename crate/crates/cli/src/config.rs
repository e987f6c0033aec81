//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then `AFFINITY_SEED`, then the
//! config file, then explicit flags. Every layer goes through [`RunConfig::set`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use roomgraph_core::features::RoomFeatures;
use roomgraph_core::train::LrSchedule;
use roomgraph_core::{GcnConfig, LossConfig, SplitPart, SplitRatios, SyntheticSpec, TrainConfig};

pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data",
    "annotations",
    "checkpoint",
    "categories",
    "rooms",
    "images",
    "dim",
    "separation",
    "noise",
    "room_features",
    "split",
    "hidden",
    "out_dim",
    "steps",
    "lr",
    "lr_decay_every",
    "lr_decay_factor",
    "temperature",
    "negatives",
    "batch_size",
    "include_positive",
    "eval_every",
    "part",
    "per_image",
    "temperatures",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub categories: usize,
    pub rooms: usize,
    pub images: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub room_features: RoomFeatures,
    pub split: SplitRatios,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub steps: usize,
    pub lr: f64,
    /// 0 means a constant rate.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub temperature: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub include_positive: bool,
    pub eval_every: usize,
    pub part: SplitPart,
    pub per_image: bool,
    pub temperatures: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gcn = GcnConfig::new(1);
        let train = TrainConfig::default();
        Self {
            seed: 0,
            out: None,
            data: None,
            annotations: None,
            checkpoint: None,
            categories: 20,
            rooms: 4,
            images: 30,
            dim: 32,
            separation: 4.0,
            noise: 0.5,
            room_features: RoomFeatures::OneHot,
            split: SplitRatios::default(),
            hidden: gcn.hidden_dims,
            out_dim: gcn.out_dim,
            steps: train.steps,
            lr: train.learning_rate,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
            temperature: train.loss.temperature,
            negatives: train.loss.negatives,
            batch_size: train.loss.batch_size,
            include_positive: train.loss.include_positive,
            eval_every: train.eval_every,
            part: SplitPart::Test,
            per_image: false,
            temperatures: vec![0.01, 0.1, 1.0],
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| value.into())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn part_name(p: SplitPart) -> &'static str {
    match p {
        SplitPart::Train => "train",
        SplitPart::Val => "val",
        SplitPart::Test => "test",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = path(value),
            "data" => self.data = path(value),
            "annotations" => self.annotations = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "categories" => self.categories = num(key, value)?,
            "rooms" => self.rooms = num(key, value)?,
            "images" => self.images = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "separation" => self.separation = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "room_features" => {
                self.room_features = match value {
                    "onehot" => RoomFeatures::OneHot,
                    "center" => RoomFeatures::Center,
                    _ => {
                        return Err(format!(
                            "`room_features` must be onehot or center, got `{value}`"
                        ))
                    }
                }
            }
            "split" => self.split = value.parse().map_err(|e| format!("`split`: {e}"))?,
            "hidden" => self.hidden = list(key, value)?,
            "out_dim" => self.out_dim = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "negatives" => self.negatives = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "include_positive" => self.include_positive = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "part" => self.part = value.parse().map_err(|e| format!("`part`: {e}"))?,
            "per_image" => self.per_image = num(key, value)?,
            "temperatures" => self.temperatures = list(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Parses config file text. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
            self.set(key.trim(), value)
                .map_err(|e| format!("{}:{}: {e}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    /// Effective configuration, one `key = value` line per key.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "seed" => self.seed.to_string(),
                "out" => path(&self.out),
                "data" => path(&self.data),
                "annotations" => path(&self.annotations),
                "checkpoint" => path(&self.checkpoint),
                "categories" => self.categories.to_string(),
                "rooms" => self.rooms.to_string(),
                "images" => self.images.to_string(),
                "dim" => self.dim.to_string(),
                "separation" => self.separation.to_string(),
                "noise" => self.noise.to_string(),
                "room_features" => match self.room_features {
                    RoomFeatures::OneHot => "onehot".into(),
                    RoomFeatures::Center => "center".into(),
                },
                "split" => self.split.to_string(),
                "hidden" => join(&self.hidden),
                "out_dim" => self.out_dim.to_string(),
                "steps" => self.steps.to_string(),
                "lr" => self.lr.to_string(),
                "lr_decay_every" => self.lr_decay_every.to_string(),
                "lr_decay_factor" => self.lr_decay_factor.to_string(),
                "temperature" => self.temperature.to_string(),
                "negatives" => self.negatives.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "include_positive" => self.include_positive.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "part" => part_name(self.part).into(),
                "per_image" => self.per_image.to_string(),
                "temperatures" => join(&self.temperatures),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_categories: self.categories,
            n_rooms: self.rooms,
            images_per_category: self.images,
            dim: self.dim,
            cluster_separation: self.separation,
            noise_sigma: self.noise,
            seed: self.seed,
            room_features: self.room_features,
        }
    }

    pub fn gcn_config(&self, in_dim: usize) -> GcnConfig {
        GcnConfig {
            in_dim,
            hidden_dims: self.hidden.clone(),
            out_dim: self.out_dim,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.lr,
            schedule: if self.lr_decay_every == 0 {
                LrSchedule::Constant
            } else {
                LrSchedule::StepDecay {
                    every: self.lr_decay_every,
                    factor: self.lr_decay_factor,
                }
            },
            loss: LossConfig {
                temperature: self.temperature,
                negatives: self.negatives,
                batch_size: self.batch_size,
                include_positive: self.include_positive,
            },
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("hidden", "64, 32").unwrap();
        c.set("room_features", "center").unwrap();
        c.set("out", "runs/a").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.echo(), Path::new("echo")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hidden, vec![64, 32]);
    }

    #[test]
    fn every_key_is_settable() {
        let echo = RunConfig::default().echo();
        assert_eq!(echo.lines().count(), KEYS.len());
        let mut c = RunConfig::default();
        for line in echo.lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            c.set(k, v).unwrap();
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c
            .set("learning_rate", "0.1")
            .unwrap_err()
            .contains("unknown"));
        assert!(c.set("steps", "ten").is_err());
        assert!(c.set("room_features", "random").is_err());
        let err = c
            .apply_text("steps = 5\njust words\n", Path::new("run.cfg"))
            .unwrap_err();
        assert!(err.starts_with("run.cfg:2"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nsteps = 7 # inline\n", Path::new("x"))
            .unwrap();
        assert_eq!(c.steps, 7);
    }
}
