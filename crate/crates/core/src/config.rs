//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every [`TrainConfig`] field and
//! every [`GeneratorConfig`] field has a key of the same name; the generator's
//! seed is `data_seed` and defaults to the run `seed`. Two extra keys drive
//! `ablate`: `grid` (see [`Grid`]) and `seeds` (`0,1,2` or `0..5`).

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::ablation::Grid;
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub data_seed: Option<u64>,
    pub grid: Option<Grid>,
    pub seeds: Option<Vec<u64>>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("bad value {value:?} for `{key}`: {e}"))
}

macro_rules! config_keys {
    ($(train: $($t:ident),+ ;)? $(generator: $($g:ident),+ ;)?) => {
        /// Keys that map one-to-one onto [`TrainConfig`] fields.
        pub const TRAIN_KEYS: &[&str] = &[$($(stringify!($t)),+)?];
        /// Keys that map one-to-one onto [`GeneratorConfig`] fields.
        pub const GENERATOR_KEYS: &[&str] = &[$($(stringify!($g)),+)?];

        fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
            match key {
                $($(stringify!($t) => cfg.train.$t = parse_value(key, value)?,)+)?
                $($(stringify!($g) => cfg.generator.$g = parse_value(key, value)?,)+)?
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn field_values(cfg: &RunConfig) -> Vec<(&'static str, String)> {
            vec![
                $($((stringify!($t), cfg.train.$t.to_string()),)+)?
                $($((stringify!($g), cfg.generator.$g.to_string()),)+)?
            ]
        }
    };
}

config_keys! {
    train: tau, theta, lambda_det_u, lambda_oc_u, lambda_em_u, eta0, iterations, warmup,
        batch_labeled, batch_unlabeled, head_mode, filter, pl_mode, em_scope, detector_threshold,
        ood_score, seed, eval_every, feat_dim, proj_dim, weak_sigma, strong_sigma, dropout;
    generator: dim, n_inlier, n_seen, n_unseen, train_per_class, test_per_class, label_fraction,
        sigma, mean_separation, hard_outlier_fraction, hard_offset, modes_per_class, mode_spread;
}

pub fn parse_seeds(text: &str) -> std::result::Result<Vec<u64>, String> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (parse_value("seeds", a.trim())?, parse_value("seeds", b.trim())?);
        if a >= b {
            return Err(format!("empty seed range {text:?}"));
        }
        return Ok((a..b).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| parse_value("seeds", s.trim()))
        .collect::<std::result::Result<Vec<u64>, _>>()?;
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let r = match key {
            "data_seed" => parse_value(key, value).map(|s| self.data_seed = Some(s)),
            "grid" => value.parse().map(|g| self.grid = Some(g)).map_err(|e: Error| e.to_string()),
            "seeds" => parse_seeds(value).map(|s| self.seeds = Some(s)),
            _ => match set_field(self, key, value) {
                Ok(true) => Ok(()),
                Ok(false) => Err(format!("unknown key `{key}`")),
                Err(e) => Err(e),
            },
        };
        r.map_err(Error::Config)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => err(m),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Generator settings for a run with the given seed.
    pub fn generator_for(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.data_seed.unwrap_or(seed),
            ..self.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()
    }

    /// Every key with its current value; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in field_values(self) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(s) = self.data_seed {
            out.push_str(&format!("data_seed = {s}\n"));
        }
        if let Some(g) = &self.grid {
            out.push_str(&format!("grid = {g}\n"));
        }
        if let Some(seeds) = &self.seeds {
            let s: Vec<String> = seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!("seeds = {}\n", s.join(",")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadMode;
    use crate::trainer::{FilterStrategy, PlMode};

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("c.cfg"))
    }

    #[test]
    fn every_field_has_a_key() {
        // serde sees the same field list, so a missing key shows up here
        let train = serde_json::to_value(TrainConfig::default()).unwrap();
        let mut names: Vec<&str> = train.as_object().unwrap().keys().map(String::as_str).collect();
        names.sort_unstable();
        let mut keys = TRAIN_KEYS.to_vec();
        keys.sort_unstable();
        assert_eq!(names, keys);

        let gen = serde_json::to_value(GeneratorConfig::default()).unwrap();
        let mut names: Vec<&str> = gen.as_object().unwrap().keys().map(String::as_str).filter(|k| *k != "seed").collect();
        names.sort_unstable();
        let mut keys = GENERATOR_KEYS.to_vec();
        keys.sort_unstable();
        assert_eq!(names, keys);
    }

    #[test]
    fn parses_values_comments_and_overrides() {
        let cfg = parse(
            "# reference run\n\
             head_mode = none\n\
             filter=off   # no pseudo-labels\n\
             pl_mode = standard\n\
             tau = 0.9\n\
             iterations = 300\n\
             mean_separation = 5.5\n\
             data_seed = 7\n\
             seeds = 0..3\n\
             \n",
        )
        .unwrap();
        assert_eq!(cfg.train.head_mode, HeadMode::None);
        assert_eq!(cfg.train.filter, FilterStrategy::Off);
        assert_eq!(cfg.train.pl_mode, PlMode::Standard);
        assert_eq!(cfg.train.tau, 0.9);
        assert_eq!(cfg.train.iterations, 300);
        assert_eq!(cfg.generator.mean_separation, 5.5);
        assert_eq!(cfg.generator_for(3).seed, 7);
        assert_eq!(cfg.seeds, Some(vec![0, 1, 2]));
        assert_eq!(RunConfig::default().generator_for(3).seed, 3);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("tau = 0.9\nbogus = 1\n", 2),
            ("tau = x\n", 1),
            ("\n\nhead_mode = both\n", 3),
            ("tau 0.9\n", 1),
            ("tau = 0.9\ntau = 0.8\n", 2),
            ("seeds = 3..1\n", 1),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = parse("grid = table1\nseeds = 4,2\ndata_seed = 1\nsigma = 1.25\n").unwrap();
        cfg.train.eta0 = 0.1 + 0.2;
        let back = parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
