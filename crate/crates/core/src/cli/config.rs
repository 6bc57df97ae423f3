//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::interpret::SaliencyTarget;
use crate::models::{CountConfig, FpnConfig};
use crate::simdata::GenConfig;

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("threads", "0"),
    ("data.dir", "data"),
    ("data.train_fraction", "0.8"),
    ("data.val_fraction", "0.2"),
    ("gen.n", "9600"),
    ("gen.mask_fraction", "0.0625"),
    ("gen.render_width", "696"),
    ("gen.render_height", "520"),
    ("gen.out_width", "256"),
    ("gen.out_height", "192"),
    ("gen.count_min", "1"),
    ("gen.count_max", "100"),
    ("gen.cluster_prob", "0.25"),
    ("gen.cluster_radius_factor", "2.0"),
    ("gen.mean_area", "450"),
    ("gen.area_jitter", "0.2"),
    ("gen.ecc_min", "0.0"),
    ("gen.ecc_max", "0.8"),
    ("gen.blur_sigmas", "1,4,7,10"),
    ("gen.noise_std", "0.02"),
    ("gen.background", "0.05"),
    ("gen.cell_intensity", "0.6"),
    ("gen.intensity_jitter", "0.15"),
    ("fpn.pyramid_depth", "4"),
    ("fpn.lateral_filters", "128"),
    ("fpn.head_filters", "256"),
    ("fpn.down_filters", "64,128,128,128"),
    ("fpn.leaky_slope", "0.01"),
    ("fpn.tv_weight", "1e-4"),
    ("fpn.width_multiplier", "1.0"),
    ("fpn.squared_residual", "false"),
    ("fpn.epochs", "50"),
    ("fpn.lr", "1e-3"),
    ("fpn.batch_size", "2"),
    ("fpn.checkpoint", "run/fpn.cckp"),
    ("count.conv_filters", "64,128,256,256,512,512,512,512"),
    ("count.pool_after", "1,2,4,6,8"),
    ("count.fc_dims", "1024,512,1"),
    ("count.leaky_slope", "0.01"),
    ("count.width_multiplier", "1.0"),
    ("count.squared_residual", "false"),
    ("count.output_scale", "1.0"),
    ("count.epochs", "50"),
    ("count.lr", "1e-4"),
    ("count.batch_size", "5"),
    ("count.checkpoint", "run/count.cckp"),
    ("count.flip_augment", "false"),
    ("out.dir", "run"),
    ("saliency.target", "prediction"),
    ("predict.panels", "false"),
];

/// Resolved settings: defaults, then a config file, then command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config {
                key: key.to_string(),
                msg: "unknown key".into(),
            }),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("{origin}:{}", i + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.to_string(),
            msg: "override must look like key=value".into(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key).parse().map_err(|e: V::Err| Error::Config {
            key: key.to_string(),
            msg: format!("cannot parse `{}`: {e}", self.get(key)),
        })
    }

    pub fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|e: V::Err| Error::Config {
                    key: key.to_string(),
                    msg: format!("cannot parse list item `{}`: {e}", s.trim()),
                })
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    /// Every key with its resolved value, one `# key = value` line each.
    pub fn header(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s
    }

    /// Typed view of every setting; fails on the first malformed value.
    pub fn settings(&self) -> Result<Settings> {
        let seed: u64 = self.parse("seed")?;
        let gen = GenConfig {
            render_width: self.parse("gen.render_width")?,
            render_height: self.parse("gen.render_height")?,
            out_width: self.parse("gen.out_width")?,
            out_height: self.parse("gen.out_height")?,
            count_min: self.parse("gen.count_min")?,
            count_max: self.parse("gen.count_max")?,
            cluster_prob: self.parse("gen.cluster_prob")?,
            cluster_radius_factor: self.parse("gen.cluster_radius_factor")?,
            mean_area: self.parse("gen.mean_area")?,
            area_jitter: self.parse("gen.area_jitter")?,
            ecc_min: self.parse("gen.ecc_min")?,
            ecc_max: self.parse("gen.ecc_max")?,
            blur_sigmas: self.list("gen.blur_sigmas")?,
            noise_std: self.parse("gen.noise_std")?,
            background: self.parse("gen.background")?,
            cell_intensity: self.parse("gen.cell_intensity")?,
            intensity_jitter: self.parse("gen.intensity_jitter")?,
            reject_overlap: false,
            seed,
        };
        gen.validate().map_err(|e| Error::Config {
            key: "gen".into(),
            msg: e.to_string(),
        })?;
        let fpn = FpnConfig {
            pyramid_depth: self.parse("fpn.pyramid_depth")?,
            lateral_filters: self.parse("fpn.lateral_filters")?,
            head_filters: self.parse("fpn.head_filters")?,
            down_filters: self.list("fpn.down_filters")?,
            leaky_slope: self.parse("fpn.leaky_slope")?,
            tv_weight: self.parse("fpn.tv_weight")?,
            width_multiplier: self.parse("fpn.width_multiplier")?,
            squared_residual: self.parse("fpn.squared_residual")?,
        };
        fpn.validate().map_err(|e| Error::Config {
            key: "fpn".into(),
            msg: e.to_string(),
        })?;
        let count = CountConfig {
            conv_filters: self.list("count.conv_filters")?,
            pool_after: self.list("count.pool_after")?,
            fc_dims: self.list("count.fc_dims")?,
            leaky_slope: self.parse("count.leaky_slope")?,
            width_multiplier: self.parse("count.width_multiplier")?,
            squared_residual: self.parse("count.squared_residual")?,
            output_scale: self.parse("count.output_scale")?,
            ..CountConfig::default()
        };
        let train_fraction: f64 = self.parse("data.train_fraction")?;
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config {
                key: "data.train_fraction".into(),
                msg: "must lie in [0, 1]".into(),
            });
        }
        let val_fraction: f64 = self.parse("data.val_fraction")?;
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config {
                key: "data.val_fraction".into(),
                msg: "must lie in [0, 1)".into(),
            });
        }
        let mask_fraction: f64 = self.parse("gen.mask_fraction")?;
        if !(0.0..=1.0).contains(&mask_fraction) {
            return Err(Error::Config {
                key: "gen.mask_fraction".into(),
                msg: "must lie in [0, 1]".into(),
            });
        }
        let stage = |prefix: &str| -> Result<Stage> {
            let s = Stage {
                epochs: self.parse(&format!("{prefix}.epochs"))?,
                lr: self.parse(&format!("{prefix}.lr"))?,
                batch_size: self.parse(&format!("{prefix}.batch_size"))?,
                checkpoint: self.path(&format!("{prefix}.checkpoint")),
            };
            if s.batch_size == 0 {
                return Err(Error::Config {
                    key: format!("{prefix}.batch_size"),
                    msg: "must be at least 1".into(),
                });
            }
            Ok(s)
        };
        Ok(Settings {
            seed,
            threads: self.parse("threads")?,
            data_dir: self.path("data.dir"),
            train_fraction,
            val_fraction,
            n: self.parse("gen.n")?,
            mask_fraction,
            gen,
            fpn,
            count,
            fpn_stage: stage("fpn")?,
            count_stage: stage("count")?,
            count_flip_augment: self.parse("count.flip_augment")?,
            out_dir: self.path("out.dir"),
            saliency_target: self.get("saliency.target").parse()?,
            predict_panels: self.parse("predict.panels")?,
        })
    }
}

/// Optimizer settings and checkpoint path of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub threads: usize,
    pub data_dir: PathBuf,
    pub train_fraction: f64,
    /// Share of the training split held back for checkpoint selection.
    pub val_fraction: f64,
    pub n: usize,
    pub mask_fraction: f64,
    pub gen: GenConfig,
    pub fpn: FpnConfig,
    /// `input_hw` is replaced by the padded mask size of the data at hand.
    pub count: CountConfig,
    pub fpn_stage: Stage,
    pub count_stage: Stage,
    /// Random mirror flips of counter inputs during training.
    pub count_flip_augment: bool,
    pub out_dir: PathBuf,
    pub saliency_target: SaliencyTarget,
    pub predict_panels: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = RunConfig::default().settings().unwrap();
        assert_eq!(s.gen, GenConfig::default());
        assert_eq!(s.fpn, FpnConfig::default());
        assert_eq!(s.count, CountConfig::default());
        assert_eq!(s.fpn_stage.lr, 1e-3);
        assert_eq!(s.count_stage.batch_size, 5);
    }

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\n\nfpn.lateral_filters = 64  # trailing\nseed=3\n",
            "t",
        )
        .unwrap();
        c.apply_override("seed=9").unwrap();
        assert_eq!(c.get("fpn.lateral_filters"), "64");
        let s = c.settings().unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.gen.seed, 9);
    }

    #[test]
    fn unknown_key_is_fatal() {
        let mut c = RunConfig::default();
        let err = c.apply_text("fpn.laterl_filters = 64\n", "t").unwrap_err();
        assert!(err.to_string().contains("fpn.laterl_filters"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_value_names_key() {
        let mut c = RunConfig::default();
        c.set("count.lr", "fast").unwrap();
        let err = c.settings().unwrap_err();
        assert!(err.to_string().contains("count.lr"), "{err}");
    }

    #[test]
    fn line_without_equals_reports_line() {
        let err = RunConfig::default()
            .apply_text("seed 3\n", "cfg")
            .unwrap_err();
        assert!(err.to_string().contains("cfg:1"), "{err}");
    }

    #[test]
    fn header_lists_every_key() {
        let h = RunConfig::default().header();
        assert_eq!(h.lines().count(), RunConfig::keys().count());
        assert!(h.contains("# fpn.tv_weight = 1e-4"));
    }
}
