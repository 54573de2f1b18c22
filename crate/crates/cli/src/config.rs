//! Experiment configuration: a TOML file, `--set key.path=value` overrides,
//! then validation with field paths in every error.

use std::path::{Path, PathBuf};

use hypergrad_core::{
    Error as CoreError, GroupStructure, HyperConfig, Regularizer, SyntheticSpec, ValidationScheme,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Syntax { origin: String, message: String },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("override `{0}`: expected key.path=value")]
    BadOverride(String),
}

impl ConfigError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Maps a core validation error onto a config section.
    fn from_core(section: &str, err: CoreError) -> Self {
        match err {
            CoreError::InvalidArgument { name, reason } => {
                Self::field(format!("{section}.{name}"), reason)
            }
            other => Self::field(section, other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch hyper-subgradient descent.
    #[default]
    Hsgd,
    /// Online hyper-subgradient descent.
    Ohsgd,
    /// Validation and test error along a log grid of λ.
    Grid,
    /// HSGD and OHSGD for every β in `betas`.
    Exp1,
    /// OHSGD for every β in `betas` and inner tolerance in `tols`, plus the grid curve.
    Exp2,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerSpec {
    #[default]
    Lasso,
    /// Exactly one of `group_size` (uniform contiguous), `sizes`
    /// (contiguous) or `groups` (0-based index lists) must be given.
    GroupLasso {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group_size: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sizes: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        groups: Option<Vec<Vec<usize>>>,
    },
}

impl RegularizerSpec {
    pub fn build(&self, dim: usize) -> Result<Regularizer, ConfigError> {
        let (group_size, sizes, groups) = match self {
            RegularizerSpec::Lasso => return Ok(Regularizer::Lasso),
            RegularizerSpec::GroupLasso {
                group_size,
                sizes,
                groups,
            } => (group_size, sizes, groups),
        };
        let given = [group_size.is_some(), sizes.is_some(), groups.is_some()];
        if given.iter().filter(|&&g| g).count() != 1 {
            return Err(ConfigError::field(
                "regularizer",
                "group_lasso needs exactly one of group_size, sizes, groups",
            ));
        }
        let built = if let Some(size) = group_size {
            GroupStructure::uniform(dim, *size)
                .map_err(|e| ConfigError::field("regularizer.group_size", e.to_string()))?
        } else if let Some(sizes) = sizes {
            let total: usize = sizes.iter().sum();
            if total != dim {
                return Err(ConfigError::field(
                    "regularizer.sizes",
                    format!("sizes sum to {total}, but the data has dimension {dim}"),
                ));
            }
            GroupStructure::from_sizes(sizes)
                .map_err(|e| ConfigError::field("regularizer.sizes", e.to_string()))?
        } else {
            let groups = groups.clone().unwrap_or_default();
            GroupStructure::from_indices(dim, groups)
                .map_err(|e| ConfigError::field("regularizer.groups", e.to_string()))?
        };
        Ok(Regularizer::GroupLasso(built))
    }
}

/// Datasets read from CSV instead of generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "yes")]
    pub has_header: bool,
}

fn yes() -> bool {
    true
}

/// Outer-loop limits for online runs, which take one step per validation
/// sample and so need far more steps than batch runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineLimits {
    pub max_outer: usize,
    pub outer_tol: f64,
}

impl Default for OnlineLimits {
    fn default() -> Self {
        Self {
            max_outer: 20_000,
            outer_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub points: usize,
    /// Smallest grid value as a fraction of λ_max.
    pub min_ratio: f64,
    /// Also compute the curve in the descent modes, for the summary.
    pub enabled: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 50,
            min_ratio: 1e-3,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Step sizes swept by `exp1` and `exp2`.
    pub betas: Vec<f64>,
    /// Inner tolerances swept by `exp2`.
    pub tols: Vec<f64>,
    pub synthetic: SyntheticSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataFiles>,
    pub regularizer: RegularizerSpec,
    pub scheme: ValidationScheme,
    pub hyper: HyperConfig,
    pub online: OnlineLimits,
    pub grid: GridSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hsgd,
            output_dir: PathBuf::from("out"),
            betas: vec![3e-5, 6e-5, 1.2e-4],
            tols: vec![1e-1, 1e-3, 1e-6],
            synthetic: SyntheticSpec::default(),
            data: None,
            regularizer: RegularizerSpec::Lasso,
            scheme: ValidationScheme::Loo,
            hyper: HyperConfig::default(),
            online: OnlineLimits::default(),
            grid: GridSpec::default(),
        }
    }
}

/// Parses `key.path=value`. The value is read as a TOML value, falling back
/// to a bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.into()))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(ConfigError::BadOverride(raw.into()));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((path, parsed))
}

fn set_path(
    table: &mut toml::Table,
    path: &[String],
    value: toml::Value,
) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("path is nonempty");
    let mut cur = table;
    for (depth, key) in parents.iter().enumerate() {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            ConfigError::field(
                path[..=depth].join("."),
                "is not a table and cannot take sub-keys",
            )
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses TOML text (`origin` names it in errors), applies overrides and
/// deserializes. Does not run [`ExperimentConfig::validate`].
pub fn parse_config(
    text: &str,
    origin: &str,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax {
        origin: origin.to_owned(),
        message: e.message().to_owned(),
    })?;
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut table, &path, value)?;
    }
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." {
            "config".to_owned()
        } else {
            path
        };
        ConfigError::field(field, e.into_inner().message().to_owned())
    })
}

/// Reads, overrides, deserializes and validates a config file. `None` means
/// all defaults.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let (text, origin) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_owned()),
    };
    let cfg = parse_config(&text, &origin, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_positive(field: String, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::field(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(ConfigError::field("output_dir", "must not be empty"));
        }
        let s = &self.synthetic;
        if s.sparsity > s.dim {
            return Err(ConfigError::field(
                "synthetic.sparsity",
                format!(
                    "synthetic.sparsity = {} exceeds synthetic.dim = {}",
                    s.sparsity, s.dim
                ),
            ));
        }
        s.validate()
            .map_err(|e| ConfigError::from_core("synthetic", e))?;
        self.hyper.validate().map_err(|e| match e {
            CoreError::InvalidArgument { name, reason } if name == "tol" || name == "max_iters" => {
                ConfigError::field(format!("hyper.inner.{name}"), reason)
            }
            other => ConfigError::from_core("hyper", other),
        })?;
        if self.online.max_outer == 0 {
            return Err(ConfigError::field("online.max_outer", "must be at least 1"));
        }
        if !(self.online.outer_tol >= 0.0) {
            return Err(ConfigError::field(
                "online.outer_tol",
                format!("must be nonnegative, got {}", self.online.outer_tol),
            ));
        }
        if self.grid.points == 0 {
            return Err(ConfigError::field("grid.points", "must be at least 1"));
        }
        if !(self.grid.min_ratio > 0.0 && self.grid.min_ratio < 1.0) {
            return Err(ConfigError::field(
                "grid.min_ratio",
                format!("must lie in (0, 1), got {}", self.grid.min_ratio),
            ));
        }
        if self.data.is_none() {
            self.scheme
                .validate(s.n_train)
                .map_err(|e| ConfigError::from_core("scheme", e))?;
            self.regularizer.build(s.dim)?;
        }

        let sweep = |name: &str, values: &[f64]| -> Result<(), ConfigError> {
            if values.is_empty() {
                return Err(ConfigError::field(
                    name,
                    format!("nonempty sweep required for mode {:?}", self.mode).to_lowercase(),
                ));
            }
            for (i, &v) in values.iter().enumerate() {
                check_positive(format!("{name}[{i}]"), v)?;
            }
            Ok(())
        };
        match self.mode {
            Mode::Exp1 => sweep("betas", &self.betas)?,
            Mode::Exp2 => {
                sweep("betas", &self.betas)?;
                sweep("tols", &self.tols)?;
            }
            Mode::Hsgd | Mode::Ohsgd | Mode::Grid => {}
        }
        Ok(())
    }

    /// Hyper settings for an online run: the shared ones with the online limits.
    pub fn online_hyper(&self) -> HyperConfig {
        HyperConfig {
            max_outer: self.online.max_outer,
            outer_tol: self.online.outer_tol,
            ..self.hyper
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_paper_defaults() {
        let cfg = parse_config("", "t", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.synthetic.dim, 100);
        assert_eq!(cfg.synthetic.sparsity, 10);
        assert_eq!(cfg.synthetic.n_train, 200);
        assert_eq!(cfg.synthetic.snr, 0.3);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig {
            regularizer: RegularizerSpec::GroupLasso {
                group_size: Some(10),
                sizes: None,
                groups: None,
            },
            scheme: ValidationScheme::KFold {
                n_folds: 5,
                seed: 3,
            },
            ..ExperimentConfig::default()
        };
        cfg.hyper.lambda_init = Some(0.25);
        let back = parse_config(&cfg.to_toml(), "t", &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = parse_config(
            "mode = \"grid\"",
            "t",
            &[
                "synthetic.dim=20".into(),
                "synthetic.sparsity = 4".into(),
                "hyper.inner.tol=0.1".into(),
                "output_dir=some/dir".into(),
                "betas=[1e-3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Grid);
        assert_eq!(cfg.synthetic.dim, 20);
        assert_eq!(cfg.synthetic.sparsity, 4);
        assert_eq!(cfg.hyper.inner.tol, 0.1);
        assert_eq!(cfg.output_dir, PathBuf::from("some/dir"));
        assert_eq!(cfg.betas, vec![1e-3]);
    }

    #[test]
    fn malformed_override() {
        assert!(matches!(
            parse_override("novalue"),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            parse_override("a..b=1"),
            Err(ConfigError::BadOverride(_))
        ));
        let err = parse_config("mode = \"grid\"", "t", &["mode.x=1".into()]).unwrap_err();
        assert!(err.to_string().starts_with("mode:"), "{err}");
    }

    #[test]
    fn unknown_key_is_reported_with_its_path() {
        let err = parse_config("[synthetic]\ndimension = 5\n", "t", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("synthetic"), "{msg}");
        assert!(msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_reported_with_its_path() {
        let err = parse_config("[hyper]\nbeta = \"big\"\n", "t", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("hyper.beta"), "{msg}");
    }

    #[test]
    fn syntax_error_names_origin() {
        let err = parse_config("mode = ", "cfg.toml", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { .. }));
        assert!(err.to_string().starts_with("cfg.toml"));
    }

    #[test]
    fn sparsity_above_dim_names_both_fields() {
        let cfg = parse_config("[synthetic]\nsparsity = 200\ndim = 100\n", "t", &[]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("synthetic.sparsity"), "{msg}");
        assert!(msg.contains("synthetic.dim"), "{msg}");
    }

    #[test]
    fn empty_sweeps_are_rejected() {
        let cfg = parse_config("mode = \"exp1\"\nbetas = []\n", "t", &[]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("nonempty sweep required"), "{msg}");
        assert!(msg.starts_with("betas"), "{msg}");

        let cfg = parse_config("mode = \"exp2\"\ntols = []\n", "t", &[]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(
            msg.starts_with("tols") && msg.contains("nonempty sweep required"),
            "{msg}"
        );

        // Other modes ignore the sweeps.
        let cfg = parse_config("mode = \"grid\"\nbetas = []\n", "t", &[]).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn sweep_values_must_be_positive() {
        let cfg = parse_config("mode = \"exp2\"\ntols = [0.1, 0.0]\n", "t", &[]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.starts_with("tols[1]"), "{msg}");
    }

    #[test]
    fn core_constraints_get_section_paths() {
        let cases = [
            ("[hyper]\nbeta = -1.0\n", "hyper.beta"),
            ("[hyper.inner]\ntol = 0.0\n", "hyper.inner.tol"),
            ("[synthetic]\nsnr = 0.0\n", "synthetic.snr"),
            (
                "[scheme]\nkind = \"k_fold\"\nn_folds = 1\nseed = 0\n",
                "scheme.n_folds",
            ),
            ("[grid]\npoints = 0\n", "grid.points"),
            ("[online]\nmax_outer = 0\n", "online.max_outer"),
            (
                "[regularizer]\nkind = \"group_lasso\"\ngroup_size = 7\n",
                "regularizer.group_size",
            ),
            ("[regularizer]\nkind = \"group_lasso\"\n", "regularizer"),
            (
                "[regularizer]\nkind = \"group_lasso\"\nsizes = [50, 40]\n",
                "regularizer.sizes",
            ),
        ];
        for (text, field) in cases {
            let cfg = parse_config(text, "t", &[]).unwrap();
            let err = cfg.validate().unwrap_err();
            match err {
                ConfigError::Field { field: f, .. } => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other}"),
            }
        }
    }

    #[test]
    fn group_specs_build() {
        let spec = |text: &str| parse_config(text, "t", &[]).unwrap().regularizer;
        let by_size = spec("[regularizer]\nkind = \"group_lasso\"\ngroup_size = 2\n")
            .build(4)
            .unwrap();
        let by_sizes = spec("[regularizer]\nkind = \"group_lasso\"\nsizes = [2, 2]\n")
            .build(4)
            .unwrap();
        let by_index = spec("[regularizer]\nkind = \"group_lasso\"\ngroups = [[0, 1], [2, 3]]\n")
            .build(4)
            .unwrap();
        assert_eq!(by_size, by_sizes);
        assert_eq!(by_size, by_index);
    }

    #[test]
    fn online_hyper_swaps_only_the_limits() {
        let cfg = ExperimentConfig::default();
        let h = cfg.online_hyper();
        assert_eq!(h.max_outer, cfg.online.max_outer);
        assert_eq!(h.outer_tol, cfg.online.outer_tol);
        assert_eq!(h.beta, cfg.hyper.beta);
        assert_eq!(h.inner, cfg.hyper.inner);
    }
}
