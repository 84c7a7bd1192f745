use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::embed::{target_measure_from_optimal_path, EmbeddingKind};
use crate::envs::{Gridworld, Terrain, TwoGoal};
use crate::error::{Error, Result};
use crate::measures::{CostKind, DiscreteMeasure};
use crate::ot::OtConfig;
use crate::wrl::WrlConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AttractGridworld,
    RepulseTwogoal,
    OtSolve,
}

/// Single-policy trainer used by `attract_gridworld`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    /// Kernel duals against samples of the target.
    Alg1,
    /// Semi-dual vector against the discrete target.
    #[default]
    Alg4,
    /// Plain policy gradient on the return; ignores `lambda`.
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldSpec {
    /// Terrain file; the bundled terrain when absent.
    pub terrain: Option<PathBuf>,
    pub timeout: usize,
    pub timeout_penalty: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            terrain: None,
            timeout: 50,
            timeout_penalty: -10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    /// Width of the per-cell RBF features on the gridworld.
    pub rbf_bandwidth: f64,
    /// Hidden layer widths of the two-goal MLP.
    pub hidden: Vec<usize>,
    /// Exploration noise of the two-goal MLP.
    pub stddev: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            rbf_bandwidth: 2.0,
            hidden: vec![15, 15],
            stddev: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtSpec {
    pub mu: Option<PathBuf>,
    pub nu: Option<PathBuf>,
    pub cost_kind: CostKind,
    pub solver: OtConfig,
}

impl Default for OtSpec {
    fn default() -> Self {
        Self {
            mu: None,
            nu: None,
            cost_kind: CostKind::Euclidean,
            solver: OtConfig::default(),
        }
    }
}

/// Everything needed to reproduce a batch of runs. Sections a given
/// experiment does not read may be left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Where outputs go unless the caller says otherwise.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub trainer: TrainerKind,
    #[serde(default)]
    pub wrl: WrlConfig,
    #[serde(default)]
    pub gridworld: GridworldSpec,
    #[serde(default)]
    pub two_goal: TwoGoal,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub ot: OtSpec,
    /// Fill the `wallclock_ms` column; off keeps CSVs byte-reproducible.
    #[serde(default)]
    pub record_wallclock: bool,
}

/// A parsed config with its file references resolved.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// File stem of the config, used to name default output folders.
    pub name: String,
    pub terrain: Terrain,
    /// Gridworld target: the visit distribution of the cheapest path.
    pub target: Option<DiscreteMeasure>,
    pub mu: Option<DiscreteMeasure>,
    pub nu: Option<DiscreteMeasure>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Sets `path` (dotted) inside `root` to `raw`, read as JSON when it
/// parses and as a bare string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (depth, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            let parent = keys[..depth].join(".");
            return Err(config_err(format!("`{parent}` is not a section; cannot set `{path}`")));
        };
        if depth + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("override paths have at least one key")
}

/// Parses `key=value` into its two halves.
pub fn split_override(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| config_err(format!("override `{arg}` is not of the form key=value")))
}

impl ExperimentConfig {
    /// Deserialises with the offending field's path in any error message.
    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                config_err(e.inner().to_string())
            } else {
                config_err(format!("{path}: {}", e.inner()))
            }
        })
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| config_err(format!("not valid JSON: {e}")))?;
        if !value.is_object() {
            return Err(config_err("the config must be an object"));
        }
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        Self::from_value(value)
    }

    /// Checks the sections this experiment reads.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| config_err(e.to_string());
        match self.experiment {
            ExperimentKind::AttractGridworld | ExperimentKind::RepulseTwogoal => {
                if self.seeds.is_empty() {
                    return Err(config_err("seeds: at least one seed is required"));
                }
                let mut seen = self.seeds.clone();
                seen.sort_unstable();
                if seen.windows(2).any(|w| w[0] == w[1]) {
                    return Err(config_err("seeds: duplicate seed"));
                }
                self.wrl.validate().map_err(|e| config_err(format!("wrl: {e}")))?;
            }
            ExperimentKind::OtSolve => {
                self.ot.solver.validate().map_err(|e| config_err(format!("ot.solver: {e}")))?;
                if self.ot.mu.is_none() || self.ot.nu.is_none() {
                    return Err(config_err("ot: both `mu` and `nu` files are required"));
                }
            }
        }
        match self.experiment {
            ExperimentKind::AttractGridworld => {
                if !(self.policy.rbf_bandwidth > 0.0 && self.policy.rbf_bandwidth.is_finite()) {
                    return Err(config_err("policy.rbf_bandwidth: must be positive"));
                }
            }
            ExperimentKind::RepulseTwogoal => {
                self.two_goal.validate().map_err(wrap)?;
                if !(self.policy.stddev > 0.0 && self.policy.stddev.is_finite()) {
                    return Err(config_err("policy.stddev: must be positive"));
                }
                if self.policy.hidden.contains(&0) {
                    return Err(config_err("policy.hidden: layer widths must be positive"));
                }
            }
            ExperimentKind::OtSolve => {}
        }
        Ok(())
    }

    /// The fields that can change what a run produces, with the terrain
    /// and measures inlined so that editing a referenced file counts.
    pub fn effective(&self, loaded: &LoadedConfig) -> Value {
        let mut wrl = self.wrl.clone();
        wrl.seed = 0;
        let mut v = serde_json::json!({
            "experiment": self.experiment,
            "seeds": self.seeds,
            "record_wallclock": self.record_wallclock,
        });
        let m = v.as_object_mut().expect("object literal");
        match self.experiment {
            ExperimentKind::AttractGridworld => {
                m.insert("trainer".into(), serde_json::json!(self.trainer));
                m.insert("wrl".into(), serde_json::json!(wrl));
                m.insert(
                    "gridworld".into(),
                    serde_json::json!({
                        "terrain": loaded.terrain,
                        "timeout": self.gridworld.timeout,
                        "timeout_penalty": self.gridworld.timeout_penalty,
                    }),
                );
                m.insert("policy".into(), serde_json::json!({ "rbf_bandwidth": self.policy.rbf_bandwidth }));
            }
            ExperimentKind::RepulseTwogoal => {
                m.insert("wrl".into(), serde_json::json!(wrl));
                m.insert("two_goal".into(), serde_json::json!(self.two_goal));
                m.insert(
                    "policy".into(),
                    serde_json::json!({ "hidden": self.policy.hidden, "stddev": self.policy.stddev }),
                );
            }
            ExperimentKind::OtSolve => {
                m.remove("seeds");
                m.remove("record_wallclock");
                m.insert(
                    "ot".into(),
                    serde_json::json!({
                        "mu": loaded.mu,
                        "nu": loaded.nu,
                        "cost_kind": self.ot.cost_kind,
                        "solver": self.ot.solver,
                    }),
                );
            }
        }
        v
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_measure(base: &Path, p: &Path, field: &str) -> Result<DiscreteMeasure> {
    let path = resolve(base, p);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| config_err(format!("{field}: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{field}: {}: {e}", path.display())))
}

impl LoadedConfig {
    /// Reads, overrides, validates and resolves a config file. Relative
    /// file references are taken from the config's own directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(ExperimentConfig::parse(&text, overrides)?, name, base)
    }

    pub fn from_config(config: ExperimentConfig, name: String, base: &Path) -> Result<Self> {
        config.validate()?;
        let terrain = match &config.gridworld.terrain {
            None => Terrain::default_terrain(),
            Some(p) => {
                let path = resolve(base, p);
                Terrain::load(&path)
                    .map_err(|e| config_err(format!("gridworld.terrain: {}: {e}", path.display())))?
            }
        };
        let target = if config.experiment == ExperimentKind::AttractGridworld {
            let env = Gridworld::new(terrain.clone(), config.gridworld.timeout, config.gridworld.timeout_penalty)
                .map_err(|e| config_err(format!("gridworld: {e}")))?;
            let emb = &config.wrl.embedding;
            if emb.kind != EmbeddingKind::VisitDistribution {
                return Err(config_err("wrl.embedding.kind: the gridworld target is a visit distribution"));
            }
            if emb.grid != [env.rows(), env.cols()] {
                return Err(config_err(format!(
                    "wrl.embedding.grid: {:?} does not match the {}x{} terrain",
                    emb.grid,
                    env.rows(),
                    env.cols()
                )));
            }
            Some(target_measure_from_optimal_path(&env).map_err(|e| config_err(format!("gridworld.terrain: {e}")))?)
        } else {
            None
        };
        let (mu, nu) = if config.experiment == ExperimentKind::OtSolve {
            let (m, n) = (config.ot.mu.as_deref(), config.ot.nu.as_deref());
            (
                Some(load_measure(base, m.expect("validated"), "ot.mu")?),
                Some(load_measure(base, n.expect("validated"), "ot.nu")?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            name,
            terrain,
            target,
            mu,
            nu,
        })
    }

    pub fn effective(&self) -> Value {
        self.config.effective(self)
    }

    /// SHA-256 of the effective config, hex encoded.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.effective()).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ATTRACT: &str = r#"{"experiment": "attract_gridworld", "seeds": [1, 2],
        "wrl": {"lambda": -1, "iterations": 200}}"#;

    fn loaded(text: &str, ov: &[(&str, &str)]) -> Result<LoadedConfig> {
        let ov: Vec<_> = ov.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        LoadedConfig::from_config(ExperimentConfig::parse(text, &ov)?, "t".into(), Path::new("."))
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = loaded(ATTRACT, &[("wrl.rho", "0.5"), ("gridworld.timeout", "30"), ("seeds", "[7]")]).unwrap();
        assert_eq!(c.config.wrl.rho, 0.5);
        assert_eq!(c.config.wrl.lambda, -1.0);
        assert_eq!(c.config.gridworld.timeout, 30);
        assert_eq!(c.config.seeds, vec![7]);
        let c = loaded(ATTRACT, &[("trainer", "alg1")]).unwrap();
        assert_eq!(c.config.trainer, TrainerKind::Alg1);
    }

    #[test]
    fn unknown_fields_are_named() {
        for (ov, needle) in [
            (("bogus", "1"), "bogus"),
            (("wrl.lamda", "1"), "lamda"),
            (("gridworld.heights", "1"), "heights"),
        ] {
            let msg = loaded(ATTRACT, &[ov]).unwrap_err().to_string();
            assert!(msg.contains(needle), "{msg}");
        }
        let msg = loaded(ATTRACT, &[("wrl.rho", "\"x\"")]).unwrap_err().to_string();
        assert!(msg.contains("wrl.rho"), "{msg}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for ov in [("seeds", "[]"), ("wrl.rho", "-1"), ("gridworld.timeout", "3"), ("seeds", "[1,1]")] {
            assert!(matches!(loaded(ATTRACT, &[ov]), Err(Error::Config(_))), "{ov:?}");
        }
        assert!(loaded("[1]", &[]).is_err());
        assert!(loaded(ATTRACT, &[("wrl.rho.x", "1")]).is_err());
        assert!(split_override("novalue").is_err());
        assert_eq!(split_override("a.b = 3").unwrap(), ("a.b", "3"));
    }

    #[test]
    fn hash_tracks_effective_fields_only() {
        let base = loaded(ATTRACT, &[]).unwrap().config_hash();
        assert_eq!(base, loaded(ATTRACT, &[]).unwrap().config_hash());
        // unread by this experiment
        for ov in [("two_goal.horizon", "5"), ("policy.stddev", "0.9"), ("output_dir", "elsewhere"), ("wrl.seed", "9")] {
            assert_eq!(base, loaded(ATTRACT, &[ov]).unwrap().config_hash(), "{ov:?}");
        }
        // spelling out a default is not a change
        assert_eq!(base, loaded(ATTRACT, &[("wrl.rho", "1.0")]).unwrap().config_hash());
        for ov in [("wrl.rho", "0.5"), ("gridworld.timeout", "40"), ("trainer", "alg1"), ("seeds", "[1]"), ("record_wallclock", "true")] {
            assert_ne!(base, loaded(ATTRACT, &[ov]).unwrap().config_hash(), "{ov:?}");
        }
    }
}
