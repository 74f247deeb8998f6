//! Declarative experiment configuration: one JSON document per experiment,
//! schema-validated with field-path diagnostics.
//!
//! Dataset paths may be relative; relative paths resolve against the
//! `TDVCL_DATA_ROOT` environment variable when it is set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdvcl_core::error::{CoreError, Result};
use tdvcl_core::objectives::{ObjectiveKind, ObjectiveSpec};
use tdvcl_core::trainer::{RunSettings, TrainConfig};

pub const DATA_ROOT_ENV: &str = "TDVCL_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Permuted,
    Split,
    Synthetic,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    pub fn resolved(&self) -> DataPaths {
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                return p.to_path_buf();
            }
            match std::env::var_os(DATA_ROOT_ENV) {
                Some(root) => Path::new(&root).join(p),
                None => p.to_path_buf(),
            }
        };
        DataPaths {
            train_images: resolve(&self.train_images),
            train_labels: resolve(&self.train_labels),
            test_images: resolve(&self.test_images),
            test_labels: resolve(&self.test_labels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub kind: ObjectiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub head_mode: HeadMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub max_tasks: usize,
    pub per_task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub per_task: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub side: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { classes: 10, side: 28 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub dim: usize,
    pub tasks: usize,
    pub noise_var: f64,
    pub prior_var: f64,
    pub noise_scale: f64,
    pub nstep: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { dim: 4, tasks: 8, noise_var: 0.25, prior_var: 1.0, noise_scale: 0.1, nstep: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_pairs: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub prior_variance: f64,
    pub replay: ReplayConfig,
    pub eval_mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_dataset_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coreset: Option<CoresetConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::contract(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::contract(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| -> CoreError {
            CoreError::contract(format!("config field `{name}`: {msg}"))
        };
        if self.seeds.is_empty() {
            return Err(field("seeds", "must list at least one seed"));
        }
        match self.method.kind {
            ObjectiveKind::NStepKl => {
                if self.method.n.is_none() {
                    return Err(field("method.n", "required for kind nstep_kl"));
                }
                if self.method.beta.is_none() {
                    return Err(field("method.beta", "required for kind nstep_kl"));
                }
            }
            ObjectiveKind::TdLambda => {
                if self.method.n.is_none() {
                    return Err(field("method.n", "required for kind td_lambda"));
                }
                if self.method.lambda.is_none() {
                    return Err(field("method.lambda", "required for kind td_lambda"));
                }
                if self.method.beta.is_none() {
                    return Err(field("method.beta", "required for kind td_lambda"));
                }
            }
            ObjectiveKind::Vcl | ObjectiveKind::VclCoreSet => {
                if self.method.beta.is_none() {
                    return Err(field("method.beta", "required for variational kinds"));
                }
            }
            ObjectiveKind::OnlineMle | ObjectiveKind::BatchMle => {}
        }
        match self.benchmark {
            Benchmark::Permuted => {
                if self.data.is_none() && self.synthetic.is_none() {
                    return Err(field(
                        "data",
                        "permuted benchmark needs IDX paths (or a `synthetic` base)",
                    ));
                }
                if self.task_count.is_none() {
                    return Err(field("task_count", "required for the permuted benchmark"));
                }
            }
            Benchmark::Split => {
                if self.data.is_none() {
                    return Err(field("data", "split benchmark needs IDX paths"));
                }
                if self.split_pairs.as_ref().is_none_or(Vec::is_empty) {
                    return Err(field("split_pairs", "required for the split benchmark"));
                }
            }
            Benchmark::Synthetic => {
                if self.task_count.is_none() {
                    return Err(field("task_count", "required for the synthetic benchmark"));
                }
            }
            Benchmark::Oracle => {}
        }
        if let Some(data) = &self.data {
            let resolved = data.resolved();
            for (name, p) in [
                ("data.train_images", &resolved.train_images),
                ("data.train_labels", &resolved.train_labels),
                ("data.test_images", &resolved.test_images),
                ("data.test_labels", &resolved.test_labels),
            ] {
                if !p.exists() {
                    return Err(field(name, &format!("path does not exist: {}", p.display())));
                }
            }
        }
        if self.network.hidden.is_empty() {
            return Err(field("network.hidden", "must list at least one layer width"));
        }
        self.to_spec()?.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_spec(&self) -> Result<ObjectiveSpec> {
        let mc = self.train.train_mc_samples;
        let spec = match self.method.kind {
            ObjectiveKind::OnlineMle => ObjectiveSpec::online_mle(),
            ObjectiveKind::BatchMle => ObjectiveSpec::batch_mle(),
            ObjectiveKind::Vcl => ObjectiveSpec::vcl(self.method.beta.unwrap_or(1.0), mc),
            ObjectiveKind::VclCoreSet => {
                ObjectiveSpec::vcl_coreset(self.method.beta.unwrap_or(1.0), mc)
            }
            ObjectiveKind::NStepKl => ObjectiveSpec::nstep_kl(
                self.method.n.unwrap_or(1),
                self.method.beta.unwrap_or(1.0),
                mc,
            ),
            ObjectiveKind::TdLambda => ObjectiveSpec::td_lambda(
                self.method.n.unwrap_or(1),
                self.method.lambda.unwrap_or(0.0),
                self.method.beta.unwrap_or(1.0),
                mc,
            ),
        };
        Ok(spec)
    }

    pub fn to_settings(&self, seed: u64) -> RunSettings {
        let mut train = self.train.clone();
        train.seed = seed;
        RunSettings {
            train,
            hidden: self.network.hidden.clone(),
            prior_variance: self.prior_variance,
            replay_max_tasks: self.replay.max_tasks,
            replay_per_task: self.replay.per_task,
            eval_mc_samples: self.eval_mc_samples,
            coreset_per_task: self.coreset.as_ref().map(|c| c.per_task),
            coreset_epochs: self.coreset.as_ref().map_or(20, |c| c.epochs),
            multi_head: self.network.head_mode == HeadMode::Multi,
            kl_dataset_scale: self.kl_dataset_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_synthetic() -> serde_json::Value {
        serde_json::json!({
            "benchmark": "synthetic",
            "task_count": 2,
            "method": {"kind": "vcl", "beta": 1e-3},
            "train": {
                "batch_size": 32, "max_epochs": 3, "learning_rate": 1e-2,
                "patience": 2, "train_mc_samples": 2, "validation_fraction": 0.2,
                "replay_batch_size": null, "seed": 0
            },
            "network": {"hidden": [16]},
            "prior_variance": 1e-2,
            "replay": {"max_tasks": 2, "per_task": 20},
            "eval_mc_samples": 8,
            "seeds": [0, 1],
            "output_dir": "out"
        })
    }

    #[test]
    fn parse_and_roundtrip_semantically_identical() {
        let value = minimal_synthetic();
        let config: ExperimentConfig = serde_json::from_value(value).unwrap();
        config.validate().unwrap();
        let text = serde_json::to_string(&config).unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn missing_lambda_names_the_field() {
        let mut value = minimal_synthetic();
        value["method"] = serde_json::json!({"kind": "td_lambda", "n": 4, "beta": 1e-3});
        let config: ExperimentConfig = serde_json::from_value(value).unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("method.lambda"), "{err}");
    }

    #[test]
    fn missing_data_paths_detected_for_split() {
        let mut value = minimal_synthetic();
        value["benchmark"] = serde_json::json!("split");
        value["split_pairs"] = serde_json::json!([[0, 1]]);
        let config: ExperimentConfig = serde_json::from_value(value).unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
    }

    #[test]
    fn nonexistent_path_is_rejected() {
        let mut value = minimal_synthetic();
        value["data"] = serde_json::json!({
            "train_images": "/definitely/not/here-img",
            "train_labels": "/definitely/not/here-lab",
            "test_images": "/definitely/not/here-img2",
            "test_labels": "/definitely/not/here-lab2"
        });
        let config: ExperimentConfig = serde_json::from_value(value).unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }
}
