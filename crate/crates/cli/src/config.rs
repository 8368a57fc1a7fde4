//! The experiment file format.
//!
//! A run is described by a TOML file of flat keys plus one optional section
//! per concern (`[train]`, `[coverage]`, `[metrics]`, `[backend]`,
//! `[benchmark]`). Every key is optional except `task`; omitted keys fall
//! back to the library defaults for that task. Unknown keys anywhere are
//! errors — a typo must fail loudly, not silently run the default.

use std::path::PathBuf;

use serde::Deserialize;
use tsnpe_core::density::Backend;
use tsnpe_core::engine::{CoverageConfig, CoverageStrategy, MetricsConfig};
use tsnpe_core::nn::Activation;
use tsnpe_core::{Error, Method, Result, RunConfig, SamplerMethod};

/// Top-level file schema. Mirrors `RunConfig` key for key, with the
/// harness-only additions `out` and `[benchmark]`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<String>,
    pub observation: Option<u64>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub sims_per_round: Option<usize>,
    pub method: Option<Method>,
    pub epsilon: Option<f64>,
    pub threshold_draws: Option<usize>,
    /// "rejection" | "sir" | "auto"
    pub sampler: Option<String>,
    /// SIR candidate count K; only meaningful with `sampler = "sir"`.
    pub sir_candidates: Option<usize>,
    pub ensemble: Option<usize>,
    pub atoms: Option<usize>,
    pub warm_start: Option<bool>,
    pub constrain_space: Option<bool>,
    pub stop_after: Option<usize>,
    /// Output directory for this run (overridden by `--out`).
    pub out: Option<PathBuf>,
    pub backend: Option<BackendSection>,
    pub train: Option<TrainSection>,
    pub coverage: Option<CoverageSection>,
    pub metrics: Option<MetricsSection>,
    pub benchmark: Option<BenchmarkSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// "mdn" | "flow"
    pub kind: String,
    pub components: Option<usize>,
    pub layers: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub val_fraction: Option<f64>,
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSection {
    pub rows: Option<usize>,
    pub posterior_draws: Option<usize>,
    pub strategy: Option<CoverageStrategy>,
    pub final_round_only: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub leakage: Option<bool>,
    pub leakage_draws: Option<usize>,
    pub reference_c2st: Option<bool>,
    pub c2st_samples: Option<usize>,
}

/// The grid a `benchmark` invocation sweeps. Budgets are *total* simulation
/// counts, split evenly across `rounds`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub tasks: Vec<String>,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rounds: Option<usize>,
    pub observations: Option<Vec<u64>>,
    /// Per-side sample count for reference comparisons (c2st and
    /// true-posterior retention).
    pub c2st_samples: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn sampler_method(&self) -> Result<Option<SamplerMethod>> {
        let Some(name) = self.sampler.as_deref() else {
            if self.sir_candidates.is_some() {
                return Err(Error::Config(
                    "sir_candidates is set but sampler is not \"sir\"".into(),
                ));
            }
            return Ok(None);
        };
        let method = match name {
            "rejection" => SamplerMethod::Rejection,
            "sir" => SamplerMethod::Sir {
                candidates: self.sir_candidates.unwrap_or(1024),
            },
            "auto" => SamplerMethod::Auto,
            other => {
                return Err(Error::Config(format!(
                    "unknown sampler \"{other}\" (expected rejection, sir, or auto)"
                )))
            }
        };
        if !matches!(method, SamplerMethod::Sir { .. }) && self.sir_candidates.is_some() {
            return Err(Error::Config(format!(
                "sir_candidates is set but sampler is \"{name}\""
            )));
        }
        Ok(Some(method))
    }

    fn backend(&self) -> Result<Option<Backend>> {
        let Some(b) = &self.backend else { return Ok(None) };
        let backend = match b.kind.as_str() {
            "mdn" => {
                if b.layers.is_some() {
                    return Err(Error::Config(
                        "backend.layers applies to kind = \"flow\", not \"mdn\"".into(),
                    ));
                }
                let Backend::Mdn {
                    components,
                    hidden,
                    activation,
                } = Backend::default()
                else {
                    unreachable!()
                };
                Backend::Mdn {
                    components: b.components.unwrap_or(components),
                    hidden: b.hidden.clone().unwrap_or(hidden),
                    activation: b.activation.unwrap_or(activation),
                }
            }
            "flow" => {
                if b.components.is_some() {
                    return Err(Error::Config(
                        "backend.components applies to kind = \"mdn\", not \"flow\"".into(),
                    ));
                }
                let Backend::Flow {
                    layers,
                    hidden,
                    activation,
                } = Backend::default_flow()
                else {
                    unreachable!()
                };
                Backend::Flow {
                    layers: b.layers.unwrap_or(layers),
                    hidden: b.hidden.clone().unwrap_or(hidden),
                    activation: b.activation.unwrap_or(activation),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown backend kind \"{other}\" (expected mdn or flow)"
                )))
            }
        };
        Ok(Some(backend))
    }

    /// Resolve into a validated run config for `task` (the file's own task
    /// by default; the benchmark grid substitutes its own).
    pub fn run_config_for(&self, task: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(task, self.seed.unwrap_or(0))?;
        if let Some(v) = self.observation {
            cfg.observation = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.sims_per_round {
            cfg.sims_per_round = v;
        }
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.threshold_draws {
            cfg.threshold_draws = v;
        }
        if let Some(v) = self.sampler_method()? {
            cfg.sampler = v;
        }
        if let Some(v) = self.backend()? {
            cfg.backend = v;
        }
        if let Some(v) = self.ensemble {
            cfg.ensemble = v;
        }
        if let Some(v) = self.atoms {
            cfg.atoms = v;
        }
        if let Some(v) = self.warm_start {
            cfg.warm_start = v;
        }
        if let Some(v) = self.constrain_space {
            cfg.constrain_space = v;
        }
        cfg.stop_after = self.stop_after;
        if let Some(t) = &self.train {
            if let Some(v) = t.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = t.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = t.val_fraction {
                cfg.train.val_fraction = v;
            }
            if let Some(v) = t.patience {
                cfg.train.patience = v;
            }
            if let Some(v) = t.max_epochs {
                cfg.train.max_epochs = v;
            }
        }
        if let Some(c) = &self.coverage {
            let mut cc = CoverageConfig::default();
            if let Some(v) = c.rows {
                cc.rows = v;
            }
            if let Some(v) = c.posterior_draws {
                cc.posterior_draws = v;
            }
            if let Some(v) = c.strategy {
                cc.strategy = v;
            }
            if let Some(v) = c.final_round_only {
                cc.final_round_only = v;
            }
            cfg.coverage = Some(cc);
        }
        if let Some(m) = &self.metrics {
            let mut mc = MetricsConfig::default();
            if let Some(v) = m.leakage {
                mc.leakage = v;
            }
            if let Some(v) = m.leakage_draws {
                mc.leakage_draws = v;
            }
            if let Some(v) = m.reference_c2st {
                mc.reference_c2st = v;
            }
            if let Some(v) = m.c2st_samples {
                mc.c2st_samples = v;
            }
            cfg.metrics = mc;
        }
        Ok(cfg)
    }

    /// Resolve the file's own run (requires `task`).
    pub fn run_config(&self) -> Result<RunConfig> {
        let task = self
            .task
            .as_deref()
            .ok_or_else(|| Error::Config("config file sets no task".into()))?;
        self.run_config_for(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<FileConfig> {
        toml::from_str::<FileConfig>(text).map_err(|e| Error::Config(e.to_string()))
    }

    #[test]
    fn minimal_config_fills_task_defaults() {
        let file = parse("task = \"two_moons\"").unwrap();
        let cfg = file.run_config().unwrap();
        assert_eq!(cfg.task, "two_moons");
        assert_eq!(cfg.rounds, 10);
        assert_eq!(cfg.sampler, SamplerMethod::Auto);
        assert!(cfg.coverage.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = parse("task = \"toy1d\"\nepsilonn = 0.1").unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
        let err = parse("task = \"toy1d\"\n[train]\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn sampler_strings_map_to_methods() {
        let file = parse("task = \"toy1d\"\nsampler = \"sir\"\nsir_candidates = 64").unwrap();
        assert_eq!(
            file.run_config().unwrap().sampler,
            SamplerMethod::Sir { candidates: 64 }
        );
        let file = parse("task = \"toy1d\"\nsampler = \"sir\"").unwrap();
        assert_eq!(
            file.run_config().unwrap().sampler,
            SamplerMethod::Sir { candidates: 1024 }
        );
        let file = parse("task = \"toy1d\"\nsampler = \"rejection\"").unwrap();
        assert_eq!(file.run_config().unwrap().sampler, SamplerMethod::Rejection);
        // K without SIR is a contradiction, not a silent ignore.
        let file =
            parse("task = \"toy1d\"\nsampler = \"rejection\"\nsir_candidates = 64").unwrap();
        assert!(file.run_config().is_err());
        let file = parse("task = \"toy1d\"\nsir_candidates = 64").unwrap();
        assert!(file.run_config().is_err());
        let file = parse("task = \"toy1d\"\nsampler = \"metropolis\"").unwrap();
        assert!(file.run_config().is_err());
    }

    #[test]
    fn backend_section_round_trips() {
        let file = parse(
            "task = \"toy1d\"\n[backend]\nkind = \"flow\"\nlayers = 3\nhidden = [32]\n\
             activation = \"relu\"",
        )
        .unwrap();
        let cfg = file.run_config().unwrap();
        assert_eq!(
            cfg.backend,
            Backend::Flow {
                layers: 3,
                hidden: vec![32],
                activation: Activation::Relu
            }
        );
        // Cross-kind keys are errors.
        let file = parse("task = \"toy1d\"\n[backend]\nkind = \"mdn\"\nlayers = 3").unwrap();
        assert!(file.run_config().is_err());
    }

    #[test]
    fn sections_override_defaults_field_by_field() {
        let file = parse(
            "task = \"toy1d\"\nmethod = \"apt\"\natoms = 4\n[train]\nbatch_size = 64\n\
             [coverage]\nrows = 100\n[metrics]\nleakage_draws = 500",
        )
        .unwrap();
        let cfg = file.run_config().unwrap();
        assert_eq!(cfg.method, Method::Apt);
        assert_eq!(cfg.atoms, 4);
        assert_eq!(cfg.train.batch_size, 64);
        let cov = cfg.coverage.unwrap();
        assert_eq!(cov.rows, 100);
        assert_eq!(cov.posterior_draws, 1000, "unset keys keep defaults");
        assert_eq!(cfg.metrics.leakage_draws, 500);
        assert!(cfg.metrics.leakage);
    }
}
