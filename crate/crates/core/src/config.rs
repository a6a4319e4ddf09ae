//! Run configuration: layered JSON documents resolved into one snapshot
//! whose hash identifies every output of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::economics::{BaselineAccelerator, Constraints, CostConstants, Objective};
use crate::error::{Error, Result};
use crate::mapping::MappingOptions;
use crate::perfsim::PerfConfig;
use crate::server::ServerConstraints;
use crate::silicon::{ChipletSweep, SiliconConstants};
use crate::workload::{presets, ModelSpec};

/// A model given inline or by preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Inline(ModelSpec),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelSpec> {
        match self {
            ModelRef::Inline(m) => Ok(m.clone()),
            ModelRef::Preset(name) => {
                presets::by_name(name).ok_or_else(|| Error::Config(format!("unknown model preset `{name}`")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGrid {
    pub batch: Vec<u64>,
    pub context: Vec<u64>,
    /// Fraction of zero weights, 0 for dense.
    pub sparsity: Vec<f64>,
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        ScenarioGrid {
            batch: vec![1, 4, 16, 64, 256, 1024],
            context: vec![2048],
            sparsity: vec![0.0],
        }
    }
}

/// How micro-batch counts are searched for each pipeline depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSearch {
    /// Only the count minimizing `max(1/n, 1/p)` for each pipeline depth.
    #[default]
    Auto,
    /// Every divisor of the batch.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub silicon: SiliconConstants,
    pub chiplet_sweep: ChipletSweep,
    pub server: ServerConstraints,
    pub mapping: MappingOptions,
    pub perf: PerfConfig,
    pub cost: CostConstants,
    pub baseline: BaselineAccelerator,
    pub models: Vec<ModelRef>,
    pub scenarios: ScenarioGrid,
    pub heuristics: bool,
    pub schedule: ScheduleSearch,
    pub objective: Objective,
    pub constraints: Constraints,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core. Never affects results.
    pub workers: usize,
    /// Seed for randomized self-checks; the sweep itself is deterministic.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            silicon: SiliconConstants::default(),
            chiplet_sweep: ChipletSweep::default(),
            server: ServerConstraints::default(),
            mapping: MappingOptions::default(),
            perf: PerfConfig::default(),
            cost: CostConstants::default(),
            baseline: BaselineAccelerator::default(),
            models: vec![ModelRef::Preset("gpt3".into())],
            scenarios: ScenarioGrid::default(),
            heuristics: true,
            schedule: ScheduleSearch::Auto,
            objective: Objective::TcoPerToken,
            constraints: Constraints::default(),
            out: PathBuf::from("out"),
            workers: 0,
            seed: 0,
        }
    }
}

/// Keys a hardware file may set.
const HW_KEYS: &[&str] = &["silicon", "chiplet_sweep", "server", "mapping", "perf", "cost", "baseline"];

/// Command-line overrides, applied last.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub batch: Option<Vec<u64>>,
    pub context: Option<Vec<u64>>,
    pub sparsity: Option<Vec<f64>>,
    pub objective: Option<Objective>,
    pub heuristics: Option<bool>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn as_object(v: Value, path: &Path) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
    }
}

/// Hardware documents carry only hardware sections.
fn hw_layer(path: &Path) -> Result<Value> {
    let obj = as_object(read_json(path)?, path)?;
    if let Some(k) = obj.keys().find(|k| !HW_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("{}: unexpected hardware key `{k}`", path.display())));
    }
    Ok(Value::Object(obj))
}

/// A model document is either a bare model spec or an object with `models`
/// and optionally `scenarios`.
fn model_layer(path: &Path) -> Result<Value> {
    let obj = as_object(read_json(path)?, path)?;
    if obj.contains_key("d_model") {
        let mut m = Map::new();
        m.insert("models".into(), Value::Array(vec![Value::Object(obj)]));
        return Ok(Value::Object(m));
    }
    if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "models" | "scenarios")) {
        return Err(Error::Config(format!("{}: unexpected model-file key `{k}`", path.display())));
    }
    Ok(Value::Object(obj))
}

impl RunConfig {
    /// Defaults, then the hardware file, the model files and finally the
    /// command-line overrides.
    pub fn layered(hw: Option<&Path>, models: &[PathBuf], ov: &Overrides) -> Result<RunConfig> {
        let mut v = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = hw {
            merge(&mut v, hw_layer(p)?);
        }
        let mut model_list: Vec<Value> = Vec::new();
        for p in models {
            let layer = model_layer(p)?;
            if let Value::Object(mut obj) = layer {
                if let Some(Value::Array(ms)) = obj.remove("models") {
                    model_list.extend(ms);
                }
                merge(&mut v, Value::Object(obj));
            }
        }
        if !model_list.is_empty() {
            v["models"] = Value::Array(model_list);
        }
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: Value) -> Result<RunConfig> {
        let mut base = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, v);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(b) = &ov.batch {
            self.scenarios.batch = b.clone();
        }
        if let Some(c) = &ov.context {
            self.scenarios.context = c.clone();
        }
        if let Some(s) = &ov.sparsity {
            self.scenarios.sparsity = s.clone();
        }
        if let Some(o) = ov.objective {
            self.objective = o;
        }
        if let Some(h) = ov.heuristics {
            self.heuristics = h;
        }
        if let Some(o) = &ov.out {
            self.out = o.clone();
        }
        if let Some(w) = ov.workers {
            self.workers = w;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.silicon.validate()?;
        self.server.validate()?;
        self.perf.validate()?;
        self.cost.validate()?;
        for axis in [&self.chiplet_sweep.sram_mb, &self.chiplet_sweep.tflops, &self.chiplet_sweep.bandwidth] {
            axis.values()?;
        }
        if self.models.is_empty() {
            return Err(Error::EmptySweep("no models".into()));
        }
        for m in &self.models {
            m.resolve()?;
        }
        let s = &self.scenarios;
        if s.batch.is_empty() || s.context.is_empty() || s.sparsity.is_empty() {
            return Err(Error::EmptySweep("scenario grid has an empty axis".into()));
        }
        if s.batch.contains(&0) {
            return Err(Error::ZeroBatch);
        }
        if s.sparsity.iter().any(|x| !(0.0..1.0).contains(x)) {
            return Err(Error::Config("sparsity must lie in [0, 1)".into()));
        }
        if self.mapping.max_servers == 0 {
            return Err(Error::Config("mapping.max_servers must be positive".into()));
        }
        Ok(())
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>> {
        self.models.iter().map(ModelRef::resolve).collect()
    }

    /// Canonical JSON of everything that can change results.
    pub fn resolved_snapshot(&self) -> Value {
        let mut v = serde_json::to_value(self).unwrap_or(Value::Null);
        if let Value::Object(m) = &mut v {
            m.remove("out");
            m.remove("workers");
        }
        v
    }

    /// Hex SHA-256 of the canonical snapshot.
    pub fn hash(&self) -> String {
        // serde_json maps are sorted, so the encoding is canonical
        let bytes = serde_json::to_vec(&self.resolved_snapshot()).unwrap_or_default();
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let hw = write(dir.path(), "hw.json", r#"{"server": {"lanes": 4}, "perf": {"prompt_tokens": 64}}"#);
        let model = write(
            dir.path(),
            "m.json",
            r#"{"name": "tiny", "d_model": 256, "n_layers": 2, "n_heads": 4, "max_context": 512}"#,
        );
        let ov = Overrides {
            batch: Some(vec![8]),
            workers: Some(3),
            ..Default::default()
        };
        let cfg = RunConfig::layered(Some(&hw), &[model], &ov).unwrap();
        assert_eq!(cfg.server.lanes, 4);
        assert_eq!(cfg.server.power_per_lane, 250.0);
        assert_eq!(cfg.perf.prompt_tokens, 64);
        assert_eq!(cfg.scenarios.batch, vec![8]);
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.model_specs().unwrap()[0].d_ff, 1024);
    }

    #[test]
    fn hash_ignores_out_and_workers() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.workers = 7;
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.cost.pue = 1.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let hw = write(dir.path(), "hw.json", r#"{"models": []}"#);
        assert!(matches!(
            RunConfig::layered(Some(&hw), &[], &Overrides::default()),
            Err(Error::Config(_))
        ));
        let hw = write(dir.path(), "hw2.json", r#"{"server": {"lanez": 4}}"#);
        assert!(RunConfig::layered(Some(&hw), &[], &Overrides::default()).is_err());
        let missing = dir.path().join("nope.json");
        assert!(matches!(
            RunConfig::layered(Some(&missing), &[], &Overrides::default()),
            Err(Error::Io { .. })
        ));
        let ov = Overrides {
            batch: Some(vec![]),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::layered(None, &[], &ov),
            Err(Error::EmptySweep(_))
        ));
    }

    #[test]
    fn roundtrip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
