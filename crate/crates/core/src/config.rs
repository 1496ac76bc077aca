//! Run configuration: TOML sections with `section.key=value` overrides, a
//! content hash, and the manifest line stamped on every artifact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PlantSpec, SynthConfig};
use crate::decoder::Fusion;
use crate::encoder::lifecycle::{Delta, Phi};
use crate::error::{GemsError, Result};
use crate::model::{ModelConfig, Streams};
use crate::numerics::Precision;
use crate::training::{TrainConfig, Transition};

/// Version stamped into every manifest header.
pub const ARTIFACT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub users: usize,
    pub items: usize,
    pub horizon: usize,
    pub min_len: usize,
    pub topics: usize,
    pub authors_per_topic: usize,
    pub catalog_dim: usize,
    pub favorites: usize,
    pub noise: f64,
    pub topic_drift: f64,
    pub test_fraction: f64,
    pub long_range_rate: f64,
    pub mid_range_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_h: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub recent: usize,
    pub lifecycle_threshold: usize,
    pub recent_layers: usize,
    pub mid_layers: usize,
    pub decoder_layers: usize,
    pub idx_heads: usize,
    pub idx_dim: usize,
    pub top_k: usize,
    pub m_c: usize,
    /// `elu1` or `identity`.
    pub phi: String,
    /// Local exact window of the compressor; 0 disables it.
    pub delta_window: usize,
    /// `a`, `b`, `c` or `d`.
    pub fusion: String,
    pub tied: bool,
    /// `+`-joined subset of `recent`, `mid`, `lifecycle`.
    pub streams: String,
    pub code_features: bool,
    pub shared_lifecycle_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    /// `fixed` or `plateau`.
    pub transition: String,
    /// Steps per stage (fixed), or the per-stage cap (plateau).
    pub steps: [usize; 4],
    pub plateau_window: usize,
    pub plateau_threshold: f64,
    /// `f64` or `f32`.
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cutoffs for Recall/NDCG; the largest is the beam width.
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub data: DataSection,
    pub quantizer: QuantizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            users: 10_000,
            items: 4096,
            horizon: 2048,
            min_len: 768,
            topics: 64,
            authors_per_topic: 8,
            catalog_dim: 16,
            favorites: 8,
            noise: 0.2,
            topic_drift: 0.2,
            test_fraction: 0.1,
            long_range_rate: 0.3,
            mid_range_rate: 0.1,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_h: 128,
            feature_dim: 16,
            heads: 4,
            ffn_mult: 2,
            recent: 64,
            lifecycle_threshold: 512,
            recent_layers: 1,
            mid_layers: 1,
            decoder_layers: 1,
            idx_heads: 1,
            idx_dim: 16,
            top_k: 64,
            m_c: 16,
            phi: "elu1".into(),
            delta_window: 0,
            fusion: "d".into(),
            tied: true,
            streams: "recent+mid+lifecycle".into(),
            code_features: true,
            shared_lifecycle_budget: 128,
        }
    }
}

impl Default for QuantizerSection {
    fn default() -> Self {
        QuantizerSection { sizes: vec![64, 64, 64] }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            batch_size: 16,
            transition: "fixed".into(),
            steps: [200, 2000, 500, 500],
            plateau_window: Transition::DEFAULT_WINDOW,
            plateau_threshold: Transition::DEFAULT_THRESHOLD,
            precision: "f64".into(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: vec![10, 50, 100] }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            workers: 1,
            data: DataSection::default(),
            quantizer: QuantizerSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Named starting points; `desk` is the default.
pub fn profile(name: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    match name {
        "desk" => {}
        // sized so that a full train + eval run takes minutes on one core
        "acceptance" => {
            c.data = DataSection {
                users: 10_000,
                items: 2048,
                horizon: 1024,
                min_len: 400,
                topics: 32,
                // the mid stream only pays off if enough targets depend on it
                mid_range_rate: 0.3,
                ..DataSection::default()
            };
            c.quantizer.sizes = vec![32, 32, 32];
            c.model = ModelSection {
                d_h: 32,
                feature_dim: 8,
                recent: 32,
                lifecycle_threshold: 160,
                idx_dim: 8,
                top_k: 32,
                m_c: 8,
                shared_lifecycle_budget: 64,
                ..ModelSection::default()
            };
            c.train.lr = 3e-3;
            c.train.steps = [100, 1200, 300, 300];
            c.eval.ks = vec![10, 50, 100];
        }
        "toy" => {
            c.data = DataSection {
                users: 200,
                items: 256,
                horizon: 160,
                min_len: 100,
                topics: 8,
                favorites: 4,
                ..DataSection::default()
            };
            c.quantizer.sizes = vec![8, 8, 8];
            c.model = ModelSection {
                d_h: 16,
                feature_dim: 4,
                recent: 8,
                lifecycle_threshold: 40,
                idx_dim: 4,
                top_k: 8,
                m_c: 4,
                shared_lifecycle_budget: 16,
                ..ModelSection::default()
            };
            c.train.steps = [20, 60, 20, 20];
            c.train.batch_size = 8;
            c.eval.ks = vec![5, 10, 20];
        }
        other => {
            return Err(GemsError::config(
                "profile",
                format!("unknown profile `{other}` (expected desk, acceptance or toy)"),
            ))
        }
    }
    Ok(c)
}

pub fn parse_streams(s: &str) -> Result<Streams> {
    let mut st = Streams {
        recent: false,
        mid: false,
        lifecycle: false,
    };
    for part in s.split('+').map(str::trim) {
        match part {
            "recent" => st.recent = true,
            "mid" => st.mid = true,
            "lifecycle" => st.lifecycle = true,
            other => {
                return Err(GemsError::config(
                    "model.streams",
                    format!("unknown stream `{other}` (expected recent, mid, lifecycle)"),
                ))
            }
        }
    }
    Ok(st)
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(GemsError::config("train.precision", format!("unknown precision `{other}`"))),
    }
}

/// A `--set` value: a TOML literal, or a bare string when it does not parse.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<BTreeMap<String, toml::Value>>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut m| m.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// `base` overlaid with the TOML text `file`, then the `key=value`
    /// overrides (later ones win).
    pub fn layered(base: &RunConfig, file: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut v = toml::Value::try_from(base).map_err(|e| GemsError::config("config", e.to_string()))?;
        if let Some(text) = file {
            let f: toml::Value = toml::from_str(text).map_err(|e| GemsError::config("config", e.to_string()))?;
            merge(&mut v, f);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| GemsError::config(o.as_str(), "override must look like section.key=value"))?;
            let mut slot = &mut v;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| GemsError::config(key, "not a section"))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*p) {
                        return Err(GemsError::config(key, "unknown key"));
                    }
                    table.insert(p.to_string(), override_value(raw.trim()));
                    break;
                }
                slot = table.get_mut(*p).ok_or_else(|| GemsError::config(key, "unknown section"))?;
            }
        }
        let cfg: RunConfig = v.try_into().map_err(|e: toml::de::Error| GemsError::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `# gems format=1 command=train seed=3 config=…` header line.
    pub fn manifest(&self, command: &str) -> String {
        format!(
            "# gems format={ARTIFACT_FORMAT} command={command} seed={} config={}\n",
            self.seed,
            self.hash()
        )
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            n_users: d.users,
            n_items: d.items,
            horizon: d.horizon,
            min_len: d.min_len,
            n_topics: d.topics,
            authors_per_topic: d.authors_per_topic,
            catalog_dim: d.catalog_dim,
            favorites: d.favorites,
            noise: d.noise,
            topic_drift: d.topic_drift,
            test_fraction: d.test_fraction,
            plant: PlantSpec {
                long_range_rate: d.long_range_rate,
                mid_range_rate: d.mid_range_rate,
                recent: self.model.recent,
                lifecycle_threshold: self.model.lifecycle_threshold,
            },
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let phi = match m.phi.as_str() {
            "elu1" => Phi::EluPlusOne,
            "identity" => Phi::Identity,
            other => return Err(GemsError::config("model.phi", format!("unknown feature map `{other}` (expected elu1 or identity)"))),
        };
        let cfg = ModelConfig {
            d_h: m.d_h,
            feature_dim: m.feature_dim,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            recent: m.recent,
            lifecycle_threshold: m.lifecycle_threshold,
            recent_layers: m.recent_layers,
            mid_layers: m.mid_layers,
            decoder_layers: m.decoder_layers,
            idx_heads: m.idx_heads,
            idx_dim: m.idx_dim,
            top_k: m.top_k,
            m_c: m.m_c,
            phi,
            delta: if m.delta_window == 0 { Delta::None } else { Delta::LocalWindow(m.delta_window) },
            fusion: m.fusion.parse::<Fusion>()?,
            tied: m.tied,
            streams: parse_streams(&m.streams)?,
            code_features: m.code_features,
            shared_lifecycle_budget: m.shared_lifecycle_budget,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, stage: u8) -> Result<TrainConfig> {
        let t = &self.train;
        let transition = match t.transition.as_str() {
            "fixed" => Transition::Fixed { steps: t.steps },
            "plateau" => Transition::Plateau {
                window: t.plateau_window,
                threshold: t.plateau_threshold,
                max_steps: t.steps,
            },
            other => return Err(GemsError::config("train.transition", format!("unknown transition `{other}` (expected fixed or plateau)"))),
        };
        let cfg = TrainConfig {
            stage,
            lambda: 0.0,
            sparse_active: false,
            top_k: self.model.top_k,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: self.seed,
            transition,
            workers: self.workers.max(1),
            precision: parse_precision(&t.precision)?,
        }
        .at_stage(stage);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.model_config()?;
        self.train_config(1)?;
        if self.quantizer.sizes.is_empty() || self.quantizer.sizes.contains(&0) {
            return Err(GemsError::config("quantizer.sizes", "need at least one level, all sizes positive"));
        }
        if self.quantizer.sizes.iter().any(|&s| s > self.data.items) {
            return Err(GemsError::config("quantizer.sizes", "a level cannot have more centroids than items"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(GemsError::config("eval.ks", "need at least one positive cutoff"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in ["desk", "acceptance", "toy"] {
            profile(p).unwrap().validate().unwrap();
        }
        assert!(profile("huge").is_err());
    }

    #[test]
    fn precedence_is_flags_over_file_over_defaults() {
        let base = profile("toy").unwrap();
        let file = "seed = 5\n[model]\nd_h = 32\nheads = 4\n";
        let sets = vec!["model.d_h=64".to_string(), "model.fusion=c".to_string()];
        let c = RunConfig::layered(&base, Some(file), &sets).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.model.d_h, 64);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.model.fusion, "c");
        assert_eq!(c.data, base.data);
    }

    #[test]
    fn errors_name_the_field() {
        let base = profile("toy").unwrap();
        let err = RunConfig::layered(&base, None, &["model.fusion=e".into()]).unwrap_err();
        assert!(err.to_string().contains("model.fusion"), "{err}");
        let err = RunConfig::layered(&base, None, &["model.nope=1".into()]).unwrap_err();
        assert!(err.to_string().contains("model.nope"), "{err}");
        let err = RunConfig::layered(&base, None, &["model.recent=100".into()]).unwrap_err();
        assert!(err.to_string().contains("lifecycle_threshold"), "{err}");
        assert!(RunConfig::layered(&base, Some("[model]\nbogus = 1\n"), &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = profile("toy").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let back: RunConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(back, a);
        assert!(a.manifest("train").starts_with("# gems format=1 command=train"));
    }

    #[test]
    fn streams_parse() {
        assert_eq!(parse_streams("recent+lifecycle").unwrap().label(), "recent+lifecycle");
        assert!(parse_streams("recent+old").is_err());
    }
}
