//! Pipeline configuration: nested module settings, TOML round-trip, and
//! flat `key=value` overrides. Unknown keys are rejected in both paths.

use serde::{Deserialize, Serialize};

use crate::deform::DeformationConfig;
use crate::error::{Error, Result};
use crate::parts::PartTreeConfig;
use crate::artopt::PhaseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformSection {
    pub k0: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub lambda_photo: f64,
    pub weight_decay: f64,
    pub bands: usize,
}

impl Default for DeformSection {
    fn default() -> Self {
        let d = DeformationConfig::default();
        DeformSection {
            k0: d.k0,
            hidden_layers: d.hidden_layers,
            hidden_width: d.hidden_width,
            learning_rate: d.learning_rate,
            iterations: d.iterations,
            lambda_photo: d.lambda_photo,
            weight_decay: d.weight_decay,
            bands: d.bands,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartsSection {
    pub inlier_eps: f64,
    pub trials: usize,
    pub min_part_size: usize,
    pub max_parts: usize,
}

impl Default for PartsSection {
    fn default() -> Self {
        let p = PartTreeConfig::default();
        PartsSection {
            inlier_eps: p.inlier_eps,
            trials: p.trials,
            min_part_size: p.min_part_size,
            max_parts: p.max_parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub phase3_iters: usize,
    pub relabel_period: usize,
    pub relabel_percentile: f64,
    pub lambda_rigid: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = PhaseSchedule::default();
        ScheduleSection {
            phase1_iters: s.phase1_iters,
            phase2_iters: s.phase2_iters,
            phase3_iters: s.phase3_iters,
            relabel_period: s.relabel_period,
            relabel_percentile: s.relabel_percentile,
            lambda_rigid: s.lambda_rigid,
        }
    }
}

/// The full pipeline configuration; every field has a default and nested
/// sections can be overridden by dotted `key=value` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// NN distance bound for correspondence extraction (scene units).
    pub max_correspondence_dist: f64,
    /// Color weight inside color-Chamfer embeddings.
    pub lambda_color: f64,
    /// Weight of the color-Chamfer terms in the joint loss.
    pub lambda_photo: f64,
    /// Deformation training subsample cap (0 = use every point); the
    /// trained field is still applied to every point.
    pub deform_subsample: usize,
    /// Iterations of per-camera extrinsic refinement.
    pub refine_extrinsics_iters: usize,
    /// Normalize each state (centroid to origin, max extent 1) before the
    /// deformation stage.
    pub normalize_inputs: bool,
    pub deform: DeformSection,
    pub parts: PartsSection,
    pub schedule: ScheduleSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            max_correspondence_dist: 0.1,
            lambda_color: 0.25,
            lambda_photo: 1.0,
            deform_subsample: 320,
            refine_extrinsics_iters: 10,
            normalize_inputs: true,
            deform: DeformSection::default(),
            parts: PartsSection::default(),
            schedule: ScheduleSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn deformation_config(&self) -> DeformationConfig {
        DeformationConfig {
            k0: self.deform.k0,
            hidden_layers: self.deform.hidden_layers,
            hidden_width: self.deform.hidden_width,
            learning_rate: self.deform.learning_rate,
            iterations: self.deform.iterations,
            lambda_photo: self.deform.lambda_photo,
            lambda_color: self.lambda_color,
            weight_decay: self.deform.weight_decay,
            bands: self.deform.bands,
            seed: self.seed,
        }
    }

    pub fn part_tree_config(&self) -> PartTreeConfig {
        PartTreeConfig {
            inlier_eps: self.parts.inlier_eps,
            trials: self.parts.trials,
            min_part_size: self.parts.min_part_size,
            max_parts: self.parts.max_parts,
            seed: self.seed,
        }
    }

    pub fn phase_schedule(&self) -> PhaseSchedule {
        PhaseSchedule {
            phase1_iters: self.schedule.phase1_iters,
            phase2_iters: self.schedule.phase2_iters,
            phase3_iters: self.schedule.phase3_iters,
            relabel_period: self.schedule.relabel_period,
            relabel_percentile: self.schedule.relabel_percentile,
            lambda_rigid: self.schedule.lambda_rigid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deformation_config().validate()?;
        if self.max_correspondence_dist <= 0.0 {
            return Err(Error::Config("max_correspondence_dist must be positive".into()));
        }
        if self.lambda_color < 0.0 || self.lambda_photo < 0.0 {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        if self.parts.inlier_eps <= 0.0 || self.parts.trials == 0 || self.parts.max_parts == 0 {
            return Err(Error::Config("invalid parts section".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialized form.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one dotted `key=value` override; unknown keys are rejected.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!(
                "override {key}: cannot parse `{value}`"
            )))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "max_correspondence_dist" => self.max_correspondence_dist = parse(key, value)?,
            "lambda_color" => self.lambda_color = parse(key, value)?,
            "lambda_photo" => self.lambda_photo = parse(key, value)?,
            "deform_subsample" => self.deform_subsample = parse(key, value)?,
            "refine_extrinsics_iters" => self.refine_extrinsics_iters = parse(key, value)?,
            "normalize_inputs" => self.normalize_inputs = parse(key, value)?,
            "deform.k0" => self.deform.k0 = parse(key, value)?,
            "deform.hidden_layers" => self.deform.hidden_layers = parse(key, value)?,
            "deform.hidden_width" => self.deform.hidden_width = parse(key, value)?,
            "deform.learning_rate" => self.deform.learning_rate = parse(key, value)?,
            "deform.iterations" => self.deform.iterations = parse(key, value)?,
            "deform.lambda_photo" => self.deform.lambda_photo = parse(key, value)?,
            "deform.weight_decay" => self.deform.weight_decay = parse(key, value)?,
            "deform.bands" => self.deform.bands = parse(key, value)?,
            "parts.inlier_eps" => self.parts.inlier_eps = parse(key, value)?,
            "parts.trials" => self.parts.trials = parse(key, value)?,
            "parts.min_part_size" => self.parts.min_part_size = parse(key, value)?,
            "parts.max_parts" => self.parts.max_parts = parse(key, value)?,
            "schedule.phase1_iters" => self.schedule.phase1_iters = parse(key, value)?,
            "schedule.phase2_iters" => self.schedule.phase2_iters = parse(key, value)?,
            "schedule.phase3_iters" => self.schedule.phase3_iters = parse(key, value)?,
            "schedule.relabel_period" => self.schedule.relabel_period = parse(key, value)?,
            "schedule.relabel_percentile" => self.schedule.relabel_percentile = parse(key, value)?,
            "schedule.lambda_rigid" => self.schedule.lambda_rigid = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown override key `{other}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.deformation_config(), {
            let mut d = DeformationConfig::default();
            d.lambda_color = cfg.lambda_color;
            d
        });
        assert_eq!(cfg.phase_schedule(), PhaseSchedule::default());
        let mut p = PartTreeConfig::default();
        p.seed = cfg.seed;
        assert_eq!(cfg.part_tree_config(), p);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn toml_roundtrip_is_canonical() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let parsed = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(parsed, cfg);
        // serialize(parse(file)) equals the canonical form.
        assert_eq!(parsed.to_toml(), text);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 7\n[deform]\niterations = 100\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.deform.iterations, 100);
        assert_eq!(cfg.deform.hidden_width, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("nonsense = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[deform]\nnonsense = 1\n").is_err());
        let mut cfg = PipelineConfig::default();
        assert!(cfg.apply_override("no.such.key", "1").is_err());
        assert!(cfg.apply_override("seed", "not-a-number").is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_override("seed", "42").unwrap();
        cfg.apply_override("deform.iterations", "123").unwrap();
        cfg.apply_override("schedule.lambda_rigid", "0.5").unwrap();
        cfg.apply_override("parts.max_parts", "3").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.deform.iterations, 123);
        assert_eq!(cfg.schedule.lambda_rigid, 0.5);
        assert_eq!(cfg.parts.max_parts, 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.deform.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.max_correspondence_dist = 0.0;
        assert!(cfg.validate().is_err());
    }
}
