//! Run configuration: one JSON file with a section per stage, overridable
//! by global flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use promptseg_core::finetune::FinetuneConfig;
use promptseg_core::mask::refiner::{ExternalRefiner, MockRefiner};
use promptseg_core::mask::{PipelineConfig, Refiner};
use promptseg_core::metrics::seg::DEFAULT_NSD_TOLERANCE;
use promptseg_core::synthetic::SyntheticConfig;
use promptseg_core::weak::WeakConfig;
use promptseg_core::{BottleneckConfig, PlantedConcept, SyntheticEncoder};
use serde::{Deserialize, Serialize};

use crate::InputError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    pub dim: usize,
    pub image_hidden: usize,
    pub text_hidden: usize,
    pub side: usize,
    pub grid: usize,
    pub planted: Vec<PlantedConcept>,
    /// Fine-tuned projections (`params.bin` from `finetune`).
    pub checkpoint: Option<PathBuf>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let c = SyntheticConfig::default();
        Self {
            seed: c.seed,
            dim: c.dim,
            image_hidden: c.image_hidden,
            text_hidden: c.text_hidden,
            side: c.side,
            grid: c.grid,
            planted: Vec::new(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nsd_tolerance: u32,
    pub runs: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nsd_tolerance: DEFAULT_NSD_TOLERANCE,
            runs: 10,
            batch_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `synthetic` or `external:<id>`.
    pub encoder: String,
    /// `mock` or `external:<program>`.
    pub refiner: String,
    /// Worker threads for batch commands; 0 uses every core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub synthetic: SyntheticSection,
    pub finetune: FinetuneConfig,
    pub bottleneck: BottleneckConfig,
    pub pipeline: PipelineConfig,
    pub weak: WeakConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: "synthetic".into(),
            refiner: "mock".into(),
            workers: 0,
            out_dir: PathBuf::from("out"),
            synthetic: SyntheticSection::default(),
            finetune: FinetuneConfig::default(),
            bottleneck: BottleneckConfig::default(),
            pipeline: PipelineConfig::default(),
            weak: WeakConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub encoder: Option<String>,
    pub refiner: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

const SEEDED_SECTIONS: [&str; 4] = ["finetune", "bottleneck", "pipeline", "weak"];

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies flag overrides and
    /// hands the run seed to every stage section that does not set its own.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let raw: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| InputError(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| InputError(format!("config {}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        let mut cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| InputError(format!("config: {e}")))?;
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(e) = &ov.encoder {
            cfg.encoder = e.clone();
        }
        if let Some(r) = &ov.refiner {
            cfg.refiner = r.clone();
        }
        if let Some(d) = &ov.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(w) = ov.workers {
            cfg.workers = w;
        }
        for section in SEEDED_SECTIONS {
            let explicit = raw.get(section).and_then(|s| s.get("seed")).is_some();
            if !explicit {
                match section {
                    "finetune" => cfg.finetune.seed = cfg.seed,
                    "bottleneck" => cfg.bottleneck.seed = cfg.seed,
                    "pipeline" => cfg.pipeline.seed = cfg.seed,
                    _ => cfg.weak.seed = cfg.seed,
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: promptseg_core::Result<()>, what: &str| r.map_err(|e| InputError(format!("{what}: {e}")));
        check(self.finetune.validate(), "finetune")?;
        check(self.bottleneck.validate(), "bottleneck")?;
        check(self.weak.validate(), "weak")?;
        check(self.synthetic_config().validate(), "synthetic")?;
        if let Some(p) = &self.synthetic.checkpoint {
            if !p.is_file() {
                bail!(InputError(format!("encoder checkpoint {} does not exist", p.display())));
            }
        }
        if !(self.encoder == "synthetic" || self.encoder.starts_with("external:")) {
            bail!(InputError(format!("unknown encoder '{}'; use synthetic or external:<id>", self.encoder)));
        }
        if !(self.refiner == "mock" || self.refiner.starts_with("external:")) {
            bail!(InputError(format!("unknown refiner '{}'; use mock or external:<program>", self.refiner)));
        }
        Ok(())
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        let s = &self.synthetic;
        SyntheticConfig {
            seed: s.seed,
            dim: s.dim,
            image_hidden: s.image_hidden,
            text_hidden: s.text_hidden,
            side: s.side,
            grid: s.grid,
        }
    }

    /// The configured encoder, with `checkpoint` (when given) taking
    /// precedence over the config's own checkpoint.
    pub fn encoder(&self, checkpoint: Option<&Path>) -> Result<SyntheticEncoder> {
        if let Some(id) = self.encoder.strip_prefix("external:") {
            bail!(InputError(format!(
                "external encoder '{id}' is not available in this build; only the synthetic encoder is built in"
            )));
        }
        let mut enc = SyntheticEncoder::new(self.synthetic_config(), self.synthetic.planted.clone())
            .map_err(|e| InputError(format!("synthetic encoder: {e}")))?;
        if let Some(path) = checkpoint.or(self.synthetic.checkpoint.as_deref()) {
            let mut params = promptseg_core::io::read_params(path)
                .map_err(|e| InputError(format!("encoder checkpoint: {e}")))?;
            if params.len() != 2 {
                bail!(InputError(format!("{}: expected 2 projection tensors", path.display())));
            }
            let to2 = |t: ndarray::ArrayD<f64>| {
                t.into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| InputError(format!("{}: {e}", path.display())))
            };
            let w_txt = to2(params.pop().expect("two tensors"))?;
            let w_img = to2(params.pop().expect("two tensors"))?;
            enc.set_projections(w_img, w_txt)
                .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        }
        Ok(enc)
    }

    pub fn refiner(&self, scratch: &Path) -> Box<dyn Refiner> {
        match self.refiner.strip_prefix("external:") {
            Some(program) => Box::new(ExternalRefiner::new("external", program).with_scratch_dir(scratch)),
            None => Box::new(MockRefiner),
        }
    }

    /// Writes the resolved configuration to `dir/config.resolved.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join("config.resolved.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", p.display()))
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.workers).build()?)
    }
}
