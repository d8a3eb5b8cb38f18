//! Experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hypervae::discovery::{BoConfig, SearchConfig};
use hypervae::{HyperArch, IwGradient, KlEstimate, SyntheticFamily, SyntheticTaskSpec, TrainConfig, VaeArch};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Bars,
    Blobs,
    Strokes,
}

impl From<Family> for SyntheticFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Bars => SyntheticFamily::Bars,
            Family::Blobs => SyntheticFamily::Blobs,
            Family::Strokes => SyntheticFamily::Strokes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub family: Family,
    pub side: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub flip_prob: f64,
    /// Fraction of each task held out for testing.
    pub test_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Max-pool factor applied to IDX images.
    pub downsample: usize,
    /// Restrict IDX tasks to these labels.
    pub keep_classes: Option<Vec<u32>>,
    pub max_per_class: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            family: Family::Bars,
            side: 14,
            classes: 6,
            samples_per_class: 200,
            flip_prob: 0.02,
            test_fraction: 0.2,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            downsample: 2,
            keep_classes: None,
            max_per_class: None,
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            family: self.family.into(),
            side: self.side,
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            flip_prob: self.flip_prob,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub latent: usize,
    pub hyper_enc_hidden: usize,
    pub hyper_latent: usize,
    /// Must be a perfect square.
    pub hyper_dec_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: 64, latent: 8, hyper_enc_hidden: 64, hyper_latent: 8, hyper_dec_hidden: 100 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlChoice {
    #[default]
    ClosedForm,
    DensityRatio,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IwChoice {
    #[default]
    Reparameterized,
    NormalizedWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Iterations for task VAEs.
    pub max_iters: usize,
    /// Iterations for the hyper-VAE, which visits one task per step.
    pub hyper_max_iters: usize,
    pub k: usize,
    pub log_every: usize,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub kl: KlChoice,
    pub iw_gradient: IwChoice,
    pub record_wallclock: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            beta1: t.beta1,
            beta2: t.beta2,
            learning_rate: t.learning_rate,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            hyper_max_iters: 15_000,
            k: t.k,
            log_every: t.log_every,
            early_stop_window: t.early_stop_window,
            early_stop_tol: t.early_stop_tol,
            kl: KlChoice::ClosedForm,
            iw_gradient: IwChoice::Reparameterized,
            record_wallclock: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub is_samples: usize,
    pub score_samples: usize,
    /// Cap on evaluated test items per task.
    pub max_items: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            is_samples: hypervae::evaluation::DEFAULT_IS_SAMPLES,
            score_samples: hypervae::evaluation::DEFAULT_SCORE_SAMPLES,
            max_items: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierSection {
    pub contamination: f64,
    /// Normal classes to run; all classes when absent.
    pub normal_classes: Option<Vec<u32>>,
}

impl Default for OutlierSection {
    fn default() -> Self {
        Self { contamination: 0.05, normal_classes: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoverySection {
    pub held_out_class: u32,
    pub steps: usize,
    pub sampled_u: bool,
    pub bo_iters: usize,
    pub init_points: usize,
    pub candidates: usize,
    pub refine_starts: usize,
    pub lower: f64,
    pub upper: f64,
    pub refit_every: usize,
    pub noise_var: f64,
}

impl Default for DiscoverySection {
    fn default() -> Self {
        let b = BoConfig::default();
        Self {
            held_out_class: 0,
            steps: 5,
            sampled_u: false,
            bo_iters: b.max_iters,
            init_points: b.init_points,
            candidates: b.candidates,
            refine_starts: b.refine_starts,
            lower: b.lower,
            upper: b.upper,
            refit_every: b.refit_every,
            noise_var: b.noise_var,
        }
    }
}

impl DiscoverySection {
    pub fn bo(&self) -> BoConfig {
        BoConfig {
            max_iters: self.bo_iters,
            init_points: self.init_points,
            candidates: self.candidates,
            refine_starts: self.refine_starts,
            lower: self.lower,
            upper: self.upper,
            refit_every: self.refit_every,
            noise_var: self.noise_var,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig { steps: self.steps, bo: self.bo(), sampled_u: self.sampled_u }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdlSection {
    pub eps: f64,
    pub samples: usize,
    pub k: usize,
}

impl Default for MdlSection {
    fn default() -> Self {
        Self { eps: hypervae::mdl::DEFAULT_EPS, samples: 16, k: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub step: f64,
    pub tolerance: f64,
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub hyper_latent: usize,
    pub hyper_dec_hidden: usize,
    pub batch: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, input_dim: 9, hidden: 5, latent: 2, hyper_latent: 3, hyper_dec_hidden: 9, batch: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub outlier: OutlierSection,
    #[serde(default)]
    pub discovery: DiscoverySection,
    #[serde(default)]
    pub mdl: MdlSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            precision: Precision::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            outlier: OutlierSection::default(),
            discovery: DiscoverySection::default(),
            mdl: MdlSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).context("parsing config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => d.synthetic_spec().validate()?,
            DataSource::Idx => {
                if d.images.is_none() || d.labels.is_none() {
                    bail!("data.source = \"idx\" needs data.images and data.labels");
                }
                if d.test_images.is_some() != d.test_labels.is_some() {
                    bail!("data.test_images and data.test_labels go together");
                }
                if d.downsample == 0 {
                    bail!("data.downsample must be >= 1");
                }
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            bail!("data.test_fraction must lie in [0, 1)");
        }
        let m = &self.model;
        if [m.hidden, m.latent, m.hyper_enc_hidden, m.hyper_latent, m.hyper_dec_hidden].contains(&0) {
            bail!("all model dimensions must be >= 1");
        }
        if !is_square(m.hyper_dec_hidden) {
            bail!("model.hyper_dec_hidden = {} is not a perfect square", m.hyper_dec_hidden);
        }
        self.train_config(self.train.max_iters).validate()?;
        if self.train.hyper_max_iters == 0 {
            bail!("train.hyper_max_iters must be >= 1");
        }
        if self.eval.is_samples == 0 || self.eval.score_samples == 0 {
            bail!("eval sample counts must be >= 1");
        }
        if !(0.0..1.0).contains(&self.outlier.contamination) {
            bail!("outlier.contamination must lie in [0, 1)");
        }
        if self.discovery.steps == 0 {
            bail!("discovery.steps must be >= 1");
        }
        self.discovery.bo().validate()?;
        if !(self.mdl.eps > 0.0) || self.mdl.samples == 0 || self.mdl.k == 0 {
            bail!("mdl.eps must be positive and mdl.samples, mdl.k >= 1");
        }
        let g = &self.gradcheck;
        if !(g.step > 0.0) || !(g.tolerance > 0.0) {
            bail!("gradcheck.step and gradcheck.tolerance must be positive");
        }
        if [g.input_dim, g.hidden, g.latent, g.hyper_latent, g.hyper_dec_hidden, g.batch].contains(&0)
            || !is_square(g.hyper_dec_hidden)
        {
            bail!("gradcheck dimensions must be >= 1 with a square hyper_dec_hidden");
        }
        Ok(())
    }

    pub fn vae_arch(&self, input_dim: usize) -> VaeArch {
        VaeArch::new(input_dim, self.model.hidden, self.model.latent)
    }

    pub fn hyper_arch(&self, input_dim: usize) -> HyperArch {
        HyperArch {
            target: self.vae_arch(input_dim),
            enc_hidden: self.model.hyper_enc_hidden,
            latent: self.model.hyper_latent,
            dec_hidden: self.model.hyper_dec_hidden,
        }
    }

    /// Training settings with the given iteration budget and a seed derived
    /// from the experiment seed.
    pub fn train_config(&self, max_iters: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            learning_rate: t.learning_rate,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            max_iters,
            seed: self.seed,
            k: t.k,
            log_every: t.log_every,
            early_stop_window: t.early_stop_window,
            early_stop_tol: t.early_stop_tol,
            kl: match t.kl {
                KlChoice::ClosedForm => KlEstimate::ClosedForm,
                KlChoice::DensityRatio => KlEstimate::DensityRatio,
            },
            iw_gradient: match t.iw_gradient {
                IwChoice::Reparameterized => IwGradient::Reparameterized,
                IwChoice::NormalizedWeights => IwGradient::NormalizedWeights,
            },
            record_wallclock: t.record_wallclock,
        }
    }
}

fn is_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}
