use std::path::{Path, PathBuf};

use grcvit::complexity::DescriptorConfig;
use grcvit::model::flops::SweepEntry;
use grcvit::SyntheticSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Code, CliResult, Tagged};

/// Every key a run can read. Command-line flags override values from the
/// `--config` TOML file; the merged result is written next to the outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub granularity: Option<u8>,
    pub routing: Option<String>,
    pub estimator: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    /// Thresholds replacing those stored in the estimator parameters.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Side the coarse stage resizes to before computing descriptors;
    /// 0 keeps the input size.
    pub resize: Option<usize>,
    pub descriptors: Option<DescriptorConfig>,
    /// Extra synthetic images appended to `input`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synthetic: Vec<SyntheticSpec>,

    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub weight_decay: Option<f64>,
    pub flip: Option<bool>,
    /// `tiny` or `standard`.
    pub model: Option<String>,
    pub train_images: Option<usize>,
    pub test_images: Option<usize>,
    /// Labeled folder for evaluation in `train-toy`.
    pub test_input: Option<String>,

    pub threshold: Option<f64>,
    pub step: Option<f64>,
    pub perturb: Option<f64>,

    /// FLOPs sweep; when absent the built-in reference sweep is used.
    pub sweep: Option<Vec<SweepEntry>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).tag(Code::Io, format!("reading {}", path.display()))?;
        toml::from_str(&text).tag(Code::Usage, format!("parsing {}", path.display()))
    }

    /// Keys set in `over` replace those in `self`.
    pub fn merge(mut self, over: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            input, out, seed, epochs, granularity, routing, estimator, checkpoint, alpha, beta, resize, descriptors,
            lr, batch, weight_decay, flip, model, train_images, test_images, test_input, threshold, step, perturb,
            sweep
        );
        if !over.synthetic.is_empty() {
            self.synthetic = over.synthetic;
        }
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("grcvit-out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
