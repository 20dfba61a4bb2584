mod bench;
mod dataset;
mod image;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bench::{bench_throughput, BenchEntry, BenchReport, MIN_REPS, WARMUP_RUNS};
pub use dataset::{dataset_vocabulary, gen_dataset, Attributes, Background, Color, DatasetSpec, Sample, ShapeKind};
pub use image::{decode_ppm, encode_ppm, read_image, write_image, Image, PixelMask};

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::sampler::SamplerConfig;
use crate::training::{LoraConfig, TrainConfig};
use crate::vq::{VqConfig, VqTrainConfig};

/// Everything a pipeline run needs. Missing sections and fields take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub vq: VqConfig,
    pub vq_train: VqTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub lora_train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
