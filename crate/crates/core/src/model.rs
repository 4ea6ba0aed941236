//! Run configuration, model assembly, and the versioned checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::data::{AugmentationSpec, SplitProtocol};
use crate::encoder::{
    average_pool_aggregate, encode, stem_embed, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::head::{AgeBins, HeadParams};
use crate::loss::{L2Assignment, LossWeights};
use crate::optim::OptimizerConfig;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// How the K views of a sample are fused into one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Transformer encoder read out at the class token.
    Encoder,
    /// Mean of the stem embeddings.
    AveragePool,
    /// Stem embedding of view 0 alone; the aggregation-free baseline.
    NoEncoder,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Aggregation::Encoder => "encoder",
            Aggregation::AveragePool => "average-pool",
            Aggregation::NoEncoder => "none",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Aggregation::Encoder),
            "average-pool" | "average_pool" | "avgpool" => Ok(Aggregation::AveragePool),
            "none" | "no-encoder" | "no_encoder" => Ok(Aggregation::NoEncoder),
            other => Err(Error::config(format!(
                "unknown aggregation {other:?} (expected encoder, average-pool or none)"
            ))),
        }
    }
}

/// Evenly spaced age bins for the classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BinsConfig {
    pub start: f64,
    pub bin_size: f64,
    pub count: usize,
}

impl Default for BinsConfig {
    fn default() -> Self {
        // Desk default: unit bins covering most of the default age range;
        // ages above the top bin are handled by that bin's residual.
        BinsConfig {
            start: 16.0,
            bin_size: 1.0,
            count: 60,
        }
    }
}

impl BinsConfig {
    pub fn build(&self) -> Result<AgeBins> {
        AgeBins::regular(self.start, self.bin_size, self.count)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct LossConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub l2_assignment: L2Assignment,
}

/// Everything a run needs; a manifest is this struct resolved and echoed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub augment: AugmentationSpec,
    pub split: SplitProtocol,
    pub bins: BinsConfig,
    pub aggregation: Aggregation,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optim: OptimizerConfig,
    /// Views per sample at evaluation; None means the training K.
    pub k_eval: Option<usize>,
    /// Epochs between validation passes; 0 evaluates only after training.
    pub eval_every: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SyntheticConfig::default(),
            augment: AugmentationSpec::default(),
            split: SplitProtocol::default(),
            bins: BinsConfig::default(),
            aggregation: Aggregation::Encoder,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            optim: OptimizerConfig::default(),
            k_eval: None,
            eval_every: 1,
            init_seed: 7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.optim.validate()?;
        self.loss.weights.validate()?;
        self.bins.build()?;
        if let Some(k) = self.k_eval {
            if k == 0 {
                return Err(Error::config("k_eval must be at least 1".to_string()));
            }
        }
        Ok(())
    }

    pub fn k_eval(&self) -> usize {
        self.k_eval.unwrap_or(self.encoder.num_views)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let run: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        run.validate()?;
        Ok(run)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Full trainable model: stem + optional encoder + hierarchical head.
pub struct Model {
    pub aggregation: Aggregation,
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub bins: AgeBins,
}

impl Model {
    pub fn init(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let bins = run.bins.build()?;
        let encoder = EncoderParams::init(&run.encoder, run.data.feature_dim, run.init_seed)?;
        let head = HeadParams::init(
            run.encoder.model_dim,
            bins.count(),
            crate::data::mix_seed(run.init_seed, 0x4EAD),
        )?;
        Ok(Model {
            aggregation: run.aggregation,
            encoder_config: run.encoder.clone(),
            encoder,
            head,
            bins,
        })
    }

    /// Parameters the current aggregation actually trains, in a stable
    /// order. Encoder blocks are excluded for the pooling baselines.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = match self.aggregation {
            Aggregation::Encoder => self.encoder.named_params(),
            Aggregation::AveragePool | Aggregation::NoEncoder => {
                self.encoder.stem.named_params("stem")
            }
        };
        out.extend(self.head.named_params());
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Fuse one sample's `[K,F]` views into a length-d embedding.
    pub fn fuse(&self, tape: &mut Tape, views: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        match self.aggregation {
            Aggregation::Encoder => encode(tape, &self.encoder, &self.encoder_config, views, mode),
            Aggregation::AveragePool => average_pool_aggregate(tape, &self.encoder.stem, views),
            Aggregation::NoEncoder => {
                let first = tape.row(views, 0)?;
                stem_embed(tape, &self.encoder.stem, &first)
            }
        }
    }

    /// As `fuse`, but with the encoder temporarily accepting `k` views
    /// (evaluation may use a different view count than training).
    pub fn fuse_with_k(
        &self,
        tape: &mut Tape,
        views: &Tensor,
        k: usize,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        if self.aggregation == Aggregation::Encoder && k != self.encoder_config.num_views {
            let mut config = self.encoder_config.clone();
            config.num_views = k;
            return encode(tape, &self.encoder, &config, views, mode);
        }
        self.fuse(tape, views, mode)
    }
}

const CHECKPOINT_MAGIC: &[u8; 11] = b"AGECASTCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Write config plus named parameter arrays. Binary layout: magic,
/// version, JSON-encoded run config (u64 length prefix), parameter count,
/// then per parameter: name, shape, f64 little-endian values.
pub fn save_checkpoint(path: &Path, run: &RunConfig, params: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(run).map_err(|e| Error::config(e.to_string()))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in tensor.values().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub run: RunConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let bad = |message: &str| Error::Parse {
        line: 0,
        message: format!("checkpoint {}: {message}", path.display()),
    };

    let mut magic = [0u8; 11];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic string"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    r.read_exact(&mut u64buf)?;
    let config_len = u64::from_le_bytes(u64buf) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let run: RunConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| bad(&format!("config: {e}")))?;

    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("parameter name not utf-8"))?;
        r.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            values.push(f64::from_le_bytes(u64buf));
        }
        params.push((name, shape, values));
    }
    Ok(Checkpoint { run, params })
}

/// Rebuild a model from a checkpoint: initialize from the stored config,
/// then overwrite every trainable parameter with the stored values.
pub fn model_from_checkpoint(checkpoint: &Checkpoint) -> Result<Model> {
    let model = Model::init(&checkpoint.run)?;
    let named = model.named_params();
    if named.len() != checkpoint.params.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} parameters, model expects {}",
            checkpoint.params.len(),
            named.len()
        )));
    }
    for ((name, tensor), (stored_name, shape, values)) in named.iter().zip(&checkpoint.params) {
        if name != stored_name || &tensor.shape() != shape {
            return Err(Error::contract(format!(
                "checkpoint parameter {stored_name} ({shape:?}) does not match model {name} ({:?})",
                tensor.shape()
            )));
        }
        tensor.set_values(values)?;
    }
    Ok(model)
}
