//! End-to-end subject-driven generation.
//!
//! 1. encode the reference image and downsample its subject mask to tokens;
//! 2. optionally caption the subject and append the caption to the prompt;
//! 3. capture reference keys/values along a noised trajectory whose schedule
//!    is shifted by `shift_factor_k · μ` (reversed by default);
//! 4. sample the target with the standard schedule, sharing the captured
//!    keys/values at the selected layers;
//! 5. decode, score, and record everything needed to reproduce the run.

pub mod codec;
pub mod sampler;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{select_layers, LayerStrategy, MaskMode, ShareSpec, TokenMask};
use crate::caption::{compensate, CaptionBundle, CaptionClients, CaptionSettings};
use crate::model::{
    capture_reference_bank_with, init_model, masked_mean, AttentionBank, CaptureOptions, ModelConfig, ModelError,
    ToyMMDiT,
};
use crate::scalar::Scalar;
use crate::schedule::{
    build_schedule, compute_mu, NoiseSchedule, ShiftParams, BASE_SEQ_LEN, BASE_SHIFT, MAX_SEQ_LEN, MAX_SHIFT,
};
use crate::tensor::{self, sha256_hex};

pub use codec::{array_to_rgb, downsample_mask, gray_to_mask, rgb_to_array, CodecError, PatchCodec};
pub use sampler::{euler_sample, ModelField, VelocityField};

const CODEC_SALT: u64 = 0xC0DE_C0DE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub noise: u64,
    pub weights: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { noise: 0, weights: 42, dropout: 0 }
    }
}

impl Seeds {
    /// Seed of the reference trajectory's noise draw.
    pub fn reference_noise(&self) -> u64 {
        self.noise.wrapping_add(1)
    }
}

/// Linear shift line `μ = m · L_x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftLine {
    pub m: f64,
    pub b: f64,
}

impl Default for ShiftLine {
    fn default() -> Self {
        let p = ShiftParams::from_anchors(BASE_SEQ_LEN, BASE_SHIFT, MAX_SEQ_LEN, MAX_SHIFT, 1, 1.0);
        Self { m: p.m, b: p.b }
    }
}

impl ShiftLine {
    pub fn params(&self, seq_len: usize, factor_k: f64) -> ShiftParams {
        ShiftParams { m: self.m, b: self.b, seq_len, factor_k }
    }
}

/// Prompt fed to the model while capturing reference keys/values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePrompt {
    /// Subject caption when one was produced, else empty.
    #[default]
    Caption,
    Empty,
    /// The composed target prompt.
    Target,
}

/// Every knob of one generation. Defaults reproduce the reference settings:
/// 30 steps, guidance 3.5, `λ_r = λ_p = 1.1`, reference shift `−μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub steps: usize,
    pub guidance: f64,
    pub lambda_r: f64,
    pub lambda_p: f64,
    /// Multiplier of `μ` for the reference trajectory.
    pub shift_factor_k: f64,
    /// Multiplier of `μ` for the target sampler.
    pub target_shift_factor: f64,
    pub mask_mode: MaskMode,
    pub layer_strategy: LayerStrategy,
    pub dropout_rate: f64,
    pub seeds: Seeds,
    pub caption_enabled: bool,
    /// Continue without a caption when the backend fails.
    pub caption_fallback: bool,
    pub reference_prompt: ReferencePrompt,
    /// Separator between the target prompt and the subject caption.
    pub prompt_separator: String,
    pub patch_size: usize,
    pub shift: ShiftLine,
    pub model: ModelConfig,
    pub caption: CaptionSettings,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance: 3.5,
            lambda_r: 1.1,
            lambda_p: 1.1,
            shift_factor_k: -1.0,
            target_shift_factor: 1.0,
            mask_mode: MaskMode::Drop,
            layer_strategy: LayerStrategy::Vital,
            dropout_rate: 0.0,
            seeds: Seeds::default(),
            caption_enabled: true,
            caption_fallback: false,
            reference_prompt: ReferencePrompt::Caption,
            prompt_separator: ", ".into(),
            patch_size: 8,
            shift: ShiftLine::default(),
            model: ModelConfig::default(),
            caption: CaptionSettings::default(),
        }
    }
}

impl GenerationConfig {
    /// Model config with the weight seed taken from `seeds.weights`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { weight_seed: self.seeds.weights, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 {
            return Err("steps must be >= 1".into());
        }
        for (name, v) in [("lambda_r", self.lambda_r), ("lambda_p", self.lambda_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name}={v} must be finite and >= 0"));
            }
        }
        for (name, v) in [
            ("guidance", self.guidance),
            ("shift_factor_k", self.shift_factor_k),
            ("target_shift_factor", self.target_shift_factor),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout_rate={} must lie in [0, 1)", self.dropout_rate));
        }
        if self.patch_size == 0 {
            return Err("patch_size must be >= 1".into());
        }
        if self.model.latent_channels != 3 * self.patch_size * self.patch_size {
            return Err(format!(
                "model.latent_channels={} must equal 3 * patch_size^2 = {}",
                self.model.latent_channels,
                3 * self.patch_size * self.patch_size
            ));
        }
        self.model.validate().map_err(|e| e.to_string())?;
        self.caption.validate()
    }

    /// Sharing knobs for the captured `layers`.
    pub fn share_spec(&self, mask: TokenMask, layers: BTreeSet<usize>, num_layers: usize) -> ShareSpec {
        ShareSpec {
            lambda_r: self.lambda_r,
            lambda_p: self.lambda_p,
            vital_set: layers,
            num_layers,
            mask,
            mask_mode: self.mask_mode,
            dropout_rate: self.dropout_rate,
            dropout_seed: self.seeds.dropout,
        }
    }

    pub fn target_schedule<T: Scalar>(&self) -> Result<NoiseSchedule<T>, ModelError> {
        Ok(build_schedule(self.steps, &self.shift.params(self.model.image_tokens, self.target_shift_factor))?)
    }

    pub fn reference_schedule<T: Scalar>(&self) -> Result<NoiseSchedule<T>, ModelError> {
        Ok(build_schedule(self.steps, &self.shift.params(self.model.image_tokens, self.shift_factor_k))?)
    }
}

/// Samples a target latent from pure noise, sharing reference attention when a bank is given.
pub fn sample<T: Scalar>(
    model: &ToyMMDiT<T>,
    bank: Option<&AttentionBank<T>>,
    prompt_tokens: &Array2<T>,
    config: &GenerationConfig,
) -> Result<Array2<T>, ModelError> {
    let schedule = config.target_schedule::<T>()?;
    let mc = model.config();
    let z = tensor::noise::<T>(config.seeds.noise, mc.image_tokens, mc.latent_channels);
    let spec = match bank {
        Some(b) => {
            if b.num_timesteps() != schedule.len() {
                return Err(ModelError::Shape(format!(
                    "bank covers {} timesteps, sampler needs {}",
                    b.num_timesteps(),
                    schedule.len()
                )));
            }
            Some(config.share_spec(b.mask.clone(), b.layers.clone(), mc.num_layers))
        }
        None => None,
    };
    let field =
        ModelField { model, prompt: prompt_tokens, guidance: T::of(config.guidance), share: spec.as_ref().zip(bank) };
    euler_sample(&field, z, &schedule)
}

/// Cosine similarity of the mean foreground tokens; 0 when either foreground is empty.
pub fn proxy_subject_similarity<T: Scalar>(
    gen_latent: &Array2<T>,
    ref_latent: &Array2<T>,
    gen_mask: &TokenMask,
    ref_mask: &TokenMask,
) -> f64 {
    if gen_mask.len() != gen_latent.nrows() || ref_mask.len() != ref_latent.nrows() {
        return 0.0;
    }
    let (Some(a), Some(b)) = (masked_mean(gen_latent, gen_mask), masked_mean(ref_latent, ref_mask)) else {
        return 0.0;
    };
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `target + separator + caption`, or just the target when the caption is empty.
pub fn compose_prompt(target: &str, caption: Option<&str>, separator: &str) -> String {
    match caption.map(str::trim).filter(|c| !c.is_empty()) {
        Some(c) => format!("{target}{separator}{c}"),
        None => target.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    LoadReference,
    LoadMask,
    Encode,
    Mask,
    Caption,
    Model,
    Capture,
    Sample,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        f.write_str(&s)
    }
}

/// Coarse error class, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Config,
    Caption,
    Internal,
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self { stage, kind, message: message.to_string() }
    }
}

/// Files and prompt for one run.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub reference_image: PathBuf,
    pub subject_mask: PathBuf,
    pub target_prompt: String,
    pub config: GenerationConfig,
}

/// Everything needed to audit and reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: GenerationConfig,
    pub scalar: String,
    pub target_prompt: String,
    pub composed_prompt: String,
    pub reference_prompt: String,
    pub caption: Option<CaptionBundle>,
    pub caption_error: Option<String>,
    pub seeds: Seeds,
    pub reference_noise_seed: u64,
    pub share_layers: Vec<usize>,
    pub mask_foreground_tokens: usize,
    pub mu_target: f64,
    pub mu_reference: f64,
    pub reference_sha256: String,
    pub weight_checksum: String,
    pub latent_checksum: String,
    pub image_sha256: String,
    pub proxy_score: f64,
    pub output_png_sha256: Option<String>,
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct GenerationResult<T> {
    pub image: RgbImage,
    pub latent: Array2<T>,
    pub reference_latent: Array2<T>,
    pub mask: TokenMask,
    pub metadata: Metadata,
    pub proxy_score: f64,
}

/// Loads the request's files and runs [`generate_from_images`].
pub fn generate<T: Scalar>(
    request: &GenerationRequest,
    clients: Option<&CaptionClients>,
) -> Result<GenerationResult<T>, PipelineError> {
    let reference = image::open(&request.reference_image)
        .map_err(|e| {
            PipelineError::new(
                Stage::LoadReference,
                ErrorKind::Io,
                format!("{}: {e}", request.reference_image.display()),
            )
        })?
        .to_rgb8();
    let mask = image::open(&request.subject_mask)
        .map_err(|e| {
            PipelineError::new(Stage::LoadMask, ErrorKind::Io, format!("{}: {e}", request.subject_mask.display()))
        })?
        .to_luma8();
    generate_from_images(&reference, &mask, &request.target_prompt, &request.config, clients)
}

/// Full pipeline on in-memory inputs.
pub fn generate_from_images<T: Scalar>(
    reference: &RgbImage,
    mask: &GrayImage,
    target_prompt: &str,
    config: &GenerationConfig,
    clients: Option<&CaptionClients>,
) -> Result<GenerationResult<T>, PipelineError> {
    use ErrorKind::*;
    config.validate().map_err(|e| PipelineError::new(Stage::Config, Config, e))?;
    if target_prompt.trim().is_empty() {
        return Err(PipelineError::new(Stage::Config, Config, "target prompt is empty"));
    }
    let mc = config.model_config();
    let side = mc.grid_side();
    let px = (side * config.patch_size) as u32;

    // (1) reference latent
    let reference = if reference.dimensions() == (px, px) {
        reference.clone()
    } else {
        image::imageops::resize(reference, px, px, FilterType::Triangle)
    };
    let codec = PatchCodec::<T>::new(config.patch_size, 3, config.seeds.weights ^ CODEC_SALT);
    let ref_latent =
        codec.encode(&rgb_to_array(&reference)).map_err(|e| PipelineError::new(Stage::Encode, Internal, e))?;

    // (2) token mask
    let token_mask =
        downsample_mask(&gray_to_mask(mask), side, side).map_err(|e| PipelineError::new(Stage::Mask, Io, e))?;

    // (3) subject caption
    let mut caption = None;
    let mut caption_error = None;
    if config.caption_enabled {
        let result = clients
            .ok_or_else(|| "caption is enabled but no caption backend is configured".to_string())
            .and_then(|c| {
                compensate(&reference, c, config.caption.mode, &config.caption.subject_class).map_err(|e| e.to_string())
            });
        match result {
            Ok(bundle) => caption = Some(bundle),
            Err(e) if config.caption_fallback => caption_error = Some(e),
            Err(e) => return Err(PipelineError::new(Stage::Caption, Caption, e)),
        }
    }
    let caption_text = caption.as_ref().map(|c| c.filtered.as_str());
    let composed = compose_prompt(target_prompt, caption_text, &config.prompt_separator);
    let reference_prompt = match config.reference_prompt {
        ReferencePrompt::Caption => caption_text.unwrap_or("").to_string(),
        ReferencePrompt::Empty => String::new(),
        ReferencePrompt::Target => composed.clone(),
    };

    // (4) reference bank
    let model = init_model::<T>(&mc).map_err(|e| PipelineError::new(Stage::Model, Config, e))?;
    let layers = select_layers(config.layer_strategy, mc.num_layers, &mc.vital_default, config.seeds.dropout)
        .map_err(|e| PipelineError::new(Stage::Model, Config, e))?;
    let ref_schedule = config.reference_schedule::<T>().map_err(|e| PipelineError::new(Stage::Config, Config, e))?;
    let options = CaptureOptions { layers: Some(layers.clone()), allow_unreversed: true, guidance: config.guidance };
    let bank = capture_reference_bank_with(
        &model,
        &ref_latent,
        &model.embed_prompt(&reference_prompt),
        &token_mask,
        &ref_schedule,
        config.seeds.reference_noise(),
        &options,
    )
    .map_err(|e| PipelineError::new(Stage::Capture, Internal, e))?;

    // (5) target sampling
    let latent = sample(&model, Some(&bank), &model.embed_prompt(&composed), config)
        .map_err(|e| PipelineError::new(Stage::Sample, Internal, e))?;

    // (6) decode and score
    let pixels = codec.decode(&latent, side, side).map_err(|e| PipelineError::new(Stage::Decode, Internal, e))?;
    let image = array_to_rgb(&pixels);
    let proxy_score = proxy_subject_similarity(&latent, &ref_latent, &token_mask, &token_mask);
    let mu = |k| compute_mu(&config.shift.params(mc.image_tokens, k)).unwrap_or(f64::NAN);

    let metadata = Metadata {
        config: GenerationConfig { model: mc.clone(), ..config.clone() },
        scalar: std::any::type_name::<T>().to_string(),
        target_prompt: target_prompt.to_string(),
        composed_prompt: composed,
        reference_prompt,
        caption,
        caption_error,
        seeds: config.seeds,
        reference_noise_seed: config.seeds.reference_noise(),
        share_layers: layers.into_iter().collect(),
        mask_foreground_tokens: token_mask.count_foreground(),
        mu_target: mu(config.target_shift_factor),
        mu_reference: mu(config.shift_factor_k),
        reference_sha256: sha256_hex(reference.as_raw()),
        weight_checksum: model.weight_checksum(),
        latent_checksum: tensor::checksum(latent.iter()),
        image_sha256: sha256_hex(image.as_raw()),
        proxy_score,
        output_png_sha256: None,
        timestamp: None,
    };
    Ok(GenerationResult { image, latent, reference_latent: ref_latent, mask: token_mask, metadata, proxy_score })
}
