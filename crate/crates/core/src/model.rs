//! Deterministic toy multimodal diffusion transformer.
//!
//! Two token streams (text, image) are projected separately and mixed by a
//! joint attention in every block. Layers in the sharing set can route
//! through [`pivotal_shared_attention`] with keys/values captured from a
//! reference trajectory. The network predicts a rectified-flow velocity with
//! the same shape as the input latent.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{
    mm_attention, pivotal_shared_attention, AttentionError, JointOutput, LayerKV, ShareSpec, StreamQkv, TokenMask,
};
use crate::scalar::Scalar;
use crate::schedule::{build_trajectory, NoiseSchedule, ScheduleError};
use crate::tensor::{self, gelu, matmul, randn, rms_norm};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention bank has no entry for timestep {timestep}, layer {layer}")]
    MissingBankEntry { timestep: usize, layer: usize },
    #[error("reference schedule must be reversed (got factor {0}); pass allow_unreversed to override")]
    NotReversed(f64),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("weight snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and seed of a [`ToyMMDiT`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub text_tokens: usize,
    /// Image sequence length; must be a perfect square (the token grid).
    pub image_tokens: usize,
    /// Channels per latent token (3 · patch² for the toy codec).
    pub latent_channels: usize,
    pub vital_default: BTreeSet<usize>,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            num_heads: 4,
            head_dim: 16,
            text_tokens: 16,
            image_tokens: 64,
            latent_channels: 3 * 8 * 8,
            vital_default: [0, 1, 2, 4].into(),
            weight_seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Side of the square image token grid.
    pub fn grid_side(&self) -> usize {
        (self.image_tokens as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return bad("num_heads and head_dim must be >= 1".into());
        }
        if self.image_tokens == 0 || self.latent_channels == 0 {
            return bad("image_tokens and latent_channels must be >= 1".into());
        }
        let side = self.grid_side();
        if side * side != self.image_tokens {
            return bad(format!("image_tokens={} is not a square grid", self.image_tokens));
        }
        if self.vital_default.len() > self.num_layers {
            return bad("more vital layers than layers".into());
        }
        if let Some(l) = self.vital_default.iter().find(|&&l| l >= self.num_layers) {
            return bad(format!("vital layer {l} >= num_layers {}", self.num_layers));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StreamWeights<T> {
    wq: Array2<T>,
    wk: Array2<T>,
    wv: Array2<T>,
    wo: Array2<T>,
    mlp_in: Array2<T>,
    mlp_out: Array2<T>,
}

impl<T: Scalar> StreamWeights<T> {
    fn init(rng: &mut ChaCha8Rng, hidden: usize, std: f64) -> Self {
        Self {
            wq: randn(rng, hidden, hidden, std),
            wk: randn(rng, hidden, hidden, std),
            wv: randn(rng, hidden, hidden, std),
            wo: randn(rng, hidden, hidden, std),
            mlp_in: randn(rng, hidden, 2 * hidden, std),
            mlp_out: randn(rng, 2 * hidden, hidden, std),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        for (n, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn named_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<T>>) {
        out.extend([&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.mlp_in, &mut self.mlp_out]);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockWeights<T> {
    text: StreamWeights<T>,
    image: StreamWeights<T>,
}

/// Seeded toy MM-DiT. Weights are immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMMDiT<T> {
    config: ModelConfig,
    latent_in: Array2<T>,
    latent_out: Array2<T>,
    time_proj: Array2<T>,
    guidance_proj: Array2<T>,
    /// Sinusoidal frequency table, `1 × hidden/2`.
    freqs: Array2<T>,
    blocks: Vec<BlockWeights<T>>,
}

/// Reference keys/values and the timestep to read them from.
#[derive(Debug, Clone, Copy)]
pub struct ShareContext<'a, T> {
    pub spec: &'a ShareSpec,
    pub bank: &'a AttentionBank<T>,
    pub timestep_index: usize,
}

/// Reference keys/values per `(timestep_index, layer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBank<T> {
    pub entries: BTreeMap<(usize, usize), LayerKV<T>>,
    pub mask: TokenMask,
    pub schedule_used: NoiseSchedule<T>,
    pub layers: BTreeSet<usize>,
}

impl<T: Scalar> AttentionBank<T> {
    pub fn get(&self, timestep_index: usize, layer: usize) -> Result<&LayerKV<T>, ModelError> {
        self.entries
            .get(&(timestep_index, layer))
            .ok_or(ModelError::MissingBankEntry { timestep: timestep_index, layer })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_timesteps(&self) -> usize {
        self.schedule_used.len()
    }
}

/// Seeded model construction; weights have variance `1 / hidden`.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ToyMMDiT<T>, ModelError> {
    config.validate()?;
    let hidden = config.hidden();
    let std = 1.0 / (hidden as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
    let latent_in = randn(&mut rng, config.latent_channels, hidden, std);
    let latent_out = randn(&mut rng, hidden, config.latent_channels, std);
    let time_proj = randn(&mut rng, hidden, hidden, std);
    let guidance_proj = randn(&mut rng, hidden, hidden, std);
    let half = hidden.div_ceil(2);
    let freqs = Array2::from_shape_fn((1, half), |(_, j)| T::of((-(10_000f64.ln()) * j as f64 / half as f64).exp()));
    let blocks = (0..config.num_layers)
        .map(|_| BlockWeights {
            text: StreamWeights::init(&mut rng, hidden, std),
            image: StreamWeights::init(&mut rng, hidden, std),
        })
        .collect();
    Ok(ToyMMDiT { config: config.clone(), latent_in, latent_out, time_proj, guidance_proj, freqs, blocks })
}

fn split_heads<T: Scalar>(x: &Array2<T>, heads: usize, head_dim: usize) -> Array3<T> {
    Array3::from_shape_fn((heads, x.nrows(), head_dim), |(h, i, d)| x[[i, h * head_dim + d]])
}

fn merge_heads<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (heads, n, hd) = x.dim();
    Array2::from_shape_fn((n, heads * hd), |(i, c)| x[[c / hd, i, c % hd]])
}

fn mlp<T: Scalar>(x: ArrayView2<'_, T>, w: &StreamWeights<T>) -> Array2<T> {
    let h = matmul(rms_norm(x).view(), w.mlp_in.view()).mapv(gelu);
    matmul(h.view(), w.mlp_out.view())
}

impl<T: Scalar> ToyMMDiT<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed_scalar(&self, x: T) -> Array2<T> {
        let hidden = self.config.hidden();
        let half = self.freqs.ncols();
        let scaled = x * T::of(1000.0);
        Array2::from_shape_fn((1, hidden), |(_, j)| {
            if j < half {
                (scaled * self.freqs[[0, j]]).sin()
            } else {
                (scaled * self.freqs[[0, j - half]]).cos()
            }
        })
    }

    /// Conditioning vector from the noise level and the guidance scalar.
    fn conditioning(&self, t: T, guidance: T) -> Array2<T> {
        let te = matmul(self.embed_scalar(t).view(), self.time_proj.view());
        let ge = matmul(self.embed_scalar(guidance).view(), self.guidance_proj.view());
        te + ge
    }

    fn check_inputs(&self, z_t: &Array2<T>, prompt: &Array2<T>) -> Result<(), ModelError> {
        let c = &self.config;
        if z_t.dim() != (c.image_tokens, c.latent_channels) {
            return Err(ModelError::Shape(format!(
                "latent {:?}, expected ({}, {})",
                z_t.dim(),
                c.image_tokens,
                c.latent_channels
            )));
        }
        if prompt.dim() != (c.text_tokens, c.hidden()) {
            return Err(ModelError::Shape(format!(
                "prompt tokens {:?}, expected ({}, {})",
                prompt.dim(),
                c.text_tokens,
                c.hidden()
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        z_t: &Array2<T>,
        t: T,
        prompt: &Array2<T>,
        guidance: T,
        share: Option<ShareContext<'_, T>>,
        capture: Option<(&BTreeSet<usize>, usize)>,
    ) -> Result<(Array2<T>, Vec<LayerKV<T>>), ModelError> {
        self.check_inputs(z_t, prompt)?;
        let (heads, hd) = (self.config.num_heads, self.config.head_dim);
        let cond = self.conditioning(t, guidance);
        let mut img = matmul(z_t.view(), self.latent_in.view()) + &cond;
        let mut txt = prompt.clone();
        let mut captured = Vec::new();

        for (layer, block) in self.blocks.iter().enumerate() {
            let project = |x: &Array2<T>, w: &StreamWeights<T>| {
                let xn = rms_norm(x.view());
                StreamQkv {
                    q: split_heads(&matmul(xn.view(), w.wq.view()), heads, hd),
                    k: split_heads(&matmul(xn.view(), w.wk.view()), heads, hd),
                    v: split_heads(&matmul(xn.view(), w.wv.view()), heads, hd),
                }
            };
            let text_qkv = project(&txt, &block.text);
            let image_qkv = project(&img, &block.image);

            if let Some((layers, timestep_index)) = capture {
                if layers.contains(&layer) {
                    captured.push(LayerKV::new(image_qkv.k.clone(), image_qkv.v.clone(), layer, timestep_index)?);
                }
            }

            let JointOutput { text, image } = match share {
                Some(ctx) if ctx.spec.vital_set.contains(&layer) => {
                    let ref_kv = ctx.bank.get(ctx.timestep_index, layer)?;
                    pivotal_shared_attention(layer, ctx.spec, &text_qkv, &image_qkv, ref_kv)?
                }
                _ => mm_attention(&text_qkv, &image_qkv)?,
            };

            txt = txt + matmul(merge_heads(&text).view(), block.text.wo.view());
            img = img + matmul(merge_heads(&image).view(), block.image.wo.view());
            txt = &txt + &mlp(txt.view(), &block.text);
            img = &img + &mlp(img.view(), &block.image);
        }

        let velocity = matmul(rms_norm(img.view()).view(), self.latent_out.view());
        Ok((velocity, captured))
    }

    /// Velocity prediction at noise level `t`.
    pub fn forward_velocity(
        &self,
        z_t: &Array2<T>,
        t: T,
        prompt: &Array2<T>,
        guidance: T,
        share: Option<ShareContext<'_, T>>,
    ) -> Result<Array2<T>, ModelError> {
        if let Some(ctx) = share {
            if ctx.spec.num_layers != self.config.num_layers {
                return Err(ModelError::Shape(format!(
                    "share spec is for {} layers, model has {}",
                    ctx.spec.num_layers, self.config.num_layers
                )));
            }
        }
        self.run(z_t, t, prompt, guidance, share, None).map(|(v, _)| v)
    }

    /// Unshared forward pass that also returns image-stream keys/values at `layers`.
    pub fn forward_capture(
        &self,
        z_t: &Array2<T>,
        t: T,
        prompt: &Array2<T>,
        guidance: T,
        layers: &BTreeSet<usize>,
        timestep_index: usize,
    ) -> Result<(Array2<T>, Vec<LayerKV<T>>), ModelError> {
        self.run(z_t, t, prompt, guidance, None, Some((layers, timestep_index)))
    }

    /// Every weight tensor with a stable name, in serialisation order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out: Vec<(String, &Array2<T>)> = vec![
            ("latent_in".into(), &self.latent_in),
            ("latent_out".into(), &self.latent_out),
            ("time_proj".into(), &self.time_proj),
            ("guidance_proj".into(), &self.guidance_proj),
            ("freqs".into(), &self.freqs),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.text.named(&format!("blocks.{i}.text"), &mut out);
            b.image.named(&format!("blocks.{i}.image"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![
            &mut self.latent_in,
            &mut self.latent_out,
            &mut self.time_proj,
            &mut self.guidance_proj,
            &mut self.freqs,
        ];
        for b in self.blocks.iter_mut() {
            b.text.named_mut(&mut out);
            b.image.named_mut(&mut out);
        }
        out
    }

    pub fn weight_checksum(&self) -> String {
        tensor::checksum(self.named_tensors().into_iter().flat_map(|(_, t)| t.iter()))
    }

    pub fn weights_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Writes a JSON header line followed by little-endian `f32` weights.
    pub fn save_snapshot<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let tensors = self.named_tensors();
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            dtype: "f32le".into(),
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: [t.nrows(), t.ncols()] })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| ModelError::Snapshot(e.to_string()))?;
        w.write_all(b"\n")?;
        for (_, t) in &tensors {
            for x in t.iter() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_snapshot<R: BufRead>(mut r: R) -> Result<Self, ModelError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: SnapshotHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| ModelError::Snapshot(format!("header: {e}")))?;
        if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION || header.dtype != "f32le" {
            return Err(ModelError::Snapshot(format!(
                "unsupported snapshot {} v{} ({})",
                header.format, header.version, header.dtype
            )));
        }
        let mut model = init_model::<T>(&header.config)?;
        let expected: Vec<(String, [usize; 2])> =
            model.named_tensors().into_iter().map(|(n, t)| (n, [t.nrows(), t.ncols()])).collect();
        let listed: Vec<(String, [usize; 2])> = header.tensors.iter().map(|e| (e.name.clone(), e.shape)).collect();
        if expected != listed {
            return Err(ModelError::Snapshot("tensor table does not match the config".into()));
        }
        let mut buf = [0u8; 4];
        for t in model.tensors_mut() {
            for x in t.iter_mut() {
                r.read_exact(&mut buf).map_err(|e| ModelError::Snapshot(format!("truncated weights: {e}")))?;
                *x = T::of(f32::from_le_bytes(buf) as f64);
            }
        }
        Ok(model)
    }
}

const SNAPSHOT_FORMAT: &str = "toy-mmdit-weights";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Options for [`capture_reference_bank_with`].
#[derive(Debug, Clone)]
pub struct CaptureOptions {
    /// Layers to record; `None` records the model's default vital layers.
    pub layers: Option<BTreeSet<usize>>,
    /// Accept a schedule that is not bent below the identity.
    pub allow_unreversed: bool,
    pub guidance: f64,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self { layers: None, allow_unreversed: false, guidance: 3.5 }
    }
}

/// Records reference keys/values at the model's vital layers along a noised
/// trajectory of `ref_latent`.
pub fn capture_reference_bank<T: Scalar>(
    model: &ToyMMDiT<T>,
    ref_latent: &Array2<T>,
    prompt_tokens: &Array2<T>,
    mask: &TokenMask,
    schedule_reversed: &NoiseSchedule<T>,
    seed: u64,
) -> Result<AttentionBank<T>, ModelError> {
    capture_reference_bank_with(
        model,
        ref_latent,
        prompt_tokens,
        mask,
        schedule_reversed,
        seed,
        &CaptureOptions::default(),
    )
}

pub fn capture_reference_bank_with<T: Scalar>(
    model: &ToyMMDiT<T>,
    ref_latent: &Array2<T>,
    prompt_tokens: &Array2<T>,
    mask: &TokenMask,
    schedule: &NoiseSchedule<T>,
    seed: u64,
    options: &CaptureOptions,
) -> Result<AttentionBank<T>, ModelError> {
    if !options.allow_unreversed && !schedule.variant.is_reversed() {
        return Err(ModelError::NotReversed(schedule.variant.factor()));
    }
    if mask.len() != model.config.image_tokens {
        return Err(AttentionError::MaskLength { mask: mask.len(), tokens: model.config.image_tokens }.into());
    }
    let layers = options.layers.clone().unwrap_or_else(|| model.config.vital_default.clone());
    if let Some(&l) = layers.iter().find(|&&l| l >= model.config.num_layers) {
        return Err(AttentionError::LayerOutOfRange { layer: l, num_layers: model.config.num_layers }.into());
    }
    let trajectory = build_trajectory(ref_latent, seed, schedule)?;
    let guidance = T::of(options.guidance);
    let mut entries = BTreeMap::new();
    for (i, (z, &s)) in trajectory.latents.iter().zip(&schedule.sigmas).enumerate() {
        let (_, kvs) = model.forward_capture(z, s, prompt_tokens, guidance, &layers, i)?;
        for kv in kvs {
            entries.insert((i, kv.layer), kv);
        }
    }
    Ok(AttentionBank { entries, mask: mask.clone(), schedule_used: schedule.clone(), layers })
}

/// Hash embedding of a prompt into `text_tokens × hidden` rows.
///
/// Words are lowercased and stripped of surrounding punctuation. Word `j`
/// contributes to row `j mod text_tokens` (rows average their words), so
/// every word of a long prompt still reaches the model. Empty rows hold a
/// padding embedding.
pub fn embed_prompt<T: Scalar>(prompt: &str, text_tokens: usize, hidden: usize, seed: u64) -> Array2<T> {
    let word_vec = |word: &str| -> Array2<T> {
        let digest = Sha256::digest(word.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(b) ^ seed);
        randn(&mut rng, 1, hidden, 1.0)
    };
    let words: Vec<String> = prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let mut out = Array2::<T>::zeros((text_tokens, hidden));
    if text_tokens == 0 {
        return out;
    }
    let mut counts = vec![0usize; text_tokens];
    for (j, w) in words.iter().enumerate() {
        let row = j % text_tokens;
        out.row_mut(row).scaled_add(T::one(), &word_vec(w).row(0));
        counts[row] += 1;
    }
    let pad = word_vec("<pad>");
    for (row, &c) in counts.iter().enumerate() {
        let mut r = out.row_mut(row);
        if c == 0 {
            r.assign(&pad.row(0));
        } else {
            let inv = T::one() / T::of(c as f64);
            r.mapv_inplace(|x| x * inv);
        }
        // position signal
        let pos = T::of(row as f64);
        for (d, x) in r.iter_mut().enumerate() {
            *x += T::of(0.1) * (pos / T::of(10_000f64.powf(d as f64 / hidden as f64))).sin();
        }
    }
    out
}

impl<T: Scalar> ToyMMDiT<T> {
    pub fn embed_prompt(&self, prompt: &str) -> Array2<T> {
        embed_prompt(prompt, self.config.text_tokens, self.config.hidden(), self.config.weight_seed)
    }
}

/// Rows of `x` selected by `mask`, averaged; `None` when the mask is empty.
pub(crate) fn masked_mean<T: Scalar>(x: &Array2<T>, mask: &TokenMask) -> Option<ndarray::Array1<T>> {
    if mask.count_foreground() == 0 {
        return None;
    }
    let mut acc = ndarray::Array1::<T>::zeros(x.ncols());
    for (row, &f) in x.axis_iter(Axis(0)).zip(mask.flags()) {
        if f {
            acc += &row;
        }
    }
    let n = T::of(mask.count_foreground() as f64);
    Some(acc.mapv(|v| v / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ShiftParams};

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            num_heads: 2,
            head_dim: 4,
            text_tokens: 3,
            image_tokens: 4,
            latent_channels: 5,
            vital_default: [0, 2].into(),
            weight_seed: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small();
        c.num_layers = 0;
        assert!(matches!(init_model::<f32>(&c), Err(ModelError::InvalidConfig(_))));
        let mut c = small();
        c.image_tokens = 5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.vital_default = [3].into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = init_model::<f32>(&small()).unwrap();
        let b = init_model::<f32>(&small()).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert!(a.weights_finite());
        let mut c = small();
        c.weight_seed = 2;
        assert_ne!(init_model::<f32>(&c).unwrap().weight_checksum(), a.weight_checksum());
    }

    #[test]
    fn heads_round_trip() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64);
        assert_eq!(merge_heads(&split_heads(&x, 2, 4)), x);
    }

    #[test]
    fn shape_errors() {
        let m = init_model::<f64>(&small()).unwrap();
        let p = m.embed_prompt("a dog");
        assert!(matches!(m.forward_velocity(&Array2::zeros((3, 5)), 0.5, &p, 3.5, None), Err(ModelError::Shape(_))));
        assert!(m.forward_velocity(&Array2::zeros((4, 5)), 0.5, &Array2::zeros((2, 8)), 3.5, None).is_err());
    }

    #[test]
    fn missing_bank_entry() {
        let m = init_model::<f64>(&small()).unwrap();
        let p = m.embed_prompt("a dog");
        let z = tensor::noise::<f64>(3, 4, 5);
        let sched = build_schedule::<f64>(2, &ShiftParams::new(4, -1.0)).unwrap();
        let bank = capture_reference_bank(&m, &z, &p, &TokenMask::full(4), &sched, 0).unwrap();
        let spec = ShareSpec::plain(3, [0, 1].into(), 4);
        let err = m
            .forward_velocity(&z, 0.5, &p, 3.5, Some(ShareContext { spec: &spec, bank: &bank, timestep_index: 0 }))
            .unwrap_err();
        assert!(matches!(err, ModelError::MissingBankEntry { timestep: 0, layer: 1 }));
        let spec = ShareSpec::plain(3, [0].into(), 4);
        let err = m
            .forward_velocity(&z, 0.5, &p, 3.5, Some(ShareContext { spec: &spec, bank: &bank, timestep_index: 9 }))
            .unwrap_err();
        assert!(matches!(err, ModelError::MissingBankEntry { timestep: 9, layer: 0 }));
    }

    #[test]
    fn capture_rejects_standard_schedule() {
        let m = init_model::<f64>(&small()).unwrap();
        let p = m.embed_prompt("");
        let z = tensor::noise::<f64>(3, 4, 5);
        let sched = build_schedule::<f64>(2, &ShiftParams::new(4, 1.0)).unwrap();
        assert!(matches!(
            capture_reference_bank(&m, &z, &p, &TokenMask::full(4), &sched, 0),
            Err(ModelError::NotReversed(_))
        ));
        let opts = CaptureOptions { allow_unreversed: true, ..Default::default() };
        assert!(capture_reference_bank_with(&m, &z, &p, &TokenMask::full(4), &sched, 0, &opts).is_ok());
    }

    #[test]
    fn prompt_embedding() {
        let a: Array2<f32> = embed_prompt("A dog!", 4, 6, 0);
        let b: Array2<f32> = embed_prompt("a   DOG", 4, 6, 0);
        assert_eq!(a, b);
        let c: Array2<f32> = embed_prompt("a cat", 4, 6, 0);
        assert_ne!(a, c);
        let long: Array2<f32> = embed_prompt("one two three four five", 4, 6, 0);
        let short: Array2<f32> = embed_prompt("one two three four", 4, 6, 0);
        assert_ne!(long, short, "words past the token budget still contribute");
        assert_eq!(embed_prompt::<f32>("x", 0, 6, 0).dim(), (0, 6));
    }

    #[test]
    fn snapshot_round_trip() {
        let m = init_model::<f32>(&small()).unwrap();
        let mut buf = Vec::new();
        m.save_snapshot(&mut buf).unwrap();
        let first_line = buf.split(|&b| b == b'\n').next().unwrap();
        let header: serde_json::Value = serde_json::from_slice(first_line).unwrap();
        assert_eq!(header["dtype"], "f32le");
        let back = ToyMMDiT::<f32>::load_snapshot(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, m);
        let truncated = &buf[..buf.len() - 3];
        assert!(ToyMMDiT::<f32>::load_snapshot(std::io::Cursor::new(truncated)).is_err());
    }
}
