//! Joint text/image attention and reference key/value sharing.
//!
//! All tensors are laid out `(heads, tokens, head_dim)`. Every kernel funnels
//! into [`attend`], so kernels that build identical key/value sets produce
//! bit-identical outputs.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::matmul_t;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("layer {layer} out of range for {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("reference keys belong to layer {got}, expected {expected}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("mask has {mask} entries but the reference has {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("invalid share spec: {0}")]
    InvalidSpec(String),
    #[error("cannot sample {requested} layers from {available} non-vital layers")]
    SampleTooLarge { requested: usize, available: usize },
}

/// Foreground flag per reference image token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    flags: Vec<bool>,
    count_foreground: usize,
}

impl TokenMask {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        let count_foreground = flags.iter().filter(|&&f| f).count();
        Self { flags, count_foreground }
    }

    pub fn full(len: usize) -> Self {
        Self::from_flags(vec![true; len])
    }

    pub fn empty(len: usize) -> Self {
        Self::from_flags(vec![false; len])
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count_foreground(&self) -> usize {
        self.count_foreground
    }

    /// Same mask with tokens reordered so that `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_flags(perm.iter().map(|&i| self.flags[i]).collect())
    }
}

/// How background reference tokens are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Remove background tokens from the shared key/value set.
    #[default]
    Drop,
    /// Keep them but multiply keys and values by zero. Zeroed keys still carry
    /// `e^0` softmax mass.
    Zero,
}

/// Which layers share reference attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    #[default]
    Vital,
    RandomNonvital,
    All,
}

/// Knobs of masked, scaled sharing at a subset of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareSpec {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub vital_set: BTreeSet<usize>,
    pub num_layers: usize,
    pub mask: TokenMask,
    pub mask_mode: MaskMode,
    pub dropout_rate: f64,
    pub dropout_seed: u64,
}

impl ShareSpec {
    /// Unscaled sharing of every reference token at the given layers.
    pub fn plain(num_layers: usize, vital_set: BTreeSet<usize>, ref_tokens: usize) -> Self {
        Self {
            lambda_r: 1.0,
            lambda_p: 1.0,
            vital_set,
            num_layers,
            mask: TokenMask::full(ref_tokens),
            mask_mode: MaskMode::Drop,
            dropout_rate: 0.0,
            dropout_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) || !(self.lambda_p >= 0.0 && self.lambda_p.is_finite())
        {
            return Err(AttentionError::InvalidSpec(format!(
                "lambda_r={} and lambda_p={} must be finite and >= 0",
                self.lambda_r, self.lambda_p
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(AttentionError::InvalidSpec(format!("dropout_rate={} must lie in [0, 1)", self.dropout_rate)));
        }
        if let Some(&l) = self.vital_set.iter().find(|&&l| l >= self.num_layers) {
            return Err(AttentionError::LayerOutOfRange { layer: l, num_layers: self.num_layers });
        }
        Ok(())
    }
}

/// Reference keys and values captured at one (timestep, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV<T> {
    pub keys: Array3<T>,
    pub values: Array3<T>,
    pub layer: usize,
    pub timestep_index: usize,
}

impl<T: Scalar> LayerKV<T> {
    pub fn new(
        keys: Array3<T>,
        values: Array3<T>,
        layer: usize,
        timestep_index: usize,
    ) -> Result<Self, AttentionError> {
        let (hk, nk, _) = keys.dim();
        let (hv, nv, _) = values.dim();
        if hk != hv || nk != nv {
            return Err(AttentionError::DimMismatch(format!(
                "reference keys {:?} and values {:?} disagree",
                keys.dim(),
                values.dim()
            )));
        }
        Ok(Self { keys, values, layer, timestep_index })
    }

    pub fn num_tokens(&self) -> usize {
        self.keys.dim().1
    }
}

/// Queries, keys and values of one token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamQkv<T> {
    pub q: Array3<T>,
    pub k: Array3<T>,
    pub v: Array3<T>,
}

impl<T: Scalar> StreamQkv<T> {
    pub fn num_tokens(&self) -> usize {
        self.q.dim().1
    }
}

/// Attention output split back into the text and image streams.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput<T> {
    pub text: Array3<T>,
    pub image: Array3<T>,
}

/// Row-wise softmax of `q · kᵀ / √d`, stabilised by the row maximum.
pub fn attention_probs<T: Scalar>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>) -> Array2<T> {
    let scale = T::one() / T::of(q.ncols() as f64).sqrt();
    let mut logits = matmul_t(q, k);
    for mut row in logits.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x * scale));
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x * scale - max).exp();
            total += *x;
        }
        row.mapv_inplace(|x| x / total);
    }
    logits
}

/// `softmax(q kᵀ / √d) · v` for a single head.
pub fn attend<T: Scalar>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>, v: ArrayView2<'_, T>) -> Array2<T> {
    let (nq, _) = q.dim();
    let (nk, dv) = v.dim();
    if nk == 0 {
        return Array2::zeros((nq, dv));
    }
    let probs = attention_probs(q, k);
    crate::tensor::matmul(probs.view(), v)
}

fn check_parts<T: Scalar>(
    queries: &[ArrayView3<'_, T>],
    keys: &[ArrayView3<'_, T>],
    values: &[ArrayView3<'_, T>],
) -> Result<(), AttentionError> {
    let (heads, _, dk) = queries[0].dim();
    let dv = values[0].dim().2;
    for q in queries {
        if q.dim().0 != heads || q.dim().2 != dk {
            return Err(AttentionError::DimMismatch(format!("query {:?} vs {:?}", q.dim(), queries[0].dim())));
        }
    }
    for (k, v) in keys.iter().zip(values) {
        let (hk, nk, dkk) = k.dim();
        let (hv, nv, dvv) = v.dim();
        if hk != heads || hv != heads {
            return Err(AttentionError::DimMismatch(format!("head count {hk}/{hv} vs {heads}")));
        }
        if dkk != dk {
            return Err(AttentionError::DimMismatch(format!("key dim {dkk} vs query dim {dk}")));
        }
        if dvv != dv {
            return Err(AttentionError::DimMismatch(format!("value dim {dvv} vs {dv}")));
        }
        if nk != nv {
            return Err(AttentionError::DimMismatch(format!("{nk} keys vs {nv} values")));
        }
    }
    Ok(())
}

/// Shared core: text and image queries attend over the concatenated key parts.
fn joint<T: Scalar>(
    text_q: ArrayView3<'_, T>,
    image_q: ArrayView3<'_, T>,
    keys: &[ArrayView3<'_, T>],
    values: &[ArrayView3<'_, T>],
) -> Result<JointOutput<T>, AttentionError> {
    check_parts(&[text_q, image_q], keys, values)?;
    let heads = text_q.dim().0;
    let n_text = text_q.dim().1;
    let n_img = image_q.dim().1;
    let dv = values[0].dim().2;
    let mut text = Array3::zeros((heads, n_text, dv));
    let mut image = Array3::zeros((heads, n_img, dv));
    let cat = |parts: &[ArrayView3<'_, T>], h: usize| -> Array2<T> {
        let views: Vec<_> = parts.iter().map(|p| p.index_axis(Axis(0), h)).collect();
        concatenate(Axis(0), &views).expect("parts share column count")
    };
    for h in 0..heads {
        let q = concatenate(Axis(0), &[text_q.index_axis(Axis(0), h), image_q.index_axis(Axis(0), h)])
            .expect("queries share head_dim");
        let k = cat(keys, h);
        let v = cat(values, h);
        let out = attend(q.view(), k.view(), v.view());
        text.index_axis_mut(Axis(0), h).assign(&out.slice(s![..n_text, ..]));
        image.index_axis_mut(Axis(0), h).assign(&out.slice(s![n_text.., ..]));
    }
    Ok(JointOutput { text, image })
}

/// Joint attention over the concatenated text and image streams.
pub fn mm_attention<T: Scalar>(text: &StreamQkv<T>, image: &StreamQkv<T>) -> Result<JointOutput<T>, AttentionError> {
    joint(text.q.view(), image.q.view(), &[text.k.view(), image.k.view()], &[text.v.view(), image.v.view()])
}

/// Joint attention with reference keys/values prepended to the key set.
pub fn shared_attention<T: Scalar>(
    text: &StreamQkv<T>,
    image: &StreamQkv<T>,
    ref_keys: &Array3<T>,
    ref_values: &Array3<T>,
) -> Result<JointOutput<T>, AttentionError> {
    joint(
        text.q.view(),
        image.q.view(),
        &[ref_keys.view(), text.k.view(), image.k.view()],
        &[ref_values.view(), text.v.view(), image.v.view()],
    )
}

/// Key/value set used by [`pivotal_shared_attention`] at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedKeyValues<T> {
    pub keys: Array3<T>,
    pub values: Array3<T>,
    /// Leading reference tokens in `keys`/`values`.
    pub num_reference: usize,
}

/// Reference token indices kept after masking and dropout, and whether each is zeroed.
fn reference_selection(spec: &ShareSpec, layer: usize, timestep_index: usize) -> Vec<(usize, bool)> {
    let mut kept: Vec<(usize, bool)> = match spec.mask_mode {
        MaskMode::Drop => spec.mask.flags().iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| (i, false)).collect(),
        MaskMode::Zero => spec.mask.flags().iter().enumerate().map(|(i, &f)| (i, !f)).collect(),
    };
    if spec.dropout_rate > 0.0 && !kept.is_empty() {
        let n = kept.len();
        let dropped = ((spec.dropout_rate * n as f64).round() as usize).min(n);
        let seed = spec.dropout_seed ^ (((layer as u64) << 32) | timestep_index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut survivors = index::sample(&mut rng, n, n - dropped).into_vec();
        survivors.sort_unstable();
        kept = survivors.into_iter().map(|i| kept[i]).collect();
    }
    kept
}

/// Builds the key/value set for `layer`: scaled, masked reference tokens
/// followed by scaled text keys and the target image keys.
///
/// Layers outside the vital set, and vital layers where no reference token
/// survives masking and dropout, return the plain joint set.
pub fn pivotal_key_values<T: Scalar>(
    layer: usize,
    spec: &ShareSpec,
    text: &StreamQkv<T>,
    image: &StreamQkv<T>,
    ref_kv: &LayerKV<T>,
) -> Result<SharedKeyValues<T>, AttentionError> {
    spec.validate()?;
    if layer >= spec.num_layers {
        return Err(AttentionError::LayerOutOfRange { layer, num_layers: spec.num_layers });
    }
    let plain = || -> Result<SharedKeyValues<T>, AttentionError> {
        Ok(SharedKeyValues {
            keys: concatenate(Axis(1), &[text.k.view(), image.k.view()])
                .map_err(|e| AttentionError::DimMismatch(e.to_string()))?,
            values: concatenate(Axis(1), &[text.v.view(), image.v.view()])
                .map_err(|e| AttentionError::DimMismatch(e.to_string()))?,
            num_reference: 0,
        })
    };
    if !spec.vital_set.contains(&layer) {
        return plain();
    }
    if ref_kv.layer != layer {
        return Err(AttentionError::LayerMismatch { expected: layer, got: ref_kv.layer });
    }
    if spec.mask.len() != ref_kv.num_tokens() {
        return Err(AttentionError::MaskLength { mask: spec.mask.len(), tokens: ref_kv.num_tokens() });
    }
    let selection = reference_selection(spec, layer, ref_kv.timestep_index);
    if selection.is_empty() {
        return plain();
    }
    check_parts(
        &[text.q.view(), image.q.view()],
        &[ref_kv.keys.view(), text.k.view(), image.k.view()],
        &[ref_kv.values.view(), text.v.view(), image.v.view()],
    )?;

    let lambda_r = T::of(spec.lambda_r);
    let lambda_p = T::of(spec.lambda_p);
    let (heads, _, dk) = ref_kv.keys.dim();
    let dv = ref_kv.values.dim().2;
    let n = selection.len();
    let mut ref_k = Array3::zeros((heads, n, dk));
    let mut ref_v = Array3::zeros((heads, n, dv));
    for (row, &(tok, zeroed)) in selection.iter().enumerate() {
        let gate = if zeroed { T::zero() } else { T::one() };
        for h in 0..heads {
            for d in 0..dk {
                ref_k[[h, row, d]] = lambda_r * (ref_kv.keys[[h, tok, d]] * gate);
            }
            for d in 0..dv {
                ref_v[[h, row, d]] = ref_kv.values[[h, tok, d]] * gate;
            }
        }
    }
    let text_k = text.k.mapv(|x| lambda_p * x);
    let keys = concatenate(Axis(1), &[ref_k.view(), text_k.view(), image.k.view()])
        .map_err(|e| AttentionError::DimMismatch(e.to_string()))?;
    let values = concatenate(Axis(1), &[ref_v.view(), text.v.view(), image.v.view()])
        .map_err(|e| AttentionError::DimMismatch(e.to_string()))?;
    Ok(SharedKeyValues { keys, values, num_reference: n })
}

/// Masked, scaled reference sharing at vital layers; plain joint attention elsewhere.
pub fn pivotal_shared_attention<T: Scalar>(
    layer: usize,
    spec: &ShareSpec,
    text: &StreamQkv<T>,
    image: &StreamQkv<T>,
    ref_kv: &LayerKV<T>,
) -> Result<JointOutput<T>, AttentionError> {
    let kv = pivotal_key_values(layer, spec, text, image, ref_kv)?;
    joint(text.q.view(), image.q.view(), &[kv.keys.view()], &[kv.values.view()])
}

/// Picks the layers that share reference attention.
pub fn select_layers(
    strategy: LayerStrategy,
    num_layers: usize,
    vital_default: &BTreeSet<usize>,
    seed: u64,
) -> Result<BTreeSet<usize>, AttentionError> {
    if let Some(&l) = vital_default.iter().find(|&&l| l >= num_layers) {
        return Err(AttentionError::LayerOutOfRange { layer: l, num_layers });
    }
    match strategy {
        LayerStrategy::Vital => Ok(vital_default.clone()),
        LayerStrategy::All => Ok((0..num_layers).collect()),
        LayerStrategy::RandomNonvital => {
            let complement: Vec<usize> = (0..num_layers).filter(|l| !vital_default.contains(l)).collect();
            let requested = vital_default.len();
            if complement.len() < requested {
                return Err(AttentionError::SampleTooLarge { requested, available: complement.len() });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(index::sample(&mut rng, complement.len(), requested).into_iter().map(|i| complement[i]).collect())
        }
    }
}
