//! The fusion head: LSTM over token embeddings, FC over the image
//! embedding, dropout on both branches, concatenation `[text; image]`, a
//! fused FC and five sigmoid outputs (misogynous + four sub-classes).
//!
//! Parameter files (`TVA1`, little-endian):
//!
//! ```text
//! "TVA1" | version u32 | token_dim image_dim hidden fused n_subclasses (u32 each)
//! | n_subclasses × (name_len u32 | UTF-8 name)
//! | f32 payload of every tensor in ParamGroup::ALL order
//! | CRC-32 of all preceding bytes
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabelSet, Sample, CLIP_DIM};
use crate::error::{Error, FormatError, Result};
use crate::kernels::{
    affine_backward_acc, affine_forward, all_finite, concat, dropout_apply, lstm_sequence_backward_acc,
    lstm_sequence_forward, sigmoid, DropoutMask, LstmParams, LstmTrace, Tensor2,
};
use crate::real::Real;
use crate::seed::{self, Stream};

pub const PARAMS_MAGIC: [u8; 4] = *b"TVA1";
pub const PARAMS_VERSION: u32 = 1;
pub const N_OUTPUTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub token_dim: usize,
    pub image_dim: usize,
    pub hidden: usize,
    pub fused: usize,
    pub n_subclasses: usize,
}

impl Dims {
    /// 768-wide CLIP inputs, LSTM and both FC layers of width 256.
    pub const fn standard() -> Self {
        Self {
            token_dim: CLIP_DIM,
            image_dim: CLIP_DIM,
            hidden: 256,
            fused: 256,
            n_subclasses: 4,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.token_dim == 0 || self.image_dim == 0 || self.hidden == 0 || self.fused == 0 {
            return Err(Error::Config(format!("all model dimensions must be positive: {self}")));
        }
        if self.n_subclasses != Label::SUBCLASSES.len() {
            return Err(Error::Config(format!(
                "the head has {} sub-class outputs, got n_subclasses = {}",
                Label::SUBCLASSES.len(),
                self.n_subclasses
            )));
        }
        Ok(())
    }

    pub fn ensure_matches(&self, expected: &Dims) -> Result<()> {
        if self != expected {
            return Err(Error::Dims(format!("have {self}, expected {expected}")));
        }
        Ok(())
    }

    /// Shape of each parameter group, in declared order.
    pub fn group_shape(&self, g: ParamGroup) -> (usize, usize) {
        let (r, c) = self.group_shape_u128(g);
        (r as usize, c as usize)
    }

    fn group_shape_u128(&self, g: ParamGroup) -> (u128, u128) {
        let (h, d, i, f, s) = (
            self.hidden as u128,
            self.token_dim as u128,
            self.image_dim as u128,
            self.fused as u128,
            self.n_subclasses as u128,
        );
        match g {
            ParamGroup::LstmWeight => (4 * h, d + h),
            ParamGroup::LstmBias => (4 * h, 1),
            ParamGroup::ImageWeight => (h, i),
            ParamGroup::ImageBias => (h, 1),
            ParamGroup::FusedWeight => (f, 2 * h),
            ParamGroup::FusedBias => (f, 1),
            ParamGroup::HeadAWeight => (1, f),
            ParamGroup::HeadABias => (1, 1),
            ParamGroup::HeadBWeight => (s, f),
            ParamGroup::HeadBBias => (s, 1),
        }
    }

    pub fn n_params(&self) -> usize {
        ParamGroup::ALL
            .iter()
            .map(|&g| {
                let (r, c) = self.group_shape(g);
                r * c
            })
            .sum()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D={} image={} H={} fused={} subclasses={}",
            self.token_dim, self.image_dim, self.hidden, self.fused, self.n_subclasses
        )
    }
}

/// Named parameter tensors in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    LstmWeight,
    LstmBias,
    ImageWeight,
    ImageBias,
    FusedWeight,
    FusedBias,
    HeadAWeight,
    HeadABias,
    HeadBWeight,
    HeadBBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::LstmWeight,
        ParamGroup::LstmBias,
        ParamGroup::ImageWeight,
        ParamGroup::ImageBias,
        ParamGroup::FusedWeight,
        ParamGroup::FusedBias,
        ParamGroup::HeadAWeight,
        ParamGroup::HeadABias,
        ParamGroup::HeadBWeight,
        ParamGroup::HeadBBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::LstmWeight => "lstm.weight",
            ParamGroup::LstmBias => "lstm.bias",
            ParamGroup::ImageWeight => "image_fc.weight",
            ParamGroup::ImageBias => "image_fc.bias",
            ParamGroup::FusedWeight => "fused_fc.weight",
            ParamGroup::FusedBias => "fused_fc.bias",
            ParamGroup::HeadAWeight => "head_a.weight",
            ParamGroup::HeadABias => "head_a.bias",
            ParamGroup::HeadBWeight => "head_b.weight",
            ParamGroup::HeadBBias => "head_b.bias",
        }
    }

    pub fn is_weight(self) -> bool {
        matches!(
            self,
            ParamGroup::LstmWeight
                | ParamGroup::ImageWeight
                | ParamGroup::FusedWeight
                | ParamGroup::HeadAWeight
                | ParamGroup::HeadBWeight
        )
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Affine<T> {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor2::zeros(out, inp),
            bias: vec![T::zero(); out],
        }
    }

    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        affine_forward(x, &self.weight, &self.bias)
    }
}

/// Every trainable tensor of the head. A gradient set has this same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    dims: Dims,
    pub lstm: LstmParams<T>,
    pub image_fc: Affine<T>,
    pub fused_fc: Affine<T>,
    pub head_a: Affine<T>,
    pub head_b: Affine<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.check()?;
        let h = dims.hidden;
        Ok(Self {
            dims,
            lstm: LstmParams::zeros(dims.token_dim, h),
            image_fc: Affine::zeros(h, dims.image_dim),
            fused_fc: Affine::zeros(dims.fused, 2 * h),
            head_a: Affine::zeros(1, dims.fused),
            head_b: Affine::zeros(dims.n_subclasses, dims.fused),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn group(&self, g: ParamGroup) -> &[T] {
        match g {
            ParamGroup::LstmWeight => self.lstm.weight.data(),
            ParamGroup::LstmBias => &self.lstm.bias,
            ParamGroup::ImageWeight => self.image_fc.weight.data(),
            ParamGroup::ImageBias => &self.image_fc.bias,
            ParamGroup::FusedWeight => self.fused_fc.weight.data(),
            ParamGroup::FusedBias => &self.fused_fc.bias,
            ParamGroup::HeadAWeight => self.head_a.weight.data(),
            ParamGroup::HeadABias => &self.head_a.bias,
            ParamGroup::HeadBWeight => self.head_b.weight.data(),
            ParamGroup::HeadBBias => &self.head_b.bias,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [T] {
        match g {
            ParamGroup::LstmWeight => self.lstm.weight.data_mut(),
            ParamGroup::LstmBias => &mut self.lstm.bias,
            ParamGroup::ImageWeight => self.image_fc.weight.data_mut(),
            ParamGroup::ImageBias => &mut self.image_fc.bias,
            ParamGroup::FusedWeight => self.fused_fc.weight.data_mut(),
            ParamGroup::FusedBias => &mut self.fused_fc.bias,
            ParamGroup::HeadAWeight => self.head_a.weight.data_mut(),
            ParamGroup::HeadABias => &mut self.head_a.bias,
            ParamGroup::HeadBWeight => self.head_b.weight.data_mut(),
            ParamGroup::HeadBBias => &mut self.head_b.bias,
        }
    }

    /// Checks every tensor against the dims record.
    pub fn check_shapes(&self) -> Result<()> {
        self.dims.check()?;
        for g in ParamGroup::ALL {
            let (r, c) = self.dims.group_shape(g);
            if self.group(g).len() != r * c {
                return Err(Error::shape("ModelParams", format!("{g}[{}]", self.group(g).len()), format!("[{r}x{c}]")));
            }
        }
        let shapes = [
            (self.lstm.weight.shape(), self.dims.group_shape(ParamGroup::LstmWeight)),
            (self.image_fc.weight.shape(), self.dims.group_shape(ParamGroup::ImageWeight)),
            (self.fused_fc.weight.shape(), self.dims.group_shape(ParamGroup::FusedWeight)),
            (self.head_a.weight.shape(), self.dims.group_shape(ParamGroup::HeadAWeight)),
            (self.head_b.weight.shape(), self.dims.group_shape(ParamGroup::HeadBWeight)),
        ];
        for (have, want) in shapes {
            if have != want {
                return Err(Error::shape("ModelParams", format!("{have:?}"), format!("{want:?}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL.iter().all(|&g| all_finite(self.group(g)))
    }

    pub fn fill_zero(&mut self) {
        for g in ParamGroup::ALL {
            self.group_mut(g).fill(T::zero());
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in ParamGroup::ALL {
            for v in self.group_mut(g) {
                *v = *v * k;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams<T>) -> Result<()> {
        self.dims.ensure_matches(&other.dims)?;
        for g in ParamGroup::ALL {
            for (a, &b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let aff = |a: &Affine<T>| Affine {
            weight: a.weight.cast(),
            bias: a.bias.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        };
        ModelParams {
            dims: self.dims,
            lstm: LstmParams {
                weight: self.lstm.weight.cast(),
                bias: self.lstm.bias.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            },
            image_fc: aff(&self.image_fc),
            fused_fc: aff(&self.fused_fc),
            head_a: aff(&self.head_a),
            head_b: aff(&self.head_b),
        }
    }
}

/// Glorot-uniform weights (`±√(6/(fan_in+fan_out))` per matrix), zero
/// biases except the LSTM forget-gate bias, which starts at 1.
pub fn init_params<T: Real>(seed: u64, dims: Dims) -> Result<ModelParams<T>> {
    let mut p = ModelParams::zeros(dims)?;
    let mut rng = seed::rng(seed, Stream::Init, &[]);
    for g in ParamGroup::ALL.into_iter().filter(|g| g.is_weight()) {
        let (fan_out, fan_in) = dims.group_shape(g);
        let bound = glorot_bound(fan_in, fan_out);
        for w in p.group_mut(g) {
            *w = T::from_f64(rng.random_range(-bound..bound));
        }
    }
    let h = dims.hidden;
    p.lstm.bias[h..2 * h].fill(T::one());
    Ok(p)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Borrowed model input: one sample's embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a, T> {
    pub id: &'a str,
    pub tokens: &'a Tensor2<T>,
    pub image: &'a [T],
}

/// Owned input in a different precision than the stored sample.
#[derive(Debug, Clone)]
pub struct OwnedInput<T> {
    pub id: String,
    pub tokens: Tensor2<T>,
    pub image: Vec<T>,
}

impl<T: Real> OwnedInput<T> {
    pub fn view(&self) -> Input<'_, T> {
        Input {
            id: &self.id,
            tokens: &self.tokens,
            image: &self.image,
        }
    }
}

impl Sample {
    pub fn input(&self) -> Input<'_, f32> {
        Input {
            id: &self.id,
            tokens: &self.tokens,
            image: &self.image,
        }
    }

    pub fn to_input<T: Real>(&self) -> OwnedInput<T> {
        OwnedInput {
            id: self.id.clone(),
            tokens: self.tokens.cast(),
            image: self.image.iter().map(|&v| T::from_f32(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Dropout active at the given rate.
    Train { dropout: f64 },
    Eval,
}

/// Logits and probabilities in canonical label order: misogynous, then
/// shaming, stereotype, objectification, violence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput<T> {
    pub logits: [T; N_OUTPUTS],
    pub probs: [T; N_OUTPUTS],
}

impl<T: Real> ModelOutput<T> {
    pub fn prob_misogynous(&self) -> T {
        self.probs[0]
    }

    pub fn prob_subclass(&self) -> [T; 4] {
        [self.probs[1], self.probs[2], self.probs[3], self.probs[4]]
    }
}

/// Saved activations and dropout masks of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    dims: Dims,
    trace: LstmTrace<T>,
    image: Vec<T>,
    text_mask: DropoutMask,
    image_mask: DropoutMask,
    fused_in: Vec<T>,
    fused_out: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn text_mask(&self) -> &DropoutMask {
        &self.text_mask
    }

    pub fn image_mask(&self) -> &DropoutMask {
        &self.image_mask
    }
}

pub fn forward<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    input: Input<'_, T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(ModelOutput<T>, ForwardCache<T>)> {
    let dims = params.dims;
    if input.tokens.cols() != dims.token_dim || input.image.len() != dims.image_dim {
        return Err(Error::data(
            Some(input.id),
            format!(
                "embedding dims tokens {} / image [{}] do not match model {dims}",
                input.tokens,
                input.image.len()
            ),
        ));
    }
    if input.tokens.rows() == 0 {
        return Err(Error::data(Some(input.id), "empty token sequence"));
    }

    let (text, trace) = lstm_sequence_forward(input.tokens, &params.lstm)?;
    let image_out = params.image_fc.forward(input.image)?;

    let (text_mask, image_mask) = match mode {
        Mode::Train { dropout } => (
            DropoutMask::sample(dims.hidden, dropout, rng)?,
            DropoutMask::sample(dims.hidden, dropout, rng)?,
        ),
        Mode::Eval => (DropoutMask::identity(dims.hidden), DropoutMask::identity(dims.hidden)),
    };
    let fused_in = concat(&dropout_apply(&text, &text_mask)?, &dropout_apply(&image_out, &image_mask)?);
    let fused_out = params.fused_fc.forward(&fused_in)?;
    let za = params.head_a.forward(&fused_out)?;
    let zb = params.head_b.forward(&fused_out)?;

    let logits = [za[0], zb[0], zb[1], zb[2], zb[3]];
    if !all_finite(&logits) {
        return Err(Error::Numeric(format!("non-finite logits for sample {:?}", input.id)));
    }
    let probs = logits.map(sigmoid);
    let cache = ForwardCache {
        dims,
        trace,
        image: input.image.to_vec(),
        text_mask,
        image_mask,
        fused_in,
        fused_out,
    };
    Ok((ModelOutput { logits, probs }, cache))
}

/// Gradients of all parameters given `dL/dlogit` for the five outputs.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &[T; N_OUTPUTS],
) -> Result<ModelParams<T>> {
    let mut grads = ModelParams::zeros(params.dims)?;
    backward_acc(params, cache, grad_logits, &mut grads)?;
    Ok(grads)
}

/// Adds this sample's gradients into `grads`.
pub fn backward_acc<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &[T; N_OUTPUTS],
    grads: &mut ModelParams<T>,
) -> Result<()> {
    if cache.dims != params.dims {
        return Err(Error::Usage(format!(
            "forward cache was built for {} but parameters are {}",
            cache.dims, params.dims
        )));
    }
    if grads.dims != params.dims {
        return Err(Error::Usage(format!("gradient buffer is {} but parameters are {}", grads.dims, params.dims)));
    }
    let h = params.dims.hidden;

    let mut g_fused = vec![T::zero(); params.dims.fused];
    affine_backward_acc(
        &grad_logits[..1],
        &cache.fused_out,
        &params.head_a.weight,
        &mut grads.head_a.weight,
        &mut grads.head_a.bias,
        Some(&mut g_fused),
    )?;
    affine_backward_acc(
        &grad_logits[1..],
        &cache.fused_out,
        &params.head_b.weight,
        &mut grads.head_b.weight,
        &mut grads.head_b.bias,
        Some(&mut g_fused),
    )?;

    let mut g_in = vec![T::zero(); 2 * h];
    affine_backward_acc(
        &g_fused,
        &cache.fused_in,
        &params.fused_fc.weight,
        &mut grads.fused_fc.weight,
        &mut grads.fused_fc.bias,
        Some(&mut g_in),
    )?;

    let g_image = dropout_apply(&g_in[h..], &cache.image_mask)?;
    affine_backward_acc(
        &g_image,
        &cache.image,
        &params.image_fc.weight,
        &mut grads.image_fc.weight,
        &mut grads.image_fc.bias,
        None,
    )?;

    let g_text = dropout_apply(&g_in[..h], &cache.text_mask)?;
    lstm_sequence_backward_acc(&g_text, &cache.trace, &params.lstm, &mut grads.lstm, None)
}

/// Per-output decision thresholds in canonical label order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds(pub [f64; N_OUTPUTS]);

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds([0.5; N_OUTPUTS])
    }
}

impl Thresholds {
    pub fn check(&self) -> Result<()> {
        if let Some(t) = self.0.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("thresholds must lie in (0, 1), got {t}")));
        }
        Ok(())
    }

    pub fn apply<T: Real>(&self, probs: &[T; N_OUTPUTS]) -> LabelSet {
        let mut bits = [false; N_OUTPUTS];
        for (k, b) in bits.iter_mut().enumerate() {
            *b = probs[k].to_f64() >= self.0[k];
        }
        LabelSet::from_bools(bits)
    }
}

impl FromStr for Thresholds {
    type Err = Error;
    /// Either one value for all heads or five comma-separated values.
    fn from_str(s: &str) -> Result<Self> {
        let vals = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad threshold {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = match vals.as_slice() {
            [v] => Thresholds([*v; N_OUTPUTS]),
            v if v.len() == N_OUTPUTS => Thresholds(v.try_into().unwrap()),
            v => return Err(Error::Config(format!("expected 1 or {N_OUTPUTS} thresholds, got {}", v.len()))),
        };
        t.check()?;
        Ok(t)
    }
}

/// Eval-mode forward followed by `prob >= threshold` per output.
pub fn predict<T: Real>(params: &ModelParams<T>, input: Input<'_, T>, thresholds: &Thresholds) -> Result<LabelSet> {
    Ok(thresholds.apply(&infer(params, input)?.probs))
}

/// Eval-mode forward without keeping the cache.
pub fn infer<T: Real>(params: &ModelParams<T>, input: Input<'_, T>) -> Result<ModelOutput<T>> {
    // eval mode draws nothing from the generator
    let mut unused = seed::rng(0, Stream::Dropout, &[]);
    Ok(forward(params, input, Mode::Eval, &mut unused)?.0)
}

impl ModelParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut out = Vec::with_capacity(64 + 4 * d.n_params());
        out.extend_from_slice(&PARAMS_MAGIC);
        for v in [PARAMS_VERSION as usize, d.token_dim, d.image_dim, d.hidden, d.fused, d.n_subclasses] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in Label::SUBCLASSES {
            out.extend_from_slice(&(l.name().len() as u32).to_le_bytes());
            out.extend_from_slice(l.name().as_bytes());
        }
        for g in ParamGroup::ALL {
            for v in self.group(g) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |e: FormatError| Error::format(None, e);
        let truncated = |offset: usize, needed: usize| fail(FormatError::Truncated { offset, needed });
        let u32_at = |pos: usize| -> Result<u32> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| truncated(pos, pos + 4 - bytes.len()))
        };

        let magic: [u8; 4] = bytes.get(..4).ok_or_else(|| truncated(0, 4 - bytes.len()))?.try_into().unwrap();
        if magic != PARAMS_MAGIC {
            return Err(fail(FormatError::BadMagic {
                expected: PARAMS_MAGIC,
                found: magic,
            }));
        }
        let version = u32_at(4)?;
        if version != PARAMS_VERSION {
            return Err(fail(FormatError::Version {
                expected: PARAMS_VERSION,
                found: version,
            }));
        }
        let dims = Dims {
            token_dim: u32_at(8)? as usize,
            image_dim: u32_at(12)? as usize,
            hidden: u32_at(16)? as usize,
            fused: u32_at(20)? as usize,
            n_subclasses: u32_at(24)? as usize,
        };
        let mut pos = 28;
        let mut names = Vec::new();
        for _ in 0..dims.n_subclasses.min(Label::SUBCLASSES.len() + 1) {
            let len = u32_at(pos)? as usize;
            pos += 4;
            let name = bytes.get(pos..pos + len).ok_or_else(|| truncated(pos, pos + len - bytes.len()))?;
            names.push(String::from_utf8_lossy(name).into_owned());
            pos += len;
        }
        // header values are untrusted, so size the payload without overflow
        let payload: u128 = ParamGroup::ALL
            .iter()
            .map(|&g| {
                let (r, c) = dims.group_shape_u128(g);
                r * c
            })
            .sum();
        let needed = pos as u128 + 4 * payload + 4;
        if needed > bytes.len() as u128 {
            let short = usize::try_from(needed - bytes.len() as u128).unwrap_or(usize::MAX);
            return Err(truncated(bytes.len(), short));
        }
        let expected_len = needed as usize;
        if bytes.len() < expected_len {
            return Err(truncated(bytes.len(), expected_len - bytes.len()));
        }
        if bytes.len() > expected_len {
            return Err(fail(FormatError::TrailingBytes(bytes.len() - expected_len)));
        }
        let body = &bytes[..expected_len - 4];
        let stored = u32::from_le_bytes(bytes[expected_len - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(fail(FormatError::Checksum { stored, computed }));
        }
        dims.check()
            .map_err(|e| fail(FormatError::Header(e.to_string())))?;
        let want: Vec<&str> = Label::SUBCLASSES.iter().map(|l| l.name()).collect();
        if names != want {
            return Err(fail(FormatError::Header(format!("sub-class order {names:?}, expected {want:?}"))));
        }

        let mut p = ModelParams::zeros(dims)?;
        let mut floats = body[pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for g in ParamGroup::ALL {
            for v in p.group_mut(g) {
                *v = floats.next().expect("length checked");
            }
        }
        if !p.is_finite() {
            return Err(Error::Numeric("parameter file contains non-finite values".into()));
        }
        Ok(p)
    }
}

pub fn save_params(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless its dims equal `expected`.
pub fn load_params_expecting(path: impl AsRef<Path>, expected: &Dims) -> Result<ModelParams<f32>> {
    let p = load_params(path)?;
    p.dims.ensure_matches(expected)?;
    Ok(p)
}
