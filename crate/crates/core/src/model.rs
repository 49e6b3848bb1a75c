//! Frozen surrogate for a vision-language text tower.
//!
//! Each class's text feature is produced by concatenating the shared learnable
//! context tokens with that class's frozen token, projecting through a frozen
//! linear map and L2-normalizing:
//!
//! ```text
//! g_n = normalize(W · [ctx_1, …, ctx_M, e_n])
//! ```
//!
//! Only the context tokens are trainable. Image features arrive pre-encoded.

use crate::align::FlatGradient;
use crate::error::{Error, Result};
use crate::numerics::{check_finite, dot_unchecked, l2_normalize, norm, Mat64, SeededRng};

/// Tolerance on `||f|| = 1` accepted by [`class_logits`].
pub const FEATURE_NORM_TOL: f64 = 1e-6;

/// How the context vectors are initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CtxInit {
    Gaussian { std: f64 },
    Zeros,
}

impl Default for CtxInit {
    fn default() -> Self {
        CtxInit::Gaussian { std: 0.02 }
    }
}

/// The learnable context: `ctx_len` tokens of `d_token` floats, stored flat
/// in token-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    ctx_len: usize,
    d_token: usize,
    data: Vec<f64>,
}

impl PromptParams {
    pub fn new(ctx_len: usize, d_token: usize, data: Vec<f64>) -> Result<Self> {
        if ctx_len == 0 || d_token == 0 {
            return Err(Error::Contract("context length and token width must be positive".into()));
        }
        if data.len() != ctx_len * d_token {
            return Err(Error::DimensionMismatch {
                context: "PromptParams",
                expected: ctx_len * d_token,
                got: data.len(),
            });
        }
        check_finite(&data, "prompt context")?;
        Ok(PromptParams { ctx_len, d_token, data })
    }

    pub fn init(ctx_len: usize, d_token: usize, init: CtxInit, rng: &mut SeededRng) -> Result<Self> {
        let data = match init {
            CtxInit::Gaussian { std } => rng.gaussian_vec(ctx_len * d_token, std),
            CtxInit::Zeros => vec![0.0; ctx_len * d_token],
        };
        PromptParams::new(ctx_len, d_token, data)
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }

    pub fn d_token(&self) -> usize {
        self.d_token
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `p ← p − lr · g`.
    pub fn apply_update(&mut self, grad: &FlatGradient, lr: f64) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::DimensionMismatch {
                context: "apply_update",
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        for (p, g) in self.data.iter_mut().zip(grad.iter()) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Hex SHA-256 prefix over the little-endian bytes of every entry.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Shape of a randomly initialized encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSpec {
    pub n_classes: usize,
    pub ctx_len: usize,
    pub d_token: usize,
    pub d_embed: usize,
    pub tau: f64,
}

/// Frozen projection, class tokens and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    class_embeddings: Vec<Vec<f64>>,
    w: Mat64,
    tau: f64,
    ctx_len: usize,
}

impl FrozenTextEncoder {
    pub fn new(class_embeddings: Vec<Vec<f64>>, w: Mat64, tau: f64, ctx_len: usize) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        let first = class_embeddings
            .first()
            .ok_or(Error::Empty("class embeddings"))?;
        let d_token = first.len();
        for e in &class_embeddings {
            if e.len() != d_token {
                return Err(Error::DimensionMismatch {
                    context: "class embedding width",
                    expected: d_token,
                    got: e.len(),
                });
            }
            check_finite(e, "class embedding")?;
        }
        if w.cols() != (ctx_len + 1) * d_token {
            return Err(Error::DimensionMismatch {
                context: "projection columns",
                expected: (ctx_len + 1) * d_token,
                got: w.cols(),
            });
        }
        Ok(FrozenTextEncoder {
            class_embeddings,
            w,
            tau,
            ctx_len,
        })
    }

    /// `W ~ U(−1/√fan_in, 1/√fan_in)`, class tokens uniform on the unit
    /// sphere, all drawn from `rng` in that order.
    pub fn random(spec: EncoderSpec, rng: &mut SeededRng) -> Result<Self> {
        let fan_in = (spec.ctx_len + 1) * spec.d_token;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w_data: Vec<f64> = (0..spec.d_embed * fan_in)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let w = Mat64::new(spec.d_embed, fan_in, w_data)?;
        let class_embeddings = (0..spec.n_classes)
            .map(|_| rng.unit_vector(spec.d_token))
            .collect();
        FrozenTextEncoder::new(class_embeddings, w, spec.tau, spec.ctx_len)
    }

    pub fn n_classes(&self) -> usize {
        self.class_embeddings.len()
    }

    pub fn d_token(&self) -> usize {
        self.class_embeddings[0].len()
    }

    pub fn d_embed(&self) -> usize {
        self.w.rows()
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn projection(&self) -> &Mat64 {
        &self.w
    }

    pub fn class_embeddings(&self) -> &[Vec<f64>] {
        &self.class_embeddings
    }

    pub fn param_len(&self) -> usize {
        self.ctx_len * self.d_token()
    }

    fn check_params(&self, p: &PromptParams) -> Result<()> {
        if p.ctx_len != self.ctx_len || p.d_token != self.d_token() {
            return Err(Error::DimensionMismatch {
                context: "prompt params vs encoder",
                expected: self.param_len(),
                got: p.len(),
            });
        }
        Ok(())
    }

    /// Text directions with all-zero context; what the classifier looks like
    /// before any prompt learning.
    pub fn zero_context_features(&self) -> Result<TextFeatures> {
        let zeros = PromptParams::new(self.ctx_len, self.d_token(), vec![0.0; self.param_len()])?;
        encode_text(&zeros, self)
    }
}

/// One unit-norm text feature per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    rows: Vec<Vec<f64>>,
}

impl TextFeatures {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("text features"));
        }
        let d = rows[0].len();
        for r in &rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "text feature width",
                    expected: d,
                    got: r.len(),
                });
            }
            if (norm(r) - 1.0).abs() > 1e-9 {
                return Err(Error::Contract("text feature is not unit-norm".into()));
            }
        }
        Ok(TextFeatures { rows })
    }

    pub fn n_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.rows[n]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Forward pass that keeps what the backward pass needs.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    features: TextFeatures,
    pre_norms: Vec<f64>,
}

impl TextEncoding {
    pub fn forward(p: &PromptParams, enc: &FrozenTextEncoder) -> Result<Self> {
        enc.check_params(p)?;
        let mut x = Vec::with_capacity(enc.w.cols());
        let mut rows = Vec::with_capacity(enc.n_classes());
        let mut pre_norms = Vec::with_capacity(enc.n_classes());
        for e in &enc.class_embeddings {
            x.clear();
            x.extend_from_slice(&p.data);
            x.extend_from_slice(e);
            let z = enc.w.matvec(&x)?;
            let n = norm(&z);
            rows.push(l2_normalize(&z)?);
            pre_norms.push(n);
        }
        Ok(TextEncoding {
            features: TextFeatures { rows },
            pre_norms,
        })
    }

    pub fn features(&self) -> &TextFeatures {
        &self.features
    }

    pub fn into_features(self) -> TextFeatures {
        self.features
    }

    /// Pulls per-class gradients w.r.t. `g_n` back to the context tokens.
    ///
    /// Through the normalization: `∂L/∂z_n = (I − g_n g_nᵀ) u_n / ||z_n||`.
    /// Through the projection only the context columns of `W` are kept,
    /// since class tokens and `W` are frozen. The per-class pre-projection
    /// gradients are summed in ascending class order before the single
    /// `Wᵀ` product.
    pub fn backward(&self, enc: &FrozenTextEncoder, upstream: &[Vec<f64>]) -> Result<FlatGradient> {
        let n_classes = self.features.n_classes();
        if upstream.len() != n_classes {
            return Err(Error::DimensionMismatch {
                context: "upstream class count",
                expected: n_classes,
                got: upstream.len(),
            });
        }
        let d = self.features.dim();
        let mut dz_sum = vec![0.0; d];
        for (n, u) in upstream.iter().enumerate() {
            if u.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "upstream width",
                    expected: d,
                    got: u.len(),
                });
            }
            check_finite(u, "upstream gradient")?;
            let g = self.features.row(n);
            let radial = dot_unchecked(g, u);
            let inv = 1.0 / self.pre_norms[n];
            for ((acc, &ui), &gi) in dz_sum.iter_mut().zip(u).zip(g) {
                *acc += (ui - radial * gi) * inv;
            }
        }
        let full = enc.w.matvec_transpose(&dz_sum)?;
        FlatGradient::new(full[..enc.param_len()].to_vec())
    }
}

pub fn encode_text(p: &PromptParams, enc: &FrozenTextEncoder) -> Result<TextFeatures> {
    TextEncoding::forward(p, enc).map(TextEncoding::into_features)
}

/// Applies the transpose Jacobian of [`encode_text`] at `p` to `upstream`.
pub fn encode_text_jacobian_transpose_apply(
    enc: &FrozenTextEncoder,
    p: &PromptParams,
    upstream: &[Vec<f64>],
) -> Result<FlatGradient> {
    TextEncoding::forward(p, enc)?.backward(enc, upstream)
}

/// `sim(f, g_n) / τ` for every class.
pub fn class_logits(f: &[f64], g: &TextFeatures, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if f.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "image feature vs text feature",
            expected: g.dim(),
            got: f.len(),
        });
    }
    let nf = norm(f);
    if (nf - 1.0).abs() > FEATURE_NORM_TOL {
        return Err(Error::Contract(format!("image feature norm {nf} is not 1")));
    }
    Ok(g.rows.iter().map(|gn| dot_unchecked(f, gn) / tau).collect())
}
