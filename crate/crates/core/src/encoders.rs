//! The dual-encoder joint embedding model.
//!
//! The image tower cuts each image into non-overlapping square patches,
//! projects every patch with one shared affine map, applies `tanh`, averages
//! over patches and projects into the shared `d`-dimensional space. The text
//! tower averages token embeddings over non-pad positions and projects into
//! the same space. Both outputs are L2-normalized, so their dot product is a
//! cosine similarity; the logits multiply it by a learned temperature.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_INDEX: usize = 0;

pub const PATCH_WEIGHT: &str = "image.patch.weight";
pub const PATCH_BIAS: &str = "image.patch.bias";
pub const IMAGE_OUT: &str = "image.out.weight";
pub const TOKEN_EMBEDDING: &str = "text.embedding";
pub const TEXT_OUT: &str = "text.out.weight";
pub const LOGIT_SCALE: &str = "logit_scale";

/// `ln(1/0.07)`, the customary initial temperature.
pub fn initial_logit_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Upper clamp for the log temperature: `exp` never exceeds 100.
pub fn max_logit_scale() -> f64 {
    100f64.ln()
}

/// Lowercases and keeps alphanumerics and hyphens; everything else splits or
/// disappears.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens in first-occurrence order after the reserved unknown token.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::from([(UNK_TOKEN.to_string(), UNK_INDEX)]);
        for text in corpus {
            for tok in normalize_tokens(text.as_ref()) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok);
                }
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line; the line number is the index.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Parse {
                line: 1,
                message: format!("vocabulary must start with {UNK_TOKEN}"),
            });
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// `true` at real (non-pad) positions.
    pub mask: Vec<bool>,
}

impl TokenizedText {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Maps tokens to indices, truncates to `max_len` and pads with index 0.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedText {
    let mut ids: Vec<usize> = normalize_tokens(text)
        .iter()
        .take(max_len)
        .map(|t| vocab.lookup(t))
        .collect();
    let real = ids.len();
    ids.resize(max_len, UNK_INDEX);
    let mask = (0..max_len).map(|i| i < real).collect();
    TokenizedText { ids, mask }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 32,
            patch_size: 8,
            embed_dim: 64,
            hidden: 128,
            max_text_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image side {} must be a positive multiple of patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.hidden == 0 || self.max_text_len == 0 {
            return Err(Error::Config(
                "embedding dimension, hidden width and text length must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Image tower parameters only (shared with the vision-only baseline).
pub fn init_image_tower(store: &mut ParamStore, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    config.validate()?;
    let p = config.patch_len();
    store.insert(PATCH_WEIGHT, uniform(rng, &[p, config.hidden], p))?;
    store.insert(PATCH_BIAS, uniform(rng, &[1, config.hidden], p))?;
    store.insert(IMAGE_OUT, uniform(rng, &[config.hidden, config.embed_dim], config.hidden))?;
    Ok(())
}

/// Fresh joint-model parameters, uniform in `±1/√fan_in` from `seed`.
pub fn init_joint_params(config: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_image_tower(&mut store, config, &mut rng)?;
    // One-hot inputs: fan-in of the embedding table is 1.
    store.insert(TOKEN_EMBEDDING, uniform(&mut rng, &[vocab_size, config.hidden], 1))?;
    store.insert(TEXT_OUT, uniform(&mut rng, &[config.hidden, config.embed_dim], config.hidden))?;
    store.insert(LOGIT_SCALE, Tensor::scalar(initial_logit_scale()))?;
    Ok(store)
}

/// Keeps `exp(logit_scale)` within `(0, 100]`.
pub fn clamp_logit_scale(store: &mut ParamStore) -> Result<()> {
    let v = store.value_mut(LOGIT_SCALE)?;
    let s = &mut v.data_mut()[0];
    *s = s.min(max_logit_scale());
    Ok(())
}

/// Rearranges `[N×side×side]` images into `[(N·P) × patch²]` rows, patches
/// in row-major order within each image.
pub fn patchify(images: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    let shape = images.shape();
    let side = config.image_side;
    if shape.len() != 3 || shape[1] != side || shape[2] != side {
        return Err(Error::Dimension(format!(
            "expected images of shape [N×{side}×{side}], got {shape:?}"
        )));
    }
    let n = shape[0];
    let ps = config.patch_size;
    let per_side = side / ps;
    let mut out = Vec::with_capacity(images.len());
    let data = images.data();
    for img in 0..n {
        let base = img * side * side;
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..ps {
                    let start = base + (py * ps + y) * side + px * ps;
                    out.extend_from_slice(&data[start..start + ps]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![n * config.patches_per_image(), config.patch_len()],
        out,
    ))
}

/// Parameter handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ImageTowerVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub out_weight: Var,
}

impl ImageTowerVars {
    pub fn register(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(ImageTowerVars {
            patch_weight: g.param(store, PATCH_WEIGHT)?,
            patch_bias: g.param(store, PATCH_BIAS)?,
            out_weight: g.param(store, IMAGE_OUT)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub image: ImageTowerVars,
    pub token_embedding: Var,
    pub text_out: Var,
    pub logit_scale: Var,
}

impl JointVars {
    pub fn register(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(JointVars {
            image: ImageTowerVars::register(g, store)?,
            token_embedding: g.param(store, TOKEN_EMBEDDING)?,
            text_out: g.param(store, TEXT_OUT)?,
            logit_scale: g.param(store, LOGIT_SCALE)?,
        })
    }
}

/// Un-normalized image features `[N×d]`.
pub fn image_features(g: &mut Graph, vars: &ImageTowerVars, images: &Tensor, config: &EncoderConfig) -> Result<Var> {
    let patches = g.constant(patchify(images, config)?);
    let h = g.matmul(patches, vars.patch_weight)?;
    let h = g.add_row(h, vars.patch_bias)?;
    let h = g.tanh(h);
    let pooled = g.group_mean_rows(h, config.patches_per_image())?;
    g.matmul(pooled, vars.out_weight)
}

/// Unit-norm image embeddings `[N×d]`.
pub fn encode_images(g: &mut Graph, vars: &JointVars, images: &Tensor, config: &EncoderConfig) -> Result<Var> {
    let f = image_features(g, &vars.image, images, config)?;
    g.normalize_rows(f)
}

/// `[M×V]` averaging matrix: row `i` holds `1/len` at each real token of text `i`.
fn pooling_matrix(texts: &[TokenizedText], vocab_size: usize) -> Result<Tensor> {
    let mut data = vec![0.0; texts.len() * vocab_size];
    for (i, t) in texts.iter().enumerate() {
        let real = t.real_len();
        if real == 0 {
            continue;
        }
        let w = 1.0 / real as f64;
        for (&id, &m) in t.ids.iter().zip(&t.mask) {
            if m {
                if id >= vocab_size {
                    return Err(Error::Index(format!(
                        "token index {id} outside vocabulary of {vocab_size}"
                    )));
                }
                data[i * vocab_size + id] += w;
            }
        }
    }
    Tensor::new(vec![texts.len(), vocab_size], data)
}

/// Unit-norm text embeddings `[M×d]`; all-pad texts embed to zeros.
pub fn encode_texts(g: &mut Graph, vars: &JointVars, texts: &[TokenizedText]) -> Result<Var> {
    if texts.is_empty() {
        return Err(Error::Contract("no texts to encode".into()));
    }
    let vocab_size = g.value(vars.token_embedding).shape()[0];
    let pool = g.constant(pooling_matrix(texts, vocab_size)?);
    let pooled = g.matmul(pool, vars.token_embedding)?;
    let projected = g.matmul(pooled, vars.text_out)?;
    g.normalize_rows(projected)
}

/// `exp(logit_scale) · image_emb · text_embᵀ`.
pub fn similarity_logits(g: &mut Graph, image_emb: Var, text_emb: Var, logit_scale: Var) -> Result<Var> {
    let (di, dt) = (g.value(image_emb).dims2().1, g.value(text_emb).dims2().1);
    if di != dt {
        return Err(Error::Dimension(format!(
            "image embeddings have d={di}, text embeddings d={dt}"
        )));
    }
    let tt = g.transpose(text_emb)?;
    let cos = g.matmul(image_emb, tt)?;
    g.scale_by_exp(cos, logit_scale)
}

/// Plain-tensor version of [`similarity_logits`].
pub fn similarity_matrix(image_emb: &Tensor, text_emb: &Tensor, logit_scale: f64) -> Result<Tensor> {
    let cos = tensor::matmul(image_emb, &tensor::transpose(text_emb)?)?;
    let factor = logit_scale.exp();
    Ok(cos.map(|v| v * factor))
}

/// Inference-side view of a trained joint model.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
}

impl JointModel {
    pub fn new(config: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        Ok(JointModel { config, vocab })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        init_joint_params(&self.config, self.vocab.len(), seed)
    }

    pub fn tokenize_all<S: AsRef<str>>(&self, texts: &[S]) -> Vec<TokenizedText> {
        texts
            .iter()
            .map(|t| tokenize(t.as_ref(), &self.vocab, self.config.max_text_len))
            .collect()
    }

    pub fn embed_images(&self, params: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = JointVars::register(&mut g, params)?;
        let e = encode_images(&mut g, &vars, images, &self.config)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_texts<S: AsRef<str>>(&self, params: &ParamStore, texts: &[S]) -> Result<Tensor> {
        let tokens = self.tokenize_all(texts);
        let mut g = Graph::new();
        let vars = JointVars::register(&mut g, params)?;
        let e = encode_texts(&mut g, &vars, &tokens)?;
        Ok(g.value(e).clone())
    }

    pub fn logit_scale(params: &ParamStore) -> Result<f64> {
        Ok(params.get(LOGIT_SCALE)?.data()[0])
    }
}
