//! Causal transformer LM shared by the task solver and the CVAE decoder, plus
//! the CVAE heads: attention-average pooling, prior and recognition MLPs,
//! reparameterization and latent injection.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {len} tokens exceeds context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: {msg}")]
    Param { name: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub z_dim: usize,
    /// Hidden width of the prior and recognition MLPs.
    pub latent_hidden: usize,
    /// Inject `z` at every position instead of `[BOS]` and the prefix only.
    pub inject_all_positions: bool,
    /// Reuse the token embedding as the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            context_len: 128,
            vocab_size: 0,
            z_dim: 16,
            latent_hidden: 32,
            inject_all_positions: false,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// Reference-scale latent sizes (z 128, MLP width 128).
    pub fn paper_latent(self) -> Self {
        Self {
            z_dim: 128,
            latent_hidden: 128,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.z_dim == 0 || self.latent_hidden == 0 {
            return bad("z_dim and latent_hidden must be positive");
        }
        if self.vocab_size <= crate::data::RESERVED.len() {
            return bad("vocab_size must exceed the reserved tokens");
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2");
        }
        Ok(())
    }
}

/// Diagonal Gaussian over `z`, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag<S> {
    pub mu: Vec<S>,
    pub logvar: Vec<S>,
}

impl<S: Scalar> GaussianDiag<S> {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![S::zero(); dim],
            logvar: vec![S::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + exp(logvar / 2) ⊙ eps`.
    pub fn sample_with(&self, eps: &[S]) -> Vec<S> {
        let half = S::lit(0.5);
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect()
    }

    pub fn log_density(&self, z: &[S]) -> S {
        let ln2pi = S::lit((2.0 * std::f64::consts::PI).ln());
        let half = S::lit(0.5);
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(z)
            .map(|((&m, &lv), &x)| -half * (ln2pi + lv + (x - m) * (x - m) / lv.exp()))
            .sum()
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gauss<S: Scalar>(q: &GaussianDiag<S>, p: &GaussianDiag<S>) -> S {
    assert_eq!(q.dim(), p.dim(), "latent dimensions differ");
    let half = S::lit(0.5);
    (0..q.dim())
        .map(|d| {
            let (mq, lq, mp, lp) = (q.mu[d], q.logvar[d], p.mu[d], p.logvar[d]);
            half * (lp - lq + (lq.exp() + (mq - mp) * (mq - mp)) / lp.exp() - S::one())
        })
        .sum()
}

/// Diagonal Gaussian recorded on a graph (`1 × z_dim` rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> GaussianDiag<S> {
        GaussianDiag {
            mu: g.value(self.mu).to_vec(),
            logvar: g.value(self.logvar).to_vec(),
        }
    }
}

/// `z = mu + exp(0.5 · logvar) ⊙ eps`, differentiable in `mu` and `logvar`.
pub fn reparameterize<S: Scalar>(g: &mut Graph<S>, dist: GaussianVars, eps: &[S]) -> Result<Var> {
    let e = g.row_leaf(eps.to_vec());
    let half = g.scale(dist.logvar, S::lit(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, e)?;
    Ok(g.add(dist.mu, noise)?)
}

/// Taped closed-form `KL(q ‖ p)`, a `1 × 1` node.
pub fn kl_diag_gauss_var<S: Scalar>(g: &mut Graph<S>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let dlv = g.sub(p.logvar, q.logvar)?;
    let var_q = g.exp(q.logvar);
    let dmu = g.sub(q.mu, p.mu)?;
    let dmu2 = g.mul(dmu, dmu)?;
    let num = g.add(var_q, dmu2)?;
    let neg_lp = g.scale(p.logvar, -S::one());
    let inv_var_p = g.exp(neg_lp);
    let ratio = g.mul(num, inv_var_p)?;
    let inner = g.add(dlv, ratio)?;
    let shifted = g.add_scalar(inner, -S::one());
    let total = g.sum(shifted);
    Ok(g.scale(total, S::lit(0.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolQuery {
    /// Pools the prompt prefix; feeds the prior network.
    Prefix,
    /// Pools prefix ⊕ x; feeds the recognition network.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentNet {
    Prior,
    Recognition,
}

/// Where a latent vector is added to the input embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub z: Var,
    /// Positions receiving `W_z z`; usually `[BOS]` plus the prefix span.
    pub rows: Range<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// Final-layer hidden states, `len × d_model`.
    pub hidden: Var,
    /// `len × vocab_size`.
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc1: ParamId,
    b_fc1: ParamId,
    w_fc2: ParamId,
    b_fc2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_head: Option<ParamId>,
    z_proj: ParamId,
    pool_prefix: ParamId,
    pool_full: ParamId,
    prior: MlpIds,
    recognition: MlpIds,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Expected parameter names and shapes, in registration order.
fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d], false),
        ("pos_emb".to_string(), vec![c.context_len, d], false),
    ];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        out.extend([
            (p("ln1_g"), vec![d], false),
            (p("ln1_b"), vec![d], false),
            (p("w_qkv"), vec![d, 3 * d], false),
            (p("b_qkv"), vec![3 * d], false),
            (p("w_o"), vec![d, d], false),
            (p("b_o"), vec![d], false),
            (p("ln2_g"), vec![d], false),
            (p("ln2_b"), vec![d], false),
            (p("w_fc1"), vec![d, f], false),
            (p("b_fc1"), vec![f], false),
            (p("w_fc2"), vec![f, d], false),
            (p("b_fc2"), vec![d], false),
        ]);
    }
    out.extend([
        ("lnf_g".to_string(), vec![d], false),
        ("lnf_b".to_string(), vec![d], false),
    ]);
    if !c.tie_embeddings {
        out.push(("lm_head".to_string(), vec![d, c.vocab_size], false));
    }
    out.extend([
        ("z_proj".to_string(), vec![c.z_dim, d], false),
        ("pool_prefix".to_string(), vec![d], false),
        ("pool_full".to_string(), vec![d], false),
    ]);
    for net in ["prior", "recognition"] {
        out.extend([
            (format!("{net}.w1"), vec![d, c.latent_hidden], false),
            (format!("{net}.b1"), vec![c.latent_hidden], false),
            (format!("{net}.w2"), vec![c.latent_hidden, 2 * c.z_dim], true),
            (format!("{net}.b2"), vec![2 * c.z_dim], true),
        ]);
    }
    out
}

fn init_kind(name: &str, zero_out: bool) -> Init {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if zero_out || leaf.starts_with('b') || leaf.ends_with("_b") {
        Init::Zeros
    } else if leaf.ends_with("_g") {
        Init::Ones
    } else {
        Init::Normal
    }
}

/// Solver/decoder transformer and CVAE heads over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    ids: ParamIds,
}

impl<S: Scalar> Model<S> {
    /// Fresh weights: N(0, 0.02) matrices, zero biases, unit layer-norm gains,
    /// zeroed latent output layers (so prior and posterior start at N(0, I)).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape, zero_out) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match init_kind(&name, zero_out) {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Normal => (0..n).map(|_| S::lit(normal.sample(&mut rng))).collect(),
            };
            store.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_params(config, store)
    }

    /// Wraps an existing store, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            let id = params.id(name).ok_or_else(|| ModelError::Param {
                name: name.clone(),
                msg: "missing".into(),
            })?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(ModelError::Param {
                    name: name.clone(),
                    msg: format!("shape {:?}, expected {:?}", params.get(id).shape(), shape),
                });
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |n: &str| id(&format!("layer{l}.{n}"));
                LayerIds {
                    ln1_g: p("ln1_g"),
                    ln1_b: p("ln1_b"),
                    w_qkv: p("w_qkv"),
                    b_qkv: p("b_qkv"),
                    w_o: p("w_o"),
                    b_o: p("b_o"),
                    ln2_g: p("ln2_g"),
                    ln2_b: p("ln2_b"),
                    w_fc1: p("w_fc1"),
                    b_fc1: p("b_fc1"),
                    w_fc2: p("w_fc2"),
                    b_fc2: p("b_fc2"),
                }
            })
            .collect();
        let mlp = |net: &str| MlpIds {
            w1: id(&format!("{net}.w1")),
            b1: id(&format!("{net}.b1")),
            w2: id(&format!("{net}.w2")),
            b2: id(&format!("{net}.b2")),
        };
        let ids = ParamIds {
            tok_emb: id("tok_emb"),
            pos_emb: id("pos_emb"),
            layers,
            lnf_g: id("lnf_g"),
            lnf_b: id("lnf_b"),
            lm_head: (!config.tie_embeddings).then(|| id("lm_head")),
            z_proj: id("z_proj"),
            pool_prefix: id("pool_prefix"),
            pool_full: id("pool_full"),
            prior: mlp("prior"),
            recognition: mlp("recognition"),
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<S> {
        self.params
    }

    /// SHA-256 over parameter names and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rows `[BOS]` + prefix (or all rows) that receive the latent.
    pub fn injection_rows(&self, prefix_end: usize, len: usize) -> Range<usize> {
        if self.config.inject_all_positions {
            0..len
        } else {
            0..prefix_end.min(len)
        }
    }

    /// Causal LM forward. With `inject`, `W_z z` is added to the summed word
    /// and position embeddings of `inject.rows` before the first layer.
    pub fn lm_forward(&self, g: &mut Graph<S>, ids: &[usize], inject: Option<&Injection>) -> Result<LmOutput> {
        let c = &self.config;
        let len = ids.len();
        if len == 0 {
            return Err(ModelError::Empty("token sequence"));
        }
        if len > c.context_len {
            return Err(ModelError::TooLong {
                len,
                max: c.context_len,
            });
        }
        let p = &self.params;
        let tok = g.param(p, self.ids.tok_emb);
        let pos_table = g.param(p, self.ids.pos_emb);
        let we = g.embedding(tok, ids)?;
        let positions: Vec<usize> = (0..len).collect();
        let pe = g.embedding(pos_table, &positions)?;
        let mut x = g.add(we, pe)?;

        if let Some(inj) = inject {
            let wz = g.param(p, self.ids.z_proj);
            let zp = g.matmul(inj.z, wz)?;
            let mask: Vec<S> = (0..len)
                .map(|i| if inj.rows.contains(&i) { S::one() } else { S::zero() })
                .collect();
            let m = g.leaf(len, 1, mask)?;
            let spread = g.matmul(m, zp)?;
            x = g.add(x, spread)?;
        }

        for layer in &self.ids.layers {
            x = self.block(g, x, layer)?;
        }
        let gf = g.param(p, self.ids.lnf_g);
        let bf = g.param(p, self.ids.lnf_b);
        let hidden = g.layer_norm(x, gf, bf)?;
        let head = match self.ids.lm_head {
            Some(h) => g.param(p, h),
            None => g.transpose(tok),
        };
        let logits = g.matmul(hidden, head)?;
        Ok(LmOutput { hidden, logits })
    }

    fn block(&self, g: &mut Graph<S>, x: Var, l: &LayerIds) -> Result<Var> {
        let c = &self.config;
        let p = &self.params;
        let (len, d) = g.dims(x);
        let dh = d / c.n_heads;

        let g1 = g.param(p, l.ln1_g);
        let b1 = g.param(p, l.ln1_b);
        let h = g.layer_norm(x, g1, b1)?;
        let wqkv = g.param(p, l.w_qkv);
        let bqkv = g.param(p, l.b_qkv);
        let qkv = g.matmul(h, wqkv)?;
        let qkv = g.add(qkv, bqkv)?;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut heads = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let q = g.slice_cols(qkv, head * dh, (head + 1) * dh)?;
            let k = g.slice_cols(qkv, d + head * dh, d + (head + 1) * dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh)?;
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let masked = g.causal_mask(scores);
            let attn = g.softmax(masked);
            heads.push(g.matmul(attn, v)?);
        }
        debug_assert_eq!(g.dims(heads[0]).0, len);
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let wo = g.param(p, l.w_o);
        let bo = g.param(p, l.b_o);
        let o = g.matmul(cat, wo)?;
        let o = g.add(o, bo)?;
        let x = g.add(x, o)?;

        let g2 = g.param(p, l.ln2_g);
        let b2 = g.param(p, l.ln2_b);
        let h2 = g.layer_norm(x, g2, b2)?;
        let w1 = g.param(p, l.w_fc1);
        let bf1 = g.param(p, l.b_fc1);
        let w2 = g.param(p, l.w_fc2);
        let bf2 = g.param(p, l.b_fc2);
        let f = g.matmul(h2, w1)?;
        let f = g.add(f, bf1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add(f, bf2)?;
        Ok(g.add(x, f)?)
    }

    /// Single learned-query dot-product attention over `span` rows of
    /// `hidden`: `Σ softmax(q·h_i / √d) h_i`.
    pub fn attention_average_pool(
        &self,
        g: &mut Graph<S>,
        hidden: Var,
        span: Range<usize>,
        query: PoolQuery,
    ) -> Result<Var> {
        if span.is_empty() {
            return Err(ModelError::Empty("pooling span"));
        }
        let q_id = match query {
            PoolQuery::Prefix => self.ids.pool_prefix,
            PoolQuery::Full => self.ids.pool_full,
        };
        let h = g.slice_rows(hidden, span.start, span.end)?;
        let q = g.param(&self.params, q_id);
        let qt = g.transpose(q);
        let scores = g.matmul(h, qt)?;
        let d = S::from_usize_lossy(self.config.d_model);
        let scores = g.scale(scores, S::one() / d.sqrt());
        let row = g.transpose(scores);
        let w = g.softmax(row);
        Ok(g.matmul(w, h)?)
    }

    /// `p_φ(z|t)` or `q_ψ(z|x,t)`: tanh MLP, output split into mean and
    /// clamped log-variance.
    pub fn latent_forward(&self, g: &mut Graph<S>, pooled: Var, net: LatentNet) -> Result<GaussianVars> {
        let ids = match net {
            LatentNet::Prior => &self.ids.prior,
            LatentNet::Recognition => &self.ids.recognition,
        };
        let p = &self.params;
        let z = self.config.z_dim;
        let w1 = g.param(p, ids.w1);
        let b1 = g.param(p, ids.b1);
        let w2 = g.param(p, ids.w2);
        let b2 = g.param(p, ids.b2);
        let h = g.matmul(pooled, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        let o = g.add(o, b2)?;
        let mu = g.slice_cols(o, 0, z)?;
        let raw = g.slice_cols(o, z, 2 * z)?;
        let logvar = g.clamp(raw, S::lit(LOGVAR_MIN), S::lit(LOGVAR_MAX));
        Ok(GaussianVars { mu, logvar })
    }

    pub fn prior_forward(&self, g: &mut Graph<S>, pooled_prefix: Var) -> Result<GaussianVars> {
        self.latent_forward(g, pooled_prefix, LatentNet::Prior)
    }

    pub fn recognition_forward(&self, g: &mut Graph<S>, pooled_full: Var) -> Result<GaussianVars> {
        self.latent_forward(g, pooled_full, LatentNet::Recognition)
    }

    /// Prior over `z` for a `[BOS] ⊕ prefix` sequence.
    pub fn prior_for_prefix(&self, g: &mut Graph<S>, head: &[usize]) -> Result<GaussianVars> {
        let out = self.lm_forward(g, head, None)?;
        let pooled = self.attention_average_pool(g, out.hidden, 1..head.len(), PoolQuery::Prefix)?;
        self.prior_forward(g, pooled)
    }

    /// Draws `eps ~ N(0, I)` of the latent size.
    pub fn sample_eps<R: Rng>(&self, rng: &mut R) -> Vec<S> {
        let n = rand_distr::StandardNormal;
        (0..self.config.z_dim)
            .map(|_| {
                let v: f64 = n.sample(rng);
                S::lit(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            context_len: 16,
            vocab_size: 12,
            z_dim: 3,
            latent_hidden: 5,
            inject_all_positions: false,
            tie_embeddings: false,
        }
    }

    #[test]
    fn tied_head_drops_lm_head() {
        let untied = Model::<f32>::new(tiny(), 1).unwrap();
        let tied = Model::<f32>::new(ModelConfig { tie_embeddings: true, ..tiny() }, 1).unwrap();
        assert!(untied.params().id("lm_head").is_some());
        assert!(tied.params().id("lm_head").is_none());
        let mut g = Graph::new();
        let out = tied.lm_forward(&mut g, &[1, 4, 5], None).unwrap();
        assert_eq!(g.dims(out.logits), (3, 12));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            d_model: 9,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ModelConfig { z_dim: 0, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
        assert_eq!(ModelConfig::default().paper_latent().z_dim, 128);
    }

    #[test]
    fn logits_shape_and_overlong_input() {
        let m = Model::<f32>::new(tiny(), 1).unwrap();
        let mut g = Graph::new();
        let out = m.lm_forward(&mut g, &[1, 5, 6, 7], None).unwrap();
        assert_eq!(g.dims(out.logits), (4, 12));
        let long = vec![4; 17];
        assert!(matches!(
            m.lm_forward(&mut Graph::new(), &long, None),
            Err(ModelError::TooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn causal_logits() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let a = [1, 4, 5, 6, 7, 8];
        let mut b = a;
        b[3] = 11;
        let mut ga = Graph::new();
        let mut gb = Graph::new();
        let la = m.lm_forward(&mut ga, &a, None).unwrap().logits;
        let lb = m.lm_forward(&mut gb, &b, None).unwrap().logits;
        let v = 12;
        assert_eq!(ga.value(la)[..3 * v], gb.value(lb)[..3 * v]);
        assert_ne!(ga.value(la)[3 * v..4 * v], gb.value(lb)[3 * v..4 * v]);
    }

    #[test]
    fn zero_latent_injection_is_identity() {
        let m = Model::<f32>::new(tiny(), 5).unwrap();
        let ids = [1, 4, 5, 6];
        let mut g = Graph::new();
        let plain = m.lm_forward(&mut g, &ids, None).unwrap().logits;
        let z = g.row_leaf(vec![0.0; 3]);
        let inj = Injection { z, rows: 0..2 };
        let with = m.lm_forward(&mut g, &ids, Some(&inj)).unwrap().logits;
        assert_eq!(g.value(plain), g.value(with));
    }

    #[test]
    fn injection_only_touches_prefix_rows_at_input() {
        let m = Model::<f64>::new(tiny(), 5).unwrap();
        assert_eq!(m.injection_rows(3, 6), 0..3);
        let all = Model::<f64>::new(
            ModelConfig {
                inject_all_positions: true,
                ..tiny()
            },
            5,
        )
        .unwrap();
        assert_eq!(all.injection_rows(3, 6), 0..6);
    }

    #[test]
    fn pool_of_identical_rows() {
        let m = Model::<f64>::new(tiny(), 2).unwrap();
        let mut g = Graph::new();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend(&row);
        }
        let h = g.leaf(4, 8, data).unwrap();
        let pooled = m.attention_average_pool(&mut g, h, 0..4, PoolQuery::Full).unwrap();
        for (a, b) in g.value(pooled).iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = m.attention_average_pool(&mut g, h, 2..3, PoolQuery::Prefix).unwrap();
        assert_eq!(g.value(single), row.as_slice());
        assert!(matches!(
            m.attention_average_pool(&mut g, h, 2..2, PoolQuery::Prefix),
            Err(ModelError::Empty(_))
        ));
    }

    #[test]
    fn fresh_latent_nets_are_standard_normal() {
        let m = Model::<f32>::new(tiny(), 9).unwrap();
        let mut g = Graph::new();
        let zero = g.row_leaf(vec![0.0; 8]);
        let prior = m.prior_forward(&mut g, zero).unwrap().values(&g);
        assert_eq!(prior, GaussianDiag::standard(3));
        let other = g.row_leaf(vec![0.7; 8]);
        let post = m.recognition_forward(&mut g, other).unwrap().values(&g);
        assert_eq!(post.dim(), 3);
        assert_eq!(post, GaussianDiag::standard(3));
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::<f64>::new();
        let mu = g.row_leaf(vec![0.5, -1.0]);
        let logvar = g.row_leaf(vec![0.0, 0.0]);
        let d = GaussianVars { mu, logvar };
        let z0 = reparameterize(&mut g, d, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(z0), &[0.5, -1.0]);
        let z1 = reparameterize(&mut g, d, &[1.0, 2.0]).unwrap();
        assert_eq!(g.value(z1), &[1.5, 1.0]);
    }

    #[test]
    fn kl_hand_values() {
        let p = GaussianDiag::<f64>::standard(1);
        let q = GaussianDiag {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(kl_diag_gauss(&q, &p), 0.5);
        assert_eq!(kl_diag_gauss(&p, &p), 0.0);
        let mut g = Graph::<f64>::new();
        let qv = GaussianVars {
            mu: g.row_leaf(vec![1.0]),
            logvar: g.row_leaf(vec![0.0]),
        };
        let pv = GaussianVars {
            mu: g.row_leaf(vec![0.0]),
            logvar: g.row_leaf(vec![0.0]),
        };
        let k = kl_diag_gauss_var(&mut g, qv, pv).unwrap();
        assert_eq!(g.scalar_value(k), 0.5);
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let m = Model::<f32>::new(tiny(), 1).unwrap();
        let mut n = m.clone();
        assert_eq!(m.fingerprint(), n.fingerprint());
        n.params_mut().iter_mut().next().unwrap().data_mut()[0] += 1.0;
        assert_ne!(m.fingerprint(), n.fingerprint());
    }

    #[test]
    fn from_params_rejects_wrong_config() {
        let m = Model::<f32>::new(tiny(), 1).unwrap();
        let err = Model::from_params(ModelConfig { d_ff: 32, ..tiny() }, m.params().clone());
        assert!(matches!(err, Err(ModelError::Param { .. })));
    }
}
