//! Toy MoE decoder: configuration, seeded weights, and the single-process
//! reference forward pass that every distributed mode is checked against.
//!
//! A decoder layer is `h = x + attention(x)`, then the router picks `top_k`
//! experts for `h`, and the layer output is `h + sum_j gate_j * expert_j(h)`.
//! Experts are gated FFNs: `w2(silu(x w1) * (x v1))`.

pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{hadamard, matvec, silu, softmax, sum_in_order, top_k, Matrix, Vector};

/// Dimensions of the decoder. Defaults describe the desk-scale model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_embed: usize,
    pub d_ffn: usize,
    pub d_qkv_hidden: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    /// Bytes per parameter of the deployed model (2 for BF16). Only used for
    /// sizing memory traffic; arithmetic is always f32.
    pub precision_bytes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_embed: 64,
            d_ffn: 128,
            d_qkv_hidden: 64,
            n_experts: 16,
            top_k: 4,
            vocab_size: 256,
            precision_bytes: 2,
        }
    }
}

impl ModelConfig {
    /// DBRX dimensions (132B parameters, 16 experts, 4 active).
    pub fn dbrx() -> Self {
        Self {
            n_layers: 40,
            d_embed: 6144,
            d_ffn: 10752,
            d_qkv_hidden: 8192,
            n_experts: 16,
            top_k: 4,
            vocab_size: 100_352,
            precision_bytes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_embed", self.d_embed),
            ("d_ffn", self.d_ffn),
            ("d_qkv_hidden", self.d_qkv_hidden),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("vocab_size", self.vocab_size),
            ("precision_bytes", self.precision_bytes),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "model.top_k ({}) exceeds model.n_experts ({})",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }

    /// Parameters of one expert across all layers, in bytes.
    pub fn params_per_expert_bytes(&self) -> u64 {
        (self.d_embed * self.d_ffn * 3 * self.n_layers * self.precision_bytes) as u64
    }

    /// Self-attention parameters across all layers, in bytes.
    pub fn params_sa_bytes(&self) -> u64 {
        ((self.d_qkv_hidden * self.d_embed + self.d_embed * self.d_embed)
            * self.n_layers
            * self.precision_bytes) as u64
    }

    pub fn flops_per_expert(&self) -> u64 {
        (2 * self.d_embed * self.d_ffn * 3 * self.n_layers) as u64
    }

    /// Twice the self-attention parameter bytes, as in the published table.
    pub fn flops_sa(&self) -> u64 {
        2 * self.params_sa_bytes()
    }

    /// Bytes exchanged per token by the layer-wise all-reduce.
    pub fn comm_data_bytes(&self) -> u64 {
        (self.d_embed * 4 * self.n_layers * self.precision_bytes) as u64
    }
}

/// Which of an expert's three per-layer matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExpertMatrix {
    W1 = 0,
    V1 = 1,
    W2 = 2,
}

impl ExpertMatrix {
    pub const ALL: [ExpertMatrix; 3] = [ExpertMatrix::W1, ExpertMatrix::V1, ExpertMatrix::W2];

    pub fn name(self) -> &'static str {
        match self {
            ExpertMatrix::W1 => "w1",
            ExpertMatrix::V1 => "v1",
            ExpertMatrix::W2 => "w2",
        }
    }

    pub fn from_index(i: u32) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    /// (rows, cols) for this matrix under `config`.
    pub fn shape(self, config: &ModelConfig) -> (usize, usize) {
        match self {
            ExpertMatrix::W1 | ExpertMatrix::V1 => (config.d_embed, config.d_ffn),
            ExpertMatrix::W2 => (config.d_ffn, config.d_embed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLayer {
    pub w1: Matrix,
    pub v1: Matrix,
    pub w2: Matrix,
}

impl ExpertLayer {
    pub fn matrix(&self, which: ExpertMatrix) -> &Matrix {
        match which {
            ExpertMatrix::W1 => &self.w1,
            ExpertMatrix::V1 => &self.v1,
            ExpertMatrix::W2 => &self.w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub layers: Vec<ExpertLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub router: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub lm_head: Matrix,
    pub layers: Vec<LayerWeights>,
    pub experts: Vec<ExpertWeights>,
}

const INIT_RANGE: f32 = 0.1;

// Each tensor draws from its own ChaCha stream so any subset of the model can
// be regenerated without producing the rest.
fn stream_for(kind: u64, a: u64, b: u64, c: u64) -> u64 {
    (kind << 56) | (a << 32) | (b << 8) | c
}

fn seeded_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    Matrix::new(rows, cols, data).expect("generated matrix is well formed")
}

impl ExpertWeights {
    pub fn generate(config: &ModelConfig, seed: u64, expert: usize) -> Self {
        let layers = (0..config.n_layers)
            .map(|l| {
                let m = |which: ExpertMatrix| {
                    let (r, c) = which.shape(config);
                    seeded_matrix(seed, stream_for(3, expert as u64, l as u64, which as u64), r, c)
                };
                ExpertLayer {
                    w1: m(ExpertMatrix::W1),
                    v1: m(ExpertMatrix::V1),
                    w2: m(ExpertMatrix::W2),
                }
            })
            .collect();
        Self { layers }
    }

    fn check(&self, config: &ModelConfig, layer: usize) -> Result<&ExpertLayer> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("expert has no layer {layer}")))?;
        for which in ExpertMatrix::ALL {
            let m = l.matrix(which);
            if (m.rows(), m.cols()) != which.shape(config) {
                return Err(Error::dim(format!(
                    "expert {} is {}x{}, expected {:?}",
                    which.name(),
                    m.rows(),
                    m.cols(),
                    which.shape(config)
                )));
            }
        }
        Ok(l)
    }
}

impl LayerWeights {
    fn generate(config: &ModelConfig, seed: u64, layer: usize) -> Self {
        let l = layer as u64;
        let (d, h) = (config.d_embed, config.d_qkv_hidden);
        Self {
            wq: seeded_matrix(seed, stream_for(2, l, 0, 0), d, h),
            wk: seeded_matrix(seed, stream_for(2, l, 0, 1), d, h),
            wv: seeded_matrix(seed, stream_for(2, l, 0, 2), d, h),
            wo: seeded_matrix(seed, stream_for(2, l, 0, 3), h, d),
            router: seeded_matrix(seed, stream_for(2, l, 0, 4), d, config.n_experts),
        }
    }
}

impl ModelWeights {
    /// Regenerates the whole model from `config` and `seed`.
    pub fn generate(config: ModelConfig, seed: u64) -> Result<Self> {
        let experts = (0..config.n_experts)
            .map(|e| ExpertWeights::generate(&config, seed, e))
            .collect();
        Self::generate_with_experts(config, seed, experts)
    }

    /// Non-expert weights from the seed, experts supplied by the caller (for
    /// example loaded from a weights file).
    pub fn generate_with_experts(
        config: ModelConfig,
        seed: u64,
        experts: Vec<ExpertWeights>,
    ) -> Result<Self> {
        config.validate()?;
        if experts.len() != config.n_experts {
            return Err(Error::invalid(format!(
                "{} experts supplied, config expects {}",
                experts.len(),
                config.n_experts
            )));
        }
        Ok(Self {
            config,
            embed: seeded_matrix(seed, stream_for(1, 0, 0, 0), config.vocab_size, config.d_embed),
            lm_head: seeded_matrix(seed, stream_for(1, 0, 0, 1), config.d_embed, config.vocab_size),
            layers: (0..config.n_layers)
                .map(|l| LayerWeights::generate(&config, seed, l))
                .collect(),
            experts,
        })
    }

    pub fn embed_token(&self, token: u32) -> Result<Vector> {
        self.embed.row_vector(token as usize)
    }

    pub fn logits(&self, x: &Vector) -> Result<Vector> {
        matvec(x, &self.lm_head)
    }
}

/// Per-layer cache of attention keys and values, one entry per processed token.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<Vector>>,
    values: Vec<Vec<Vector>>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }

    pub fn len(&self, layer: usize) -> usize {
        self.keys.get(layer).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.iter().all(Vec::is_empty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision {
    pub layer: usize,
    pub expert_indices: Vec<usize>,
    pub gates: Vector,
}

impl RouterDecision {
    pub fn gate_of(&self, expert: usize) -> Option<f32> {
        self.expert_indices
            .iter()
            .position(|&e| e == expert)
            .map(|i| self.gates[i])
    }
}

/// Single-head causal attention over the cache plus the residual:
/// returns `x + wo(softmax(q.K / sqrt(d)) V)` and appends this token's key and
/// value to `cache`.
pub fn attention_block(
    x: &Vector,
    weights: &LayerWeights,
    cache: &mut KvCache,
    layer: usize,
) -> Result<Vector> {
    let q = matvec(x, &weights.wq)?;
    let k = matvec(x, &weights.wk)?;
    let v = matvec(x, &weights.wv)?;
    let keys = cache
        .keys
        .get_mut(layer)
        .ok_or_else(|| Error::invalid(format!("kv cache has no layer {layer}")))?;
    keys.push(k);
    cache.values[layer].push(v);

    let scale = 1.0 / (q.len() as f32).sqrt();
    let scores = cache.keys[layer]
        .iter()
        .map(|key| q.dot(key).map(|s| s * scale))
        .collect::<Result<Vec<f32>>>()?;
    let probs = softmax(&Vector::from_raw(scores));

    let mut ctx = vec![0.0f32; q.len()];
    for (p, value) in probs.as_slice().iter().zip(&cache.values[layer]) {
        for (c, val) in ctx.iter_mut().zip(value.as_slice()) {
            *c += p * val;
        }
    }
    let out = matvec(&Vector::from_raw(ctx), &weights.wo)?;
    x.add(&out)
}

pub fn route(h: &Vector, weights: &LayerWeights, layer: usize, k: usize) -> Result<RouterDecision> {
    let logits = matvec(h, &weights.router)?;
    let (expert_indices, gates) = top_k(&logits, k)?;
    Ok(RouterDecision {
        layer,
        expert_indices,
        gates,
    })
}

pub fn expert_forward(x: &Vector, expert: &ExpertWeights, config: &ModelConfig, layer: usize) -> Result<Vector> {
    if x.len() != config.d_embed {
        return Err(Error::dim(format!(
            "expert input has length {}, d_embed is {}",
            x.len(),
            config.d_embed
        )));
    }
    let l = expert.check(config, layer)?;
    let gate = silu(&matvec(x, &l.w1)?);
    let up = matvec(x, &l.v1)?;
    matvec(&hadamard(&gate, &up)?, &l.w2)
}

/// `h + sum_j c_j`, with contributions summed in ascending expert id.
pub fn combine(h: &Vector, contributions: &mut [(usize, Vector)]) -> Result<Vector> {
    contributions.sort_by_key(|(e, _)| *e);
    match sum_in_order(contributions.iter().map(|(_, c)| c))? {
        Some(sum) => h.add(&sum),
        None => Ok(h.clone()),
    }
}

/// The MoE block with every expert in one process: `sum_j gate_j * expert_j(x)`
/// over the router's selection, summed in ascending expert id.
pub fn moe_layer_reference(
    x: &Vector,
    layer_weights: &LayerWeights,
    experts: &[ExpertWeights],
    config: &ModelConfig,
    layer: usize,
) -> Result<(RouterDecision, Vector)> {
    let decision = route(x, layer_weights, layer, config.top_k)?;
    let mut terms = Vec::with_capacity(decision.expert_indices.len());
    for (slot, &e) in decision.expert_indices.iter().enumerate() {
        let expert = experts
            .get(e)
            .ok_or_else(|| Error::invalid(format!("expert {e} not available")))?;
        terms.push(expert_forward(x, expert, config, layer)?.scale(decision.gates[slot]));
    }
    let sum = sum_in_order(terms.iter())?.expect("top_k selects at least one expert");
    Ok((decision, sum))
}

/// One full decoder layer in a single process.
pub fn decoder_layer_reference(
    x: &Vector,
    weights: &ModelWeights,
    cache: &mut KvCache,
    layer: usize,
) -> Result<Vector> {
    let lw = &weights.layers[layer];
    let h = attention_block(x, lw, cache, layer)?;
    let (_, moe) = moe_layer_reference(&h, lw, &weights.experts, &weights.config, layer)?;
    h.add(&moe)
}

/// Output of a traced reference generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrace {
    pub tokens: Vec<u32>,
    /// One row per forward pass, one checksum per layer output.
    pub layer_checksums: Vec<Vec<u64>>,
}

/// Greedy decoding: feed the prompt, then emit `n_out` argmax tokens.
pub fn generate_reference(weights: &ModelWeights, prompt: &[u32], n_out: usize) -> Result<Vec<u32>> {
    Ok(generate_reference_traced(weights, prompt, n_out)?.tokens)
}

pub fn generate_reference_traced(
    weights: &ModelWeights,
    prompt: &[u32],
    n_out: usize,
) -> Result<ReferenceTrace> {
    let mut trace = ReferenceTrace {
        tokens: Vec::with_capacity(n_out),
        layer_checksums: Vec::new(),
    };
    if n_out == 0 {
        return Ok(trace);
    }
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must contain at least one token"));
    }
    let mut cache = KvCache::new(weights.config.n_layers);
    let passes = prompt.len() + n_out - 1;
    let mut current = prompt[0];
    for pass in 0..passes {
        let mut x = weights.embed_token(current)?;
        let mut sums = Vec::with_capacity(weights.config.n_layers);
        for layer in 0..weights.config.n_layers {
            x = decoder_layer_reference(&x, weights, &mut cache, layer)?;
            sums.push(x.checksum());
        }
        trace.layer_checksums.push(sums);
        if pass + 1 < prompt.len() {
            current = prompt[pass + 1];
        } else {
            current = weights.logits(&x)?.argmax() as u32;
            trace.tokens.push(current);
        }
    }
    Ok(trace)
}

/// Deterministic pseudo-random prompt for benchmarks and tests.
pub fn prompt_from_seed(seed: u64, len: usize, vocab_size: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_for(4, 0, 0, 0));
    (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_embed: 8,
            d_ffn: 12,
            d_qkv_hidden: 6,
            n_experts: 4,
            top_k: 2,
            vocab_size: 32,
            precision_bytes: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            top_k: 5,
            n_experts: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            d_ffn: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn table_formulas_at_dbrx_scale() {
        let c = ModelConfig::dbrx();
        assert_eq!(c.params_per_expert_bytes(), 15_854_469_120);
        assert_eq!(c.params_sa_bytes(), 7_046_430_720);
        assert_eq!(c.flops_per_expert(), 15_854_469_120);
        assert_eq!(c.flops_sa(), 14_092_861_440);
        assert_eq!(c.comm_data_bytes(), 1_966_080);
    }

    #[test]
    fn zero_input_gives_zero_expert_output() {
        let c = tiny();
        let e = ExpertWeights::generate(&c, 3, 0);
        let out = expert_forward(&Vector::zeros(c.d_embed), &e, &c, 1).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_expert() {
        let c = ModelConfig {
            n_layers: 1,
            d_embed: 1,
            d_ffn: 1,
            d_qkv_hidden: 1,
            n_experts: 1,
            top_k: 1,
            vocab_size: 2,
            precision_bytes: 2,
        };
        let one = Matrix::new(1, 1, vec![1.0]).unwrap();
        let e = ExpertWeights {
            layers: vec![ExpertLayer {
                w1: one.clone(),
                v1: one.clone(),
                w2: one,
            }],
        };
        let out = expert_forward(&Vector::new(vec![1.0]).unwrap(), &e, &c, 0).unwrap();
        // silu(1) = 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((f64::from(out[0]) - expected).abs() < 1e-6);
        assert!((out[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn expert_shape_errors() {
        let c = tiny();
        let e = ExpertWeights::generate(&c, 3, 0);
        assert!(expert_forward(&Vector::zeros(3), &e, &c, 0).is_err());
        assert!(expert_forward(&Vector::zeros(c.d_embed), &e, &c, 9).is_err());
    }

    #[test]
    fn single_expert_model_matches_expert() {
        let c = ModelConfig {
            n_experts: 1,
            top_k: 1,
            ..tiny()
        };
        let w = ModelWeights::generate(c, 11).unwrap();
        let x = w.embed_token(5).unwrap();
        let (_, moe) = moe_layer_reference(&x, &w.layers[0], &w.experts, &c, 0).unwrap();
        let direct = expert_forward(&x, &w.experts[0], &c, 0).unwrap();
        assert_eq!(moe, direct);
    }

    #[test]
    fn dominant_logit_selects_single_expert() {
        let c = ModelConfig {
            top_k: 1,
            ..tiny()
        };
        let mut w = ModelWeights::generate(c, 2).unwrap();
        // Router column 2 gets a large weight on every input coordinate.
        let mut data = vec![0.0; c.d_embed * c.n_experts];
        for i in 0..c.d_embed {
            data[i * c.n_experts + 2] = 1.0;
        }
        w.layers[0].router = Matrix::new(c.d_embed, c.n_experts, data).unwrap();
        let x = Vector::new(vec![1.0; c.d_embed]).unwrap();
        let (d, moe) = moe_layer_reference(&x, &w.layers[0], &w.experts, &c, 0).unwrap();
        assert_eq!(d.expert_indices, vec![2]);
        assert_eq!(moe, expert_forward(&x, &w.experts[2], &c, 0).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let w = ModelWeights::generate(tiny(), 5).unwrap();
        let prompt = prompt_from_seed(5, 3, 32);
        assert!(generate_reference(&w, &prompt, 0).unwrap().is_empty());
        let a = generate_reference(&w, &prompt, 6).unwrap();
        let b = generate_reference(&w, &prompt, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let w2 = ModelWeights::generate(tiny(), 5).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn kv_cache_grows_per_token() {
        let w = ModelWeights::generate(tiny(), 1).unwrap();
        let mut cache = KvCache::new(2);
        assert!(cache.is_empty());
        for t in 0..3u32 {
            let x = w.embed_token(t).unwrap();
            decoder_layer_reference(&x, &w, &mut cache, 0).unwrap();
        }
        assert_eq!(cache.len(0), 3);
        assert_eq!(cache.len(1), 0);
    }
}
