//! Decoder-only transformer with per-head addressable query projections.
//!
//! Pre-layernorm blocks, learned absolute position embeddings, tanh-GELU MLP
//! of width `4 * d_model`, untied unembedding. Weight matrices are stored
//! `[in, out]`, so head `h` of layer `l` owns columns
//! `[h * d_head, (h + 1) * d_head)` of that layer's `W_q`: that column block is
//! the head's parameter slice.
//!
//! Head ablation zeroes the head's attention-weighted value output before the
//! output projection `W_o`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AttentionSpec, DiffArray, Reduction, Tape, Var};
use crate::error::{CastError, Result};
use crate::synthdata::{Sample, PAD};

pub const INIT_STD: f64 = 0.02;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            vocab_size: 64,
            max_seq_len: 16,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(CastError::config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CastError::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    /// Total head count `n_layers * n_heads`.
    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers).flat_map(move |layer| (0..self.n_heads).map(move |head| HeadId { layer, head }))
    }

    pub fn check_head(&self, h: HeadId) -> Result<()> {
        if h.layer >= self.n_layers || h.head >= self.n_heads {
            return Err(CastError::input(format!(
                "head {h} out of bounds for {} layers x {} heads",
                self.n_layers, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter tensors in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, t, f) = (self.d_model, self.vocab_size, self.max_seq_len, self.d_mlp());
        let mut specs = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![t, d]),
        ];
        for l in 0..self.n_layers {
            for lp in LayerParam::ALL {
                let shape = match lp {
                    LayerParam::Ln1Gain | LayerParam::Ln1Bias | LayerParam::Ln2Gain | LayerParam::Ln2Bias => vec![d],
                    LayerParam::Wq | LayerParam::Wk | LayerParam::Wv | LayerParam::Wo => vec![d, d],
                    LayerParam::MlpIn => vec![d, f],
                    LayerParam::MlpInBias => vec![f],
                    LayerParam::MlpOut => vec![f, d],
                    LayerParam::MlpOutBias => vec![d],
                };
                specs.push((format!("layers.{l}.{}", lp.name()), shape));
            }
        }
        specs.push(("ln_f.gain".to_string(), vec![d]));
        specs.push(("ln_f.bias".to_string(), vec![d]));
        specs.push(("unembed".to_string(), vec![d, v]));
        specs
    }

    /// Number of scalar parameters; a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    MlpIn,
    MlpInBias,
    MlpOut,
    MlpOutBias,
}

impl LayerParam {
    pub const ALL: [LayerParam; 12] = [
        LayerParam::Ln1Gain,
        LayerParam::Ln1Bias,
        LayerParam::Wq,
        LayerParam::Wk,
        LayerParam::Wv,
        LayerParam::Wo,
        LayerParam::Ln2Gain,
        LayerParam::Ln2Bias,
        LayerParam::MlpIn,
        LayerParam::MlpInBias,
        LayerParam::MlpOut,
        LayerParam::MlpOutBias,
    ];

    fn name(self) -> &'static str {
        match self {
            LayerParam::Ln1Gain => "ln1.gain",
            LayerParam::Ln1Bias => "ln1.bias",
            LayerParam::Wq => "wq",
            LayerParam::Wk => "wk",
            LayerParam::Wv => "wv",
            LayerParam::Wo => "wo",
            LayerParam::Ln2Gain => "ln2.gain",
            LayerParam::Ln2Bias => "ln2.bias",
            LayerParam::MlpIn => "mlp.in",
            LayerParam::MlpInBias => "mlp.in_bias",
            LayerParam::MlpOut => "mlp.out",
            LayerParam::MlpOutBias => "mlp.out_bias",
        }
    }

    fn is_gain(self) -> bool {
        matches!(self, LayerParam::Ln1Gain | LayerParam::Ln2Gain)
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            LayerParam::Ln1Bias | LayerParam::Ln2Bias | LayerParam::MlpInBias | LayerParam::MlpOutBias
        )
    }
}

/// Index into [`TransformerModel::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamId {
    pub const TOK_EMB: ParamId = ParamId(0);
    pub const POS_EMB: ParamId = ParamId(1);

    pub fn layer(layer: usize, p: LayerParam) -> ParamId {
        let offset = LayerParam::ALL.iter().position(|&x| x == p).expect("listed");
        ParamId(2 + layer * LayerParam::ALL.len() + offset)
    }

    pub fn final_gain(cfg: &ModelConfig) -> ParamId {
        ParamId(2 + cfg.n_layers * LayerParam::ALL.len())
    }

    pub fn final_bias(cfg: &ModelConfig) -> ParamId {
        ParamId(3 + cfg.n_layers * LayerParam::ALL.len())
    }

    pub fn unembed(cfg: &ModelConfig) -> ParamId {
        ParamId(4 + cfg.n_layers * LayerParam::ALL.len())
    }
}

/// One attention head: `layer` in `[0, n_layers)`, `head` in `[0, n_heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Heads whose attention output is zeroed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeadMask(BTreeSet<HeadId>);

impl HeadMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(h: HeadId) -> Self {
        Self(BTreeSet::from([h]))
    }

    pub fn all(cfg: &ModelConfig) -> Self {
        Self(cfg.heads().collect())
    }

    pub fn from_heads(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self(heads.into_iter().collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, h: HeadId) -> bool {
        self.0.contains(&h)
    }

    fn layer_flags(&self, layer: usize, n_heads: usize) -> Vec<bool> {
        (0..n_heads).map(|head| self.contains(HeadId { layer, head })).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Right-padded token batch. Causal attention means padding never influences
/// real positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new<P: AsRef<[usize]>>(prompts: &[P], cfg: &ModelConfig) -> Result<Self> {
        if prompts.is_empty() {
            return Err(CastError::input("empty batch"));
        }
        let lengths: Vec<usize> = prompts.iter().map(|p| p.as_ref().len()).collect();
        let seq = *lengths.iter().max().expect("nonempty");
        if lengths.contains(&0) {
            return Err(CastError::input("empty prompt in batch"));
        }
        if seq > cfg.max_seq_len {
            return Err(CastError::input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let mut tokens = Vec::with_capacity(prompts.len() * seq);
        for p in prompts {
            let p = p.as_ref();
            if let Some(&bad) = p.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(CastError::input(format!(
                    "token id {bad} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
            tokens.extend_from_slice(p);
            tokens.extend(std::iter::repeat(PAD).take(seq - p.len()));
        }
        let positions = (0..prompts.len()).flat_map(|_| 0..seq).collect();
        Ok(Self {
            tokens,
            positions,
            batch: prompts.len(),
            seq,
            lengths,
        })
    }

    /// Flat row index of each prompt's final position.
    pub fn last_rows(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * self.seq + len - 1)
            .collect()
    }
}

/// Model parameters bound as leaves on a tape. Callers may replace individual
/// entries (e.g. `W_q` with an adapter-augmented node) before the forward.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl TransformerModel {
    /// Seeded normal(0, 0.02) weights; layernorm gains 1, all biases 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n_layer_params = LayerParam::ALL.len();
        let params = config
            .param_specs()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n = shape.iter().product();
                let kind = (2..2 + config.n_layers * n_layer_params)
                    .contains(&i)
                    .then(|| LayerParam::ALL[(i - 2) % n_layer_params]);
                let is_gain = kind.map_or(name == "ln_f.gain", LayerParam::is_gain);
                let is_bias = kind.map_or(name == "ln_f.bias", LayerParam::is_bias);
                let data = if is_gain {
                    vec![1.0; n]
                } else if is_bias {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn wq(&self, layer: usize) -> &Tensor {
        self.param(ParamId::layer(layer, LayerParam::Wq))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    /// Binds every parameter as a tape leaf; `requires_grad` selects which
    /// leaves track gradients.
    pub fn bind(&self, tape: &mut Tape, requires_grad: impl Fn(ParamId) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let arr = DiffArray::computed(t.shape.clone(), t.data.clone()).expect("valid tensor");
                tape.leaf(arr, requires_grad(ParamId(i)))
            })
            .collect();
        BoundParams { vars }
    }

    /// Records the forward pass; returns logits `[batch * seq, vocab]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &BoundParams, batch: &Batch, mask: &HeadMask) -> Result<Var> {
        let cfg = &self.config;
        let tok = tape.embed_lookup(p.get(ParamId::TOK_EMB), &batch.tokens)?;
        let pos = tape.embed_lookup(p.get(ParamId::POS_EMB), &batch.positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..cfg.n_layers {
            let w = |lp| p.get(ParamId::layer(l, lp));
            let h = tape.layer_norm(x, w(LayerParam::Ln1Gain), w(LayerParam::Ln1Bias))?;
            let q = tape.matmul(h, w(LayerParam::Wq))?;
            let k = tape.matmul(h, w(LayerParam::Wk))?;
            let v = tape.matmul(h, w(LayerParam::Wv))?;
            let spec = AttentionSpec {
                batch: batch.batch,
                seq: batch.seq,
                n_heads: cfg.n_heads,
                masked: mask.layer_flags(l, cfg.n_heads),
            };
            let a = tape.causal_attention(q, k, v, spec)?;
            let o = tape.matmul(a, w(LayerParam::Wo))?;
            x = tape.add(x, o)?;
            x = self.mlp_block(tape, p, l, x)?;
        }
        self.head_out(tape, p, x)
    }

    fn mlp_block(&self, tape: &mut Tape, p: &BoundParams, l: usize, x: Var) -> Result<Var> {
        let w = |lp| p.get(ParamId::layer(l, lp));
        let h = tape.layer_norm(x, w(LayerParam::Ln2Gain), w(LayerParam::Ln2Bias))?;
        let m = tape.matmul(h, w(LayerParam::MlpIn))?;
        let m = tape.add_bias(m, w(LayerParam::MlpInBias))?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, w(LayerParam::MlpOut))?;
        let m = tape.add_bias(m, w(LayerParam::MlpOutBias))?;
        tape.add(x, m)
    }

    fn head_out(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let x = tape.layer_norm(x, p.get(ParamId::final_gain(cfg)), p.get(ParamId::final_bias(cfg)))?;
        tape.matmul(x, p.get(ParamId::unembed(cfg)))
    }

    /// The same network with every attention sublayer removed (embeddings,
    /// MLP blocks and residual stream only).
    pub fn forward_attention_free(&self, prompts: &[Vec<usize>]) -> Result<DiffArray> {
        let batch = Batch::new(prompts, &self.config)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let tok = tape.embed_lookup(p.get(ParamId::TOK_EMB), &batch.tokens)?;
        let pos = tape.embed_lookup(p.get(ParamId::POS_EMB), &batch.positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..self.config.n_layers {
            x = self.mlp_block(&mut tape, &p, l, x)?;
        }
        let logits = self.head_out(&mut tape, &p, x)?;
        self.shape_logits(&tape, logits, &batch)
    }

    fn shape_logits(&self, tape: &Tape, logits: Var, batch: &Batch) -> Result<DiffArray> {
        DiffArray::new(
            vec![batch.batch, batch.seq, self.config.vocab_size],
            tape.value(logits).to_vec(),
        )
    }

    /// Logits `[batch, seq, vocab]` for right-padded prompts.
    pub fn forward<P: AsRef<[usize]>>(&self, prompts: &[P], mask: &HeadMask) -> Result<DiffArray> {
        let batch = Batch::new(prompts, &self.config)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let logits = self.forward_on_tape(&mut tape, &p, &batch, mask)?;
        self.shape_logits(&tape, logits, &batch)
    }

    /// Sum-reduced cross-entropy of each sample's target at its answer
    /// position, recorded on `tape`.
    pub fn answer_loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        samples: &[Sample],
        mask: &HeadMask,
        reduction: Reduction,
    ) -> Result<Var> {
        let prompts: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        let batch = Batch::new(&prompts, &self.config)?;
        let logits = self.forward_on_tape(tape, p, &batch, mask)?;
        let rows = batch.batch * batch.seq;
        let mut targets = vec![PAD; rows];
        let mut keep = vec![false; rows];
        for (s, r) in samples.iter().zip(batch.last_rows()) {
            targets[r] = s.target;
            keep[r] = true;
        }
        tape.cross_entropy(logits, &targets, &keep, reduction)
    }

    /// Column index range of head `h` inside its layer's `W_q`.
    fn head_columns(&self, h: HeadId) -> std::ops::Range<usize> {
        let dh = self.config.d_head();
        h.head * dh..(h.head + 1) * dh
    }

    pub fn head_param_slice(&self, h: HeadId) -> Result<HeadSlice<'_>> {
        self.config.check_head(h)?;
        let cols = self.head_columns(h);
        Ok(HeadSlice {
            data: &self.wq(h.layer).data,
            d_model: self.config.d_model,
            cols,
        })
    }

    pub fn head_param_slice_mut(&mut self, h: HeadId) -> Result<HeadSliceMut<'_>> {
        self.config.check_head(h)?;
        let cols = self.head_columns(h);
        let d_model = self.config.d_model;
        Ok(HeadSliceMut {
            data: &mut self.param_mut(ParamId::layer(h.layer, LayerParam::Wq)).data,
            d_model,
            cols,
        })
    }

    /// SHA-256 over the configuration and every parameter's bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("serializable"));
        for t in &self.params {
            for x in &t.data {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// SHA-256 over every parameter value except the `W_q` columns owned by
    /// `excluded` heads.
    pub fn frozen_digest(&self, excluded: &BTreeSet<HeadId>) -> String {
        let mut hasher = Sha256::new();
        let d = self.config.d_model;
        for (i, t) in self.params.iter().enumerate() {
            let layer = (0..self.config.n_layers).find(|&l| ParamId::layer(l, LayerParam::Wq).0 == i);
            match layer {
                Some(l) => {
                    let skip: Vec<bool> = (0..d)
                        .map(|c| excluded.contains(&HeadId::new(l, c / self.config.d_head())))
                        .collect();
                    for (j, x) in t.data.iter().enumerate() {
                        if !skip[j % d] {
                            hasher.update(x.to_le_bytes());
                        }
                    }
                }
                None => t.data.iter().for_each(|x| hasher.update(x.to_le_bytes())),
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut offset = 0usize;
        let manifest: Vec<ManifestEntry> = self
            .params
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len() * 8;
                e
            })
            .collect();
        let header = CheckpointHeader {
            config: self.config.clone(),
            params: manifest,
            checksum: self.checksum(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("serializable");
        let mut out = Vec::with_capacity(8 + 8 + header_bytes.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in &self.params {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: &str| CastError::Integrity(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(integrity("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(integrity(&format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = 16 + hlen;
        if bytes.len() < header_end {
            return Err(integrity("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| integrity(&format!("header: {e}")))?;
        header.config.validate()?;
        let specs = header.config.param_specs();
        if specs.len() != header.params.len() {
            return Err(integrity("manifest does not match config"));
        }
        let payload = &bytes[header_end..];
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), e) in specs.into_iter().zip(&header.params) {
            if e.name != name || e.shape != shape || e.len != shape.iter().product::<usize>() {
                return Err(integrity(&format!("manifest entry {} does not match config", e.name)));
            }
            let end = e.offset + e.len * 8;
            if end > payload.len() {
                return Err(integrity("truncated payload"));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Tensor { name, shape, data });
        }
        let model = Self {
            config: header.config,
            params,
        };
        if model.checksum() != header.checksum {
            return Err(integrity("checksum mismatch"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CASTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
    checksum: String,
}

/// Read-only view of one head's `W_q` column block, flattened row-major
/// (`d_model * d_head` entries).
#[derive(Debug, Clone)]
pub struct HeadSlice<'a> {
    data: &'a [f64],
    d_model: usize,
    cols: std::ops::Range<usize>,
}

/// Mutable view with the same layout as [`HeadSlice`].
#[derive(Debug)]
pub struct HeadSliceMut<'a> {
    data: &'a mut [f64],
    d_model: usize,
    cols: std::ops::Range<usize>,
}

fn slice_index(cols: &std::ops::Range<usize>, d_model: usize, i: usize) -> usize {
    let w = cols.len();
    assert!(i < d_model * w, "head slice index {i} out of range");
    (i / w) * d_model + cols.start + i % w
}

impl HeadSlice<'_> {
    pub fn len(&self) -> usize {
        self.d_model * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[slice_index(&self.cols, self.d_model, i)]
    }

    /// Flat indices into the layer's `W_q` data.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(|i| slice_index(&self.cols, self.d_model, i))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.indices().map(|j| self.data[j]).collect()
    }
}

impl HeadSliceMut<'_> {
    pub fn len(&self) -> usize {
        self.d_model * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[slice_index(&self.cols, self.d_model, i)]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let j = slice_index(&self.cols, self.d_model, i);
        self.data[j] = v;
    }

    pub fn copy_from(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.len());
        for (i, &v) in values.iter().enumerate() {
            self.set(i, v);
        }
    }
}

/// Extracts head `h`'s block from a full `[d_model, d_model]` `W_q`-shaped
/// buffer (values or gradients), in [`HeadSlice`] order.
pub fn head_block(full: &[f64], cfg: &ModelConfig, head: usize) -> Vec<f64> {
    let (d, dh) = (cfg.d_model, cfg.d_head());
    full.chunks(d)
        .flat_map(|row| row[head * dh..(head + 1) * dh].iter().copied())
        .collect()
}

/// Greedy next-token predictor over prompts.
pub trait NextTokenPredictor {
    /// Argmax token at each sample's answer position.
    fn predict_next(&self, samples: &[Sample], mask: &HeadMask) -> Result<Vec<usize>>;
}

impl NextTokenPredictor for TransformerModel {
    fn predict_next(&self, samples: &[Sample], mask: &HeadMask) -> Result<Vec<usize>> {
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let prompts: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
            let batch = Batch::new(&prompts, &self.config)?;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, |_| false);
            let logits = self.forward_on_tape(&mut tape, &p, &batch, mask)?;
            let lv = tape.value(logits);
            for r in batch.last_rows() {
                out.push(argmax(&lv[r * v..(r + 1) * v]));
            }
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy next-token accuracy over the set's answer positions.
pub fn evaluate_utility<M: NextTokenPredictor + ?Sized>(model: &M, samples: &[Sample], mask: &HeadMask) -> Result<f64> {
    if samples.is_empty() {
        return Err(CastError::input("utility evaluation needs a nonempty dataset"));
    }
    let preds = model.predict_next(samples, mask)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.target).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Fraction of prompts whose greedy next token is `REFUSE`.
pub fn evaluate_refusal<M: NextTokenPredictor + ?Sized>(model: &M, samples: &[Sample], mask: &HeadMask) -> Result<f64> {
    if samples.is_empty() {
        return Err(CastError::input("refusal evaluation needs a nonempty dataset"));
    }
    let preds = model.predict_next(samples, mask)?;
    let refusals = preds.iter().filter(|&&p| p == crate::synthdata::REFUSE).count();
    Ok(refusals as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_safety, gen_utility, DataConfig, Dataset, TaskKind, REFUSE};

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size: 32,
            max_seq_len: 10,
            init_seed: 21,
        }
    }

    fn data_cfg(vocab: usize) -> DataConfig {
        DataConfig {
            vocab_size: vocab,
            modulus: 8,
            copy_alphabet: 8,
            distractor_tokens: 4,
            payload_len: 2,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TransformerModel::init(small()).unwrap();
        let b = TransformerModel::init(small()).unwrap();
        assert_eq!(a, b);
        let c = TransformerModel::init(ModelConfig { init_seed: 42, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
        assert_eq!(a.param(ParamId::layer(0, LayerParam::Ln1Gain)).data, vec![1.0; 16]);
        assert_eq!(a.param(ParamId::final_bias(a.config())).data, vec![0.0; 16]);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { d_model: 15, ..small() };
        assert!(matches!(TransformerModel::init(bad), Err(CastError::Config(_))));
        let zero = ModelConfig { n_layers: 0, ..small() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn desk_config_has_sixteen_heads() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.n_total_heads(), 16);
        assert_eq!(cfg.heads().count(), 16);
        let m = TransformerModel::init(cfg.clone()).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn head_slices_partition_wq() {
        let m = TransformerModel::init(ModelConfig::default()).unwrap();
        let s0 = m.head_param_slice(HeadId::new(1, 0)).unwrap();
        let s1 = m.head_param_slice(HeadId::new(1, 1)).unwrap();
        assert_eq!(s0.len(), 1024);
        let i0: BTreeSet<usize> = s0.indices().collect();
        let i1: BTreeSet<usize> = s1.indices().collect();
        assert!(i0.is_disjoint(&i1));
        let all: BTreeSet<usize> = (0..4)
            .flat_map(|h| m.head_param_slice(HeadId::new(1, h)).unwrap().indices().collect::<Vec<_>>())
            .collect();
        assert_eq!(all.len(), 64 * 64);
        assert!(m.head_param_slice(HeadId::new(4, 0)).is_err());
        assert!(m.head_param_slice(HeadId::new(0, 4)).is_err());
        assert_eq!(head_block(&m.wq(1).data, m.config(), 0), s0.to_vec());
    }

    #[test]
    fn head_slice_writes_alias_wq() {
        let mut m = TransformerModel::init(small()).unwrap();
        let h = HeadId::new(1, 1);
        {
            let mut s = m.head_param_slice_mut(h).unwrap();
            s.set(0, 7.5);
            s.set(s.len() - 1, -3.0);
        }
        let wq = &m.wq(1).data;
        // row 0, first column of head 1; last row, last column.
        assert_eq!(wq[8], 7.5);
        assert_eq!(wq[16 * 16 - 1], -3.0);
        assert_eq!(m.head_param_slice(h).unwrap().get(0), 7.5);
    }

    fn prompts() -> Vec<Vec<usize>> {
        vec![vec![1, 5, 9, 2], vec![1, 3, 7, 8, 6, 2], vec![1, 10, 2]]
    }

    #[test]
    fn empty_mask_matches_plain_forward() {
        let m = TransformerModel::init(small()).unwrap();
        let a = m.forward(&prompts(), &HeadMask::none()).unwrap();
        let b = m.forward(&prompts(), &HeadMask::from_heads([])).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.shape(), &[3, 6, 32]);
    }

    #[test]
    fn all_heads_masked_equals_attention_free_network() {
        let m = TransformerModel::init(small()).unwrap();
        let masked = m.forward(&prompts(), &HeadMask::all(m.config())).unwrap();
        let free = m.forward_attention_free(&prompts()).unwrap();
        assert_eq!(masked.values(), free.values());
    }

    #[test]
    fn masking_one_head_changes_logits() {
        let m = TransformerModel::init(small()).unwrap();
        let a = m.forward(&prompts(), &HeadMask::none()).unwrap();
        let b = m.forward(&prompts(), &HeadMask::single(HeadId::new(0, 1))).unwrap();
        let diff = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "{diff}");
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = TransformerModel::init(small()).unwrap();
        let alone = m.forward(&[vec![1, 5, 9, 2]], &HeadMask::none()).unwrap();
        let padded = m.forward(&prompts(), &HeadMask::none()).unwrap();
        let v = 32;
        for t in 0..4 {
            assert_eq!(&alone.values()[t * v..(t + 1) * v], &padded.values()[t * v..(t + 1) * v]);
        }
    }

    #[test]
    fn over_length_and_bad_tokens_rejected() {
        let m = TransformerModel::init(small()).unwrap();
        assert!(matches!(m.forward(&[vec![1; 11]], &HeadMask::none()), Err(CastError::Input(_))));
        assert!(matches!(m.forward(&[vec![1, 40]], &HeadMask::none()), Err(CastError::Input(_))));
    }

    #[test]
    fn ablation_does_not_touch_parameters() {
        let m = TransformerModel::init(small()).unwrap();
        let before = m.checksum();
        m.forward(&prompts(), &HeadMask::single(HeadId::new(1, 0))).unwrap();
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn checkpoint_round_trip_and_integrity() {
        let m = TransformerModel::init(small()).unwrap();
        let bytes = m.to_checkpoint_bytes();
        assert_eq!(&bytes[..8], b"CASTCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let back = TransformerModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), bytes);

        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0x55;
        assert!(matches!(
            TransformerModel::from_checkpoint_bytes(&corrupt),
            Err(CastError::Integrity(_))
        ));
        assert!(matches!(
            TransformerModel::from_checkpoint_bytes(b"NOTACKPT0000000000"),
            Err(CastError::Integrity(_))
        ));
    }

    #[test]
    fn frozen_digest_ignores_only_excluded_columns() {
        let mut m = TransformerModel::init(small()).unwrap();
        let h = HeadId::new(0, 1);
        let ex = BTreeSet::from([h]);
        let before = m.frozen_digest(&ex);
        m.head_param_slice_mut(h).unwrap().set(3, 1.0);
        assert_eq!(m.frozen_digest(&ex), before);
        m.head_param_slice_mut(HeadId::new(0, 0)).unwrap().set(3, 1.0);
        assert_ne!(m.frozen_digest(&ex), before);
    }

    struct Oracle;

    impl NextTokenPredictor for Oracle {
        fn predict_next(&self, samples: &[Sample], _: &HeadMask) -> Result<Vec<usize>> {
            Ok(samples.iter().map(|s| s.target).collect())
        }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let d = data_cfg(32);
        let set = gen_utility(TaskKind::ModularAdd, 50, 1, &d).unwrap();
        assert_eq!(evaluate_utility(&Oracle, set.samples(), &HeadMask::none()).unwrap(), 1.0);
        assert!(evaluate_utility(&Oracle, &[], &HeadMask::none()).is_err());
    }

    #[test]
    fn hard_wired_refusal_model() {
        let mut m = TransformerModel::init(small()).unwrap();
        let cfg = m.config().clone();
        m.param_mut(ParamId::final_gain(&cfg)).data.fill(0.0);
        let bias = &mut m.param_mut(ParamId::final_bias(&cfg)).data;
        bias.fill(0.0);
        bias[0] = 1.0;
        let un = &mut m.param_mut(ParamId::unembed(&cfg)).data;
        un.fill(0.0);
        un[REFUSE] = 1.0;
        let safe = gen_safety(40, 3, true, &data_cfg(32)).unwrap();
        assert_eq!(evaluate_refusal(&m, safe.samples(), &HeadMask::none()).unwrap(), 1.0);

        // Same construction pointing at a content token never refuses.
        let un = &mut m.param_mut(ParamId::unembed(&cfg)).data;
        un[REFUSE] = 0.0;
        un[7] = 1.0;
        assert_eq!(evaluate_refusal(&m, safe.samples(), &HeadMask::none()).unwrap(), 0.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = ModelConfig::default();
        let m = TransformerModel::init(cfg).unwrap();
        let d = DataConfig::default();
        let set = gen_utility(TaskKind::ModularAdd, 1024, 5, &d).unwrap();
        let acc = evaluate_utility(&m, set.samples(), &HeadMask::none()).unwrap();
        // An untrained model tends to collapse onto a few tokens; against the
        // 16 equiprobable answers the hit rate stays near 1/16 at most, and
        // far from any trained level.
        assert!(acc < 0.15, "{acc}");
    }
}
