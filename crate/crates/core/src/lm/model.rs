//! Pre-norm decoder-only transformer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::tokenizer::{Tokenizer, PAD};
use crate::nn::{read_checkpoint, write_checkpoint, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Default toy shape for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            max_seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("model.n_layers", "must be at least 2"));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!("{} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "must be at least 2"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("model.max_seq_len", "must be positive"));
        }
        Ok(())
    }
}

/// Hidden states around every block for one sequence.
///
/// `hidden[0]` is the embedding output (input to layer 1) and `hidden[i]`
/// is the output of layer `i`, so layer `i` maps `hidden[i-1]` to `hidden[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub hidden: Vec<Tensor>,
    pub pad_mask: Vec<bool>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.hidden.len().saturating_sub(1)
    }

    pub fn seq_len(&self) -> usize {
        self.pad_mask.len()
    }
}

/// Standard deviation of token embeddings and amplitude of the positional
/// encoding, so neither dominates the residual stream at initialisation.
const EMBED_SCALE: f64 = 0.1;

/// Fixed sine/cosine absolute position encoding, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + 2 * i] = EMBED_SCALE * angle.sin();
            out[pos * d + 2 * i + 1] = EMBED_SCALE * angle.cos();
        }
    }
    Tensor::from_raw(vec![len, d], out)
}

/// Name prefix shared by every parameter of 1-indexed transformer layer `layer`.
pub fn layer_prefix(layer: usize) -> String {
    format!("layer.{layer}.")
}

/// The 1-indexed layer a parameter belongs to, if any.
pub fn layer_of(param: &str) -> Option<usize> {
    param.strip_prefix("layer.")?.split('.').next()?.parse().ok()
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
}

impl TinyLm {
    /// Random initialisation, deterministic in `seed`: weights N(0, 0.02),
    /// residual projections scaled by `1/sqrt(2·n_layers)`, token embeddings
    /// N(0, 0.1).
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let (d, v, n) = (config.d_model, config.vocab_size, config.n_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid_std = 0.02 / ((2 * n) as f64).sqrt();
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let mut randn = |shape: &[usize], dist: &Normal<f64>| {
            let len = shape.iter().product();
            let data = (0..len).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_raw(shape.to_vec(), data)
        };

        let mut ps = ParamStore::new();
        let embed = Normal::new(0.0, EMBED_SCALE).expect("valid std");
        ps.insert("embed.token", randn(&[v, d], &embed))?;
        for i in 1..=n {
            let p = layer_prefix(i);
            ps.insert(format!("{p}ln1.gamma"), Tensor::full(&[d], 1.0))?;
            ps.insert(format!("{p}ln1.beta"), Tensor::zeros(&[d]))?;
            ps.insert(format!("{p}attn.wq"), randn(&[d, d], &normal))?;
            ps.insert(format!("{p}attn.wk"), randn(&[d, d], &normal))?;
            ps.insert(format!("{p}attn.wv"), randn(&[d, d], &normal))?;
            ps.insert(format!("{p}attn.wo"), randn(&[d, d], &resid))?;
            ps.insert(format!("{p}ln2.gamma"), Tensor::full(&[d], 1.0))?;
            ps.insert(format!("{p}ln2.beta"), Tensor::zeros(&[d]))?;
            ps.insert(format!("{p}mlp.w1"), randn(&[d, 4 * d], &normal))?;
            ps.insert(format!("{p}mlp.b1"), Tensor::zeros(&[4 * d]))?;
            ps.insert(format!("{p}mlp.w2"), randn(&[4 * d, d], &resid))?;
            ps.insert(format!("{p}mlp.b2"), Tensor::zeros(&[d]))?;
        }
        ps.insert("final_ln.gamma", Tensor::full(&[d], 1.0))?;
        ps.insert("final_ln.beta", Tensor::zeros(&[d]))?;
        let head = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        ps.insert("head.w", randn(&[d, v], &head))?;
        ps.insert("head.b", Tensor::zeros(&[v]))?;
        Ok(Self {
            config,
            tokenizer,
            params: ps,
        })
    }

    /// Zeroes the output projections of `layer` so the block adds nothing to
    /// the residual stream.
    pub fn make_identity_layer(&mut self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::range(format!("no layer {layer}")));
        }
        let p = layer_prefix(layer);
        for name in ["attn.wo", "mlp.w2", "mlp.b2"] {
            let t = self
                .params
                .get_mut(&format!("{p}{name}"))
                .expect("layer parameters exist");
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(())
    }

    /// Records the forward pass of a right-padded batch of equal-length
    /// sequences. Returns the `[batch·len, vocab]` logits and the residual
    /// stream before the first block and after every block.
    pub fn forward_graph<'g>(
        &'g self,
        g: &mut Graph<'g>,
        batch: &[Vec<usize>],
    ) -> Result<(Var, Vec<Var>)> {
        let len = batch.first().map_or(0, Vec::len);
        if len == 0 || batch.iter().any(|s| s.len() != len) {
            return Err(Error::contract("forward needs non-empty equal-length sequences"));
        }
        if len > self.config.max_seq_len {
            return Err(Error::range(format!(
                "sequence of {len} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::range(format!("token id {bad} outside vocabulary")));
        }
        let pe = sinusoidal_positions(len, self.config.d_model);
        let mut pos = Vec::with_capacity(ids.len() * self.config.d_model);
        for _ in batch {
            pos.extend_from_slice(pe.data());
        }
        let pe = g.input(Tensor::from_raw(vec![ids.len(), self.config.d_model], pos));

        let tok = g.param("embed.token")?;
        let te = g.gather(tok, &ids)?;
        let mut h = g.add(te, pe)?;
        let mut hidden = vec![h];

        let heads = self.config.n_heads;
        for i in 1..=self.config.n_layers {
            let p = layer_prefix(i);
            let w = |g: &mut Graph<'g>, name: &str| g.param(&format!("{p}{name}"));

            let (g1, b1) = (w(g, "ln1.gamma")?, w(g, "ln1.beta")?);
            let x = g.layer_norm(h, g1, b1)?;
            let wq = w(g, "attn.wq")?;
            let wk = w(g, "attn.wk")?;
            let wv = w(g, "attn.wv")?;
            let wo = w(g, "attn.wo")?;
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let a = g.causal_attention(q, k, v, heads, len)?;
            let o = g.matmul(a, wo)?;
            h = g.add(h, o)?;

            let (g2, b2) = (w(g, "ln2.gamma")?, w(g, "ln2.beta")?);
            let x = g.layer_norm(h, g2, b2)?;
            let (w1, c1) = (w(g, "mlp.w1")?, w(g, "mlp.b1")?);
            let (w2, c2) = (w(g, "mlp.w2")?, w(g, "mlp.b2")?);
            let m = g.matmul(x, w1)?;
            let m = g.add_row(m, c1)?;
            let m = g.gelu(m);
            let m = g.matmul(m, w2)?;
            let m = g.add_row(m, c2)?;
            h = g.add(h, m)?;
            hidden.push(h);
        }

        let (fg, fb) = (g.param("final_ln.gamma")?, g.param("final_ln.beta")?);
        let x = g.layer_norm(h, fg, fb)?;
        let (hw, hb) = (g.param("head.w")?, g.param("head.b")?);
        let logits = g.matmul(x, hw)?;
        let logits = g.add_row(logits, hb)?;
        Ok((logits, hidden))
    }

    /// Inference over one sequence: `[len, vocab]` logits and, when
    /// requested, the activation trace.
    pub fn forward(&self, ids: &[usize], trace: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
        let mut g = Graph::new(&self.params);
        let (logits, hidden) = self.forward_graph(&mut g, &[ids.to_vec()])?;
        let logits_t = g.value(logits).clone();
        if !logits_t.all_finite() {
            return Err(Error::Numeric {
                op: "lm_forward".into(),
            });
        }
        let trace = trace.then(|| ActivationTrace {
            hidden: hidden.iter().map(|&v| g.value(v).clone()).collect(),
            pad_mask: ids.iter().map(|&id| id == PAD).collect(),
        });
        Ok((logits_t, trace))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.tokenizer.chars().iter().collect::<String>(),
            "extra": extra,
        });
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(f), &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (params, meta) = read_checkpoint(std::io::BufReader::new(f))?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let vocab = meta["vocab"]
            .as_str()
            .ok_or_else(|| Error::data("checkpoint metadata lacks a vocabulary"))?;
        let tokenizer = Tokenizer::from_chars(vocab.chars().collect());
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::data("checkpoint vocabulary disagrees with its config"));
        }
        Ok((
            Self {
                config,
                tokenizer,
                params,
            },
            meta["extra"].clone(),
        ))
    }
}

/// Mean cross-entropy of `logits[t]` against `targets[t]`, skipping
/// positions whose target is padding.
pub fn lm_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let nll = token_nll(logits, targets)?;
    let active: Vec<f64> = nll.into_iter().flatten().collect();
    if active.is_empty() {
        return Err(Error::data("every target position is padding"));
    }
    Ok(active.iter().sum::<f64>() / active.len() as f64)
}

/// Per-position negative log-likelihood; `None` at padded targets.
pub fn token_nll(logits: &Tensor, targets: &[usize]) -> Result<Vec<Option<f64>>> {
    if logits.rows() != targets.len() {
        return Err(Error::contract(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let vocab = logits.cols();
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            if t == PAD {
                return Ok(None);
            }
            if t >= vocab {
                return Err(Error::range(format!("target {t} outside vocabulary of {vocab}")));
            }
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(Some(lse - row[t]))
        })
        .collect()
}
