use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::{layer_of, TinyLm};
use crate::lm::tokenizer::PAD;
use crate::nn::{adamw_step, warmup_cosine_lr, AdamWConfig, Graph, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            warmup_ratio: 0.0,
            seed: 0,
        }
    }
}

/// Which parameters a training run may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    /// Every parameter (plain full fine-tuning).
    All,
    /// Only the listed 1-indexed transformer layers; embeddings, the final
    /// norm and the head stay frozen.
    Layers(Vec<usize>),
    /// Whatever freeze mask is already installed on the model.
    Installed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean token loss of each step's batch, measured before the update.
    pub loss_curve: Vec<f64>,
    pub final_loss: Option<f64>,
}

impl TinyLm {
    /// Installs the freeze mask implied by `scope`.
    pub fn set_trainable(&mut self, scope: &Trainable) -> Result<()> {
        match scope {
            Trainable::All => self.params.unfreeze_all(),
            Trainable::Installed => {}
            Trainable::Layers(layers) => {
                if let Some(&bad) = layers
                    .iter()
                    .find(|&&l| l == 0 || l > self.config.n_layers)
                {
                    return Err(Error::range(format!(
                        "layer {bad} does not exist in a {}-layer model",
                        self.config.n_layers
                    )));
                }
                let names: Vec<String> = self.params.names().map(str::to_string).collect();
                for name in names {
                    let trainable = layer_of(&name).is_some_and(|l| layers.contains(&l));
                    self.params.set_frozen(&name, !trainable)?;
                }
            }
        }
        Ok(())
    }

    /// Mean token loss of one padded batch, plus gradients when `grads`.
    fn batch_loss(&self, batch: &[&[usize]], grads: bool) -> Result<(f64, Option<crate::nn::Gradients>)> {
        let max_len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        if max_len < 2 {
            return Err(Error::data("training sequences need at least two tokens"));
        }
        let width = max_len - 1;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * width);
        for s in batch {
            let mut inp = s[..s.len() - 1].to_vec();
            inp.resize(width, PAD);
            inputs.push(inp);
            let mut tgt = s[1..].to_vec();
            tgt.resize(width, PAD);
            targets.extend(tgt);
        }
        let mask: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let mut g = Graph::new(&self.params);
        let (logits, _) = self.forward_graph(&mut g, &inputs)?;
        let loss = g.cross_entropy(logits, &targets, &mask)?;
        let value = g.value(loss).data()[0];
        let grads = if grads { Some(g.backward(loss)?) } else { None };
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: "cross_entropy".into(),
            });
        }
        Ok((value, grads))
    }

    /// Token-weighted mean loss over a whole dataset, in batches of `batch_size`.
    pub fn dataset_loss(&self, data: &[Vec<usize>], batch_size: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::data("empty dataset"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in data.chunks(batch_size.max(1)) {
            let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let tokens: usize = chunk.iter().map(|s| s.len() - 1).sum();
            let (l, _) = self.batch_loss(&refs, false)?;
            total += l * tokens as f64;
            count += tokens;
        }
        Ok(total / count as f64)
    }

    /// Next-token training on encoded sequences with AdamW and a cosine
    /// schedule. Optimizer moments start fresh on every call.
    pub fn train(&mut self, data: &[Vec<usize>], scope: &Trainable, cfg: &TrainConfig) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::data("training dataset is empty"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if let Some(s) = data.iter().find(|s| s.len() < 2 || s.len() - 1 > self.config.max_seq_len) {
            return Err(Error::range(format!(
                "training sequence of {} tokens does not fit max_seq_len {}",
                s.len(),
                self.config.max_seq_len
            )));
        }
        self.set_trainable(scope)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut state = OptimizerState::new(cfg.optimizer);
        let mut curve = Vec::with_capacity(cfg.steps);

        for step in 0..cfg.steps {
            let mut batch: Vec<&[usize]> = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(data.len()) {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let (loss, grads) = self.batch_loss(&batch, true)?;
            curve.push(loss);
            let lr = warmup_cosine_lr(step, cfg.steps, cfg.optimizer.lr, cfg.warmup_ratio)?;
            adamw_step(&mut self.params, &grads.expect("requested"), &mut state, lr)?;
        }

        Ok(TrainReport {
            steps: cfg.steps,
            final_loss: curve.last().copied(),
            loss_curve: curve,
        })
    }
}
