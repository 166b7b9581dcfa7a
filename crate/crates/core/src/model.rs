//! Decoder-only causal transformer with a weight-tied output head.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::sampling;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, EOS, PAD};

pub const LAYER_NORM_EPS: f64 = 1e-9;
const INIT_STD: f64 = 0.02;
const GROW_NOISE_STD: f64 = 0.01;
const PARAMS_PER_LAYER: usize = 13;

/// Index of the token embedding (and tied output head) in the parameter list.
pub const TOKEN_EMBEDDING: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            ff_width: 256,
            max_len: 128,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Model(format!("{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Model(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// A right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<TokenId>,
    pub lengths: Vec<usize>,
    pub seq: usize,
}

impl Batch {
    pub fn new<S: AsRef<[TokenId]>>(seqs: &[S]) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || seq == 0 {
            return Err(Error::Model("empty batch".into()));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Model("empty sequence in batch".into()));
            }
            tokens.extend_from_slice(s);
            tokens.resize(tokens.len() + seq - s.len(), PAD);
            lengths.push(s.len());
        }
        Ok(Self { tokens, lengths, seq })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.tokens[b * self.seq..b * self.seq + self.lengths[b]]
    }
}

/// Builds the forward graph for `batch` from parameter handles laid out as
/// in [`LanguageModel::param_names`]. Returns logits `[batch * seq, vocab]`.
pub fn forward_graph(g: &mut Graph<'_>, cfg: &ModelConfig, params: &[Var], batch: &Batch) -> Result<Var> {
    let (bsz, seq) = (batch.size(), batch.seq);
    if seq > cfg.max_len {
        return Err(Error::Model(format!(
            "sequence length {seq} exceeds max length {}; truncate upstream",
            cfg.max_len
        )));
    }
    let (width, heads) = (cfg.width, cfg.heads);
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();

    let tok = g.gather(params[TOKEN_EMBEDDING], &batch.tokens)?;
    let pos = g.gather(params[1], &positions)?;
    let mut x = g.add(tok, pos)?;

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for layer in 0..cfg.layers {
        let p = &params[2 + layer * PARAMS_PER_LAYER..2 + (layer + 1) * PARAMS_PER_LAYER];
        let h = g.layer_norm(x, p[0], p[1], LAYER_NORM_EPS)?;
        let q = g.matmul(h, p[2], false)?;
        let k = g.matmul(h, p[3], false)?;
        let v = g.matmul(h, p[4], false)?;
        let q = g.split_heads(q, bsz, seq, heads)?;
        let k = g.split_heads(k, bsz, seq, heads)?;
        let v = g.split_heads(v, bsz, seq, heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.causal_mask(scores)?;
        let attn = g.softmax(scores)?;
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.merge_heads(ctx, bsz, seq, heads)?;
        let proj = g.matmul(ctx, p[5], false)?;
        let proj = g.add_bias(proj, p[6])?;
        x = g.add(x, proj)?;

        let h = g.layer_norm(x, p[7], p[8], LAYER_NORM_EPS)?;
        let up = g.matmul(h, p[9], false)?;
        let up = g.add_bias(up, p[10])?;
        let act = g.gelu(up)?;
        let down = g.matmul(act, p[11], false)?;
        let down = g.add_bias(down, p[12])?;
        x = g.add(x, down)?;
    }
    let n = params.len();
    let h = g.layer_norm(x, params[n - 2], params[n - 1], LAYER_NORM_EPS)?;
    debug_assert_eq!(g.value(h).cols(), width);
    g.matmul(h, params[TOKEN_EMBEDDING], true)
}

/// Targets for the QA loss: position `p` with `mask[p]` set is predicted
/// from the logits at `p - 1`.
pub fn qa_picks(batch: &Batch, masks: &[&[bool]]) -> Result<Vec<(usize, usize)>> {
    let mut picks = Vec::new();
    for (b, mask) in masks.iter().enumerate() {
        let row = batch.row(b);
        if mask.len() != row.len() {
            return Err(Error::Model(format!(
                "loss mask length {} does not match sequence length {}",
                mask.len(),
                row.len()
            )));
        }
        if mask.first() == Some(&true) {
            return Err(Error::Model("the first position has no prediction".into()));
        }
        for p in 1..row.len() {
            if mask[p] {
                picks.push((b * batch.seq + p - 1, row[p]));
            }
        }
    }
    if picks.is_empty() {
        return Err(Error::Model("QA loss mask selects no positions".into()));
    }
    Ok(picks)
}

/// Targets for the LM loss: every position after the first.
pub fn lm_picks(batch: &Batch) -> Result<Vec<(usize, usize)>> {
    let mut picks = Vec::new();
    for b in 0..batch.size() {
        let row = batch.row(b);
        if row.len() < 2 {
            return Err(Error::Model("LM loss needs at least two tokens per sequence".into()));
        }
        for p in 1..row.len() {
            picks.push((b * batch.seq + p - 1, row[p]));
        }
    }
    Ok(picks)
}

/// `qa + lambda * lm`.
pub fn combined_loss(g: &mut Graph<'_>, qa: Var, lm: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid("combined_loss", "lambda must be non-negative"));
    }
    let scaled = g.scale(lm, lambda)?;
    g.add(qa, scaled)
}

/// One QA-format and one LM-format batch fed in the same step.
pub struct StepInput<'s> {
    pub qa: &'s [&'s [TokenId]],
    pub qa_masks: &'s [&'s [bool]],
    pub lm: &'s [&'s [TokenId]],
}

#[derive(Debug)]
pub struct StepOutput {
    pub qa_loss: f64,
    pub lm_loss: f64,
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl LanguageModel {
    pub fn param_names(cfg: &ModelConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..cfg.layers {
            for suffix in [
                "ln1.gain",
                "ln1.shift",
                "attn.wq",
                "attn.wk",
                "attn.wv",
                "attn.wo",
                "attn.bo",
                "ln2.gain",
                "ln2.shift",
                "mlp.w1",
                "mlp.b1",
                "mlp.w2",
                "mlp.b2",
            ] {
                names.push(format!("layer{l}.{suffix}"));
            }
        }
        names.push("lnf.gain".into());
        names.push("lnf.shift".into());
        names
    }

    /// GPT-2-style initialization: weights ~ N(0, 0.02), zero biases and
    /// shifts, unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let (d, f) = (config.width, config.ff_width);
        let mut params = vec![randn(&[config.vocab_size, d]), randn(&[config.max_len, d])];
        for _ in 0..config.layers {
            params.push(Tensor::filled(&[d], 1.0));
            params.push(Tensor::zeros(&[d]));
            params.push(randn(&[d, d]));
            params.push(randn(&[d, d]));
            params.push(randn(&[d, d]));
            params.push(randn(&[d, d]));
            params.push(Tensor::zeros(&[d]));
            params.push(Tensor::filled(&[d], 1.0));
            params.push(Tensor::zeros(&[d]));
            params.push(randn(&[d, f]));
            params.push(Tensor::zeros(&[f]));
            params.push(randn(&[f, d]));
            params.push(Tensor::zeros(&[d]));
        }
        params.push(Tensor::filled(&[d], 1.0));
        params.push(Tensor::zeros(&[d]));
        Ok(Self {
            names: Self::param_names(&config),
            config,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let names = Self::param_names(&config);
        if params.len() != names.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, got {}",
                names.len(),
                params.len()
            )));
        }
        if params[TOKEN_EMBEDDING].shape() != [config.vocab_size, config.width]
            || params[1].shape() != [config.max_len, config.width]
        {
            return Err(Error::Model("embedding shapes do not match config".into()));
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn leaves<'a>(&'a self, g: &mut Graph<'a>, track: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf_ref(p, track)).collect()
    }

    /// Logits `[batch, seq, vocab]` for a right-padded batch.
    pub fn logits<S: AsRef<[TokenId]>>(&self, seqs: &[S]) -> Result<Tensor> {
        let batch = Batch::new(seqs)?;
        self.check_ids(&batch)?;
        let mut g = Graph::new();
        let params = self.leaves(&mut g, false);
        let out = forward_graph(&mut g, &self.config, &params, &batch)?;
        let v = g.value(out).clone();
        v.reshape(&[batch.size(), batch.seq, self.config.vocab_size])
    }

    fn check_ids(&self, batch: &Batch) -> Result<()> {
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Model(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Mean next-token cross-entropy over masked positions of one sequence.
    pub fn qa_loss(&self, seq: &[TokenId], mask: &[bool]) -> Result<f64> {
        let batch = Batch::new(&[seq])?;
        self.check_ids(&batch)?;
        let picks = qa_picks(&batch, &[mask])?;
        let mut g = Graph::new();
        let params = self.leaves(&mut g, false);
        let logits = forward_graph(&mut g, &self.config, &params, &batch)?;
        let loss = g.cross_entropy(logits, &picks)?;
        Ok(g.value(loss).item())
    }

    /// Mean next-token cross-entropy over every position after the first.
    pub fn lm_loss(&self, seq: &[TokenId]) -> Result<f64> {
        let batch = Batch::new(&[seq])?;
        self.check_ids(&batch)?;
        let picks = lm_picks(&batch)?;
        let mut g = Graph::new();
        let params = self.leaves(&mut g, false);
        let logits = forward_graph(&mut g, &self.config, &params, &batch)?;
        let loss = g.cross_entropy(logits, &picks)?;
        Ok(g.value(loss).item())
    }

    /// Loss `qa + lambda * lm` and its gradient in a single backward pass.
    /// The LM branch is skipped entirely when `lambda == 0` or `lm` is empty.
    pub fn step_gradients(&self, input: &StepInput<'_>, lambda: f64) -> Result<StepOutput> {
        let mut g = Graph::new();
        let params = self.leaves(&mut g, true);

        let qa_batch = Batch::new(input.qa)?;
        self.check_ids(&qa_batch)?;
        let picks = qa_picks(&qa_batch, input.qa_masks)?;
        let logits = forward_graph(&mut g, &self.config, &params, &qa_batch)?;
        let qa = g.cross_entropy(logits, &picks)?;

        let (loss, lm) = if lambda > 0.0 && !input.lm.is_empty() {
            let lm_batch = Batch::new(input.lm)?;
            self.check_ids(&lm_batch)?;
            let picks = lm_picks(&lm_batch)?;
            let logits = forward_graph(&mut g, &self.config, &params, &lm_batch)?;
            let lm = g.cross_entropy(logits, &picks)?;
            (combined_loss(&mut g, qa, lm, lambda)?, Some(lm))
        } else {
            (qa, None)
        };

        let qa_loss = g.value(qa).item();
        let lm_loss = lm.map_or(0.0, |v| g.value(v).item());
        let total = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        Ok(StepOutput {
            qa_loss,
            lm_loss,
            loss: total,
            grads: params.iter().map(|&v| grads.take(v)).collect(),
        })
    }

    /// Extends a batch of prefixes one token at a time until EOS, the
    /// `max_new` budget, or the model's max length. Returns continuations
    /// (EOS included when emitted).
    pub fn decode_batch<S, F>(&self, prefixes: &[S], max_new: usize, mut choose: F) -> Result<Vec<Vec<TokenId>>>
    where
        S: AsRef<[TokenId]>,
        F: FnMut(&[f64]) -> TokenId,
    {
        let mut seqs: Vec<Vec<TokenId>> = prefixes.iter().map(|p| p.as_ref().to_vec()).collect();
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Model("decoding needs a non-empty prefix".into()));
        }
        let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); seqs.len()];
        let mut active: Vec<usize> = (0..seqs.len())
            .filter(|&i| seqs[i].len() < self.config.max_len)
            .collect();
        let vocab = self.config.vocab_size;
        for _ in 0..max_new {
            if active.is_empty() {
                break;
            }
            let batch_seqs: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let logits = self.logits(&batch_seqs)?;
            let seq = logits.shape()[1];
            let mut still = Vec::with_capacity(active.len());
            for (b, &i) in active.iter().enumerate() {
                let last = seqs[i].len() - 1;
                let start = (b * seq + last) * vocab;
                let tok = choose(&logits.data()[start..start + vocab]);
                seqs[i].push(tok);
                out[i].push(tok);
                if tok != EOS && seqs[i].len() < self.config.max_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }

    /// Greedy continuation of one prefix.
    pub fn greedy_decode(&self, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        let mut out = self.decode_batch(&[prefix], max_new, sampling::argmax)?;
        Ok(out.pop().unwrap())
    }

    /// Top-k sampled continuation of one prefix.
    pub fn sample_top_k<R: Rng + ?Sized>(
        &self,
        prefix: &[TokenId],
        k: usize,
        max_new: usize,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        if k == 0 {
            return Err(Error::invalid("sample_top_k", "k must be at least 1"));
        }
        let mut out = self.decode_batch(&[prefix], max_new, |row| sampling::sample_top_k(row, k, rng))?;
        Ok(out.pop().unwrap())
    }

    /// Appends token-embedding rows (shared with the output head) up to
    /// `new_vocab_size`. New rows are the mean of the existing rows plus
    /// N(0, 0.01) noise.
    pub fn grow_embeddings<R: Rng + ?Sized>(&mut self, new_vocab_size: usize, rng: &mut R) -> Result<()> {
        let old = self.config.vocab_size;
        if new_vocab_size <= old {
            return Err(Error::Model(format!(
                "cannot grow vocabulary from {old} to {new_vocab_size}"
            )));
        }
        let d = self.config.width;
        let emb = &mut self.params[TOKEN_EMBEDDING];
        let mut mean = vec![0.0; d];
        for row in emb.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= old as f64;
        }
        let noise = Normal::new(0.0, GROW_NOISE_STD).expect("valid std");
        let mut rows = Vec::with_capacity((new_vocab_size - old) * d);
        for _ in old..new_vocab_size {
            rows.extend(mean.iter().map(|m| m + noise.sample(rng)));
        }
        emb.append_rows(&rows);
        self.config.vocab_size = new_vocab_size;
        Ok(())
    }

    /// Writes `<path>` (binary tensors) and `<path>.meta` (key=value).
    pub fn save(&self, path: &Path, task_tokens: &[&str]) -> Result<()> {
        let named: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        checkpoint::save(path, &named)?;
        let c = &self.config;
        let mut meta = String::new();
        let _ = writeln!(meta, "layers={}", c.layers);
        let _ = writeln!(meta, "width={}", c.width);
        let _ = writeln!(meta, "heads={}", c.heads);
        let _ = writeln!(meta, "ff_width={}", c.ff_width);
        let _ = writeln!(meta, "max_len={}", c.max_len);
        let _ = writeln!(meta, "vocab_size={}", c.vocab_size);
        let _ = writeln!(meta, "task_tokens={}", task_tokens.join(","));
        fs::write(meta_path(path), meta)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`LanguageModel::save`]; returns the
    /// model and its task-token names in registration order.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let meta_file = meta_path(path);
        let text = fs::read_to_string(&meta_file)?;
        let bad = |reason: String| Error::Checkpoint {
            path: meta_file.clone(),
            reason,
        };
        let mut cfg = ModelConfig::new(0);
        let mut tasks = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            let num = || value.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "layers" => cfg.layers = num()?,
                "width" => cfg.width = num()?,
                "heads" => cfg.heads = num()?,
                "ff_width" => cfg.ff_width = num()?,
                "max_len" => cfg.max_len = num()?,
                "vocab_size" => cfg.vocab_size = num()?,
                "task_tokens" => tasks = value.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        let named = checkpoint::load(path)?;
        let expected = Self::param_names(&cfg);
        let names: Vec<&String> = named.iter().map(|(n, _)| n).collect();
        if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "tensor names do not match the model layout".into(),
            });
        }
        let params = named.into_iter().map(|(_, t)| t).collect();
        Ok((Self::from_params(cfg, params)?, tasks))
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}
