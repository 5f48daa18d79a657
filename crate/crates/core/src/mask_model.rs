//! Adaptive masking: a bidirectional LSTM with an attention scorer that
//! assigns every token the probability of carrying sentiment.
//!
//! For hidden states `H` (one row per token) the attention weights are
//! `alpha = softmax_i(v . tanh(W h_i + b))` over the positions of a sentence.
//! The mask head is a per-position two-way softmax over `[alpha_i * h_i ; h_i]`;
//! its second class is the mask probability. A sentence-level sentiment head
//! over `sum_i alpha_i h_i` is used to pretrain the encoder and attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, MASK_SCHEMA};
use crate::corpus::{Label, LabeledSentence, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::losses::{nll_sum, soft_ce_sum};
use crate::nn::{shuffled_batches, Adam, Bound, Embedding, Linear, Lstm, ParamStore, TrainOpts};
use crate::tensor::{Segments, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub embed_dim: usize,
    /// Hidden width per direction.
    pub hidden: usize,
    pub attn_dim: usize,
    /// Mask threshold.
    pub tau: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            embed_dim: 64,
            hidden: 128,
            attn_dim: 64,
            tau: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskClassifier {
    pub params: ParamStore,
    config: MaskConfig,
    vocab_size: usize,
    embedding: Embedding,
    forward_lstm: Lstm,
    backward_lstm: Lstm,
    attn_proj: Linear,
    attn_score: Linear,
    mask_head: Linear,
    sentiment_head: Linear,
}

/// Tape handles produced by one batched forward pass.
pub struct MaskForward {
    pub segments: Segments,
    /// `T x 2h` concatenated forward/backward hidden states.
    pub hidden: Var,
    /// `T x 1` attention weights, normalized per sentence.
    pub alpha: Var,
    /// `T x 2` per-position log-probabilities (keep, mask).
    pub mask_logp: Var,
    /// `T x 1` mask probabilities.
    pub mask_probs: Var,
    /// `B x 2` sentence sentiment logits.
    pub sentiment_logits: Var,
}

/// Per-token mask probabilities for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutput {
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Gates are the 0/1 indicator of the masked set.
    Hard,
    /// Gates carry the raw probabilities.
    Soft,
}

/// Partition of token positions into masked (sentiment) and content sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledPair {
    /// Sorted masked positions; never empty.
    pub masked: Vec<usize>,
    /// Sorted unmasked positions.
    pub content: Vec<usize>,
    pub soft_gates: Vec<f64>,
}

impl DisentangledPair {
    /// Builds a pair from explicit masked positions with hard gates.
    pub fn from_masked(len: usize, masked: &[usize]) -> Result<Self> {
        if masked.is_empty() {
            return Err(invalid("masked set must not be empty"));
        }
        let mut is_masked = vec![false; len];
        for &i in masked {
            if i >= len {
                return Err(invalid(format!("position {i} out of range for length {len}")));
            }
            is_masked[i] = true;
        }
        Ok(DisentangledPair::from_flags(&is_masked, None))
    }

    fn from_flags(is_masked: &[bool], gates: Option<Vec<f64>>) -> Self {
        let masked: Vec<usize> = (0..is_masked.len()).filter(|&i| is_masked[i]).collect();
        let content: Vec<usize> = (0..is_masked.len()).filter(|&i| !is_masked[i]).collect();
        let soft_gates =
            gates.unwrap_or_else(|| is_masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        DisentangledPair {
            masked,
            content,
            soft_gates,
        }
    }

    pub fn len(&self) -> usize {
        self.soft_gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soft_gates.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// `S = {i : probs[i] > tau}`, or the argmax position when that set is empty.
pub fn threshold_split(out: &MaskOutput, tau: f64, mode: SplitMode) -> Result<DisentangledPair> {
    if out.probs.is_empty() {
        return Err(Error::EmptyInput("no mask probabilities".into()));
    }
    if out.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("mask probabilities must lie in [0, 1]"));
    }
    let mut flags: Vec<bool> = out.probs.iter().map(|&p| p > tau).collect();
    if !flags.iter().any(|&f| f) {
        flags[crate::tensor::argmax(&out.probs)] = true;
    }
    let gates = match mode {
        SplitMode::Hard => None,
        SplitMode::Soft => Some(out.probs.clone()),
    };
    Ok(DisentangledPair::from_flags(&flags, gates))
}

/// Token ids with every masked position replaced by `[mask]`.
pub fn render_masked(
    x: &LabeledSentence,
    pair: &DisentangledPair,
    v: &Vocabulary,
) -> Result<Vec<usize>> {
    if pair.len() != x.len() {
        return Err(invalid(format!(
            "pair covers {} positions, sentence has {}",
            pair.len(),
            x.len()
        )));
    }
    let mut ids = x.token_ids().to_vec();
    for &i in &pair.masked {
        if i >= ids.len() {
            return Err(invalid(format!("masked position {i} out of range")));
        }
        ids[i] = v.mask_id();
    }
    Ok(ids)
}

fn check_batch(batch: &[&LabeledSentence], vocab_size: usize) -> Result<Segments> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    for x in batch {
        if x.is_empty() {
            return Err(Error::EmptyInput("sentence has no tokens".into()));
        }
        if x.token_ids().iter().any(|&id| id >= vocab_size) {
            return Err(invalid("token id outside the model vocabulary"));
        }
    }
    Ok(Segments::from_lengths(
        &batch.iter().map(|x| x.len()).collect::<Vec<_>>(),
    ))
}

fn ensure_both_labels(data: &[LabeledSentence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no training sentences".into()));
    }
    let first = data[0].label();
    if data.iter().all(|x| x.label() == first) {
        return Err(invalid(format!("training data contains only `{first}` sentences")));
    }
    Ok(())
}

impl MaskClassifier {
    pub fn new(vocab_size: usize, config: MaskConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let MaskConfig {
            embed_dim,
            hidden,
            attn_dim,
            ..
        } = config;
        let embedding = Embedding::new(&mut params, &mut rng, "embedding", vocab_size, embed_dim);
        let forward_lstm = Lstm::new(&mut params, &mut rng, "lstm_fwd", embed_dim, hidden);
        let backward_lstm = Lstm::new(&mut params, &mut rng, "lstm_bwd", embed_dim, hidden);
        let attn_proj = Linear::new(&mut params, &mut rng, "attn_proj", 2 * hidden, attn_dim);
        let attn_score = Linear::new(&mut params, &mut rng, "attn_score", attn_dim, 1);
        let mask_head = Linear::new(&mut params, &mut rng, "mask_head", 4 * hidden, 2);
        let sentiment_head = Linear::new(&mut params, &mut rng, "sentiment_head", 2 * hidden, 2);
        MaskClassifier {
            params,
            config,
            vocab_size,
            embedding,
            forward_lstm,
            backward_lstm,
            attn_proj,
            attn_score,
            mask_head,
            sentiment_head,
        }
    }

    pub fn config(&self) -> &MaskConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.config.tau = tau;
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&LabeledSentence]) -> Result<MaskForward> {
        let segments = check_batch(batch, self.vocab_size)?;
        let ids: Vec<usize> = batch.iter().flat_map(|x| x.token_ids().iter().copied()).collect();
        let emb = self.embedding.forward(g, p, &ids);
        let fwd = self.forward_lstm.forward(g, p, emb, &segments, false);
        let bwd = self.backward_lstm.forward(g, p, emb, &segments, true);
        let hidden = g.concat_cols(&[fwd, bwd]);

        let proj = self.attn_proj.forward(g, p, hidden);
        let proj = g.tanh(proj);
        let scores = self.attn_score.forward(g, p, proj);
        let alpha = g.segment_softmax(scores, &segments);

        let weighted = g.mul_col(hidden, alpha);
        let features = g.concat_cols(&[weighted, hidden]);
        let mask_logits = self.mask_head.forward(g, p, features);
        let mask_logp = g.log_softmax_rows(mask_logits);
        let mask_dist = g.softmax_rows(mask_logits);
        let mask_probs = g.slice_cols(mask_dist, 1, 1);

        let context = g.segment_weighted_sum(hidden, alpha, &segments);
        let sentiment_logits = self.sentiment_head.forward(g, p, context);
        Ok(MaskForward {
            segments,
            hidden,
            alpha,
            mask_logp,
            mask_probs,
            sentiment_logits,
        })
    }

    /// Mask probabilities and attention weights without building gradients.
    pub fn infer(&self, batch: &[&LabeledSentence]) -> Result<Vec<(MaskOutput, Vec<f64>)>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, batch)?;
        let probs = g.value(f.mask_probs).data();
        let alpha = g.value(f.alpha).data();
        Ok(f.segments
            .spans()
            .iter()
            .map(|&(s, n)| {
                (
                    MaskOutput {
                        probs: probs[s..s + n].to_vec(),
                    },
                    alpha[s..s + n].to_vec(),
                )
            })
            .collect())
    }

    pub fn forward_mask_probs(&self, x: &LabeledSentence) -> Result<MaskOutput> {
        Ok(self.infer(&[x])?.remove(0).0)
    }

    /// Hard split of every sentence, in chunks of `chunk` sentences.
    pub fn split_all(&self, data: &[LabeledSentence], chunk: usize) -> Result<Vec<DisentangledPair>> {
        let mut out = Vec::with_capacity(data.len());
        for part in data.chunks(chunk.max(1)) {
            let refs: Vec<&LabeledSentence> = part.iter().collect();
            for (m, _) in self.infer(&refs)? {
                out.push(threshold_split(&m, self.config.tau, SplitMode::Hard)?);
            }
        }
        Ok(out)
    }

    /// Sentence-level predictions from the sentiment head.
    pub fn classify(&self, batch: &[&LabeledSentence]) -> Result<Vec<Label>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, batch)?;
        let logits = g.value(f.sentiment_logits);
        Ok((0..logits.rows())
            .map(|r| Label::from_index(logits.argmax_row(r)).expect("two classes"))
            .collect())
    }

    pub fn accuracy(&self, data: &[LabeledSentence]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no evaluation sentences".into()));
        }
        let mut correct = 0usize;
        for part in data.chunks(256) {
            let refs: Vec<&LabeledSentence> = part.iter().collect();
            let pred = self.classify(&refs)?;
            correct += pred.iter().zip(part).filter(|(p, x)| **p == x.label()).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean sentence-level cross-entropy of the sentiment head.
    pub fn sentiment_loss(&self, g: &mut Graph, f: &MaskForward, batch: &[&LabeledSentence]) -> Var {
        let logp = g.log_softmax_rows(f.sentiment_logits);
        let targets: Vec<usize> = batch.iter().map(|x| x.label().index()).collect();
        let s = nll_sum(g, logp, &targets);
        g.scale(s, 1.0 / batch.len() as f64)
    }

    /// Trains encoder, attention and sentiment head as a sentence classifier.
    /// Returns accuracy on `heldout`.
    pub fn pretrain_sentiment_attention(
        &mut self,
        train: &[LabeledSentence],
        heldout: &[LabeledSentence],
        opts: &TrainOpts,
    ) -> Result<f64> {
        ensure_both_labels(train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = Adam::new(opts.lr);
        for epoch in 0..opts.epochs {
            for (step, idx) in shuffled_batches(train.len(), opts.batch_size, &mut rng)
                .into_iter()
                .enumerate()
            {
                let batch: Vec<&LabeledSentence> = idx.iter().map(|&i| &train[i]).collect();
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let f = self.forward(&mut g, &p, &batch)?;
                let loss = self.sentiment_loss(&mut g, &f, &batch);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: format!("mask-pretrain epoch {epoch}"),
                        step,
                        loss: "sentiment_ce".into(),
                    });
                }
                let grads = g.backward(loss);
                opt.step(&mut self.params, &p.grads(&grads));
            }
        }
        let eval = if heldout.is_empty() { train } else { heldout };
        self.accuracy(eval)
    }

    /// Fits the mask head to attention-derived soft targets
    /// `alpha_i / max_j alpha_j`, leaving every other parameter unchanged.
    /// Returns the mean loss of the final epoch.
    pub fn warm_start_from_attention(
        &mut self,
        data: &[LabeledSentence],
        opts: &TrainOpts,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no sentences for warm start".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = Adam::new(opts.lr);
        let head = [self.mask_head.weight, self.mask_head.bias];
        let mut last = 0.0;
        for _ in 0..opts.epochs {
            let (mut total, mut count) = (0.0, 0usize);
            for idx in shuffled_batches(data.len(), opts.batch_size, &mut rng) {
                let batch: Vec<&LabeledSentence> = idx.iter().map(|&i| &data[i]).collect();
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let f = self.forward(&mut g, &p, &batch)?;
                let alpha = g.value(f.alpha).clone();
                let mut target = Tensor::zeros(alpha.rows(), 2);
                for &(s, n) in f.segments.spans() {
                    let max = alpha.data()[s..s + n].iter().cloned().fold(0.0, f64::max);
                    for i in s..s + n {
                        let t = alpha.get(i, 0) / max;
                        target.set(i, 0, 1.0 - t);
                        target.set(i, 1, t);
                    }
                }
                let rows = target.rows();
                let s = soft_ce_sum(&mut g, f.mask_logp, target);
                let loss = g.scale(s, 1.0 / rows as f64);
                total += g.value(loss).item();
                count += 1;
                let grads = g.backward(loss);
                let mut grads = p.grads(&grads);
                for (i, id) in self.params.ids().enumerate() {
                    if !head.contains(&id) {
                        grads[i] = None;
                    }
                }
                opt.step(&mut self.params, &grads);
            }
            last = total / count as f64;
        }
        Ok(last)
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::new(MASK_SCHEMA);
        self.write_meta(&mut c, vocab_hash);
        c.add_store("masker", &self.params);
        c
    }

    pub(crate) fn write_meta(&self, c: &mut Checkpoint, vocab_hash: &str) {
        c.set_meta("vocab_hash", vocab_hash);
        c.set_meta("vocab_size", self.vocab_size as u64);
        c.set_meta("tau", self.config.tau);
        c.set_meta("embed_dim", self.config.embed_dim as u64);
        c.set_meta("hidden", self.config.hidden as u64);
        c.set_meta("attn_dim", self.config.attn_dim as u64);
    }

    pub fn from_checkpoint(c: &Checkpoint, vocab_hash: &str) -> Result<Self> {
        c.expect_schema(MASK_SCHEMA)?;
        c.expect_vocab(vocab_hash)?;
        let config = MaskConfig {
            embed_dim: c.meta_usize("embed_dim")?,
            hidden: c.meta_usize("hidden")?,
            attn_dim: c.meta_usize("attn_dim")?,
            tau: c.meta_f64("tau")?,
        };
        let mut m = MaskClassifier::new(c.meta_usize("vocab_size")?, config, 0);
        c.load_store("masker", &mut m.params)?;
        Ok(m)
    }
}
