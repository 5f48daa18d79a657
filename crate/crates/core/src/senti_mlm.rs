//! Sentiment-conditioned masked language model.
//!
//! Input representation per position is token + position + sentence-label
//! embedding. A post-norm transformer encoder produces hidden states read by
//! a token head (vocabulary logits) and a word-polarity head (3 classes).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, MLM_SCHEMA};
use crate::cnn::CnnSentimentDiscriminator;
use crate::corpus::{Label, LabeledSentence, Polarity, SyntheticGrammar, Vocabulary};
use crate::disentangle::LossWeights;
use crate::error::{invalid, Error, Result};
use crate::losses::nll_sum;
use crate::mask_model::{render_masked, DisentangledPair};
use crate::nn::{Bound, Embedding, LayerNorm, Linear, ParamStore};
use crate::tensor::{argmax, Segments, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_dim: 256,
            max_len: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentiMlm {
    pub params: ParamStore,
    config: MlmConfig,
    vocab_size: usize,
    tokens: Embedding,
    positions: Embedding,
    labels: Embedding,
    blocks: Vec<Block>,
    token_head: Linear,
    polarity_head: Linear,
}

/// One model input: token ids (usually containing `[mask]`) and the
/// sentence-level label that conditions them.
#[derive(Clone, Copy, Debug)]
pub struct MlmInput<'a> {
    pub ids: &'a [usize],
    pub label: Label,
}

pub struct MlmForward {
    pub segments: Segments,
    /// `T x d` final hidden states.
    pub hidden: Var,
    /// `T x V` token logits.
    pub token_logits: Var,
    /// `T x 3` polarity logits.
    pub polarity_logits: Var,
}

/// Per-position distributions for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct FillOutput {
    /// `N x V`.
    pub token_probs: Tensor,
    /// `N x 3`.
    pub polarity_probs: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    pub output_ids: Vec<usize>,
    pub target: Label,
    /// Positions that were filled, in order.
    pub masked: Vec<usize>,
    /// Token distribution at each filled position.
    pub distributions: Vec<Vec<f64>>,
}

impl TransferResult {
    pub fn output_tokens(&self, v: &Vocabulary) -> Vec<String> {
        v.decode(&self.output_ids)
    }
}

/// `theta1 * rec + theta2 * senti`.
pub fn combine_stage1(w: &LossWeights, rec: f64, senti: f64) -> f64 {
    w.theta[0] * rec + w.theta[1] * senti
}

/// `theta3 * rec + theta4 * acc`.
pub fn combine_stage3(w: &LossWeights, rec: f64, acc: f64) -> f64 {
    w.theta[2] * rec + w.theta[3] * acc
}

/// Gold polarity for real corpora: masked positions carry the sentence
/// label, all others are neutral.
pub fn polarity_from_pair(x: &LabeledSentence, pair: &DisentangledPair) -> Vec<Polarity> {
    (0..x.len())
        .map(|i| {
            if pair.is_masked(i) {
                Polarity::of_label(x.label())
            } else {
                Polarity::Neutral
            }
        })
        .collect()
}

/// Gold polarity from the synthetic grammar's lexicons.
pub fn polarity_from_grammar(x: &LabeledSentence, grammar: &SyntheticGrammar) -> Vec<Polarity> {
    x.tokens().iter().map(|t| grammar.word_polarity(t)).collect()
}

/// The reconstruction term exactly as printed: the positive sum of the
/// probabilities of the original tokens at masked positions. Minimizing it
/// would suppress reconstruction, so it exists for inspection only.
pub fn printed_rec_term(fill: &FillOutput, x: &LabeledSentence, pair: &DisentangledPair) -> f64 {
    pair.masked
        .iter()
        .map(|&i| fill.token_probs.get(i, x.token_ids()[i]))
        .sum()
}

/// One training example for the language model.
#[derive(Clone, Debug)]
pub struct MlmExample {
    pub masked_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub label: Label,
    pub masked: Vec<usize>,
    pub polarity: Vec<Polarity>,
}

impl MlmExample {
    pub fn new(
        x: &LabeledSentence,
        pair: &DisentangledPair,
        polarity: Vec<Polarity>,
        v: &Vocabulary,
    ) -> Result<Self> {
        if polarity.len() != x.len() {
            return Err(invalid("one gold polarity per token required"));
        }
        Ok(MlmExample {
            masked_ids: render_masked(x, pair, v)?,
            original_ids: x.token_ids().to_vec(),
            label: x.label(),
            masked: pair.masked.clone(),
            polarity,
        })
    }
}

/// Batch-level loss terms, each averaged as documented on the fields.
pub struct MlmLosses {
    /// Mean over sentences of the summed masked-token NLL.
    pub rec: Var,
    /// Mean polarity cross-entropy over all positions in the batch.
    pub senti: Var,
}

impl SentiMlm {
    pub fn new(vocab_size: usize, config: MlmConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(invalid(format!(
                "width {} is not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let tokens = Embedding::new(&mut params, &mut rng, "tokens", vocab_size, d);
        let positions = Embedding::new(&mut params, &mut rng, "positions", config.max_len, d);
        let labels = Embedding::new(&mut params, &mut rng, "labels", 2, d);
        let blocks = (0..config.layers)
            .map(|l| {
                let mut lin = |name: &str, i: usize, o: usize| {
                    Linear::new(&mut params, &mut rng, &format!("block{l}.{name}"), i, o)
                };
                let query = lin("query", d, d);
                let key = lin("key", d, d);
                let value = lin("value", d, d);
                let out = lin("out", d, d);
                let ff_in = lin("ff_in", d, config.ffn_dim);
                let ff_out = lin("ff_out", config.ffn_dim, d);
                Block {
                    query,
                    key,
                    value,
                    out,
                    norm1: LayerNorm::new(&mut params, &format!("block{l}.norm1"), d),
                    ff_in,
                    ff_out,
                    norm2: LayerNorm::new(&mut params, &format!("block{l}.norm2"), d),
                }
            })
            .collect();
        let token_head = Linear::new(&mut params, &mut rng, "token_head", d, vocab_size);
        let polarity_head = Linear::new(&mut params, &mut rng, "polarity_head", d, Polarity::COUNT);
        Ok(SentiMlm {
            params,
            config,
            vocab_size,
            tokens,
            positions,
            labels,
            blocks,
            token_head,
            polarity_head,
        })
    }

    pub fn config(&self) -> &MlmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Token embedding table (`V x d`).
    pub fn token_table(&self) -> &Tensor {
        self.params.get(self.tokens.table)
    }

    fn validate(&self, inputs: &[MlmInput]) -> Result<Segments> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        for x in inputs {
            if x.ids.is_empty() {
                return Err(Error::EmptyInput("sequence has no tokens".into()));
            }
            if x.ids.len() > self.config.max_len {
                return Err(invalid(format!(
                    "sequence of {} tokens exceeds the maximum of {}",
                    x.ids.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = x.ids.iter().find(|&&id| id >= self.vocab_size) {
                return Err(invalid(format!("token id {bad} outside the vocabulary")));
            }
        }
        Ok(Segments::from_lengths(
            &inputs.iter().map(|x| x.ids.len()).collect::<Vec<_>>(),
        ))
    }

    /// Token + position + label embeddings, `T x d`.
    pub fn embed_inputs(&self, g: &mut Graph, p: &Bound, inputs: &[MlmInput]) -> Result<(Var, Segments)> {
        let segs = self.validate(inputs)?;
        let ids: Vec<usize> = inputs.iter().flat_map(|x| x.ids.iter().copied()).collect();
        let pos: Vec<usize> = inputs.iter().flat_map(|x| 0..x.ids.len()).collect();
        let lab: Vec<usize> = inputs
            .iter()
            .flat_map(|x| std::iter::repeat_n(x.label.index(), x.ids.len()))
            .collect();
        let t = self.tokens.forward(g, p, &ids);
        let q = self.positions.forward(g, p, &pos);
        let l = self.labels.forward(g, p, &lab);
        let tq = g.add(t, q);
        Ok((g.add(tq, l), segs))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &[MlmInput]) -> Result<MlmForward> {
        let (mut h, segments) = self.embed_inputs(g, p, inputs)?;
        for b in &self.blocks {
            let q = b.query.forward(g, p, h);
            let k = b.key.forward(g, p, h);
            let v = b.value.forward(g, p, h);
            let a = g.attention(q, k, v, &segments, self.config.heads);
            let a = b.out.forward(g, p, a);
            let r = g.add(h, a);
            h = b.norm1.forward(g, p, r);
            let f = b.ff_in.forward(g, p, h);
            let f = g.gelu(f);
            let f = b.ff_out.forward(g, p, f);
            let r = g.add(h, f);
            h = b.norm2.forward(g, p, r);
        }
        let token_logits = self.token_head.forward(g, p, h);
        let polarity_logits = self.polarity_head.forward(g, p, h);
        Ok(MlmForward {
            segments,
            hidden: h,
            token_logits,
            polarity_logits,
        })
    }

    /// Token and polarity distributions for one masked sequence.
    pub fn forward_fill(&self, masked_ids: &[usize], label: Label, mask_id: usize) -> Result<FillOutput> {
        if !masked_ids.contains(&mask_id) {
            return Err(invalid("sequence contains no [mask] token to fill"));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, &[MlmInput { ids: masked_ids, label }])?;
        let tp = g.softmax_rows(f.token_logits);
        let pp = g.softmax_rows(f.polarity_logits);
        Ok(FillOutput {
            token_probs: g.value(tp).clone(),
            polarity_probs: g.value(pp).clone(),
        })
    }

    /// Reconstruction and polarity losses for a batch, conditioned on each
    /// example's own label.
    pub fn losses(&self, g: &mut Graph, p: &Bound, batch: &[&MlmExample]) -> Result<(MlmForward, MlmLosses)> {
        let inputs: Vec<MlmInput> = batch
            .iter()
            .map(|e| MlmInput {
                ids: &e.masked_ids,
                label: e.label,
            })
            .collect();
        let f = self.forward(g, p, &inputs)?;
        let mut entries = Vec::new();
        for (e, &(start, _)) in batch.iter().zip(f.segments.spans()) {
            for &i in &e.masked {
                entries.push((start + i, e.original_ids[i]));
            }
        }
        let logp = g.log_softmax_rows(f.token_logits);
        let picked = g.pick(logp, &entries);
        let s = g.sum(picked);
        let rec = g.scale(s, -1.0 / batch.len() as f64);

        let targets: Vec<usize> = batch
            .iter()
            .flat_map(|e| e.polarity.iter().map(|q| q.index()))
            .collect();
        let plogp = g.log_softmax_rows(f.polarity_logits);
        let s = nll_sum(g, plogp, &targets);
        let senti = g.scale(s, 1.0 / targets.len() as f64);
        Ok((f, MlmLosses { rec, senti }))
    }

    /// Mean `-log p(target | X~)` under `disc`, with masked positions fed as
    /// expected embeddings `sum_w p(w) E[w]` so the loss is differentiable
    /// with respect to this model. `token_logits` must come from a forward
    /// pass conditioned on the targets.
    pub fn loss_acc(
        &self,
        g: &mut Graph,
        f: &MlmForward,
        batch: &[MlmInput],
        masked: &[&[usize]],
        disc: &CnnSentimentDiscriminator,
        disc_params: &Bound,
    ) -> Result<Var> {
        if !disc.is_trained() {
            return Err(Error::NotReady("sentiment discriminator has not been trained".into()));
        }
        if masked.len() != batch.len() {
            return Err(invalid("one masked-position list per input required"));
        }
        let content_ids: Vec<usize> = batch.iter().flat_map(|x| x.ids.iter().copied()).collect();
        // Rows of the combined matrix: first every position's hard embedding,
        // then one soft embedding per masked position.
        let total = f.segments.total();
        let mut soft_rows = Vec::new();
        let mut index: Vec<usize> = (0..total).collect();
        for (b, &(start, _)) in f.segments.spans().iter().enumerate() {
            for &i in masked[b] {
                index[start + i] = total + soft_rows.len();
                soft_rows.push(start + i);
            }
        }
        let table = disc_params.var(disc.embedding_table());
        let hard = g.gather_rows(table, &content_ids);
        let emb = if soft_rows.is_empty() {
            hard
        } else {
            let logits = g.gather_rows(f.token_logits, &soft_rows);
            let probs = g.softmax_rows(logits);
            let soft = g.matmul(probs, table);
            let all = g.concat_rows(&[hard, soft]);
            g.gather_rows(all, &index)
        };
        let logits = disc.logits_from_embeddings(g, disc_params, emb, &f.segments);
        let lp = g.log_softmax_rows(logits);
        let targets: Vec<usize> = batch.iter().map(|x| x.label.index()).collect();
        let s = nll_sum(g, lp, &targets);
        Ok(g.scale(s, 1.0 / batch.len() as f64))
    }

    /// Fills the masked positions of `x` for label `target`; content
    /// positions are copied unchanged. Special tokens are never generated.
    pub fn transfer(
        &self,
        x: &LabeledSentence,
        pair: &DisentangledPair,
        target: Label,
        decode: Decode,
        v: &Vocabulary,
    ) -> Result<TransferResult> {
        Ok(self
            .transfer_batch(&[(x, pair)], target, decode, v)?
            .remove(0))
    }

    pub fn transfer_batch(
        &self,
        items: &[(&LabeledSentence, &DisentangledPair)],
        target: Label,
        decode: Decode,
        v: &Vocabulary,
    ) -> Result<Vec<TransferResult>> {
        let targets = vec![target; items.len()];
        self.transfer_each(items, &targets, decode, v)
    }

    /// Like [`SentiMlm::transfer_batch`] with one target label per item.
    pub fn transfer_each(
        &self,
        items: &[(&LabeledSentence, &DisentangledPair)],
        targets: &[Label],
        decode: Decode,
        v: &Vocabulary,
    ) -> Result<Vec<TransferResult>> {
        if items.len() != targets.len() {
            return Err(invalid("one target label per item required"));
        }
        let mut rng = match decode {
            Decode::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(invalid("sampling temperature must be positive"));
                }
                Some((ChaCha8Rng::seed_from_u64(seed), temperature))
            }
            Decode::Greedy => None,
        };
        let mut out = Vec::with_capacity(items.len());
        for (chunk, tchunk) in items.chunks(128).zip(targets.chunks(128)) {
            let masked: Vec<Vec<usize>> = chunk
                .iter()
                .map(|(x, pair)| render_masked(x, pair, v))
                .collect::<Result<_>>()?;
            let inputs: Vec<MlmInput> = masked
                .iter()
                .zip(tchunk)
                .map(|(ids, &label)| MlmInput { ids, label })
                .collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let f = self.forward(&mut g, &p, &inputs)?;
            let logits = g.value(f.token_logits);
            for (((x, pair), &(start, _)), &target) in chunk.iter().zip(f.segments.spans()).zip(tchunk) {
                let mut output_ids = x.token_ids().to_vec();
                let mut distributions = Vec::with_capacity(pair.masked.len());
                for &i in &pair.masked {
                    let mut row = logits.row(start + i).to_vec();
                    for id in v.special_ids() {
                        row[id] = f64::NEG_INFINITY;
                    }
                    let probs = softmax(&row, 1.0);
                    output_ids[i] = match rng.as_mut() {
                        None => argmax(&probs),
                        Some((r, temp)) => sample(&softmax(&row, *temp), r),
                    };
                    distributions.push(probs);
                }
                out.push(TransferResult {
                    output_ids,
                    target,
                    masked: pair.masked.clone(),
                    distributions,
                });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::new(MLM_SCHEMA);
        c.set_meta("vocab_hash", vocab_hash);
        c.set_meta("vocab_size", self.vocab_size as u64);
        c.set_meta("layers", self.config.layers as u64);
        c.set_meta("dim", self.config.dim as u64);
        c.set_meta("heads", self.config.heads as u64);
        c.set_meta("ffn_dim", self.config.ffn_dim as u64);
        c.set_meta("max_len", self.config.max_len as u64);
        c.set_meta("label_count", 2u64);
        c.add_store("mlm", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, vocab_hash: &str) -> Result<Self> {
        c.expect_schema(MLM_SCHEMA)?;
        c.expect_vocab(vocab_hash)?;
        let config = MlmConfig {
            layers: c.meta_usize("layers")?,
            dim: c.meta_usize("dim")?,
            heads: c.meta_usize("heads")?,
            ffn_dim: c.meta_usize("ffn_dim")?,
            max_len: c.meta_usize("max_len")?,
        };
        let mut m = SentiMlm::new(c.meta_usize("vocab_size")?, config, 0)?;
        c.load_store("mlm", &mut m.params)?;
        Ok(m)
    }
}

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    argmax(probs)
}
