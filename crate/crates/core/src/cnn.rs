//! Convolutional sentence classifier used as the sentiment discriminator
//! for transferred text and as the sentiment judge on real corpora.
//!
//! Token embeddings are convolved with filters of several widths, passed
//! through ReLU, max-pooled over time, concatenated and fed to a 2-way
//! linear layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Label, LabeledSentence};
use crate::error::{invalid, Error, Result};
use crate::losses::nll_sum;
use crate::nn::{shuffled_batches, Adam, Bound, Embedding, Linear, ParamId, ParamStore, TrainOpts};
use crate::tensor::Segments;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    pub channels: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            embed_dim: 64,
            widths: vec![2, 3, 4],
            channels: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnSentimentDiscriminator {
    pub params: ParamStore,
    config: CnnConfig,
    vocab_size: usize,
    embedding: Embedding,
    filters: Vec<Linear>,
    output: Linear,
    trained: bool,
}

impl CnnSentimentDiscriminator {
    pub fn new(vocab_size: usize, config: CnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = config.embed_dim;
        let embedding = Embedding::new(&mut params, &mut rng, "embedding", vocab_size, e);
        let filters = config
            .widths
            .iter()
            .map(|&w| Linear::new(&mut params, &mut rng, &format!("conv{w}"), w * e, config.channels))
            .collect();
        let output = Linear::new(
            &mut params,
            &mut rng,
            "output",
            config.widths.len() * config.channels,
            2,
        );
        CnnSentimentDiscriminator {
            params,
            config,
            vocab_size,
            embedding,
            filters,
            output,
            trained: false,
        }
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// The `V x e` embedding table, for feeding expected embeddings.
    pub fn embedding_table(&self) -> ParamId {
        self.embedding.table
    }

    /// `B x 2` logits from already-embedded tokens (`T x e`).
    pub fn logits_from_embeddings(&self, g: &mut Graph, p: &Bound, emb: Var, segs: &Segments) -> Var {
        let pooled: Vec<Var> = self
            .config
            .widths
            .iter()
            .zip(&self.filters)
            .map(|(&w, filter)| {
                let (windows, wsegs) = g.unfold(emb, segs, w);
                let conv = filter.forward(g, p, windows);
                let act = g.relu(conv);
                g.segment_max(act, &wsegs)
            })
            .collect();
        let features = g.concat_cols(&pooled);
        self.output.forward(g, p, features)
    }

    pub fn logits(&self, g: &mut Graph, p: &Bound, ids: &[usize], segs: &Segments) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(invalid(format!("token id {bad} outside the discriminator vocabulary")));
        }
        let emb = self.embedding.forward(g, p, ids);
        Ok(self.logits_from_embeddings(g, p, emb, segs))
    }

    /// Positive-class probabilities for token-id sequences.
    pub fn positive_probs(&self, seqs: &[&[usize]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(256) {
            if part.iter().any(|s| s.is_empty()) {
                return Err(Error::EmptyInput("empty sequence".into()));
            }
            let segs = Segments::from_lengths(&part.iter().map(|s| s.len()).collect::<Vec<_>>());
            let ids: Vec<usize> = part.iter().flat_map(|s| s.iter().copied()).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let logits = self.logits(&mut g, &p, &ids, &segs)?;
            let probs = g.softmax_rows(logits);
            let probs = g.value(probs);
            out.extend((0..probs.rows()).map(|r| probs.get(r, 1)));
        }
        Ok(out)
    }

    pub fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<Label>> {
        Ok(self
            .positive_probs(seqs)?
            .into_iter()
            .map(|p| if p > 0.5 { Label::Positive } else { Label::Negative })
            .collect())
    }

    pub fn accuracy(&self, data: &[LabeledSentence]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no evaluation sentences".into()));
        }
        let seqs: Vec<&[usize]> = data.iter().map(|x| x.token_ids()).collect();
        let pred = self.predict(&seqs)?;
        let correct = pred.iter().zip(data).filter(|(p, x)| **p == x.label()).count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Cross-entropy training on labeled sentences; returns accuracy on
    /// `heldout` (or `train` when `heldout` is empty).
    pub fn train(
        &mut self,
        train: &[LabeledSentence],
        heldout: &[LabeledSentence],
        opts: &TrainOpts,
        opt: &mut Adam,
    ) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyInput("no training sentences".into()));
        }
        let first = train[0].label();
        if train.iter().all(|x| x.label() == first) {
            return Err(invalid(format!("training data contains only `{first}` sentences")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.epochs {
            for idx in shuffled_batches(train.len(), opts.batch_size, &mut rng) {
                let batch: Vec<&LabeledSentence> = idx.iter().map(|&i| &train[i]).collect();
                let segs = Segments::from_lengths(&batch.iter().map(|x| x.len()).collect::<Vec<_>>());
                let ids: Vec<usize> = batch.iter().flat_map(|x| x.token_ids().iter().copied()).collect();
                let labels: Vec<usize> = batch.iter().map(|x| x.label().index()).collect();
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let logits = self.logits(&mut g, &p, &ids, &segs)?;
                let lp = g.log_softmax_rows(logits);
                let sum = nll_sum(&mut g, lp, &labels);
                let loss = g.scale(sum, 1.0 / batch.len() as f64);
                if !g.value(loss).item().is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: "discriminator".into(),
                        step: opt.steps() as usize,
                        loss: "loss_disc".into(),
                    });
                }
                let grads = g.backward(loss);
                opt.step(&mut self.params, &p.grads(&grads));
            }
        }
        self.trained = true;
        self.accuracy(if heldout.is_empty() { train } else { heldout })
    }

    pub fn write_checkpoint(&self, c: &mut Checkpoint) {
        c.set_meta("disc_embed_dim", self.config.embed_dim as u64);
        c.set_meta("disc_channels", self.config.channels as u64);
        c.set_meta(
            "disc_widths",
            self.config.widths.iter().map(|&w| w as u64).collect::<Vec<_>>(),
        );
        c.set_meta("disc_trained", self.trained);
        c.add_store("disc", &self.params);
    }

    pub fn from_checkpoint(c: &Checkpoint, vocab_size: usize) -> Result<Self> {
        let widths = c
            .meta
            .get("disc_widths")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|w| w.as_u64()).map(|w| w as usize).collect())
            .ok_or_else(|| Error::Checkpoint("missing metadata `disc_widths`".into()))?;
        let config = CnnConfig {
            embed_dim: c.meta_usize("disc_embed_dim")?,
            channels: c.meta_usize("disc_channels")?,
            widths,
        };
        let mut d = CnnSentimentDiscriminator::new(vocab_size, config, 0);
        c.load_store("disc", &mut d.params)?;
        d.trained = c.meta.get("disc_trained").and_then(|v| v.as_bool()).unwrap_or(false);
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_synthetic_corpus, Sentence, SyntheticGrammar};
    use crate::gradcheck;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn small() -> CnnConfig {
        CnnConfig {
            embed_dim: 3,
            widths: vec![2, 3],
            channels: 2,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = CnnSentimentDiscriminator::new(6, small(), 1);
        let segs = Segments::from_lengths(&[4, 1, 3]);
        let ids = [3, 4, 5, 1, 2, 3, 0, 4];
        let inputs: Vec<Tensor> = d.params.iter().map(|(_, t)| t.clone()).collect();
        let r = gradcheck::check(&inputs, 1e-5, |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let logits = d.logits(g, &p, &ids, &segs).unwrap();
            let lp = g.log_softmax_rows(logits);
            nll_sum(g, lp, &[0, 1, 1])
        });
        assert!(r.max_rel_error < 1e-4, "rel err {}", r.max_rel_error);
    }

    fn corpus(seed: u64, n: usize) -> (Vec<LabeledSentence>, usize) {
        let g = SyntheticGrammar::restaurant(seed);
        let raw: Vec<Sentence> = generate_synthetic_corpus(&g, n)
            .unwrap()
            .into_iter()
            .map(|s| s.sentence)
            .collect();
        let v = build_vocabulary(&raw, 1).unwrap();
        (v.encode_all(&raw).unwrap(), v.len())
    }

    fn opts(epochs: usize) -> TrainOpts {
        TrainOpts {
            epochs,
            batch_size: 32,
            lr: 3e-3,
            seed: 2,
        }
    }

    #[test]
    fn learns_synthetic_sentiment() {
        let (data, v) = corpus(1, 1200);
        let (train, held) = data.split_at(1000);
        let mut d = CnnSentimentDiscriminator::new(v, CnnConfig::default(), 0);
        let acc = d.train(train, held, &opts(5), &mut Adam::new(3e-3)).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {acc}");
        assert!(d.is_trained());
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let (mut data, v) = corpus(2, 2400);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in data.iter_mut() {
            let l = if rng.random_bool(0.5) { Label::Positive } else { Label::Negative };
            *x = x.with_label(l);
        }
        let (train, held) = data.split_at(1200);
        let mut d = CnnSentimentDiscriminator::new(v, small(), 0);
        let acc = d.train(train, held, &opts(2), &mut Adam::new(1e-3)).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn rejects_single_class() {
        let (data, v) = corpus(3, 40);
        let neg: Vec<LabeledSentence> = data.into_iter().filter(|x| x.label() == Label::Negative).collect();
        let mut d = CnnSentimentDiscriminator::new(v, small(), 0);
        assert!(d.train(&neg, &[], &opts(1), &mut Adam::new(1e-3)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = CnnSentimentDiscriminator::new(9, small(), 4);
        let mut c = Checkpoint::new(crate::checkpoint::MLM_SCHEMA);
        d.write_checkpoint(&mut c);
        let c = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(CnnSentimentDiscriminator::from_checkpoint(&c, 9).unwrap(), d);
    }
}
