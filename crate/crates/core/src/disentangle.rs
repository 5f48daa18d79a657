//! The four auxiliary softmax classifiers, their losses and the two-step
//! adversarial update that trains the masker.
//!
//! Every classifier reads the mean of gated token embeddings: the sentiment
//! set S uses gates `g_i`, the content set C uses `1 - g_i`, both divided by
//! the sentence length. During training the gates are the masker's soft
//! probabilities so the objective stays differentiable.
//!
//! | model    | input | predicts          | role                         |
//! |----------|-------|-------------------|------------------------------|
//! | `clf_s`  | S     | sentence label    | pretrained, then frozen      |
//! | `clf_c`  | C     | bag of words      | trained with the masker      |
//! | `dis_s`  | C     | sentence label    | discriminator                |
//! | `dis_c`  | S     | bag of words      | discriminator                |
//!
//! Bag-of-words heads cover regular vocabulary entries only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{bow_distribution, LabeledSentence, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::losses::{entropy_sum, nll_sum, soft_ce_sum};
use crate::mask_model::{DisentangledPair, MaskClassifier};
use crate::nn::{shuffled_batches, Adam, Bound, Embedding, Linear, ParamStore, TrainOpts};
use crate::tensor::{Segments, Tensor};

/// Weights of the masking objective (`lambda`) and of the language-model
/// stage losses (`theta`: reconstruction, polarity, transfer accuracy, spare).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: [f64; 4],
    pub theta: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [0.2, 0.1, 0.4, 0.3],
            theta: [0.4, 0.2, 0.1, 0.3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (i, x) in self.lambda.iter().chain(&self.theta).enumerate() {
            if !(x.is_finite() && *x >= 0.0) {
                let name = if i < 4 {
                    format!("lambda{}", i + 1)
                } else {
                    format!("theta{}", i - 3)
                };
                return Err(Error::Config {
                    key: name,
                    message: format!("weight must be a nonnegative number, got {x}"),
                });
            }
        }
        Ok(())
    }
}

/// `l1*clf_s - l2*adv_s + l3*clf_c - l4*adv_c`.
pub fn total_objective(w: &LossWeights, clf_s: f64, adv_s: f64, clf_c: f64, adv_c: f64) -> f64 {
    let [l1, l2, l3, l4] = w.lambda;
    l1 * clf_s - l2 * adv_s + l3 * clf_c - l4 * adv_c
}

/// Graph form of [`total_objective`].
pub fn total_objective_var(g: &mut Graph, w: &LossWeights, l: &AuxLosses<Var>) -> Var {
    let [l1, l2, l3, l4] = w.lambda;
    let a = g.scale(l.clf_s, l1);
    let b = g.scale(l.adv_s, -l2);
    let c = g.scale(l.clf_c, l3);
    let d = g.scale(l.adv_c, -l4);
    let ab = g.add(a, b);
    let cd = g.add(c, d);
    g.add(ab, cd)
}

/// Softmax classifier over the mean of gated token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub params: ParamStore,
    embedding: Embedding,
    head: Linear,
    classes: usize,
}

impl SoftmaxClassifier {
    pub fn new(vocab_size: usize, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let embedding = Embedding::new(&mut params, rng, "embedding", vocab_size, dim);
        let head = Linear::new(&mut params, rng, "head", dim, classes);
        SoftmaxClassifier {
            params,
            embedding,
            head,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `B x classes` logits; `weights` is the `T x 1` per-token pooling weight.
    pub fn logits(&self, g: &mut Graph, p: &Bound, ids: &[usize], weights: Var, segs: &Segments) -> Var {
        let emb = self.embedding.forward(g, p, ids);
        let summary = g.segment_weighted_sum(emb, weights, segs);
        self.head.forward(g, p, summary)
    }
}

/// One value per auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLosses<T> {
    pub clf_s: T,
    pub clf_c: T,
    pub dis_s: T,
    pub adv_s: T,
    pub dis_c: T,
    pub adv_c: T,
}

impl AuxLosses<f64> {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("loss_clf_s", self.clf_s),
            ("loss_clf_c", self.clf_c),
            ("loss_dis_s", self.dis_s),
            ("loss_adv_s", self.adv_s),
            ("loss_dis_c", self.dis_c),
            ("loss_adv_c", self.adv_c),
        ]
    }

    fn check_finite(&self, stage: &str, step: usize) -> Result<()> {
        match self.named().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFiniteLoss {
                stage: stage.to_string(),
                step,
                loss: name.to_string(),
            }),
            None => Ok(()),
        }
    }
}

/// Token ids, spans and targets of a batch.
pub struct AuxBatch {
    pub ids: Vec<usize>,
    pub segments: Segments,
    pub labels: Vec<usize>,
    /// `B x num_regular` bag-of-words targets.
    pub bow: Tensor,
    /// `T x 1` column of `1 / N` for each token's sentence.
    inv_len: Tensor,
    /// Sentence index of each token.
    seg_of: Vec<usize>,
}

impl AuxBatch {
    pub fn new(batch: &[&LabeledSentence], v: &Vocabulary) -> Result<Self> {
        AuxBatch::with_excluded(batch, v, &[])
    }

    /// Like [`AuxBatch::new`], with the vocabulary ids in `excluded` removed
    /// from the bag-of-words targets. A sentence made only of excluded words
    /// keeps its full bag of words.
    pub fn with_excluded(batch: &[&LabeledSentence], v: &Vocabulary, excluded: &[usize]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let lens: Vec<usize> = batch.iter().map(|x| x.len()).collect();
        let segments = Segments::from_lengths(&lens);
        let first = v.first_regular();
        let mut bow = Tensor::zeros(batch.len(), v.num_regular());
        let mut inv_len = Vec::with_capacity(segments.total());
        for (b, x) in batch.iter().enumerate() {
            let mut probs = bow_distribution(x, v)?.probs;
            let kept: f64 = 1.0 - excluded.iter().filter_map(|&id| probs.get(id)).sum::<f64>();
            if !excluded.is_empty() && kept > 1e-12 {
                for &id in excluded {
                    if let Some(p) = probs.get_mut(id) {
                        *p = 0.0;
                    }
                }
                probs.iter_mut().for_each(|p| *p /= kept);
            }
            bow.row_mut(b).copy_from_slice(&probs[first..]);
            inv_len.extend(std::iter::repeat_n(1.0 / x.len() as f64, x.len()));
        }
        Ok(AuxBatch {
            ids: batch.iter().flat_map(|x| x.token_ids().iter().copied()).collect(),
            labels: batch.iter().map(|x| x.label().index()).collect(),
            inv_len: Tensor::column(inv_len),
            seg_of: lens.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat_n(b, n)).collect(),
            segments,
            bow,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// How token gates turn into pooling weights for the auxiliary classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    /// `g_i / N`: a representation fades out as its gates shrink.
    Mean,
    /// `g_i / sum_j g_j`: a weighted average whose scale does not depend on
    /// how many tokens a representation holds.
    #[default]
    Normalized,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Normalized => "normalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Pooling::Mean),
            "normalized" => Some(Pooling::Normalized),
            _ => None,
        }
    }
}

/// Keeps normalized weights finite when every gate of a sentence is closed.
const POOL_EPS: f64 = 1e-3;

/// The four auxiliary classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct Auxiliaries {
    pub clf_s: SoftmaxClassifier,
    pub clf_c: SoftmaxClassifier,
    pub dis_s: SoftmaxClassifier,
    pub dis_c: SoftmaxClassifier,
    clf_s_pretrained: bool,
    /// Sorted vocabulary ids left out of the content bag-of-words targets.
    content_excluded: Vec<usize>,
    pooling: Pooling,
}

/// Bindings of the four classifiers on one tape.
pub struct AuxBound {
    pub clf_s: Bound,
    pub clf_c: Bound,
    pub dis_s: Bound,
    pub dis_c: Bound,
}

impl Auxiliaries {
    pub fn new(v: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = v.len();
        let r = v.num_regular();
        Auxiliaries {
            clf_s: SoftmaxClassifier::new(n, dim, 2, &mut rng),
            clf_c: SoftmaxClassifier::new(n, dim, r, &mut rng),
            dis_s: SoftmaxClassifier::new(n, dim, 2, &mut rng),
            dis_c: SoftmaxClassifier::new(n, dim, r, &mut rng),
            clf_s_pretrained: false,
            content_excluded: Vec::new(),
            pooling: Pooling::default(),
        }
    }

    /// Removes `ids` from every content bag-of-words target.
    pub fn set_content_excluded(&mut self, mut ids: Vec<usize>) {
        ids.sort_unstable();
        ids.dedup();
        self.content_excluded = ids;
    }

    pub fn set_pooling(&mut self, pooling: Pooling) {
        self.pooling = pooling;
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn content_excluded(&self) -> &[usize] {
        &self.content_excluded
    }

    /// Batch targets under this set's content filter.
    pub fn batch(&self, batch: &[&LabeledSentence], v: &Vocabulary) -> Result<AuxBatch> {
        AuxBatch::with_excluded(batch, v, &self.content_excluded)
    }

    pub fn clf_s_pretrained(&self) -> bool {
        self.clf_s_pretrained
    }

    /// Digest of the frozen sentiment classifier.
    pub fn clf_s_digest(&self) -> String {
        self.clf_s.params.digest()
    }

    /// Binds `clf_s` as constants always; the other three as requested.
    pub fn bind(&self, g: &mut Graph, train_clf_c: bool, train_dis: bool) -> AuxBound {
        AuxBound {
            clf_s: self.clf_s.params.bind(g, false),
            clf_c: self.clf_c.params.bind(g, train_clf_c),
            dis_s: self.dis_s.params.bind(g, train_dis),
            dis_c: self.dis_c.params.bind(g, train_dis),
        }
    }

    /// Mean per-sentence losses for S-gates `gates` (`T x 1`).
    pub fn losses(&self, g: &mut Graph, p: &AuxBound, batch: &AuxBatch, gates: Var) -> AuxLosses<Var> {
        let inv = g.constant(batch.inv_len.clone());
        let ones = g.constant(Tensor::filled(batch.segments.total(), 1, 1.0));
        let content_gates = g.sub(ones, gates);
        let (w_s, w_c) = match self.pooling {
            Pooling::Mean => (g.mul(gates, inv), g.mul(content_gates, inv)),
            Pooling::Normalized => (
                normalize_weights(g, gates, batch),
                normalize_weights(g, content_gates, batch),
            ),
        };
        let segs = &batch.segments;

        let ys_s = self.clf_s.logits(g, &p.clf_s, &batch.ids, w_s, segs);
        let yc_c = self.clf_c.logits(g, &p.clf_c, &batch.ids, w_c, segs);
        let ys_c = self.dis_s.logits(g, &p.dis_s, &batch.ids, w_c, segs);
        let yc_s = self.dis_c.logits(g, &p.dis_c, &batch.ids, w_s, segs);

        let mean = 1.0 / batch.size() as f64;
        let avg = |g: &mut Graph, v: Var| g.scale(v, mean);

        let lp = g.log_softmax_rows(ys_s);
        let clf_s = nll_sum(g, lp, &batch.labels);
        let lp = g.log_softmax_rows(yc_c);
        let clf_c = soft_ce_sum(g, lp, batch.bow.clone());
        let lp = g.log_softmax_rows(ys_c);
        let dis_s = nll_sum(g, lp, &batch.labels);
        let adv_s = entropy_sum(g, ys_c);
        let lp = g.log_softmax_rows(yc_s);
        let dis_c = soft_ce_sum(g, lp, batch.bow.clone());
        let adv_c = entropy_sum(g, yc_s);
        AuxLosses {
            clf_s: avg(g, clf_s),
            clf_c: avg(g, clf_c),
            dis_s: avg(g, dis_s),
            adv_s: avg(g, adv_s),
            dis_c: avg(g, dis_c),
            adv_c: avg(g, adv_c),
        }
    }

    /// Loss values for fixed splits, using each pair's gates.
    pub fn evaluate(
        &self,
        batch: &[&LabeledSentence],
        pairs: &[DisentangledPair],
        v: &Vocabulary,
    ) -> Result<AuxLosses<f64>> {
        if pairs.len() != batch.len() {
            return Err(invalid("one pair per sentence required"));
        }
        let mut gates = Vec::new();
        for (x, pair) in batch.iter().zip(pairs) {
            if pair.len() != x.len() {
                return Err(invalid("pair length differs from sentence length"));
            }
            gates.extend_from_slice(&pair.soft_gates);
        }
        let b = self.batch(batch, v)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false, false);
        let gv = g.constant(Tensor::column(gates));
        let l = self.losses(&mut g, &p, &b, gv);
        Ok(value_of(&g, &l))
    }

    /// Trains `clf_s` on full, ungated sentences; afterwards it is frozen.
    /// Returns accuracy on `heldout` (or `train` when `heldout` is empty).
    pub fn pretrain_clf_s(
        &mut self,
        train: &[LabeledSentence],
        heldout: &[LabeledSentence],
        v: &Vocabulary,
        opts: &TrainOpts,
    ) -> Result<f64> {
        if self.clf_s_pretrained {
            return Err(invalid("sentiment classifier is frozen"));
        }
        if train.is_empty() {
            return Err(Error::EmptyInput("no training sentences".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = Adam::new(opts.lr);
        for _ in 0..opts.epochs {
            for idx in shuffled_batches(train.len(), opts.batch_size, &mut rng) {
                let batch: Vec<&LabeledSentence> = idx.iter().map(|&i| &train[i]).collect();
                let b = AuxBatch::new(&batch, v)?;
                let mut g = Graph::new();
                let p = self.clf_s.params.bind(&mut g, true);
                let w = g.constant(b.inv_len.clone());
                let logits = self.clf_s.logits(&mut g, &p, &b.ids, w, &b.segments);
                let lp = g.log_softmax_rows(logits);
                let loss = nll_sum(&mut g, lp, &b.labels);
                if !g.value(loss).item().is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: "clf_s-pretrain".into(),
                        step: opt.steps() as usize,
                        loss: "loss_clf_s".into(),
                    });
                }
                let grads = g.backward(loss);
                opt.step(&mut self.clf_s.params, &p.grads(&grads));
            }
        }
        self.clf_s_pretrained = true;
        let eval = if heldout.is_empty() { train } else { heldout };
        self.clf_s_accuracy(eval, v)
    }

    pub fn clf_s_accuracy(&self, data: &[LabeledSentence], v: &Vocabulary) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no evaluation sentences".into()));
        }
        let mut correct = 0;
        for part in data.chunks(256) {
            let refs: Vec<&LabeledSentence> = part.iter().collect();
            let b = AuxBatch::new(&refs, v)?;
            let mut g = Graph::new();
            let p = self.clf_s.params.bind(&mut g, false);
            let w = g.constant(b.inv_len.clone());
            let logits = self.clf_s.logits(&mut g, &p, &b.ids, w, &b.segments);
            let l = g.value(logits);
            correct += (0..l.rows()).filter(|&r| l.argmax_row(r) == b.labels[r]).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Embedding width shared by the four classifiers.
    pub fn dim(&self) -> usize {
        self.clf_s.params.get(self.clf_s.embedding.table).cols()
    }

    pub fn write_checkpoint(&self, c: &mut Checkpoint) {
        c.set_meta("aux_dim", self.dim() as u64);
        c.set_meta("clf_s_pretrained", self.clf_s_pretrained);
        c.set_meta("pooling", self.pooling.name());
        c.set_meta(
            "content_excluded",
            self.content_excluded.iter().map(|&i| i as u64).collect::<Vec<_>>(),
        );
        c.add_store("clf_s", &self.clf_s.params);
        c.add_store("clf_c", &self.clf_c.params);
        c.add_store("dis_s", &self.dis_s.params);
        c.add_store("dis_c", &self.dis_c.params);
    }

    pub fn from_checkpoint(c: &Checkpoint, v: &Vocabulary) -> Result<Self> {
        let mut aux = Auxiliaries::new(v, c.meta_usize("aux_dim")?, 0);
        aux.read_checkpoint(c)?;
        Ok(aux)
    }

    pub fn read_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        c.load_store("clf_s", &mut self.clf_s.params)?;
        c.load_store("clf_c", &mut self.clf_c.params)?;
        c.load_store("dis_s", &mut self.dis_s.params)?;
        c.load_store("dis_c", &mut self.dis_c.params)?;
        self.clf_s_pretrained = c
            .meta
            .get("clf_s_pretrained")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        self.content_excluded = c
            .meta
            .get("content_excluded")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as usize).collect())
            .unwrap_or_default();
        self.pooling = match c.meta.get("pooling").and_then(|v| v.as_str()) {
            None => Pooling::default(),
            Some(s) => Pooling::parse(s)
                .ok_or_else(|| Error::Checkpoint(format!("unknown pooling {s:?}")))?,
        };
        Ok(())
    }
}

/// `w_i / (sum_j w_j + eps)` within each sentence.
fn normalize_weights(g: &mut Graph, w: Var, batch: &AuxBatch) -> Var {
    let ones = g.constant(Tensor::filled(batch.segments.total(), 1, 1.0));
    let mass = g.segment_weighted_sum(ones, w, &batch.segments);
    let mass = g.affine(mass, 1.0, POOL_EPS);
    let inv = g.recip(mass);
    let inv = g.gather_rows(inv, &batch.seg_of);
    g.mul(w, inv)
}

fn value_of(g: &Graph, l: &AuxLosses<Var>) -> AuxLosses<f64> {
    AuxLosses {
        clf_s: g.value(l.clf_s).item(),
        clf_c: g.value(l.clf_c).item(),
        dis_s: g.value(l.dis_s).item(),
        adv_s: g.value(l.adv_s).item(),
        dis_c: g.value(l.dis_c).item(),
        adv_c: g.value(l.adv_c).item(),
    }
}

/// Optimizer state for the adversarial masking stage.
pub struct AdversarialTrainer {
    pub weights: LossWeights,
    masker_opt: Adam,
    clf_c_opt: Adam,
    dis_s_opt: Adam,
    dis_c_opt: Adam,
    steps: usize,
}

/// Losses logged for one adversarial step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: AuxLosses<f64>,
    pub total: f64,
}

impl AdversarialTrainer {
    pub fn new(weights: LossWeights, lr: f64) -> Self {
        AdversarialTrainer {
            weights,
            masker_opt: Adam::new(lr),
            clf_c_opt: Adam::new(lr),
            dis_s_opt: Adam::new(lr),
            dis_c_opt: Adam::new(lr),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step 1 updates both discriminators with the masker fixed; step 2
    /// updates the masker and `clf_c` on the weighted objective with the
    /// discriminators fixed.
    pub fn step(
        &mut self,
        masker: &mut MaskClassifier,
        aux: &mut Auxiliaries,
        batch: &[&LabeledSentence],
        v: &Vocabulary,
    ) -> Result<StepRecord> {
        if !aux.clf_s_pretrained() {
            return Err(Error::NotReady("sentiment classifier has not been pretrained".into()));
        }
        let b = aux.batch(batch, v)?;
        let step = self.steps;

        let mut g = Graph::new();
        let mp = masker.params.bind(&mut g, false);
        let ap = aux.bind(&mut g, false, true);
        let f = masker.forward(&mut g, &mp, batch)?;
        let l = aux.losses(&mut g, &ap, &b, f.mask_probs);
        let first = value_of(&g, &l);
        first.check_finite("adversarial-discriminator", step)?;
        let dis = g.add(l.dis_s, l.dis_c);
        let grads = g.backward(dis);
        self.dis_s_opt.step(&mut aux.dis_s.params, &ap.dis_s.grads(&grads));
        self.dis_c_opt.step(&mut aux.dis_c.params, &ap.dis_c.grads(&grads));

        let mut g = Graph::new();
        let mp = masker.params.bind(&mut g, true);
        let ap = aux.bind(&mut g, true, false);
        let f = masker.forward(&mut g, &mp, batch)?;
        let l = aux.losses(&mut g, &ap, &b, f.mask_probs);
        let second = value_of(&g, &l);
        second.check_finite("adversarial-masker", step)?;
        let total = total_objective_var(&mut g, &self.weights, &l);
        let total_value = g.value(total).item();
        let grads = g.backward(total);
        self.masker_opt.step(&mut masker.params, &mp.grads(&grads));
        self.clf_c_opt.step(&mut aux.clf_c.params, &ap.clf_c.grads(&grads));

        self.steps += 1;
        Ok(StepRecord {
            step,
            losses: AuxLosses {
                clf_s: second.clf_s,
                clf_c: second.clf_c,
                dis_s: first.dis_s,
                adv_s: second.adv_s,
                dis_c: first.dis_c,
                adv_c: second.adv_c,
            },
            total: total_value,
        })
    }
}

/// Gradient of the weighted objective with respect to the masker parameters.
pub fn masker_gradient(
    masker: &MaskClassifier,
    aux: &Auxiliaries,
    batch: &[&LabeledSentence],
    v: &Vocabulary,
    w: &LossWeights,
) -> Result<Vec<Option<Tensor>>> {
    let b = aux.batch(batch, v)?;
    let mut g = Graph::new();
    let mp = masker.params.bind(&mut g, true);
    let ap = aux.bind(&mut g, false, false);
    let f = masker.forward(&mut g, &mp, batch)?;
    let l = aux.losses(&mut g, &ap, &b, f.mask_probs);
    let total = total_objective_var(&mut g, w, &l);
    let grads = g.backward(total);
    Ok(mp.grads(&grads))
}
