//! End-to-end training schedule.
//!
//! Stages, each ending in one checkpoint and one loss-trace file:
//!
//! | stage        | checkpoint          | trains                                                |
//! |--------------|---------------------|-------------------------------------------------------|
//! | `pretrain`   | `pretrain.ckpt`     | attention classifier, mask-head warm start, clf(S)    |
//! | `mask`       | `mask.ckpt`         | masker, clf(C), dis(S), dis(C) adversarially          |
//! | `mlm_stage1` | `mlm_stage1.ckpt`   | language model on reconstruction                      |
//! | `mlm_stage2` | `mlm_stage2.ckpt`   | + word polarity                                       |
//! | `mlm_stage3` | `mlm_stage3.ckpt`   | + transfer accuracy, with the CNN discriminator       |
//!
//! Every random stream is derived from the configured seed and the stream's
//! name, so identical configurations reproduce checkpoints bit-exactly.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, MASK_SCHEMA, MLM_SCHEMA};
use crate::cnn::CnnSentimentDiscriminator;
use crate::corpus::{
    bow_distribution, build_vocabulary, label_salient_ids, generate_synthetic_corpus, load_dataset, DatasetFormat,
    Label, LabeledSentence, Sentence, SyntheticGrammar, Vocabulary,
};
use crate::disentangle::{AdversarialTrainer, Auxiliaries};
use crate::error::{Error, Result};
use crate::mask_model::MaskClassifier;
use crate::nn::{shuffled_batches, Adam, TrainOpts};
use crate::senti_mlm::{
    polarity_from_grammar, polarity_from_pair, MlmExample, MlmInput, SentiMlm,
};

pub use config::{DataConfig, Epochs, TrainConfig};

pub const STAGES: [&str; 5] = ["pretrain", "mask", "mlm_stage1", "mlm_stage2", "mlm_stage3"];

/// Encoded splits plus the vocabulary and, for synthetic data, the grammar.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Vec<LabeledSentence>,
    pub heldout: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub grammar: Option<SyntheticGrammar>,
    /// Records dropped while loading or because no token is in the vocabulary.
    pub rejected: usize,
}

fn truncate(s: Sentence, max_len: usize) -> Sentence {
    if s.tokens.len() > max_len {
        Sentence {
            tokens: s.tokens[..max_len].to_vec(),
            label: s.label,
        }
    } else {
        s
    }
}

fn load_split(path: &Path, format: Option<DatasetFormat>) -> Result<(Vec<Sentence>, usize)> {
    let f = format.unwrap_or_else(|| DatasetFormat::from_path(path));
    let loaded = load_dataset(path, f)?;
    Ok((loaded.sentences, loaded.rejected.len()))
}

/// Loads or generates the corpus described by `cfg.data`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let max_len = cfg.mlm.max_len;
    let (train_raw, test_raw, grammar, mut rejected) = match (&cfg.data.train, &cfg.data.test) {
        (Some(train), Some(test)) => {
            let (mut tr, r1) = load_split(train, cfg.data.format)?;
            let (te, r2) = load_split(test, cfg.data.format)?;
            tr.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.stream_seed("data.split")));
            (tr, te, None, r1 + r2)
        }
        _ => {
            let grammar = match &cfg.data.grammar {
                Some(p) => SyntheticGrammar::load(p)?,
                None => SyntheticGrammar::restaurant(cfg.stream_seed("data.grammar")),
            };
            let n = cfg.data.synthetic_count + cfg.data.test_count;
            let corpus: Vec<Sentence> = generate_synthetic_corpus(&grammar, n)?
                .into_iter()
                .map(|s| s.sentence)
                .collect();
            let (test, train) = corpus.split_at(cfg.data.test_count);
            (train.to_vec(), test.to_vec(), Some(grammar), 0)
        }
    };
    if train_raw.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if test_raw.is_empty() {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    let train_raw: Vec<Sentence> = train_raw.into_iter().map(|s| truncate(s, max_len)).collect();
    let test_raw: Vec<Sentence> = test_raw.into_iter().map(|s| truncate(s, max_len)).collect();
    let min_count = cfg
        .data
        .min_count
        .unwrap_or(if grammar.is_some() { 1 } else { 2 });
    let vocab = build_vocabulary(&train_raw, min_count)?;
    let mut encoded = Vec::with_capacity(train_raw.len());
    for x in vocab.encode_all(&train_raw)? {
        if bow_distribution(&x, &vocab).is_ok() {
            encoded.push(x);
        } else {
            rejected += 1;
        }
    }
    let n_held = ((encoded.len() as f64) * cfg.data.heldout).round() as usize;
    if n_held >= encoded.len() {
        return Err(Error::EmptyInput("no training sentences left after the held-out split".into()));
    }
    let heldout = encoded.split_off(encoded.len() - n_held);
    Ok(PreparedData {
        train: encoded,
        heldout,
        test: vocab.encode_all(&test_raw)?,
        vocab,
        grammar,
        rejected,
    })
}

fn write_tsv(path: &Path, data: &[LabeledSentence]) -> Result<()> {
    let mut out = String::new();
    for x in data {
        out.push_str(&format!("{}\t{}\n", x.text(), x.label().index()));
    }
    fs::write(path, out)?;
    Ok(())
}

impl PreparedData {
    pub const FILES: [&'static str; 4] = ["train.tsv", "heldout.tsv", "test.tsv", "vocab.txt"];

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_tsv(&dir.join("train.tsv"), &self.train)?;
        write_tsv(&dir.join("heldout.tsv"), &self.heldout)?;
        write_tsv(&dir.join("test.tsv"), &self.test)?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_text())?;
        let grammar = dir.join("grammar.txt");
        match &self.grammar {
            Some(g) => fs::write(grammar, g.to_text())?,
            None if grammar.exists() => fs::remove_file(grammar)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for f in PreparedData::FILES {
            if !dir.join(f).exists() {
                return Err(Error::MissingDependency {
                    artifact: dir.join(f).display().to_string(),
                    command: "prepare-data".into(),
                });
            }
        }
        let vocab = Vocabulary::from_text(&fs::read_to_string(dir.join("vocab.txt"))?)?;
        let read = |name: &str| -> Result<Vec<LabeledSentence>> {
            let loaded = load_dataset(&dir.join(name), DatasetFormat::Tsv)?;
            vocab.encode_all(&loaded.sentences)
        };
        let grammar_path = dir.join("grammar.txt");
        Ok(PreparedData {
            train: read("train.tsv")?,
            heldout: read("heldout.tsv")?,
            test: read("test.tsv")?,
            grammar: if grammar_path.exists() {
                Some(SyntheticGrammar::load(&grammar_path)?)
            } else {
                None
            },
            vocab,
            rejected: 0,
        })
    }

    /// Training sentences followed by held-out ones.
    pub fn labeled(&self) -> Vec<LabeledSentence> {
        self.train.iter().chain(&self.heldout).cloned().collect()
    }
}

/// One optimization step in a loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub losses: BTreeMap<String, f64>,
}

/// Loss trace and summary metrics of one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    pub records: Vec<TraceRecord>,
    pub metrics: BTreeMap<String, f64>,
}

impl StageLog {
    fn new(name: &str) -> Self {
        StageLog {
            name: name.to_string(),
            ..StageLog::default()
        }
    }

    fn push(&mut self, epoch: usize, seed: u64, losses: BTreeMap<String, f64>) {
        let step = self.records.len();
        self.records.push(TraceRecord {
            stage: self.name.clone(),
            epoch,
            step,
            seed,
            losses,
        });
    }

    /// Per-epoch means of every logged loss.
    pub fn epoch_means(&self) -> Vec<BTreeMap<String, f64>> {
        let mut out: Vec<(BTreeMap<String, f64>, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (BTreeMap::new(), 0));
            }
            let (sums, n) = &mut out[r.epoch];
            for (k, v) in &r.losses {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
            *n += 1;
        }
        out.into_iter()
            .map(|(sums, n)| sums.into_iter().map(|(k, v)| (k, v / n.max(1) as f64)).collect())
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace records serialize") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

fn check(stage: &str, step: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            stage: stage.to_string(),
            step,
            loss: name.to_string(),
        })
    }
}

fn opts(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> TrainOpts {
    TrainOpts {
        epochs,
        batch_size,
        lr,
        seed,
    }
}

/// Stage `pretrain`: attention classifier, mask-head warm start and the
/// frozen sentiment classifier.
pub fn pretrain(cfg: &TrainConfig, data: &PreparedData) -> Result<(MaskClassifier, Auxiliaries, StageLog)> {
    let mut log = StageLog::new("pretrain");
    let mut masker = MaskClassifier::new(data.vocab.len(), cfg.mask, cfg.stream_seed("masker.init"));
    let mut aux = Auxiliaries::new(&data.vocab, cfg.aux_dim, cfg.stream_seed("aux.init"));
    aux.set_pooling(cfg.aux_pooling);
    if cfg.aux_salience > 0.0 {
        let ids = label_salient_ids(&data.train, &data.vocab, cfg.aux_salience);
        log.metrics.insert("content_excluded_words".into(), ids.len() as f64);
        aux.set_content_excluded(ids);
    }
    let bs = cfg.batch_size;
    let acc = masker.pretrain_sentiment_attention(
        &data.train,
        &data.heldout,
        &opts(cfg.epochs.mask_pretrain, bs, cfg.lr_mask, cfg.stream_seed("pretrain.mask")),
    )?;
    log.metrics.insert("mask_classifier_accuracy".into(), acc);
    if cfg.epochs.warm_start > 0 {
        let loss = masker.warm_start_from_attention(
            &data.train,
            &opts(cfg.epochs.warm_start, bs, cfg.lr_mask, cfg.stream_seed("pretrain.warm")),
        )?;
        log.metrics.insert("warm_start_loss".into(), loss);
    }
    let acc = aux.pretrain_clf_s(
        &data.train,
        &data.heldout,
        &data.vocab,
        &opts(cfg.epochs.clf_s, bs, cfg.lr_mask, cfg.stream_seed("pretrain.clf_s")),
    )?;
    log.metrics.insert("clf_s_accuracy".into(), acc);
    Ok((masker, aux, log))
}

/// Stage `mask`: the two-step adversarial schedule.
pub fn train_mask(
    cfg: &TrainConfig,
    data: &PreparedData,
    masker: &mut MaskClassifier,
    aux: &mut Auxiliaries,
) -> Result<StageLog> {
    let mut log = StageLog::new("mask");
    let seed = cfg.stream_seed("mask.batches");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trainer = AdversarialTrainer::new(cfg.weights, cfg.lr_mask);
    for epoch in 0..cfg.epochs.adversarial {
        for idx in shuffled_batches(data.train.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&LabeledSentence> = idx.iter().map(|&i| &data.train[i]).collect();
            let rec = trainer.step(masker, aux, &batch, &data.vocab)?;
            let mut losses: BTreeMap<String, f64> = rec
                .losses
                .named()
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect();
            losses.insert("total".into(), rec.total);
            log.push(epoch, seed, losses);
        }
    }
    Ok(log)
}

/// Language-model examples from the masker's hard splits of the training data.
pub fn mlm_examples(data: &PreparedData, masker: &MaskClassifier) -> Result<Vec<MlmExample>> {
    let pairs = masker.split_all(&data.train, 256)?;
    data.train
        .iter()
        .zip(&pairs)
        .map(|(x, pair)| {
            let gold = match &data.grammar {
                Some(g) => polarity_from_grammar(x, g),
                None => polarity_from_pair(x, pair),
            };
            MlmExample::new(x, pair, gold, &data.vocab)
        })
        .collect()
}

pub fn new_mlm(cfg: &TrainConfig, data: &PreparedData) -> Result<SentiMlm> {
    SentiMlm::new(data.vocab.len(), cfg.mlm, cfg.stream_seed("mlm.init"))
}

pub fn new_discriminator(cfg: &TrainConfig, data: &PreparedData) -> CnnSentimentDiscriminator {
    CnnSentimentDiscriminator::new(data.vocab.len(), cfg.cnn.clone(), cfg.stream_seed("disc.init"))
}

/// Which loss terms a language-model stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MlmStage {
    Reconstruction,
    Polarity,
    Transfer,
}

fn mlm_stage(
    cfg: &TrainConfig,
    data: &PreparedData,
    examples: &[MlmExample],
    mlm: &mut SentiMlm,
    mut disc: Option<&mut CnnSentimentDiscriminator>,
    stage: MlmStage,
) -> Result<StageLog> {
    let (name, epochs) = match stage {
        MlmStage::Reconstruction => ("mlm_stage1", cfg.epochs.stage1),
        MlmStage::Polarity => ("mlm_stage2", cfg.epochs.stage2),
        MlmStage::Transfer => ("mlm_stage3", cfg.epochs.stage3),
    };
    let mut log = StageLog::new(name);
    if examples.is_empty() {
        return Err(Error::EmptyInput("no language-model training examples".into()));
    }
    let seed = cfg.stream_seed(name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr_mlm);
    let mut disc_opt = Adam::new(cfg.lr_disc);
    let [t1, t2, t3, t4] = cfg.weights.theta;
    for epoch in 0..epochs {
        if let Some(d) = disc.as_deref_mut() {
            let acc = d.train(
                &data.train,
                &data.heldout,
                &opts(cfg.epochs.disc, cfg.batch_size, cfg.lr_disc, cfg.stream_seed(&format!("disc.epoch{epoch}"))),
                &mut disc_opt,
            )?;
            log.metrics.insert("discriminator_accuracy".into(), acc);
        }
        for idx in shuffled_batches(examples.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&MlmExample> = idx.iter().map(|&i| &examples[i]).collect();
            let step = log.records.len();
            let mut g = Graph::new();
            let p = mlm.params.bind(&mut g, true);
            let (_, l) = mlm.losses(&mut g, &p, &batch)?;
            let rec = g.value(l.rec).item();
            check(name, step, "loss_rec", rec)?;
            let mut losses = BTreeMap::from([("loss_rec".to_string(), rec)]);
            let total = match stage {
                MlmStage::Reconstruction => l.rec,
                MlmStage::Polarity => {
                    let senti = g.value(l.senti).item();
                    check(name, step, "loss_senti", senti)?;
                    losses.insert("loss_senti".into(), senti);
                    let a = g.scale(l.rec, t1);
                    let b = g.scale(l.senti, t2);
                    g.add(a, b)
                }
                MlmStage::Transfer => {
                    let d = disc.as_deref().expect("stage 3 has a discriminator");
                    let inputs: Vec<MlmInput> = batch
                        .iter()
                        .map(|e| MlmInput {
                            ids: &e.masked_ids,
                            label: e.label.opposite(),
                        })
                        .collect();
                    let masked: Vec<&[usize]> = batch.iter().map(|e| e.masked.as_slice()).collect();
                    let f = mlm.forward(&mut g, &p, &inputs)?;
                    let dp = d.params.bind(&mut g, false);
                    let acc = mlm.loss_acc(&mut g, &f, &inputs, &masked, d, &dp)?;
                    let acc_value = g.value(acc).item();
                    check(name, step, "loss_acc", acc_value)?;
                    losses.insert("loss_acc".into(), acc_value);
                    let a = g.scale(l.rec, t3);
                    let b = g.scale(acc, t4);
                    g.add(a, b)
                }
            };
            losses.insert("total".into(), g.value(total).item());
            let grads = g.backward(total);
            opt.step(&mut mlm.params, &p.grads(&grads));
            log.push(epoch, seed, losses);
        }
    }
    Ok(log)
}

pub fn mlm_stage1(cfg: &TrainConfig, data: &PreparedData, ex: &[MlmExample], mlm: &mut SentiMlm) -> Result<StageLog> {
    mlm_stage(cfg, data, ex, mlm, None, MlmStage::Reconstruction)
}

pub fn mlm_stage2(cfg: &TrainConfig, data: &PreparedData, ex: &[MlmExample], mlm: &mut SentiMlm) -> Result<StageLog> {
    mlm_stage(cfg, data, ex, mlm, None, MlmStage::Polarity)
}

/// Each epoch first trains `disc` on gold sentences, then the generator.
pub fn mlm_stage3(
    cfg: &TrainConfig,
    data: &PreparedData,
    ex: &[MlmExample],
    mlm: &mut SentiMlm,
    disc: &mut CnnSentimentDiscriminator,
) -> Result<StageLog> {
    mlm_stage(cfg, data, ex, mlm, Some(disc), MlmStage::Transfer)
}

/// Everything a full run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub masker: MaskClassifier,
    pub aux: Auxiliaries,
    pub mlm: SentiMlm,
    pub disc: CnnSentimentDiscriminator,
    pub report: TrainingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub resumed: bool,
    pub epochs: Vec<BTreeMap<String, f64>>,
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub config_digest: String,
    pub clf_s_digest_pretrained: String,
    pub clf_s_digest_final: String,
    pub stages: Vec<StageSummary>,
}

impl TrainingReport {
    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub fn checkpoint_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.ckpt"))
}

pub fn trace_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.trace.jsonl"))
}

fn stamp(c: &mut Checkpoint, cfg: &TrainConfig, stage: &str) {
    c.set_meta("stage", stage);
    c.set_meta("seed", cfg.seed);
    c.set_meta("config_digest", cfg.digest());
}

pub fn mask_checkpoint(cfg: &TrainConfig, data: &PreparedData, stage: &str, m: &MaskClassifier, aux: &Auxiliaries) -> Checkpoint {
    let mut c = m.to_checkpoint(&data.vocab.hash());
    aux.write_checkpoint(&mut c);
    stamp(&mut c, cfg, stage);
    c
}

pub fn mlm_checkpoint(
    cfg: &TrainConfig,
    data: &PreparedData,
    stage: &str,
    mlm: &SentiMlm,
    disc: Option<&CnnSentimentDiscriminator>,
) -> Checkpoint {
    let mut c = mlm.to_checkpoint(&data.vocab.hash());
    if let Some(d) = disc {
        d.write_checkpoint(&mut c);
    }
    stamp(&mut c, cfg, stage);
    c
}

pub fn load_mask_checkpoint(path: &Path, data: &PreparedData, command: &str) -> Result<(MaskClassifier, Auxiliaries)> {
    let c = read_required(path, command)?;
    c.expect_schema(MASK_SCHEMA)?;
    let masker = MaskClassifier::from_checkpoint(&c, &data.vocab.hash())?;
    let aux = Auxiliaries::from_checkpoint(&c, &data.vocab)?;
    Ok((masker, aux))
}

pub fn load_mlm_checkpoint(
    path: &Path,
    data: &PreparedData,
    command: &str,
) -> Result<(SentiMlm, Option<CnnSentimentDiscriminator>)> {
    let c = read_required(path, command)?;
    c.expect_schema(MLM_SCHEMA)?;
    let mlm = SentiMlm::from_checkpoint(&c, &data.vocab.hash())?;
    let disc = if c.has_store("disc") {
        Some(CnnSentimentDiscriminator::from_checkpoint(&c, data.vocab.len())?)
    } else {
        None
    };
    Ok((mlm, disc))
}

fn read_required(path: &Path, command: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingDependency {
            artifact: path.display().to_string(),
            command: command.to_string(),
        });
    }
    Checkpoint::load(path)
}

/// Returns the checkpoint at `path` when it was written by this exact
/// configuration for `stage`.
fn resumable(path: &Path, cfg: &TrainConfig, stage: &str) -> Option<Checkpoint> {
    let c = Checkpoint::load(path).ok()?;
    let same = c.meta_str("stage").ok() == Some(stage) && c.meta_str("config_digest").ok() == Some(cfg.digest().as_str());
    same.then_some(c)
}

/// Runs every stage in order. With `dir`, writes one checkpoint and one
/// trace per stage there; with `resume`, stages whose checkpoint was
/// written by the same configuration are loaded instead of retrained.
pub fn run_pipeline(cfg: &TrainConfig, data: &PreparedData, dir: Option<&Path>, resume: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let mut stages = Vec::new();
    let vocab_hash = data.vocab.hash();

    let finish = |name: &str, log: Option<StageLog>, c: &Checkpoint, stages: &mut Vec<StageSummary>| -> Result<()> {
        let resumed = log.is_none();
        let log = log.unwrap_or_else(|| StageLog::new(name));
        if let Some(d) = dir {
            if !resumed {
                c.save(&checkpoint_path(d, name))?;
                log.write_jsonl(&trace_path(d, name))?;
            }
        }
        stages.push(StageSummary {
            name: name.to_string(),
            resumed,
            epochs: log.epoch_means(),
            metrics: log.metrics,
            checkpoint_digest: c.digest(),
        });
        Ok(())
    };
    let prior = |stage: &str| -> Option<Checkpoint> {
        if !resume {
            return None;
        }
        dir.and_then(|d| resumable(&checkpoint_path(d, stage), cfg, stage))
    };

    let (mut masker, mut aux) = match prior("pretrain") {
        Some(c) => {
            let m = MaskClassifier::from_checkpoint(&c, &vocab_hash)?;
            let a = Auxiliaries::from_checkpoint(&c, &data.vocab)?;
            finish("pretrain", None, &c, &mut stages)?;
            (m, a)
        }
        None => {
            let (m, a, log) = pretrain(cfg, data)?;
            finish("pretrain", Some(log), &mask_checkpoint(cfg, data, "pretrain", &m, &a), &mut stages)?;
            (m, a)
        }
    };
    let clf_s_digest_pretrained = aux.clf_s_digest();

    match prior("mask") {
        Some(c) => {
            masker = MaskClassifier::from_checkpoint(&c, &vocab_hash)?;
            aux.read_checkpoint(&c)?;
            finish("mask", None, &c, &mut stages)?;
        }
        None => {
            let log = train_mask(cfg, data, &mut masker, &mut aux)?;
            finish("mask", Some(log), &mask_checkpoint(cfg, data, "mask", &masker, &aux), &mut stages)?;
        }
    }

    let examples = mlm_examples(data, &masker)?;
    let mut mlm = new_mlm(cfg, data)?;
    let mut disc = new_discriminator(cfg, data);
    for (i, stage) in ["mlm_stage1", "mlm_stage2", "mlm_stage3"].into_iter().enumerate() {
        if let Some(c) = prior(stage) {
            mlm = SentiMlm::from_checkpoint(&c, &vocab_hash)?;
            if c.has_store("disc") {
                disc = CnnSentimentDiscriminator::from_checkpoint(&c, data.vocab.len())?;
            }
            finish(stage, None, &c, &mut stages)?;
            continue;
        }
        let log = match i {
            0 => mlm_stage1(cfg, data, &examples, &mut mlm)?,
            1 => mlm_stage2(cfg, data, &examples, &mut mlm)?,
            _ => mlm_stage3(cfg, data, &examples, &mut mlm, &mut disc)?,
        };
        let d = (i == 2).then_some(&disc);
        finish(stage, Some(log), &mlm_checkpoint(cfg, data, stage, &mlm, d), &mut stages)?;
    }

    let report = TrainingReport {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        clf_s_digest_final: aux.clf_s_digest(),
        clf_s_digest_pretrained,
        stages,
    };
    if let Some(d) = dir {
        fs::write(
            d.join("training_report.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    Ok(PipelineOutput {
        masker,
        aux,
        mlm,
        disc,
        report,
    })
}

/// Fraction of masked originals the model recovers under greedy decoding
/// when conditioned on each sentence's own label.
pub fn reconstruction_rate(mlm: &SentiMlm, masker: &MaskClassifier, data: &[LabeledSentence], v: &Vocabulary) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no sentences".into()));
    }
    let pairs = masker.split_all(data, 256)?;
    let items: Vec<(&LabeledSentence, &crate::mask_model::DisentangledPair)> = data.iter().zip(&pairs).collect();
    let labels: Vec<Label> = data.iter().map(|x| x.label()).collect();
    let out = mlm.transfer_each(&items, &labels, crate::senti_mlm::Decode::Greedy, v)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, x) in out.iter().zip(data) {
        for &i in &r.masked {
            total += 1;
            hit += usize::from(r.output_ids[i] == x.token_ids()[i]);
        }
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::CnnConfig;
    use crate::mask_model::MaskConfig;
    use crate::senti_mlm::MlmConfig;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig {
            seed: 3,
            epochs: Epochs {
                mask_pretrain: 1,
                warm_start: 1,
                clf_s: 1,
                adversarial: 1,
                stage1: 1,
                stage2: 1,
                stage3: 1,
                disc: 1,
                judge: 1,
            },
            mask: MaskConfig {
                embed_dim: 8,
                hidden: 8,
                attn_dim: 8,
                tau: 0.5,
            },
            aux_dim: 8,
            mlm: MlmConfig {
                layers: 1,
                dim: 16,
                heads: 2,
                ffn_dim: 16,
                max_len: 64,
            },
            cnn: CnnConfig {
                embed_dim: 8,
                widths: vec![2, 3],
                channels: 4,
            },
            ..TrainConfig::default()
        };
        cfg.data.synthetic_count = 240;
        cfg.data.test_count = 40;
        cfg
    }

    #[test]
    fn prepared_data_round_trips_through_files() {
        let cfg = tiny();
        let data = prepare_data(&cfg).unwrap();
        assert_eq!(data.train.len() + data.heldout.len(), 240);
        assert_eq!(data.heldout.len(), 24);
        assert_eq!(data.test.len(), 40);
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        assert_eq!(PreparedData::load(dir.path()).unwrap(), data);
    }

    #[test]
    fn missing_data_names_the_producing_command() {
        let dir = tempfile::tempdir().unwrap();
        match PreparedData::load(dir.path()) {
            Err(Error::MissingDependency { command, .. }) => assert_eq!(command, "prepare-data"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let cfg = tiny();
        let data = prepare_data(&cfg).unwrap();
        let a = run_pipeline(&cfg, &data, None, false).unwrap();
        let b = run_pipeline(&cfg, &data, None, false).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.mlm, b.mlm);
        let mut other = cfg.clone();
        other.seed = 4;
        let c = run_pipeline(&other, &prepare_data(&other).unwrap(), None, false).unwrap();
        assert_ne!(a.report.stages[4].checkpoint_digest, c.report.stages[4].checkpoint_digest);
    }

    #[test]
    fn sentiment_classifier_is_frozen_after_pretraining() {
        let cfg = tiny();
        let out = run_pipeline(&cfg, &prepare_data(&cfg).unwrap(), None, false).unwrap();
        assert_eq!(out.report.clf_s_digest_pretrained, out.report.clf_s_digest_final);
    }

    #[test]
    fn resume_reuses_checkpoints_and_matches_a_fresh_run() {
        let cfg = tiny();
        let data = prepare_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fresh = run_pipeline(&cfg, &data, Some(dir.path()), false).unwrap();
        for s in STAGES {
            assert!(checkpoint_path(dir.path(), s).exists(), "{s}");
            assert!(trace_path(dir.path(), s).exists(), "{s}");
        }
        fs::remove_file(checkpoint_path(dir.path(), "mlm_stage3")).unwrap();
        let resumed = run_pipeline(&cfg, &data, Some(dir.path()), true).unwrap();
        let flags: Vec<bool> = resumed.report.stages.iter().map(|s| s.resumed).collect();
        assert_eq!(flags, [true, true, true, true, false]);
        let digests = |r: &TrainingReport| r.stages.iter().map(|s| s.checkpoint_digest.clone()).collect::<Vec<_>>();
        assert_eq!(digests(&fresh.report), digests(&resumed.report));
    }

    #[test]
    fn resume_ignores_checkpoints_of_another_configuration() {
        let cfg = tiny();
        let data = prepare_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, &data, Some(dir.path()), false).unwrap();
        let mut other = cfg.clone();
        other.lr_mlm = 1e-3;
        let out = run_pipeline(&other, &data, Some(dir.path()), true).unwrap();
        assert!(out.report.stages.iter().all(|s| !s.resumed));
    }

    #[test]
    fn loaders_refuse_wrong_schema_and_missing_files() {
        let cfg = tiny();
        let data = prepare_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, &data, Some(dir.path()), false).unwrap();
        let (m, a) = load_mask_checkpoint(&checkpoint_path(dir.path(), "mask"), &data, "train-mask").unwrap();
        assert_eq!(a.dim(), cfg.aux_dim);
        assert_eq!(m.vocab_size(), data.vocab.len());
        let (_, disc) = load_mlm_checkpoint(&checkpoint_path(dir.path(), "mlm_stage3"), &data, "train-mlm").unwrap();
        assert!(disc.unwrap().is_trained());
        assert!(matches!(
            load_mask_checkpoint(&checkpoint_path(dir.path(), "mlm_stage1"), &data, "train-mask"),
            Err(Error::Checkpoint(_))
        ));
        match load_mlm_checkpoint(&dir.path().join("absent.ckpt"), &data, "train-mlm") {
            Err(Error::MissingDependency { command, .. }) => assert_eq!(command, "train-mlm"),
            other => panic!("unexpected {other:?}"),
        }
        let path = checkpoint_path(dir.path(), "mask");
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(load_mask_checkpoint(&path, &data, "train-mask").is_err());
    }

    #[test]
    fn zero_epochs_leave_the_language_model_at_initialization() {
        let mut cfg = tiny();
        cfg.epochs = Epochs::zero();
        let data = prepare_data(&cfg).unwrap();
        let out = run_pipeline(&cfg, &data, None, false).unwrap();
        assert_eq!(out.mlm, new_mlm(&cfg, &data).unwrap());
        assert!(out.report.stages.iter().all(|s| s.epochs.is_empty()));
    }

    #[test]
    fn stage3_without_discriminator_epochs_is_rejected() {
        let mut cfg = tiny();
        cfg.epochs.disc = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "epochs.disc"));
    }

    #[test]
    fn reconstruction_loss_decreases() {
        let mut cfg = tiny();
        cfg.epochs = Epochs {
            stage1: 4,
            ..Epochs::zero()
        };
        cfg.lr_mlm = 3e-3;
        let data = prepare_data(&cfg).unwrap();
        let masker = MaskClassifier::new(data.vocab.len(), cfg.mask, 0);
        let ex = mlm_examples(&data, &masker).unwrap();
        let mut mlm = new_mlm(&cfg, &data).unwrap();
        let log = mlm_stage1(&cfg, &data, &ex, &mut mlm).unwrap();
        let means = log.epoch_means();
        assert_eq!(means.len(), 4);
        assert!(means.windows(2).all(|w| w[1]["loss_rec"] < w[0]["loss_rec"]), "{means:?}");
    }

    #[test]
    fn trace_lines_are_json_records() {
        let mut log = StageLog::new("mask");
        log.push(0, 9, BTreeMap::from([("total".to_string(), 1.5)]));
        log.push(1, 9, BTreeMap::from([("total".to_string(), 0.5)]));
        let lines: Vec<TraceRecord> = log
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, log.records);
        assert_eq!(lines[1].step, 1);
        assert_eq!(log.epoch_means()[1]["total"], 0.5);
    }
}
