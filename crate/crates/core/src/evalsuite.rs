//! Transfer accuracy, BLEU, masking quality against planted positions, the
//! loss ablation protocol and the loss-weight sensitivity sweep, collected
//! into a versioned report.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cnn::CnnSentimentDiscriminator;
use crate::corpus::{Label, LabeledSentence, Polarity, SyntheticGrammar, Vocabulary};
use crate::disentangle::LossWeights;
use crate::error::{invalid, Error, Result};
use crate::mask_model::{DisentangledPair, MaskClassifier};
use crate::nn::{Adam, TrainOpts};
use crate::senti_mlm::{Decode, SentiMlm, TransferResult};
use crate::trainer::{reconstruction_rate, run_pipeline, PreparedData, TrainConfig};

pub const REPORT_SCHEMA: &str = "amst.eval_report/1";

/// Values each weight takes in a sensitivity sweep.
pub const SWEEP_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Header of the sweep and ablation tables.
pub const CSV_HEADER: &str = "param,value,acc,bleu,seed";

/// Decides which sentiment a sentence carries.
#[derive(Clone, Copy, Debug)]
pub enum Judge<'a> {
    /// Lexicon majority vote of the generating grammar.
    Grammar(&'a SyntheticGrammar),
    /// A classifier trained on the training split.
    Classifier(&'a CnnSentimentDiscriminator),
}

impl Judge<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Judge::Grammar(_) => "grammar",
            Judge::Classifier(_) => "cnn",
        }
    }

    /// One verdict per sequence; `None` when the grammar sees a tie.
    pub fn labels(&self, seqs: &[&[usize]], v: &Vocabulary) -> Result<Vec<Option<Label>>> {
        match self {
            Judge::Grammar(g) => Ok(seqs.iter().map(|s| g.judge(&v.decode(s))).collect()),
            Judge::Classifier(c) => {
                if !c.is_trained() {
                    return Err(Error::NotReady("the judge classifier has not been trained".into()));
                }
                Ok(c.predict(seqs)?.into_iter().map(Some).collect())
            }
        }
    }
}

/// Percentage of outputs the judge assigns to their target sentiment.
pub fn transfer_accuracy(outputs: &[TransferResult], judge: &Judge, v: &Vocabulary) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput("no transfer outputs to judge".into()));
    }
    let seqs: Vec<&[usize]> = outputs.iter().map(|r| r.output_ids.as_slice()).collect();
    let verdicts = judge.labels(&seqs, v)?;
    let hits = verdicts
        .iter()
        .zip(outputs)
        .filter(|(l, r)| **l == Some(r.target))
        .count();
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU up to 4-grams in [0, 100].
///
/// Unigram precision is unsmoothed; higher orders use `(matches + 1) /
/// (candidates + 1)`. The brevity penalty compares total output length with
/// total reference length.
pub fn bleu(outputs: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if outputs.len() != references.len() {
        return Err(invalid(format!(
            "{} outputs but {} references",
            outputs.len(),
            references.len()
        )));
    }
    let hyp_len: usize = outputs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Err(Error::EmptyInput("no output tokens to score".into()));
    }
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut matches, mut total) = (0usize, 0usize);
        for (h, r) in outputs.iter().zip(references) {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches += c.min(rc.get(g).copied().unwrap_or(0));
                total += c;
            }
        }
        let p = if n == 1 {
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Micro-averaged agreement of masked sets with planted positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingQuality {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub planted: usize,
}

/// Positions of lexicon sentiment words, one list per sentence.
pub fn planted_positions(data: &[LabeledSentence], g: &SyntheticGrammar) -> Vec<Vec<usize>> {
    data.iter()
        .map(|x| {
            (0..x.len())
                .filter(|&i| g.word_polarity(&x.tokens()[i]) != Polarity::Neutral)
                .collect()
        })
        .collect()
}

pub fn masking_quality(pairs: &[DisentangledPair], oracle: &[Vec<usize>]) -> Result<MaskingQuality> {
    if oracle.is_empty() || oracle.len() != pairs.len() {
        return Err(Error::EmptyInput(format!(
            "oracle annotations missing: {} pairs, {} annotated sentences",
            pairs.len(),
            oracle.len()
        )));
    }
    let (mut tp, mut predicted, mut planted) = (0usize, 0usize, 0usize);
    for (pair, gold) in pairs.iter().zip(oracle) {
        tp += gold.iter().filter(|&&i| pair.is_masked(i)).count();
        predicted += pair.masked.len();
        planted += gold.len();
    }
    if planted == 0 {
        return Err(Error::EmptyInput("oracle annotations contain no planted positions".into()));
    }
    Ok(MaskingQuality {
        precision: tp as f64 / predicted as f64,
        recall: tp as f64 / planted as f64,
        true_positives: tp,
        predicted,
        planted,
    })
}

/// Trains the CNN judge used on corpora without a grammar.
pub fn train_judge(cfg: &TrainConfig, data: &PreparedData) -> Result<CnnSentimentDiscriminator> {
    let mut judge = CnnSentimentDiscriminator::new(data.vocab.len(), cfg.cnn.clone(), cfg.stream_seed("judge.init"));
    let opts = TrainOpts {
        epochs: cfg.epochs.judge,
        batch_size: cfg.batch_size,
        lr: cfg.lr_disc,
        seed: cfg.stream_seed("judge.batches"),
    };
    judge.train(&data.train, &data.heldout, &opts, &mut Adam::new(cfg.lr_disc))?;
    Ok(judge)
}

/// Test-set transfers to the opposite sentiment and their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub judge: String,
    pub accuracy: f64,
    pub bleu: f64,
    pub masking: Option<MaskingQuality>,
    /// Fraction of masked originals recovered with target = source label.
    pub reconstruction: f64,
    pub pairs: Vec<DisentangledPair>,
    pub outputs: Vec<TransferResult>,
}

/// Transfers every test sentence to the opposite label with greedy decoding.
///
/// On synthetic data the grammar judges accuracy and supplies references
/// (planted words swapped to the target lexicon). Otherwise `judge` must be
/// given and the source sentences serve as references.
pub fn evaluate_models(
    data: &PreparedData,
    masker: &MaskClassifier,
    mlm: &SentiMlm,
    judge: Option<&CnnSentimentDiscriminator>,
) -> Result<Evaluation> {
    if data.test.is_empty() {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    let v = &data.vocab;
    let judge = match (&data.grammar, judge) {
        (Some(g), _) => Judge::Grammar(g),
        (None, Some(c)) => Judge::Classifier(c),
        (None, None) => return Err(Error::NotReady("real corpora need a trained judge classifier".into())),
    };
    let pairs = masker.split_all(&data.test, 256)?;
    let items: Vec<(&LabeledSentence, &DisentangledPair)> = data.test.iter().zip(&pairs).collect();
    let targets: Vec<Label> = data.test.iter().map(|x| x.label().opposite()).collect();
    let outputs = mlm.transfer_each(&items, &targets, Decode::Greedy, v)?;
    let hyps: Vec<Vec<String>> = outputs.iter().map(|r| r.output_tokens(v)).collect();
    let refs: Vec<Vec<String>> = match &data.grammar {
        Some(g) => data
            .test
            .iter()
            .zip(&targets)
            .map(|(x, &t)| g.reference(&v.decode(x.token_ids()), t))
            .collect(),
        None => data.test.iter().map(|x| v.decode(x.token_ids())).collect(),
    };
    let masking = match &data.grammar {
        Some(g) => Some(masking_quality(&pairs, &planted_positions(&data.test, g))?),
        None => None,
    };
    Ok(Evaluation {
        judge: judge.name().to_string(),
        accuracy: transfer_accuracy(&outputs, &judge, v)?,
        bleu: bleu(&hyps, &refs)?,
        masking,
        reconstruction: reconstruction_rate(mlm, masker, &data.test, v)?,
        pairs,
        outputs,
    })
}

/// ACC and BLEU of one trained configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub seed: u64,
    pub acc: f64,
    pub bleu: f64,
}

/// Trains the full pipeline under `cfg` and scores it on the test set.
pub fn pipeline_score(
    cfg: &TrainConfig,
    data: &PreparedData,
    judge: Option<&CnnSentimentDiscriminator>,
) -> Result<Score> {
    let out = run_pipeline(cfg, data, None, false)?;
    let e = evaluate_models(data, &out.masker, &out.mlm, judge)?;
    Ok(Score {
        seed: cfg.seed,
        acc: e.accuracy,
        bleu: e.bleu,
    })
}

/// A loss term removed by zeroing its weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    ClfS,
    ClfC,
    AdvS,
    AdvC,
    Senti,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::ClfS,
        Ablation::ClfC,
        Ablation::AdvS,
        Ablation::AdvC,
        Ablation::Senti,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::ClfS => "-L_clf(S)",
            Ablation::ClfC => "-L_clf(C)",
            Ablation::AdvS => "-L_adv(S)",
            Ablation::AdvC => "-L_adv(C)",
            Ablation::Senti => "-L_senti",
        }
    }

    /// The weight that is set to zero.
    pub fn weight(self) -> WeightParam {
        match self {
            Ablation::ClfS => WeightParam::Lambda(1),
            Ablation::AdvS => WeightParam::Lambda(2),
            Ablation::ClfC => WeightParam::Lambda(3),
            Ablation::AdvC => WeightParam::Lambda(4),
            Ablation::Senti => WeightParam::Theta(2),
        }
    }

    pub fn apply(self, w: &mut LossWeights) {
        self.weight().set(w, 0.0);
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full` or the removed term.
    pub name: String,
    pub runs: Vec<Score>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bleu_mean: f64,
    pub bleu_std: f64,
}

impl AblationRow {
    fn new(name: &str, runs: Vec<Score>) -> Self {
        let (acc_mean, acc_std) = mean_std(&runs.iter().map(|s| s.acc).collect::<Vec<_>>());
        let (bleu_mean, bleu_std) = mean_std(&runs.iter().map(|s| s.bleu).collect::<Vec<_>>());
        AblationRow {
            name: name.to_string(),
            runs,
            acc_mean,
            acc_std,
            bleu_mean,
            bleu_std,
        }
    }
}

/// The full model followed by one row per ablation, each scored under
/// every seed by `score`.
pub fn ablation_suite_with<F>(cfg: &TrainConfig, seeds: &[u64], mut score: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&TrainConfig) -> Result<Score>,
{
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let mut run = |weights: LossWeights| -> Result<Vec<Score>> {
        seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                c.weights = weights;
                score(&c)
            })
            .collect()
    };
    let mut rows = vec![AblationRow::new("full", run(cfg.weights)?)];
    for a in Ablation::ALL {
        let mut w = cfg.weights;
        a.apply(&mut w);
        rows.push(AblationRow::new(a.label(), run(w)?));
    }
    Ok(rows)
}

pub fn ablation_suite(
    cfg: &TrainConfig,
    data: &PreparedData,
    seeds: &[u64],
    judge: Option<&CnnSentimentDiscriminator>,
) -> Result<Vec<AblationRow>> {
    ablation_suite_with(cfg, seeds, |c| pipeline_score(c, data, judge))
}

/// Number of ablation rows whose mean ACC does not exceed the full model's.
pub fn ablation_wins(rows: &[AblationRow]) -> usize {
    match rows.split_first() {
        Some((full, rest)) => rest.iter().filter(|r| full.acc_mean >= r.acc_mean).count(),
        None => 0,
    }
}

/// One of the eight loss weights, numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightParam {
    Lambda(usize),
    Theta(usize),
}

impl WeightParam {
    pub const ALL: [WeightParam; 8] = [
        WeightParam::Lambda(1),
        WeightParam::Lambda(2),
        WeightParam::Lambda(3),
        WeightParam::Lambda(4),
        WeightParam::Theta(1),
        WeightParam::Theta(2),
        WeightParam::Theta(3),
        WeightParam::Theta(4),
    ];

    /// Accepts `lambda1`..`lambda4` and `theta1`..`theta4`, also spelled
    /// with the Greek letters.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, digits) = if let Some(d) = s.strip_prefix("lambda").or_else(|| s.strip_prefix('λ')) {
            (0, d)
        } else if let Some(d) = s.strip_prefix("theta").or_else(|| s.strip_prefix('θ')) {
            (1, d)
        } else {
            return Err(invalid(format!("unknown weight `{s}`; expected lambda1..lambda4 or theta1..theta4")));
        };
        match digits.parse::<usize>() {
            Ok(i @ 1..=4) if kind == 0 => Ok(WeightParam::Lambda(i)),
            Ok(i @ 1..=4) => Ok(WeightParam::Theta(i)),
            _ => Err(invalid(format!("unknown weight `{s}`; expected lambda1..lambda4 or theta1..theta4"))),
        }
    }

    pub fn name(self) -> String {
        match self {
            WeightParam::Lambda(i) => format!("lambda{i}"),
            WeightParam::Theta(i) => format!("theta{i}"),
        }
    }

    pub fn set(self, w: &mut LossWeights, value: f64) {
        match self {
            WeightParam::Lambda(i) => w.lambda[i - 1] = value,
            WeightParam::Theta(i) => w.theta[i - 1] = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub acc: f64,
    pub bleu: f64,
    pub seed: u64,
}

/// Scores `cfg` with `param` set to each grid value in turn, every other
/// setting unchanged.
pub fn sensitivity_sweep_with<F>(cfg: &TrainConfig, param: WeightParam, grid: &[f64], mut score: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(&TrainConfig) -> Result<Score>,
{
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut c = cfg.clone();
        param.set(&mut c.weights, value);
        c.weights.validate()?;
        let s = score(&c)?;
        rows.push(SweepRow {
            param: param.name(),
            value,
            acc: s.acc,
            bleu: s.bleu,
            seed: s.seed,
        });
    }
    Ok(rows)
}

pub fn sensitivity_sweep(
    cfg: &TrainConfig,
    data: &PreparedData,
    param: WeightParam,
    judge: Option<&CnnSentimentDiscriminator>,
) -> Result<Vec<SweepRow>> {
    sensitivity_sweep_with(cfg, param, &SWEEP_GRID, |c| pipeline_score(c, data, judge))
}

/// Rows under [`CSV_HEADER`].
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.param, r.value, r.acc, r.bleu, r.seed));
    }
    out
}

/// One line per row and seed under [`CSV_HEADER`]; `value` is 1 for the
/// full model and 0 for an ablated term.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let value = if r.name == "full" { 1 } else { 0 };
        for s in &r.runs {
            out.push_str(&format!("{},{},{},{},{}\n", r.name, value, s.acc, s.bleu, s.seed));
        }
    }
    out
}

/// Everything the suite measured for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config_digest: String,
    pub seed: u64,
    pub judge: String,
    pub test_sentences: usize,
    /// Percentage in [0, 100].
    pub transfer_accuracy: f64,
    /// In [0, 100].
    pub bleu: f64,
    pub masking: Option<MaskingQuality>,
    pub reconstruction: f64,
    pub ablations: Vec<AblationRow>,
    pub sweeps: Vec<SweepRow>,
}

impl EvalReport {
    pub fn new(cfg: &TrainConfig, e: &Evaluation) -> Self {
        EvalReport {
            schema: REPORT_SCHEMA.to_string(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            judge: e.judge.clone(),
            test_sentences: e.outputs.len(),
            transfer_accuracy: e.accuracy,
            bleu: e.bleu,
            masking: e.masking,
            reconstruction: e.reconstruction,
            ablations: Vec::new(),
            sweeps: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(invalid(format!(
                "report schema `{}` is not `{REPORT_SCHEMA}`",
                r.schema
            )));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        EvalReport::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn bleu_matches_hand_counted_fixture() {
        let hyp = toks(&[
            "the food was fresh and the service was good",
            "my pasta came cold",
            "staff were rude but quick today",
        ]);
        let refs = toks(&[
            "the food was fresh and the service was great",
            "my pasta came hot",
            "the staff were friendly and quick",
        ]);
        // matches/candidates per order: 14/19, 10/16, 7/13, 5/10; equal lengths
        let logs = (14.0f64 / 19.0).ln() + (11.0f64 / 17.0).ln() + (8.0f64 / 14.0).ln() + (6.0f64 / 11.0).ln();
        let expected = 100.0 * (logs / 4.0).exp();
        let got = bleu(&hyp, &refs).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn bleu_identity_zero_overlap_and_brevity() {
        let x = toks(&["a b c d e", "f g"]);
        assert_eq!(bleu(&x, &x).unwrap(), 100.0);
        assert_eq!(bleu(&toks(&["p q r"]), &toks(&["a b c"])).unwrap(), 0.0);
        let short = bleu(&toks(&["a b"]), &toks(&["a b c d"])).unwrap();
        // p1 = 1, p2 = 2/2, p3 = 1/1, p4 = 1/1; BP = exp(1 - 4/2)
        assert!((short - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!(bleu(&x, &x[..1]).is_err());
        assert!(bleu(&[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn masking_quality_counts() {
        let pairs = vec![
            DisentangledPair::from_masked(5, &[1, 3]).unwrap(),
            DisentangledPair::from_masked(4, &[0, 1, 2]).unwrap(),
        ];
        let oracle = vec![vec![1, 4], vec![2]];
        let q = masking_quality(&pairs, &oracle).unwrap();
        assert_eq!((q.true_positives, q.predicted, q.planted), (2, 5, 3));
        assert_eq!(q.precision, 0.4);
        assert_eq!(q.recall, 2.0 / 3.0);
        assert!(masking_quality(&pairs, &[]).is_err());
    }

    #[test]
    fn full_masking_has_planted_density_precision() {
        let pairs = vec![DisentangledPair::from_masked(4, &[0, 1, 2, 3]).unwrap()];
        let q = masking_quality(&pairs, &[vec![2]]).unwrap();
        assert_eq!((q.precision, q.recall), (0.25, 1.0));
    }

    fn result(ids: Vec<usize>, target: Label) -> TransferResult {
        TransferResult {
            output_ids: ids,
            target,
            masked: vec![],
            distributions: vec![],
        }
    }

    #[test]
    fn grammar_judged_accuracy_counts_planted_outcomes() {
        let g = SyntheticGrammar::restaurant(0);
        let words: Vec<String> = ["the", "food", "was"]
            .iter()
            .map(|s| s.to_string())
            .chain(g.positive().iter().cloned())
            .chain(g.negative().iter().cloned())
            .collect();
        let v = Vocabulary::from_tokens(words.iter()).unwrap();
        let good = v.id(&g.positive()[0]).unwrap();
        let bad = v.id(&g.negative()[0]).unwrap();
        let food = v.id("food").unwrap();
        let mut outputs: Vec<TransferResult> = (0..9).map(|_| result(vec![food, good], Label::Positive)).collect();
        outputs.push(result(vec![food, bad], Label::Positive));
        let acc = transfer_accuracy(&outputs, &Judge::Grammar(&g), &v).unwrap();
        assert_eq!(acc, 90.0);
        outputs.reverse();
        assert_eq!(transfer_accuracy(&outputs, &Judge::Grammar(&g), &v).unwrap(), 90.0);
        assert!(transfer_accuracy(&[], &Judge::Grammar(&g), &v).is_err());
        let untrained = CnnSentimentDiscriminator::new(v.len(), Default::default(), 0);
        assert!(matches!(
            transfer_accuracy(&outputs, &Judge::Classifier(&untrained), &v),
            Err(Error::NotReady(_))
        ));
    }

    #[test]
    fn ablation_rows_follow_the_table() {
        let labels: Vec<&str> = Ablation::ALL.iter().map(|a| a.label()).collect();
        assert_eq!(labels, ["-L_clf(S)", "-L_clf(C)", "-L_adv(S)", "-L_adv(C)", "-L_senti"]);
        let cfg = TrainConfig::default();
        let mut seen = Vec::new();
        let rows = ablation_suite_with(&cfg, &[1, 2], |c| {
            seen.push(c.weights);
            Ok(Score {
                seed: c.seed,
                acc: 50.0 + c.weights.lambda.iter().chain(&c.weights.theta).sum::<f64>(),
                bleu: c.seed as f64,
            })
        })
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(seen.len(), 12);
        assert_eq!(seen[2].lambda, [0.0, 0.1, 0.4, 0.3]);
        assert_eq!(seen[10].theta, [0.4, 0.0, 0.1, 0.3]);
        assert_eq!(ablation_wins(&rows), 5);
        assert_eq!((rows[0].bleu_mean, rows[0].bleu_std), (1.5, 0.5f64.sqrt()));
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("param,value,acc,bleu,seed\nfull,1,"));
    }

    #[test]
    fn constant_model_gives_a_flat_sweep() {
        let cfg = TrainConfig::default();
        let mut rows = Vec::new();
        for p in WeightParam::ALL {
            rows.extend(
                sensitivity_sweep_with(&cfg, p, &SWEEP_GRID, |c| {
                    Ok(Score {
                        seed: c.seed,
                        acc: 70.0,
                        bleu: 30.0,
                    })
                })
                .unwrap(),
            );
        }
        assert_eq!(rows.len(), 48);
        assert!(rows.iter().all(|r| r.acc == 70.0));
        let values: Vec<f64> = rows[..6].iter().map(|r| r.value).collect();
        assert_eq!(values, SWEEP_GRID);
        assert_eq!(sweep_csv(&rows[..6]).lines().nth(2).unwrap(), "lambda1,0.1,70,30,13");
    }

    #[test]
    fn sweep_sets_only_the_named_weight() {
        let cfg = TrainConfig::default();
        let mut seen = Vec::new();
        sensitivity_sweep_with(&cfg, WeightParam::Theta(3), &[0.5], |c| {
            seen.push(c.weights);
            Ok(Score { seed: 0, acc: 0.0, bleu: 0.0 })
        })
        .unwrap();
        assert_eq!(seen[0].theta, [0.4, 0.2, 0.5, 0.3]);
        assert_eq!(seen[0].lambda, LossWeights::default().lambda);
    }

    #[test]
    fn weight_names_parse() {
        for p in WeightParam::ALL {
            assert_eq!(WeightParam::parse(&p.name()).unwrap(), p);
        }
        assert_eq!(WeightParam::parse("λ1").unwrap(), WeightParam::Lambda(1));
        assert_eq!(WeightParam::parse("θ4").unwrap(), WeightParam::Theta(4));
        for bad in ["lambda0", "theta5", "tau", "lambda"] {
            assert!(WeightParam::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn report_round_trips_and_checks_schema() {
        let r = EvalReport {
            schema: REPORT_SCHEMA.into(),
            config_digest: "abc".into(),
            seed: 4,
            judge: "grammar".into(),
            test_sentences: 3,
            transfer_accuracy: 66.66666666666667,
            bleu: 12.5,
            masking: None,
            reconstruction: 0.9,
            ablations: vec![],
            sweeps: vec![],
        };
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let other = r.to_json().replace(REPORT_SCHEMA, "amst.eval_report/0");
        assert!(EvalReport::from_json(&other).is_err());
    }

    proptest! {
        #[test]
        fn metrics_ignore_ordering(perm_seed in 0u64..1000, n in 2usize..12) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            let pairs: Vec<DisentangledPair> = (0..n)
                .map(|i| DisentangledPair::from_masked(6, &[i % 6, (i * 7 + 1) % 6]).unwrap())
                .collect();
            let oracle: Vec<Vec<usize>> = (0..n).map(|i| vec![(i * 3) % 6]).collect();
            let q = masking_quality(&pairs, &oracle).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let p2: Vec<_> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let o2: Vec<_> = idx.iter().map(|&i| oracle[i].clone()).collect();
            prop_assert_eq!(masking_quality(&p2, &o2).unwrap(), q);
        }

        #[test]
        fn bleu_is_bounded_and_perfect_on_identity(words in proptest::collection::vec(
            proptest::collection::vec(0u8..6, 1..9), 1..5), other in proptest::collection::vec(
            proptest::collection::vec(0u8..6, 1..9), 1..5)) {
            let s = |xs: &Vec<Vec<u8>>| -> Vec<Vec<String>> {
                xs.iter().map(|w| w.iter().map(|c| format!("w{c}")).collect()).collect()
            };
            let a = s(&words);
            prop_assert_eq!(bleu(&a, &a).unwrap(), 100.0);
            let mut b = s(&other);
            b.resize(a.len(), vec!["w0".into()]);
            let score = bleu(&a, &b).unwrap();
            prop_assert!((0.0..=100.0).contains(&score));
        }
    }
}
