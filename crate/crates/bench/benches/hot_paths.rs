use amst_bench::synthetic;
use amst_core::autograd::Graph;
use amst_core::disentangle::{AdversarialTrainer, Auxiliaries, LossWeights};
use amst_core::evalsuite::bleu;
use amst_core::mask_model::{MaskClassifier, MaskConfig};
use amst_core::nn::TrainOpts;
use amst_core::senti_mlm::{MlmConfig, MlmInput, SentiMlm};
use amst_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let a = Tensor::from_vec(64, 128, (0..64 * 128).map(|i| (i % 7) as f64 * 0.1).collect());
    let b = Tensor::from_vec(128, 128, (0..128 * 128).map(|i| (i % 5) as f64 * 0.1).collect());
    c.bench_function("matmul 64x128x128 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.input(a.clone());
            let w = g.input(b.clone());
            let y = g.matmul(x, w);
            let y = g.tanh(y);
            let l = g.sum(y);
            black_box(g.backward(l));
        })
    });
}

fn masker(c: &mut Criterion) {
    let (v, data) = synthetic(64);
    let batch: Vec<_> = data[..32].iter().collect();
    let m = MaskClassifier::new(v.len(), MaskConfig::default(), 1);
    c.bench_function("masker inference, batch 32", |bench| bench.iter(|| black_box(m.infer(&batch).unwrap())));

    let mut m = m;
    let mut aux = Auxiliaries::new(&v, 64, 2);
    let opts = TrainOpts {
        epochs: 1,
        batch_size: 32,
        lr: 1e-3,
        seed: 0,
    };
    aux.pretrain_clf_s(&data, &[], &v, &opts).unwrap();
    let mut trainer = AdversarialTrainer::new(LossWeights::default(), 1e-3);
    c.bench_function("adversarial step, batch 32", |bench| {
        bench.iter(|| black_box(trainer.step(&mut m, &mut aux, &batch, &v).unwrap()))
    });
}

fn language_model(c: &mut Criterion) {
    let (v, data) = synthetic(64);
    let mlm = SentiMlm::new(v.len(), MlmConfig::default(), 3).unwrap();
    let inputs: Vec<MlmInput> = data[..32]
        .iter()
        .map(|x| MlmInput {
            ids: x.token_ids(),
            label: x.label(),
        })
        .collect();
    c.bench_function("language model forward, batch 32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = mlm.params.bind(&mut g, false);
            black_box(mlm.forward(&mut g, &p, &inputs).unwrap().token_logits);
        })
    });
}

fn corpus_bleu(c: &mut Criterion) {
    let (v, data) = synthetic(1000);
    let refs: Vec<Vec<String>> = data.iter().map(|x| v.decode(x.token_ids())).collect();
    let hyps: Vec<Vec<String>> = refs.iter().rev().cloned().collect();
    c.bench_function("corpus BLEU, 1000 sentences", |bench| bench.iter(|| black_box(bleu(&hyps, &refs).unwrap())));
}

criterion_group!(benches, matmul, masker, language_model, corpus_bleu);
criterion_main!(benches);
