//! Data-parallel workloads. Run once with default features and once with
//! `--no-default-features` to compare the rayon and sequential paths, e.g.
//!
//! ```text
//! cargo bench -p instructasr --bench parallel -- --save-baseline rayon
//! cargo bench -p instructasr --bench parallel --no-default-features -- --baseline rayon
//! ```

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use instructasr::decode::{decode_batch, decode_utterance, DecodeConfig};
use instructasr::eval::{evaluate_suite, ModelExecutor, SuiteConfig};
use instructasr::instructions::InstructionBank;
use instructasr::model::{Model, ModelConfig};
use instructasr::par;
use instructasr::pipeline::{ExperimentConfig, Prepared, TrainingData};
use instructasr::synthaudio::{build_corpus, CorpusSpec, MaskPolicy, SynthConfig, DEFAULT_LEXICON};

fn mode() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn setup() -> (ExperimentConfig, Prepared, Model<f32>) {
    let cfg = ExperimentConfig {
        corpus: CorpusSpec { train: 64, dev: 8, test: 8, min_words: 3, max_words: 8 },
        ..ExperimentConfig::default()
    };
    let prep = Prepared::build(&cfg, InstructionBank::bundled()).unwrap();
    let model = Model::init(ModelConfig { vocab_size: prep.vocab.size(), ..cfg.model.clone() }, 0).unwrap();
    (cfg, prep, model)
}

fn corpus_generation(c: &mut Criterion) {
    let spec = CorpusSpec { train: 400, dev: 0, test: 0, min_words: 3, max_words: 8 };
    let cfg = SynthConfig::default();
    c.bench_with_input(BenchmarkId::new("corpus_generation", mode()), &spec, |b, spec| {
        b.iter(|| black_box(build_corpus(&DEFAULT_LEXICON, spec, &cfg).unwrap()))
    });
}

fn batch_gradient(c: &mut Criterion) {
    let (cfg, prep, model) = setup();
    let data = TrainingData {
        utterances: &prep.corpus.train,
        bank: &prep.bank,
        vocab: &prep.vocab,
        ctx: &prep.ctx,
        sampler: cfg.sampler.clone(),
        augment: MaskPolicy::default(),
        model: model.config.clone(),
        batch_size: 32,
        target_only_loss: false,
    };
    let batch = data.batch(1).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    group.bench_function(BenchmarkId::new("assemble", mode()), |b| b.iter(|| black_box(data.batch(1).unwrap())));
    group.bench_function(BenchmarkId::new("loss_and_grad", mode()), |b| {
        b.iter(|| black_box(model.loss_and_grad(&batch, None).unwrap()))
    });
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let (_, prep, model) = setup();
    let decode = DecodeConfig { beam: 4, max_len: Some(12), ..DecodeConfig::default() };
    let jobs: Vec<_> = prep
        .corpus
        .dev
        .iter()
        .map(|u| (u.id.clone(), u.features.clone(), "Please transcribe the speech".to_owned()))
        .collect();
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("batch", mode()), |b| {
        b.iter(|| black_box(decode_batch(&model, &prep.vocab, &jobs, &decode)))
    });
    group.bench_function(BenchmarkId::new("batch", "plain_loop"), |b| {
        b.iter(|| {
            let out: Vec<_> =
                jobs.iter().map(|(id, f, i)| decode_utterance(&model, &prep.vocab, id, f, i, &decode)).collect();
            black_box(out)
        })
    });
    group.finish();
}

fn eval_pairs(c: &mut Criterion) {
    let (_, prep, model) = setup();
    let exec = ModelExecutor {
        model: &model,
        vocab: &prep.vocab,
        decode: DecodeConfig { beam: 2, max_len: Some(8), ..DecodeConfig::default() },
    };
    let suite = SuiteConfig { seen_per_skill: 2, unseen_per_skill: 2, ..SuiteConfig::default() };
    let mut group = c.benchmark_group("eval_suite");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("pairs", mode()), |b| {
        b.iter(|| black_box(evaluate_suite(&exec, &prep.corpus.test, &prep.bank, &prep.ctx, &suite)))
    });
    group.finish();
}

criterion_group!(benches, corpus_generation, batch_gradient, decoding, eval_pairs);
criterion_main!(benches);
