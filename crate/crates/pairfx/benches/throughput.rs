//! Sequential vs parallel throughput for the data-parallel hot paths:
//! dictionary entity extraction over a synthetic corpus and batch pair
//! scoring with an untrained cross-attention model.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pairfx::corpus::{extract_entities, EntityDictionary, RawSentence};
use pairfx::pairs::PairExample;
use pairfx::par::{map_items_par, map_items_seq};
use pairfx::rng::SplitMix64;
use pairfx::stage1::{self, ModelKind, Stage1Config, Stage1Model, Vocabulary};

fn synthetic_corpus(n: usize) -> (Vec<RawSentence>, EntityDictionary) {
    let terms = ["shirt", "jeans", "boots", "skirt", "jacket", "scarf"];
    let dict = EntityDictionary::from_terms(terms.iter().map(|t| t.to_string())).unwrap();
    let fillers = ["cozy", "bright", "vintage", "slim", "bold", "classic"];
    let mut rng = SplitMix64::new(42);
    let sentences = (0..n)
        .map(|i| {
            let a = terms[rng.next_below(terms.len())];
            let b = terms[rng.next_below(terms.len())];
            let f = fillers[rng.next_below(fillers.len())];
            let g = fillers[rng.next_below(fillers.len())];
            RawSentence {
                id: format!("s{i}"),
                text: format!("the {f} {a} pairs well with those {g} {b} today"),
                source: String::new(),
            }
        })
        .collect();
    (sentences, dict)
}

fn bench_entity_extraction(c: &mut Criterion) {
    let (sentences, dict) = synthetic_corpus(2000);
    let mut group = c.benchmark_group("entity_extraction");
    group.bench_with_input(BenchmarkId::new("seq", sentences.len()), &sentences, |b, s| {
        b.iter(|| map_items_seq(s, |sentence| extract_entities(sentence, &dict).len()))
    });
    group.bench_with_input(BenchmarkId::new("par", sentences.len()), &sentences, |b, s| {
        b.iter(|| map_items_par(s, |sentence| extract_entities(sentence, &dict).len()))
    });
    group.finish();
}

fn bench_pair_scoring(c: &mut Criterion) {
    let pairs = stage1::synthetic_signal_pairs(256, 5, 7);
    let texts = pairs.iter().flat_map(|p| [p.t_a.as_str(), p.t_b.as_str()]);
    let config = Stage1Config {
        kind: ModelKind::CrossAttn,
        embed_dim: 32,
        hidden: 32,
        seed: 7,
        ..Stage1Config::default()
    };
    let model = Stage1Model::init(&config, Vocabulary::build(texts)).unwrap();
    let score = |model: &Stage1Model, p: &PairExample| model.score_texts(&p.t_a, &p.t_b).unwrap();

    let mut group = c.benchmark_group("pair_scoring");
    group.sample_size(20);
    group.bench_with_input(BenchmarkId::new("seq", pairs.len()), &pairs, |b, ps| {
        b.iter(|| map_items_seq(ps, |p| score(&model, p)))
    });
    group.bench_with_input(BenchmarkId::new("par", pairs.len()), &pairs, |b, ps| {
        b.iter(|| map_items_par(ps, |p| score(&model, p)))
    });
    group.finish();
}

criterion_group!(benches, bench_entity_extraction, bench_pair_scoring);
criterion_main!(benches);
