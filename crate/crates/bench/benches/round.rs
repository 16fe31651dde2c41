use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedlora_bench::prepared;
use fedlora_core::aggregation::{aggregate, influence_weights, validation_loss};
use fedlora_core::codec::{deserialize_adapters, serialize_adapters};
use fedlora_core::federation::run_federation;
use fedlora_core::model::local_update;
use fedlora_core::{AggregationRule, ClientId, Strategy, WeightMode};

fn round_pieces(c: &mut Criterion) {
    let (config, p) = prepared("two_site.toml", 1);
    let sgd = config.federation.sgd;
    let site = &p.sites[0].examples;

    c.bench_function("local_update/one_epoch_2000", |b| {
        b.iter(|| local_update(black_box(&p.model), site, &sgd, 1).unwrap())
    });

    let updates: BTreeMap<ClientId, _> = p
        .sites
        .iter()
        .enumerate()
        .map(|(k, s)| (ClientId(k), local_update(&p.model, &s.examples, &sgd, k as u64).unwrap()))
        .collect();
    let sizes: BTreeMap<ClientId, u64> = p.sites.iter().enumerate().map(|(k, s)| (ClientId(k), s.len() as u64)).collect();

    c.bench_function("server/validation_losses", |b| {
        b.iter(|| {
            updates
                .values()
                .map(|u| validation_loss(&p.model, u, &p.validation).unwrap())
                .collect::<Vec<_>>()
        })
    });

    let losses: BTreeMap<ClientId, f64> = updates
        .iter()
        .map(|(&k, u)| (k, validation_loss(&p.model, u, &p.validation).unwrap()))
        .collect();
    let (weights, _) = influence_weights(&losses, &sizes, WeightMode::Normalized).unwrap();
    c.bench_function("server/aggregate", |b| {
        b.iter(|| aggregate(black_box(&updates), &weights, AggregationRule::MedLora).unwrap())
    });

    let one = &updates[&ClientId(0)];
    c.bench_function("codec/round_trip", |b| {
        b.iter(|| deserialize_adapters(&serialize_adapters(black_box(one))).unwrap())
    });
}

fn short_federation(c: &mut Criterion) {
    let (config, p) = prepared("smoke.toml", 1);
    let fed = config.federation_config(Strategy::FedMedLoRAPlus, p.sites.len(), 1);
    let mut group = c.benchmark_group("federation");
    group.sample_size(10);
    group.bench_function("smoke_plus", |b| {
        b.iter(|| run_federation(&fed, &p.sites, Some(&p.validation), &p.model).unwrap())
    });
    group.finish();
}

criterion_group!(benches, round_pieces, short_federation);
criterion_main!(benches);
