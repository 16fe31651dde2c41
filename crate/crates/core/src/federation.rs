//! Round protocol and baseline strategies.
//!
//! A federated run repeats `T` rounds. Each round samples `m` of the `K`
//! clients, lets every sampled client train from the adapters it received
//! (concurrently), moves the trained adapters to the server through the
//! binary codec, aggregates them and records a [`RoundTranscript`].
//!
//! Baselines reuse the same local training: `Centralized` is a single
//! client holding the pooled data, `SingleSite` trains every site on its own
//! data, and `ZeroShot` returns the initial adapters (`B = 0`), so its merged
//! weights equal the backbone.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, influence_weights, size_weights, validation_loss, Aggregated, AggregationRule, AggregationWeights,
    ClientId, InfluenceReport, WeightMode,
};
use crate::codec::{deserialize_adapters, serialize_adapters};
use crate::data::{self, SiteDataset};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::metrics::{bootstrap_ci_f1, relation_counts, span_counts, BootstrapConfig, Counts, RelationInstance};
use crate::metrics::{decode_bio, EvalReport, Scheme, Span};
use crate::model::{local_update, Example, Prediction, SgdConfig, Target, Task, ToyModel};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fed-medlora")]
    FedMedLoRA,
    #[serde(rename = "fed-medlora-plus")]
    FedMedLoRAPlus,
    #[serde(rename = "fedsa")]
    FedSA,
    #[serde(rename = "single-site")]
    SingleSite,
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "zero-shot")]
    ZeroShot,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedMedLoRA,
        Strategy::FedMedLoRAPlus,
        Strategy::FedSA,
        Strategy::SingleSite,
        Strategy::Centralized,
        Strategy::ZeroShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedMedLoRA => "fed-medlora",
            Strategy::FedMedLoRAPlus => "fed-medlora-plus",
            Strategy::FedSA => "fedsa",
            Strategy::SingleSite => "single-site",
            Strategy::Centralized => "centralized",
            Strategy::ZeroShot => "zero-shot",
        }
    }

    /// Whether the strategy runs the client/server round protocol.
    pub fn is_federated(self) -> bool {
        matches!(self, Strategy::FedMedLoRA | Strategy::FedMedLoRAPlus | Strategy::FedSA)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
                Error::Config(format!("unknown strategy `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub strategy: Strategy,
    /// `K`, the number of clients (sites).
    pub clients: usize,
    /// `m`, clients sampled per round.
    pub clients_per_round: usize,
    /// `T`.
    pub rounds: usize,
    pub sgd: SgdConfig,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return Err(Error::Config(format!(
                "clients_per_round must lie in 1..={}, got {}",
                self.clients, self.clients_per_round
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.sgd.validate()
    }
}

/// Traffic of one client in one round. `*_params` count adapter entries;
/// `*_bytes` is the size of what actually crossed the boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTraffic {
    pub client: ClientId,
    pub upload_params: u64,
    pub upload_bytes: u64,
    pub download_params: u64,
    pub download_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: usize,
    pub sampled: Vec<ClientId>,
    /// Server validation loss of every sampled client's upload
    /// (influence-aware strategy only).
    pub val_losses: Option<BTreeMap<ClientId, f64>>,
    pub influence: Option<InfluenceReport>,
    pub weights: AggregationWeights,
    pub traffic: Vec<ClientTraffic>,
    /// SHA-256 of the serialized global adapters after this round.
    pub global_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationResult {
    pub strategy: Strategy,
    /// Final global adapters. For FedSA this pairs the shared `A` with
    /// `B = 0`; the usable models are in `per_client`.
    pub global: AdapterSet,
    /// Per-site adapters for strategies that end with one model per site
    /// (FedSA and SingleSite).
    pub per_client: Option<BTreeMap<ClientId, AdapterSet>>,
    pub transcripts: Vec<RoundTranscript>,
}

impl FederationResult {
    /// The models to evaluate: the global adapters, or every per-site set.
    pub fn models(&self) -> Vec<&AdapterSet> {
        match &self.per_client {
            Some(sets) => sets.values().collect(),
            None => vec![&self.global],
        }
    }
}

/// `m` distinct clients out of `K`, uniformly without replacement,
/// determined by `(seed, t)` and returned in ascending order.
pub fn sample_clients(k: usize, m: usize, seed: u64, t: usize) -> Result<Vec<ClientId>> {
    if m == 0 || m > k {
        return Err(Error::InvalidInput(format!("cannot sample {m} of {k} clients")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, "sample", &[t as u64]));
    let mut ids: Vec<ClientId> = rand::seq::index::sample(&mut rng, k, m).into_iter().map(ClientId).collect();
    ids.sort();
    Ok(ids)
}

pub fn local_seed(seed: u64, round: usize, client: ClientId) -> u64 {
    seed::derive_indexed(seed, "local", &[round as u64, client.0 as u64])
}

fn checksum(adapters: &AdapterSet) -> String {
    seed::checksum(&serialize_adapters(adapters))
}

/// Runs the configured strategy. `model` supplies the frozen backbone and
/// the initial adapters; `validation` is the server set `D_v`, required by
/// the influence-aware strategy.
pub fn run_federation(
    config: &FederationConfig,
    sites: &[SiteDataset],
    validation: Option<&[Example]>,
    model: &ToyModel,
) -> Result<FederationResult> {
    config.validate()?;
    if let Some(site) = sites.iter().find(|s| s.is_empty()) {
        return Err(Error::InvalidInput(format!("site `{}` has no examples", site.spec.site_id)));
    }
    match config.strategy {
        Strategy::ZeroShot => Ok(FederationResult {
            strategy: Strategy::ZeroShot,
            global: model.adapters().clone(),
            per_client: None,
            transcripts: Vec::new(),
        }),
        Strategy::Centralized => {
            let pooled = data::pool("pooled", sites);
            let global = train_alone(model, &pooled.examples, config, ClientId(0))?;
            Ok(FederationResult {
                strategy: Strategy::Centralized,
                global,
                per_client: None,
                transcripts: Vec::new(),
            })
        }
        Strategy::SingleSite => {
            let per_client = sites
                .par_iter()
                .enumerate()
                .map(|(k, site)| Ok((ClientId(k), train_alone(model, &site.examples, config, ClientId(k))?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(FederationResult {
                strategy: Strategy::SingleSite,
                global: model.adapters().clone(),
                per_client: Some(per_client),
                transcripts: Vec::new(),
            })
        }
        Strategy::FedMedLoRA | Strategy::FedMedLoRAPlus | Strategy::FedSA => {
            if sites.len() != config.clients {
                return Err(Error::Config(format!(
                    "federation declares {} clients but {} sites were given",
                    config.clients,
                    sites.len()
                )));
            }
            if config.strategy == Strategy::FedMedLoRAPlus && validation.is_none_or(|v| v.is_empty()) {
                return Err(Error::InvalidInput(
                    "the influence-aware strategy needs a non-empty server validation set".into(),
                ));
            }
            run_rounds(config, sites, validation.unwrap_or(&[]), model)
        }
    }
}

/// `T` successive local updates of one client, `E` epochs each, with the
/// seeds a federated run would use for that client. A one-client federation
/// therefore reproduces this exactly.
fn train_alone(model: &ToyModel, data: &[Example], config: &FederationConfig, id: ClientId) -> Result<AdapterSet> {
    let mut current = model.adapters().clone();
    for t in 0..config.rounds {
        let start = model.with_adapters(current)?;
        current = local_update(&start, data, &config.sgd, local_seed(config.seed, t, id))?;
    }
    Ok(current)
}

fn run_rounds(
    config: &FederationConfig,
    sites: &[SiteDataset],
    validation: &[Example],
    model: &ToyModel,
) -> Result<FederationResult> {
    let rule = match config.strategy {
        Strategy::FedSA => AggregationRule::FedSa,
        _ => AggregationRule::MedLora,
    };
    let sizes_all: BTreeMap<ClientId, u64> =
        sites.iter().enumerate().map(|(k, s)| (ClientId(k), s.len() as u64)).collect();
    let n_total: u64 = sizes_all.values().sum();

    let mut global = model.adapters().clone();
    // FedSA keeps each client's B between rounds.
    let mut client_state: BTreeMap<ClientId, AdapterSet> = if rule == AggregationRule::FedSa {
        sizes_all.keys().map(|&k| (k, global.clone())).collect()
    } else {
        BTreeMap::new()
    };
    let mut transcripts = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let sampled = sample_clients(config.clients, config.clients_per_round, config.seed, t)?;

        // Client side: train from the received adapters and upload bytes.
        let uploads: BTreeMap<ClientId, Vec<u8>> = sampled
            .par_iter()
            .map(|&id| {
                let start = match rule {
                    AggregationRule::FedSa => &client_state[&id],
                    AggregationRule::MedLora => &global,
                };
                let trained = local_update(
                    &model.with_adapters(start.clone())?,
                    &sites[id.0].examples,
                    &config.sgd,
                    local_seed(config.seed, t, id),
                )?;
                Ok((id, serialize_adapters(&trained)))
            })
            .collect::<Result<_>>()?;

        // Server side.
        let received: BTreeMap<ClientId, AdapterSet> = uploads
            .iter()
            .map(|(&id, bytes)| Ok((id, deserialize_adapters(bytes)?)))
            .collect::<Result<_>>()?;
        let sizes: BTreeMap<ClientId, u64> = sampled.iter().map(|id| (*id, sizes_all[id])).collect();
        let (weights, val_losses, influence) = if config.strategy == Strategy::FedMedLoRAPlus {
            let losses = received
                .par_iter()
                .map(|(&id, set)| Ok((id, validation_loss(model, set, validation)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let (weights, report) = influence_weights(&losses, &sizes, config.weight_mode)?;
            (weights, Some(losses), Some(report))
        } else {
            (size_weights(&sizes, n_total, config.weight_mode)?, None, None)
        };

        let traffic: Vec<ClientTraffic>;
        match aggregate(&received, &weights, rule)? {
            Aggregated::Global(next) => {
                let down_bytes = serialize_adapters(&next).len() as u64;
                traffic = received
                    .iter()
                    .map(|(&id, set)| ClientTraffic {
                        client: id,
                        upload_params: set.param_count(),
                        upload_bytes: uploads[&id].len() as u64,
                        download_params: next.param_count(),
                        download_bytes: down_bytes,
                    })
                    .collect();
                global = next;
            }
            Aggregated::SharedA { a, personalized } => {
                traffic = received
                    .iter()
                    .map(|(&id, set)| ClientTraffic {
                        client: id,
                        upload_params: set.a_param_count(),
                        upload_bytes: 8 * set.a_param_count(),
                        download_params: set.a_param_count(),
                        download_bytes: 8 * set.a_param_count(),
                    })
                    .collect();
                let mut shared = global.with_zero_b();
                for (key, pair) in shared.iter_mut() {
                    pair.set_a(a[key].clone());
                }
                global = shared;
                client_state.extend(personalized);
            }
        }

        transcripts.push(RoundTranscript {
            round: t,
            sampled,
            val_losses,
            influence,
            weights,
            traffic,
            global_checksum: checksum(&global),
        });
    }

    Ok(FederationResult {
        strategy: config.strategy,
        global,
        per_client: (rule == AggregationRule::FedSa).then_some(client_state),
        transcripts,
    })
}

/// Same protocol as [`run_federation`] for sites whose declared task sets
/// differ. Each site's data must only contain examples of its declared
/// tasks; a client then only optimizes the losses its data supports.
pub fn uneven_task_run(
    config: &FederationConfig,
    sites: &[SiteDataset],
    validation: Option<&[Example]>,
    model: &ToyModel,
) -> Result<FederationResult> {
    for site in sites {
        if let Some(ex) = site.examples.iter().find(|ex| !site.spec.has_task(ex.task())) {
            return Err(Error::InvalidInput(format!(
                "site `{}` declares tasks {:?} but holds a {} example",
                site.spec.site_id,
                site.spec.tasks,
                ex.task()
            )));
        }
    }
    run_federation(config, sites, validation, model)
}

/// Per-example counts of one task under one scheme. Examples of the other
/// task are skipped.
pub fn example_counts(examples: &[Example], predictions: &[Prediction], task: Task, scheme: Scheme) -> Vec<Counts> {
    examples
        .iter()
        .zip(predictions)
        .filter_map(|(ex, pred)| match (&ex.target, pred) {
            (Target::Tags(gold), Prediction::Tags(tags)) if task == Task::Tagging => {
                Some(span_counts(&decode_bio(gold), &decode_bio(tags), scheme))
            }
            (&Target::Relation { head, tail, label }, &Prediction::Relation(predicted)) if task == Task::Relation => {
                let instance = |relation_type| {
                    let span = |pos: usize| Span::new(pos, pos + 1, entity_at(ex, pos));
                    RelationInstance {
                        head: span(head),
                        tail: span(tail),
                        relation_type,
                    }
                };
                let as_set = |r| if r == data::NO_RELATION { vec![] } else { vec![instance(r)] };
                Some(relation_counts(&as_set(label), &as_set(predicted), scheme))
            }
            _ => None,
        })
        .collect()
}

/// Entity type of the marked token in a relation example. The marked
/// tokens are `B` tokens; the tag is recoverable from the token id.
fn entity_at(ex: &Example, pos: usize) -> usize {
    let tag = ex.tokens[pos] % data::TAG_CLASSES;
    tag.saturating_sub(1) / 2
}

/// Strict and lenient reports for both tasks on one test set, each with a
/// bootstrap interval of micro F1. The bootstrap seed is derived from
/// `seed`, the task and the scheme.
pub fn evaluate(
    model: &ToyModel,
    adapters: &AdapterSet,
    test: &[Example],
    bootstrap: &BootstrapConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let predictions = model.with_adapters(adapters.clone())?.predict_all(test)?;
    let mut reports = Vec::with_capacity(4);
    for task in Task::ALL {
        for scheme in Scheme::ALL {
            let counts = example_counts(test, &predictions, task, scheme);
            let total: Counts = counts.iter().copied().sum();
            let mut report = EvalReport::from_counts(task, scheme, total);
            if !counts.is_empty() {
                let s = seed::derive(seed, &format!("bootstrap/{task}/{scheme}"));
                report = report.with_ci(bootstrap_ci_f1(&counts, bootstrap, s));
            }
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Metric-level mean of several report lists with the same layout, as used
/// for strategies that end with one model per site. Counts are summed;
/// precision, recall, F1 and interval bounds are averaged.
pub fn average_reports(lists: &[Vec<EvalReport>]) -> Vec<EvalReport> {
    let Some(first) = lists.first() else {
        return Vec::new();
    };
    if lists.len() == 1 {
        return first.clone();
    }
    let n = lists.len() as f64;
    (0..first.len())
        .map(|i| {
            let column: Vec<&EvalReport> = lists.iter().map(|l| &l[i]).collect();
            let mean = |f: &dyn Fn(&EvalReport) -> f64| column.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean_opt = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
                column
                    .iter()
                    .map(|r| f(r))
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| v.iter().sum::<f64>() / n)
            };
            EvalReport {
                task: first[i].task,
                scheme: first[i].scheme,
                tp: column.iter().map(|r| r.tp).sum(),
                fp: column.iter().map(|r| r.fp).sum(),
                fn_: column.iter().map(|r| r.fn_).sum(),
                precision: mean(&|r| r.precision),
                recall: mean(&|r| r.recall),
                f1: mean(&|r| r.f1),
                ci_lo: mean_opt(&|r| r.ci_lo),
                ci_hi: mean_opt(&|r| r.ci_hi),
            }
        })
        .collect()
}

/// Evaluates a result on one test set, averaging over per-site models where
/// the strategy has them.
pub fn evaluate_result(
    model: &ToyModel,
    result: &FederationResult,
    test: &[Example],
    bootstrap: &BootstrapConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let lists = result
        .models()
        .into_iter()
        .map(|adapters| evaluate(model, adapters, test, bootstrap, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_reports(&lists))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_site, make_validation_set, PlantedRule, SiteSpec};
    use crate::model::ModelConfig;

    fn rule() -> PlantedRule {
        PlantedRule {
            group_size: 4,
            window: 2,
        }
    }

    fn model() -> ToyModel {
        ToyModel::new(ModelConfig {
            vocab_size: rule().vocab_size(),
            hidden: 6,
            tag_classes: data::TAG_CLASSES,
            relation_classes: data::RELATION_CLASSES,
            rank: 2,
            alpha: 4.0,
            seed: 3,
        })
        .unwrap()
    }

    fn site(id: &str, n: usize, seed: u64) -> SiteDataset {
        generate_site(
            &SiteSpec {
                site_id: id.into(),
                n_examples: n,
                dirichlet_alpha: 1.0,
                noise_rate: 0.0,
                tasks: Task::ALL.to_vec(),
                token_shift: 0,
                seed,
            },
            &rule(),
        )
        .unwrap()
    }

    fn config(strategy: Strategy, k: usize, m: usize) -> FederationConfig {
        FederationConfig {
            strategy,
            clients: k,
            clients_per_round: m,
            rounds: 2,
            sgd: SgdConfig {
                learning_rate: 0.1,
                epochs: 1,
                batch_size: 8,
            },
            weight_mode: WeightMode::Normalized,
            seed: 11,
        }
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_clients(4, 4, 9, 0).unwrap(), (0..4).map(ClientId).collect::<Vec<_>>());
        assert_eq!(sample_clients(10, 3, 5, 2).unwrap(), sample_clients(10, 3, 5, 2).unwrap());
        assert!(sample_clients(3, 4, 0, 0).is_err());
        assert!(sample_clients(3, 0, 0, 0).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut hits = [0usize; 10];
        for t in 0..10_000 {
            let ids = sample_clients(10, 3, 77, t).unwrap();
            assert_eq!(ids.len(), 3);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            for id in ids {
                hits[id.0] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / 10_000.0 - 0.3).abs() < 0.02, "frequency {h}");
        }
    }

    #[test]
    fn single_client_collapses_to_local_update() {
        let m = model();
        let s = site("a", 40, 1);
        let mut cfg = config(Strategy::FedMedLoRA, 1, 1);
        cfg.rounds = 1;
        let result = run_federation(&cfg, std::slice::from_ref(&s), None, &m).unwrap();
        let direct = local_update(&m, &s.examples, &cfg.sgd, local_seed(cfg.seed, 0, ClientId(0))).unwrap();
        assert_eq!(result.global, direct);
    }

    #[test]
    fn one_client_federation_equals_centralized() {
        let m = model();
        let s = site("a", 40, 1);
        let v = make_validation_set(&rule(), 8, 2).unwrap();
        let sites = std::slice::from_ref(&s);
        let central = run_federation(&config(Strategy::Centralized, 1, 1), sites, None, &m).unwrap();
        for strategy in [Strategy::FedMedLoRA, Strategy::FedMedLoRAPlus] {
            let fed = run_federation(&config(strategy, 1, 1), sites, Some(&v.examples), &m).unwrap();
            assert_eq!(fed.global, central.global);
        }
    }

    #[test]
    fn two_rounds_two_clients() {
        let m = model();
        let sites = [site("a", 30, 1), site("b", 50, 2)];
        let v = make_validation_set(&rule(), 8, 2).unwrap();
        let result = run_federation(&config(Strategy::FedMedLoRAPlus, 2, 2), &sites, Some(&v.examples), &m).unwrap();
        assert_eq!(result.transcripts.len(), 2);
        for (t, tr) in result.transcripts.iter().enumerate() {
            assert_eq!(tr.round, t);
            assert_eq!(tr.sampled, vec![ClientId(0), ClientId(1)]);
            assert_eq!(tr.val_losses.as_ref().unwrap().len(), 2);
            assert!((tr.weights.sum() - 1.0).abs() < 1e-12);
            for traffic in &tr.traffic {
                assert_eq!(traffic.upload_bytes, crate::codec::encoded_len(&result.global) as u64);
            }
        }
        assert_eq!(result.transcripts[1].global_checksum, checksum(&result.global));
    }

    #[test]
    fn influence_strategy_requires_validation() {
        let m = model();
        let sites = [site("a", 10, 1)];
        let err = run_federation(&config(Strategy::FedMedLoRAPlus, 1, 1), &sites, None, &m);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn empty_site_is_rejected() {
        let m = model();
        let mut empty = site("a", 10, 1);
        empty.examples.clear();
        empty.clean_examples.clear();
        let err = run_federation(&config(Strategy::FedMedLoRA, 1, 1), &[empty], None, &m);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn equal_sites_make_both_strategies_agree() {
        let m = model();
        let s = site("a", 30, 1);
        let sites = [s.clone(), s];
        let mut cfg = config(Strategy::FedMedLoRA, 2, 2);
        // identical client seeds make the uploads, and so the losses, equal
        cfg.sgd.learning_rate = 0.0;
        let v = make_validation_set(&rule(), 8, 2).unwrap();
        let plain = run_federation(&cfg, &sites, None, &m).unwrap();
        cfg.strategy = Strategy::FedMedLoRAPlus;
        let plus = run_federation(&cfg, &sites, Some(&v.examples), &m).unwrap();
        assert_eq!(plain.global, plus.global);
    }

    #[test]
    fn zero_shot_keeps_backbone() {
        let m = model();
        let sites = [site("a", 10, 1)];
        let result = run_federation(&config(Strategy::ZeroShot, 1, 1), &sites, None, &m).unwrap();
        let merged = crate::lora::merge(m.backbone(), &result.global).unwrap();
        for (key, w) in &merged {
            assert_eq!(w, m.backbone().layer(key).unwrap());
        }
        assert!(result.transcripts.is_empty());
    }

    #[test]
    fn fedsa_keeps_b_local_and_shares_a() {
        let m = model();
        let sites = [site("a", 30, 1), site("b", 30, 2)];
        let result = run_federation(&config(Strategy::FedSA, 2, 2), &sites, None, &m).unwrap();
        let per_client = result.per_client.as_ref().unwrap();
        let (c0, c1) = (&per_client[&ClientId(0)], &per_client[&ClientId(1)]);
        for key in c0.keys() {
            assert_eq!(c0.get(key).unwrap().a(), c1.get(key).unwrap().a());
            assert_ne!(c0.get(key).unwrap().b(), c1.get(key).unwrap().b());
        }
        let a_params = m.adapters().a_param_count();
        assert!(result.transcripts[0].traffic.iter().all(|t| t.upload_params == a_params));
    }

    #[test]
    fn runs_are_deterministic() {
        let m = model();
        let sites = [site("a", 30, 1), site("b", 30, 2), site("c", 20, 3)];
        let v = make_validation_set(&rule(), 8, 2).unwrap();
        let cfg = config(Strategy::FedMedLoRAPlus, 3, 2);
        let first = run_federation(&cfg, &sites, Some(&v.examples), &m).unwrap();
        let second = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_federation(&cfg, &sites, Some(&v.examples), &m).unwrap());
        assert_eq!(first, second);
        assert!(first.transcripts.iter().all(|t| t.sampled.len() == 2));
    }

    #[test]
    fn uneven_sites_must_match_their_tasks() {
        let m = model();
        let mut tagging_only = site("b", 20, 2);
        tagging_only.spec.tasks = vec![Task::Tagging];
        let sites = [site("a", 20, 1), tagging_only];
        let err = uneven_task_run(&config(Strategy::FedMedLoRA, 2, 2), &sites, None, &m);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn relation_counts_follow_labels() {
        let ex = |label| Example {
            tokens: vec![1, 0, 3],
            target: Target::Relation { head: 0, tail: 2, label },
        };
        let examples = [ex(2), ex(0), ex(1)];
        let preds = [Prediction::Relation(2), Prediction::Relation(3), Prediction::Relation(0)];
        let counts: Counts = example_counts(&examples, &preds, Task::Relation, Scheme::Strict).into_iter().sum();
        assert_eq!((counts.tp, counts.fp, counts.fn_), (1, 1, 1));
    }

    #[test]
    fn averaging_is_metric_level() {
        let a = EvalReport::from_counts(Task::Tagging, Scheme::Strict, Counts { tp: 1, fp: 0, fn_: 0 });
        let b = EvalReport::from_counts(Task::Tagging, Scheme::Strict, Counts { tp: 0, fp: 1, fn_: 3 });
        let avg = average_reports(&[vec![a], vec![b]]);
        assert_eq!(avg[0].f1, 0.5);
        assert_eq!(avg[0].tp, 1);
    }
}
