//! Config-driven experiment runs.
//!
//! An experiment is described by a TOML file (see [`ExperimentConfig`]).
//! Unknown keys are rejected. Each master seed fans out to component seeds
//! through [`crate::seed::derive`] with labels `site/<id>`, `test/<id>`,
//! `model`, `validation`, `federation` and `shard/<k>`, so adding a site
//! leaves the other sites' data unchanged.
//!
//! Outputs are written atomically (temporary file, then rename):
//!
//! | file | content |
//! |------|---------|
//! | `results.csv` | [`ResultsRow`]: strategy, testset, task, scheme, p, r, f1, ci_lo, ci_hi, seed |
//! | `transcript.json` | round transcripts of the federated strategies, per seed |
//! | `comm.csv` | communication ledger of the configured strategy, first seed |
//! | `comm_report.json` | run totals and, with a preset, full-scale figures |
//! | `scale.csv` | [`ScaleRow`]: k, strategy, task, scheme, p, r, f1, ci_lo, ci_hi, seed |
//! | `compare.csv` | [`CompareRow`]: strategy, testset, task, scheme, n_a, n_b, mean_a, mean_b, p |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::WeightMode;
use crate::comm::{self, CommReport, PresetReport, DEFAULT_BYTES_PER_PARAM};
use crate::data::{self, make_validation_set_for, PlantedRule, SiteDataset, SiteSpec};
use crate::error::Error;
use crate::federation::{
    evaluate_result, run_federation, uneven_task_run, FederationConfig, FederationResult, RoundTranscript, Strategy,
};
use crate::lora::BackbonePreset;
use crate::metrics::{wilcoxon_rank_sum, BootstrapConfig, EvalReport, Scheme};
use crate::model::{Example, ModelConfig, SgdConfig, Task, ToyModel};
use crate::seed;

/// Experiment failure, split by the exit code the CLI reports.
#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Runtime(_) => 3,
        }
    }
}

impl From<Error> for ExperimentError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => ExperimentError::Config(msg),
            other => ExperimentError::Runtime(other.to_string()),
        }
    }
}

pub type ExpResult<T> = std::result::Result<T, ExperimentError>;

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub strategy: Strategy,
    pub rounds: usize,
    /// Defaults to every client.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    #[serde(default)]
    pub weight_mode: WeightMode,
    pub sgd: SgdConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSection {
    pub site_id: String,
    pub n_examples: usize,
    pub dirichlet_alpha: f64,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub token_shift: usize,
}

fn all_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}

impl SiteSection {
    fn spec(&self, master: u64) -> SiteSpec {
        SiteSpec {
            site_id: self.site_id.clone(),
            n_examples: self.n_examples,
            dirichlet_alpha: self.dirichlet_alpha,
            noise_rate: self.noise_rate,
            tasks: self.tasks.clone(),
            token_shift: self.token_shift,
            seed: seed::derive(master, &format!("site/{}", self.site_id)),
        }
    }

    /// Clean held-out split with every task.
    fn test_spec(&self, master: u64, n: usize) -> SiteSpec {
        SiteSpec {
            site_id: self.site_id.clone(),
            n_examples: n,
            dirichlet_alpha: self.dirichlet_alpha,
            noise_rate: 0.0,
            tasks: all_tasks(),
            token_shift: self.token_shift,
            seed: seed::derive(master, &format!("test/{}", self.site_id)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommSection {
    /// Named backbone shape for full-scale figures, e.g. `"llama3-8b"`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    /// Rounds for the full-scale figures; defaults to `federation.rounds`.
    #[serde(default)]
    pub rounds: Option<u64>,
}

impl Default for CommSection {
    fn default() -> Self {
        Self {
            preset: None,
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
            rounds: None,
        }
    }
}

impl CommSection {
    fn preset_report(&self, federation_rounds: usize, clients: usize) -> Option<PresetReport> {
        let preset = BackbonePreset::by_name(self.preset.as_deref()?)?;
        let rounds = self.rounds.unwrap_or(federation_rounds as u64);
        Some(PresetReport::new(&preset, self.bytes_per_param, rounds, clients as u64))
    }
}

fn default_bytes_per_param() -> u64 {
    DEFAULT_BYTES_PER_PARAM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_scale_strategies")]
    pub strategies: Vec<Strategy>,
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self {
            k_list: default_k_list(),
            strategies: default_scale_strategies(),
        }
    }
}

fn default_k_list() -> Vec<usize> {
    vec![1, 2, 3, 4, 6, 8, 10]
}

fn default_scale_strategies() -> Vec<Strategy> {
    vec![Strategy::FedMedLoRAPlus, Strategy::SingleSite, Strategy::Centralized]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_test_size() -> usize {
    400
}

fn default_validation_size() -> usize {
    40
}

/// Top-level experiment description.
///
/// ```toml
/// seed = 1
/// test_size = 400          # held-out examples per site
/// validation_size = 40     # server validation set
/// baselines = ["zero-shot", "single-site", "centralized"]
///
/// [rule]
/// group_size = 24
/// window = 12
///
/// [model]
/// hidden = 64
/// rank = 4
/// alpha = 8.0
///
/// [federation]
/// strategy = "fed-medlora-plus"
/// rounds = 40
/// weight_mode = "normalized"
/// sgd = { learning_rate = 0.1, epochs = 1, batch_size = 16 }
///
/// [[sites]]
/// site_id = "a"
/// n_examples = 2000
/// dirichlet_alpha = 0.5
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    #[serde(default)]
    pub rule: PlantedRule,
    pub model: ModelSection,
    pub federation: FederationSection,
    #[serde(default)]
    pub baselines: Vec<Strategy>,
    #[serde(default)]
    pub eval: BootstrapConfig,
    #[serde(default)]
    pub comm: CommSection,
    pub sites: Vec<SiteSection>,
    /// Sites used only as additional test sets.
    #[serde(default)]
    pub external: Vec<SiteSection>,
    #[serde(default)]
    pub scale: ScaleSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> ExpResult<Self> {
        let config: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> ExpResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config(msg) => ExperimentError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> ExpResult<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.sites.is_empty() {
            return bad("at least one [[sites]] entry is required".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for site in self.sites.iter().chain(&self.external) {
            if !ids.insert(site.site_id.as_str()) {
                return bad(format!("duplicate site_id `{}`", site.site_id));
            }
            site.spec(0).validate()?;
        }
        if self.test_size == 0 || self.validation_size == 0 {
            return bad("test_size and validation_size must be at least 1".into());
        }
        self.rule.validate()?;
        self.model_config(0).validate()?;
        self.federation_config(self.federation.strategy, self.sites.len(), 0).validate()?;
        let b = &self.eval;
        if b.sample_size == 0 || b.reps == 0 || !(b.level > 0.0 && b.level < 1.0) {
            return bad("eval needs sample_size >= 1, reps >= 1 and 0 < level < 1".into());
        }
        if let Some(name) = &self.comm.preset {
            if BackbonePreset::by_name(name).is_none() {
                return bad(format!("unknown comm preset `{name}`; known: llama3-8b"));
            }
        }
        if self.comm.rounds == Some(0) {
            return bad("comm.rounds must be positive".into());
        }
        if self.comm.bytes_per_param == 0 {
            return bad("comm.bytes_per_param must be positive".into());
        }
        if self.scale.k_list.contains(&0) {
            return bad("scale.k_list entries must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, master: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.rule.vocab_size(),
            hidden: self.model.hidden,
            tag_classes: data::TAG_CLASSES,
            relation_classes: data::RELATION_CLASSES,
            rank: self.model.rank,
            alpha: self.model.alpha,
            seed: seed::derive(master, "model"),
        }
    }

    pub fn federation_config(&self, strategy: Strategy, clients: usize, master: u64) -> FederationConfig {
        FederationConfig {
            strategy,
            clients,
            clients_per_round: self.federation.clients_per_round.unwrap_or(clients).min(clients),
            rounds: self.federation.rounds,
            sgd: self.federation.sgd,
            weight_mode: self.federation.weight_mode,
            seed: seed::derive(master, "federation"),
        }
    }

    /// The configured strategy followed by the baselines, without repeats.
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out = vec![self.federation.strategy];
        for &s in &self.baselines {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }
}

/// Everything derived from one master seed.
pub struct Prepared {
    pub seed: u64,
    pub model: ToyModel,
    pub sites: Vec<SiteDataset>,
    pub validation: Vec<Example>,
    /// `(testset id, clean examples)`: every site's held-out split, then
    /// the external sites.
    pub tests: Vec<(String, Vec<Example>)>,
}

pub fn prepare(config: &ExperimentConfig, master: u64) -> ExpResult<Prepared> {
    let model = ToyModel::new(config.model_config(master))?;
    let sites = config
        .sites
        .iter()
        .map(|s| data::generate_site(&s.spec(master), &config.rule))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let shifts: Vec<usize> = config.sites.iter().map(|s| s.token_shift).collect();
    let validation = make_validation_set_for(
        &config.rule,
        &shifts,
        config.validation_size,
        seed::derive(master, "validation"),
    )?
    .examples;
    let tests = config
        .sites
        .iter()
        .chain(&config.external)
        .map(|s| {
            let test = data::generate_site(&s.test_spec(master, config.test_size), &config.rule)?;
            Ok((s.site_id.clone(), test.clean_examples))
        })
        .collect::<crate::error::Result<Vec<_>>>()?;
    Ok(Prepared {
        seed: master,
        model,
        sites,
        validation,
        tests,
    })
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub strategy: String,
    pub testset: String,
    pub task: Task,
    pub scheme: Scheme,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub seed: u64,
}

impl ResultsRow {
    fn new(strategy: &str, testset: &str, report: &EvalReport, seed: u64) -> Self {
        Self {
            strategy: strategy.to_string(),
            testset: testset.to_string(),
            task: report.task,
            scheme: report.scheme,
            p: report.precision,
            r: report.recall,
            f1: report.f1,
            ci_lo: report.ci_lo,
            ci_hi: report.ci_hi,
            seed,
        }
    }
}

/// One line of `scale.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub k: usize,
    pub strategy: String,
    pub task: Task,
    pub scheme: Scheme,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub seed: u64,
}

/// One line of `compare.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    pub testset: String,
    pub task: Task,
    pub scheme: Scheme,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p: f64,
}

/// Transcripts of one strategy under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyTranscripts {
    pub seed: u64,
    pub strategy: String,
    pub transcripts: Vec<RoundTranscript>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommOutput {
    pub strategy: Strategy,
    pub seed: u64,
    pub run: CommReport,
    pub preset: Option<PresetReport>,
}

/// Everything `run` and `uneven` produce.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultsRow>,
    pub transcripts: Vec<StrategyTranscripts>,
    pub comm_entries: Vec<comm::CommEntry>,
    pub comm: CommOutput,
}

fn bootstrap_seed(master: u64, label: &str, testset: &str) -> u64 {
    seed::derive(master, &format!("bootstrap/{label}/{testset}"))
}

fn evaluate_rows(
    config: &ExperimentConfig,
    prepared: &Prepared,
    label: &str,
    result: &FederationResult,
) -> ExpResult<Vec<ResultsRow>> {
    let mut rows = Vec::new();
    for (testset, examples) in &prepared.tests {
        let reports = evaluate_result(
            &prepared.model,
            result,
            examples,
            &config.eval,
            bootstrap_seed(prepared.seed, label, testset),
        )?;
        rows.extend(reports.iter().map(|r| ResultsRow::new(label, testset, r, prepared.seed)));
    }
    Ok(rows)
}

type Runner = fn(&FederationConfig, &[SiteDataset], Option<&[Example]>, &ToyModel) -> crate::error::Result<FederationResult>;

/// Runs `(label, strategy, sites)` jobs for one seed.
fn run_jobs(
    config: &ExperimentConfig,
    prepared: &Prepared,
    jobs: &[(String, Strategy, &[SiteDataset])],
    runner: Runner,
) -> ExpResult<(Vec<ResultsRow>, Vec<StrategyTranscripts>)> {
    let mut rows = Vec::new();
    let mut transcripts = Vec::new();
    for (label, strategy, sites) in jobs {
        let fed = config.federation_config(*strategy, sites.len(), prepared.seed);
        let result = runner(&fed, sites, Some(&prepared.validation), &prepared.model)?;
        rows.extend(evaluate_rows(config, prepared, label, &result)?);
        if strategy.is_federated() {
            transcripts.push(StrategyTranscripts {
                seed: prepared.seed,
                strategy: label.clone(),
                transcripts: result.transcripts,
            });
        }
    }
    Ok((rows, transcripts))
}

fn comm_output(config: &ExperimentConfig, transcripts: &[StrategyTranscripts], seed: u64) -> (Vec<comm::CommEntry>, CommOutput) {
    let strategy = config.federation.strategy;
    let own: &[RoundTranscript] = transcripts
        .iter()
        .find(|t| t.seed == seed && t.strategy == strategy.as_str())
        .map_or(&[], |t| &t.transcripts);
    let bpp = config.comm.bytes_per_param;
    let entries = comm::ledger(own, bpp);
    let run = comm::record(own, bpp, None);
    let preset = config.comm.preset_report(config.federation.rounds, config.sites.len());
    (
        entries,
        CommOutput {
            strategy,
            seed,
            run,
            preset,
        },
    )
}

fn resolve_seeds(config: &ExperimentConfig, seeds: Option<&[u64]>) -> Vec<u64> {
    match seeds {
        Some(s) if !s.is_empty() => s.to_vec(),
        _ => vec![config.seed],
    }
}

/// Runs the configured strategy and baselines for every seed and evaluates
/// each on every test set.
pub fn run(config: &ExperimentConfig, seeds: Option<&[u64]>) -> ExpResult<RunOutput> {
    let seeds = resolve_seeds(config, seeds);
    let per_seed = seeds
        .par_iter()
        .map(|&s| {
            let prepared = prepare(config, s)?;
            let jobs: Vec<(String, Strategy, &[SiteDataset])> = config
                .strategies()
                .into_iter()
                .map(|st| (st.as_str().to_string(), st, prepared.sites.as_slice()))
                .collect();
            run_jobs(config, &prepared, &jobs, run_federation)
        })
        .collect::<ExpResult<Vec<_>>>()?;
    Ok(collect_output(config, per_seed, seeds[0]))
}

fn collect_output(
    config: &ExperimentConfig,
    per_seed: Vec<(Vec<ResultsRow>, Vec<StrategyTranscripts>)>,
    first_seed: u64,
) -> RunOutput {
    let mut rows = Vec::new();
    let mut transcripts = Vec::new();
    for (r, t) in per_seed {
        rows.extend(r);
        transcripts.extend(t);
    }
    let (comm_entries, comm) = comm_output(config, &transcripts, first_seed);
    RunOutput {
        rows,
        transcripts,
        comm_entries,
        comm,
    }
}

/// Label suffix of the full-annotation reference run in [`uneven`].
pub const FULL_ANNOTATION_SUFFIX: &str = "/full";

/// Runs the configured strategy on sites with their declared (possibly
/// partial) task sets, the same strategy with every site fully annotated
/// (labelled `<strategy>/full`), and the baselines on the partial data.
pub fn uneven(config: &ExperimentConfig, seeds: Option<&[u64]>) -> ExpResult<RunOutput> {
    let seeds = resolve_seeds(config, seeds);
    let mut full_config = config.clone();
    for site in &mut full_config.sites {
        site.tasks = all_tasks();
    }
    let per_seed = seeds
        .par_iter()
        .map(|&s| {
            let prepared = prepare(config, s)?;
            let full = prepare(&full_config, s)?;
            let strategy = config.federation.strategy;
            let mut jobs: Vec<(String, Strategy, &[SiteDataset])> =
                vec![(strategy.as_str().to_string(), strategy, prepared.sites.as_slice())];
            jobs.extend(
                config
                    .strategies()
                    .into_iter()
                    .skip(1)
                    .map(|st| (st.as_str().to_string(), st, prepared.sites.as_slice())),
            );
            let (mut rows, mut transcripts) = run_jobs(config, &prepared, &jobs, uneven_task_run)?;
            let label = format!("{strategy}{FULL_ANNOTATION_SUFFIX}");
            let (r, t) = run_jobs(config, &full, &[(label, strategy, full.sites.as_slice())], run_federation)?;
            rows.extend(r);
            transcripts.extend(t);
            Ok((rows, transcripts))
        })
        .collect::<ExpResult<Vec<_>>>()?;
    Ok(collect_output(config, per_seed, seeds[0]))
}

/// For each `k`: pools the configured sites, splits the pool into `k`
/// shards and runs the scale strategies on the shards. Every run is scored
/// on the union of the sites' held-out splits.
pub fn scale_study(config: &ExperimentConfig, seeds: Option<&[u64]>, k_list: Option<&[usize]>) -> ExpResult<Vec<ScaleRow>> {
    let seeds = resolve_seeds(config, seeds);
    let k_list = k_list.unwrap_or(&config.scale.k_list);
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(ExperimentError::Config("k list must be non-empty and positive".into()));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&s| {
            let prepared = prepare(config, s)?;
            let pooled = data::pool("pool", &prepared.sites);
            let test: Vec<Example> = prepared
                .tests
                .iter()
                .take(config.sites.len())
                .flat_map(|(_, ex)| ex.iter().cloned())
                .collect();
            let mut rows = Vec::new();
            for &k in k_list {
                let shards = data::shard(&pooled, k, seed::derive(s, &format!("shard/{k}")))?;
                for &strategy in &config.scale.strategies {
                    let fed = config.federation_config(strategy, k, s);
                    let result = run_federation(&fed, &shards, Some(&prepared.validation), &prepared.model)?;
                    let boot = bootstrap_seed(s, &format!("{strategy}/k{k}"), "pooled");
                    let reports = evaluate_result(&prepared.model, &result, &test, &config.eval, boot)?;
                    rows.extend(reports.into_iter().map(|r| ScaleRow {
                        k,
                        strategy: strategy.as_str().to_string(),
                        task: r.task,
                        scheme: r.scheme,
                        p: r.precision,
                        r: r.recall,
                        f1: r.f1,
                        ci_lo: r.ci_lo,
                        ci_hi: r.ci_hi,
                        seed: s,
                    }));
                }
            }
            Ok(rows)
        })
        .collect::<ExpResult<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

type RowKey = (String, String, Task, Scheme);

fn group_f1(rows: &[ResultsRow]) -> BTreeMap<RowKey, Vec<f64>> {
    let mut groups: BTreeMap<RowKey, Vec<f64>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.strategy.clone(), row.testset.clone(), row.task, row.scheme))
            .or_default()
            .push(row.f1);
    }
    groups
}

/// Per key `(strategy, testset, task, scheme)`: the two-tailed rank-sum
/// p-value of the per-seed F1 samples in `a` against those in `b`.
pub fn compare(a: &[ResultsRow], b: &[ResultsRow]) -> ExpResult<Vec<CompareRow>> {
    let (ga, gb) = (group_f1(a), group_f1(b));
    let describe = |keys: Vec<&RowKey>| {
        keys.iter()
            .map(|(s, t, task, scheme)| format!("{s}/{t}/{task}/{scheme}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let only_a: Vec<&RowKey> = ga.keys().filter(|k| !gb.contains_key(*k)).collect();
    let only_b: Vec<&RowKey> = gb.keys().filter(|k| !ga.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(ExperimentError::Runtime(format!(
            "row keys differ; missing from second file: [{}]; missing from first file: [{}]",
            describe(only_a),
            describe(only_b)
        )));
    }
    Ok(ga
        .iter()
        .map(|(key, xa)| {
            let xb = &gb[key];
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            CompareRow {
                strategy: key.0.clone(),
                testset: key.1.clone(),
                task: key.2,
                scheme: key.3,
                n_a: xa.len(),
                n_b: xb.len(),
                mean_a: mean(xa),
                mean_b: mean(xb),
                p: wilcoxon_rank_sum(xa, xb),
            }
        })
        .collect())
}

/// Full-scale communication figures for the configured preset, rounds and
/// number of sites.
pub fn comm_report(config: &ExperimentConfig) -> ExpResult<PresetReport> {
    config
        .comm
        .preset_report(config.federation.rounds, config.sites.len())
        .ok_or_else(|| ExperimentError::Config("comm-report needs a known [comm] preset".into()))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> ExpResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(runtime)?;
    let name = path.file_name().ok_or_else(|| runtime(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(runtime)?;
    fs::rename(&tmp, path).map_err(runtime)
}

pub fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> ExpResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer.write_record(header).map_err(runtime)?;
    for row in rows {
        writer.serialize(row).map_err(runtime)?;
    }
    writer.into_inner().map_err(runtime)
}

pub const RESULTS_COLUMNS: [&str; 10] = ["strategy", "testset", "task", "scheme", "p", "r", "f1", "ci_lo", "ci_hi", "seed"];
pub const SCALE_COLUMNS: [&str; 10] = ["k", "strategy", "task", "scheme", "p", "r", "f1", "ci_lo", "ci_hi", "seed"];
pub const COMPARE_COLUMNS: [&str; 9] = ["strategy", "testset", "task", "scheme", "n_a", "n_b", "mean_a", "mean_b", "p"];

pub fn read_results(path: &Path) -> ExpResult<Vec<ResultsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(runtime)?.clone();
    if headers.iter().ne(RESULTS_COLUMNS) {
        return Err(runtime(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            RESULTS_COLUMNS.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<ResultsRow>, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Writes `results.csv`, `transcript.json`, `comm.csv` and
/// `comm_report.json` into `out_dir`.
pub fn write_run_output(out: &RunOutput, out_dir: &Path) -> ExpResult<()> {
    write_atomic(&out_dir.join("results.csv"), &csv_bytes(&out.rows, &RESULTS_COLUMNS)?)?;
    let transcript = serde_json::to_vec_pretty(&out.transcripts).map_err(runtime)?;
    write_atomic(&out_dir.join("transcript.json"), &transcript)?;
    let mut comm_csv = Vec::new();
    comm::write_csv(&out.comm_entries, &mut comm_csv)?;
    write_atomic(&out_dir.join("comm.csv"), &comm_csv)?;
    let report = serde_json::to_vec_pretty(&out.comm).map_err(runtime)?;
    write_atomic(&out_dir.join("comm_report.json"), &report)
}

pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path, seeds: Option<&[u64]>) -> ExpResult<RunOutput> {
    let out = run(config, seeds)?;
    write_run_output(&out, out_dir)?;
    Ok(out)
}

pub fn cmd_uneven(config: &ExperimentConfig, out_dir: &Path, seeds: Option<&[u64]>) -> ExpResult<RunOutput> {
    let out = uneven(config, seeds)?;
    write_run_output(&out, out_dir)?;
    Ok(out)
}

pub fn cmd_scale_study(
    config: &ExperimentConfig,
    out_dir: &Path,
    seeds: Option<&[u64]>,
    k_list: Option<&[usize]>,
) -> ExpResult<Vec<ScaleRow>> {
    let rows = scale_study(config, seeds, k_list)?;
    write_atomic(&out_dir.join("scale.csv"), &csv_bytes(&rows, &SCALE_COLUMNS)?)?;
    Ok(rows)
}

pub fn cmd_compare(a: &Path, b: &Path, out_dir: &Path) -> ExpResult<Vec<CompareRow>> {
    let rows = compare(&read_results(a)?, &read_results(b)?)?;
    write_atomic(&out_dir.join("compare.csv"), &csv_bytes(&rows, &COMPARE_COLUMNS)?)?;
    Ok(rows)
}

pub fn cmd_comm_report(config: &ExperimentConfig, out_dir: &Path) -> ExpResult<PresetReport> {
    let report = comm_report(config)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["key", "value"]).map_err(runtime)?;
    for (k, v) in report.lines() {
        writer.write_record([k, v]).map_err(runtime)?;
    }
    let bytes = writer.into_inner().map_err(runtime)?;
    write_atomic(&out_dir.join("comm_report.csv"), &bytes)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 5
test_size = 20
validation_size = 8
baselines = ["zero-shot", "single-site", "centralized"]

[rule]
group_size = 4
window = 2

[model]
hidden = 6
rank = 2
alpha = 4.0

[federation]
strategy = "fed-medlora-plus"
rounds = 2
sgd = { learning_rate = 0.1, epochs = 1, batch_size = 8 }

[eval]
sample_size = 20
reps = 5
level = 0.95

[comm]
preset = "llama3-8b"

[[sites]]
site_id = "a"
n_examples = 30
dirichlet_alpha = 0.5

[[sites]]
site_id = "b"
n_examples = 30
dirichlet_alpha = 0.5
token_shift = 2
noise_rate = 0.1
"#;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_toml(SMALL).unwrap()
    }

    #[test]
    fn config_parses_with_defaults() {
        let c = small();
        assert_eq!(c.federation.weight_mode, WeightMode::Normalized);
        assert_eq!(c.sites[0].tasks, Task::ALL.to_vec());
        assert_eq!(c.scale.k_list, vec![1, 2, 3, 4, 6, 8, 10]);
        assert_eq!(c.strategies().len(), 4);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = ExperimentConfig::from_toml(&SMALL.replace("test_size", "test_sise")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("test_sise"), "{err}");
        let err = ExperimentConfig::from_toml(&SMALL.replace("fed-medlora-plus", "fedprox")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml(&SMALL.replace("rank = 2", "rank = 9")).unwrap_err();
        assert!(matches!(err, ExperimentError::Config(_)));
        let err = ExperimentConfig::from_toml(&SMALL.replace("site_id = \"b\"", "site_id = \"a\"")).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn row_count_is_strategies_testsets_tasks_schemes() {
        let out = run(&small(), Some(&[1, 2])).unwrap();
        assert_eq!(out.rows.len(), 4 * 2 * 2 * 2 * 2);
        assert_eq!(out.transcripts.len(), 2);
        assert_eq!(out.comm_entries.len(), 2 * 2 * 2);
        let preset = out.comm.preset.unwrap();
        assert_eq!(comm::gib_2dp(preset.lora_total_bytes), "1.25");
    }

    #[test]
    fn adding_a_site_keeps_other_sites_data() {
        let c = small();
        let mut more = c.clone();
        let mut extra = c.sites[0].clone();
        extra.site_id = "c".into();
        more.sites.insert(0, extra);
        let p1 = prepare(&c, 3).unwrap();
        let p2 = prepare(&more, 3).unwrap();
        assert_eq!(p1.sites[0].examples, p2.sites[1].examples);
        assert_eq!(p1.tests[1], p2.tests[2]);
    }

    #[test]
    fn compare_with_itself_gives_one() {
        let out = run(&small(), Some(&[1, 2, 3])).unwrap();
        let rows = compare(&out.rows, &out.rows).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 2 * 2);
        assert!(rows.iter().all(|r| r.p == 1.0 && r.n_a == 3));
        let err = compare(&out.rows, &out.rows[..8]).unwrap_err();
        assert!(err.to_string().contains("missing from second file"));
    }

    #[test]
    fn uneven_adds_full_annotation_reference() {
        let mut c = small();
        c.sites[1].tasks = vec![Task::Tagging];
        let out = uneven(&c, None).unwrap();
        let labels: std::collections::BTreeSet<&str> = out.rows.iter().map(|r| r.strategy.as_str()).collect();
        assert!(labels.contains("fed-medlora-plus/full"));
        assert_eq!(out.rows.len(), 5 * 2 * 2 * 2);
    }

    #[test]
    fn scale_rows_and_single_shard_degeneracy() {
        let rows = scale_study(&small(), Some(&[4]), Some(&[1, 2])).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 4);
        let f1 = |strategy: &str, k: usize| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.strategy == strategy && r.k == k)
                .map(|r| r.f1)
                .collect()
        };
        assert_eq!(f1("fed-medlora-plus", 1), f1("centralized", 1));
    }

    #[test]
    fn atomic_writes_leave_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_atomic(&path, b"a").unwrap();
        write_atomic(&path, b"b").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"b");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
