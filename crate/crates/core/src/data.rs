//! Planted-rule multi-site data.
//!
//! Token ids encode their gold tag: `tag = token % TAG_CLASSES`, and
//! `token / TAG_CLASSES` is the token's index inside its tag group. A
//! relation between two entity-initial tokens depends only on the two
//! entity types. Sites differ in four independent ways: label skew
//! (Dirichlet mixture over entity types), size, label noise, and which
//! slice of each tag group their documents use (`token_shift`).

use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Target, Task};
use crate::seed;

pub const ENTITY_TYPES: [&str; 4] = ["Problem", "Test", "Treatment", "Drug"];
/// `O` plus `B-`/`I-` for each entity type.
pub const TAG_CLASSES: usize = 1 + 2 * ENTITY_TYPES.len();
/// Class 0 means "no relation".
pub const RELATION_CLASSES: usize = 4;
pub const NO_RELATION: usize = 0;
pub const OUTSIDE: usize = 0;

pub fn begin_tag(entity: usize) -> usize {
    1 + 2 * entity
}

pub fn inside_tag(entity: usize) -> usize {
    2 + 2 * entity
}

/// The global labelling rule shared by every site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRule {
    /// Tokens per tag group.
    pub group_size: usize,
    /// How many consecutive group indices (from `token_shift`, wrapping) a
    /// site draws its tokens from.
    pub window: usize,
}

impl Default for PlantedRule {
    fn default() -> Self {
        Self {
            group_size: 12,
            window: 6,
        }
    }
}

impl PlantedRule {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.window == 0 || self.window > self.group_size {
            return Err(Error::Config(format!(
                "rule needs 1 <= window <= group_size, got window {} and group_size {}",
                self.window, self.group_size
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        TAG_CLASSES * self.group_size
    }

    pub fn tag_of(&self, token: usize) -> usize {
        token % TAG_CLASSES
    }

    pub fn token(&self, tag: usize, index: usize) -> usize {
        (index % self.group_size) * TAG_CLASSES + tag
    }

    /// Relation id of a marked (head, tail) pair: a step function of the
    /// sum of the two entity types, `0–1 → 0`, `2 → 1`, `3 → 2`, `4–6 → 3`.
    pub fn relation(&self, head_entity: usize, tail_entity: usize) -> usize {
        match head_entity + tail_entity {
            0 | 1 => NO_RELATION,
            2 => 1,
            3 => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: String,
    pub n_examples: usize,
    pub dirichlet_alpha: f64,
    pub noise_rate: f64,
    pub tasks: Vec<Task>,
    pub token_shift: usize,
    pub seed: u64,
}

impl SiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("site `{}`: {msg}", self.site_id)));
        if self.n_examples == 0 {
            return bad("n_examples must be at least 1".into());
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return bad(format!("dirichlet_alpha must be positive, got {}", self.dirichlet_alpha));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate must lie in [0, 1], got {}", self.noise_rate));
        }
        if self.tasks.is_empty() {
            return bad("tasks must be non-empty".into());
        }
        Ok(())
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }

    /// Tasks in canonical order, without duplicates.
    fn task_cycle(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|t| self.has_task(*t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteDataset {
    pub spec: SiteSpec,
    pub examples: Vec<Example>,
    /// Pre-noise labels, parallel to `examples`. Diagnostics and clean test
    /// splits only; training never reads them.
    pub clean_examples: Vec<Example>,
}

impl SiteDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Entity-type mixture of a site. It depends on the site identity and the
/// skew parameter only, so re-sampling a site under another seed keeps its
/// population and changes only the draw.
pub fn entity_mixture(site_id: &str, dirichlet_alpha: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(0, &format!("mixture/{site_id}")));
    let dist = Dirichlet::new([dirichlet_alpha; ENTITY_TYPES.len()]).expect("positive concentration");
    let p = dist.sample(&mut rng);
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && p.iter().all(|v| v.is_finite()) {
        p.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / ENTITY_TYPES.len() as f64; ENTITY_TYPES.len()]
    }
}

fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct Sampler<'a> {
    rule: &'a PlantedRule,
    mixture: &'a [f64],
    shift: usize,
    window: usize,
}

impl Sampler<'_> {
    fn token<R: Rng>(&self, tag: usize, rng: &mut R) -> usize {
        let offset = rng.random_range(0..self.window);
        self.rule.token(tag, self.shift + offset)
    }

    fn entity<R: Rng>(&self, rng: &mut R) -> usize {
        sample_index(self.mixture, rng)
    }

    fn outside<R: Rng>(&self, tokens: &mut Vec<usize>, tags: &mut Vec<usize>, n: usize, rng: &mut R) {
        for _ in 0..n {
            tokens.push(self.token(OUTSIDE, rng));
            tags.push(OUTSIDE);
        }
    }

    fn mention<R: Rng>(&self, entity: usize, len: usize, tokens: &mut Vec<usize>, tags: &mut Vec<usize>, rng: &mut R) {
        tokens.push(self.token(begin_tag(entity), rng));
        tags.push(begin_tag(entity));
        for _ in 1..len {
            tokens.push(self.token(inside_tag(entity), rng));
            tags.push(inside_tag(entity));
        }
    }

    fn tagging<R: Rng>(&self, rng: &mut R) -> Example {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let mentions = rng.random_range(1..=3);
        for _ in 0..mentions {
            let gap = rng.random_range(0..=2);
            self.outside(&mut tokens, &mut tags, gap, rng);
            let entity = self.entity(rng);
            let len = rng.random_range(1..=3);
            self.mention(entity, len, &mut tokens, &mut tags, rng);
        }
        let tail = rng.random_range(0..=2);
        self.outside(&mut tokens, &mut tags, tail, rng);
        Example {
            tokens,
            target: Target::Tags(tags),
        }
    }

    fn relation_with<R: Rng>(&self, head_entity: usize, tail_entity: usize, rng: &mut R) -> Example {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let lead = rng.random_range(0..=2);
        self.outside(&mut tokens, &mut tags, lead, rng);
        let head = tokens.len();
        self.mention(head_entity, 1, &mut tokens, &mut tags, rng);
        let gap = rng.random_range(1..=4);
        self.outside(&mut tokens, &mut tags, gap, rng);
        let tail = tokens.len();
        self.mention(tail_entity, 1, &mut tokens, &mut tags, rng);
        let trail = rng.random_range(0..=2);
        self.outside(&mut tokens, &mut tags, trail, rng);
        Example {
            tokens,
            target: Target::Relation {
                head,
                tail,
                label: self.rule.relation(head_entity, tail_entity),
            },
        }
    }

    fn relation<R: Rng>(&self, rng: &mut R) -> Example {
        let head = self.entity(rng);
        let tail = self.entity(rng);
        self.relation_with(head, tail, rng)
    }
}

fn flip<R: Rng>(label: usize, classes: usize, rng: &mut R) -> usize {
    (label + rng.random_range(1..classes)) % classes
}

fn add_noise<R: Rng>(ex: &Example, rate: f64, rng: &mut R) -> Example {
    let target = match &ex.target {
        Target::Tags(tags) => Target::Tags(
            tags.iter()
                .map(|&t| if rng.random_bool(rate) { flip(t, TAG_CLASSES, rng) } else { t })
                .collect(),
        ),
        &Target::Relation { head, tail, label } => Target::Relation {
            head,
            tail,
            label: if rng.random_bool(rate) {
                flip(label, RELATION_CLASSES, rng)
            } else {
                label
            },
        },
    };
    Example {
        tokens: ex.tokens.clone(),
        target,
    }
}

/// Draws `spec.n_examples` examples for one site. When both tasks are
/// enabled, examples alternate tagging/relation.
pub fn generate_site(spec: &SiteSpec, rule: &PlantedRule) -> Result<SiteDataset> {
    spec.validate()?;
    rule.validate()?;
    let mixture = entity_mixture(&spec.site_id, spec.dirichlet_alpha);
    let sampler = Sampler {
        rule,
        mixture: &mixture,
        shift: spec.token_shift,
        window: rule.window,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cycle = spec.task_cycle();
    let clean_examples: Vec<Example> = (0..spec.n_examples)
        .map(|i| match cycle[i % cycle.len()] {
            Task::Tagging => sampler.tagging(&mut rng),
            Task::Relation => sampler.relation(&mut rng),
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "noise"));
    let examples = if spec.noise_rate == 0.0 {
        clean_examples.clone()
    } else {
        clean_examples
            .iter()
            .map(|ex| add_noise(ex, spec.noise_rate, &mut noise_rng))
            .collect()
    };
    Ok(SiteDataset {
        spec: spec.clone(),
        examples,
        clean_examples,
    })
}

/// Concentration used for "unskewed" data.
pub const UNSKEWED_ALPHA: f64 = 1e6;

/// Small noise-free server-side validation set covering both tasks, with
/// tokens drawn from the whole of each tag group.
///
/// Examples alternate tagging/relation. Every tagging example mentions all
/// four entity types with a `B` and an `I` token, so all tag classes occur
/// from the first example on; relation examples cycle through relation
/// classes, so all of those occur once `n_v >= 2 · RELATION_CLASSES`.
pub fn make_validation_set(rule: &PlantedRule, n_v: usize, seed: u64) -> Result<SiteDataset> {
    validation_set(rule, &[(0, rule.group_size)], n_v, seed)
}

/// Like [`make_validation_set`], but with tokens from the sites' own
/// slices of each tag group: consecutive example pairs cycle through
/// `token_shifts`, each covering `rule.window` indices. This is a set
/// representative of the federation's documents.
pub fn make_validation_set_for(
    rule: &PlantedRule,
    token_shifts: &[usize],
    n_v: usize,
    seed: u64,
) -> Result<SiteDataset> {
    if token_shifts.is_empty() {
        return Err(Error::InvalidInput("validation set needs at least one token shift".into()));
    }
    let windows: Vec<(usize, usize)> = token_shifts.iter().map(|&s| (s, rule.window)).collect();
    validation_set(rule, &windows, n_v, seed)
}

fn validation_set(rule: &PlantedRule, windows: &[(usize, usize)], n_v: usize, seed: u64) -> Result<SiteDataset> {
    if n_v == 0 {
        return Err(Error::InvalidInput("validation set needs at least one example".into()));
    }
    rule.validate()?;
    let uniform = vec![1.0 / ENTITY_TYPES.len() as f64; ENTITY_TYPES.len()];
    let samplers: Vec<Sampler> = windows
        .iter()
        .map(|&(shift, window)| Sampler {
            rule,
            mixture: &uniform,
            shift,
            window,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..n_v)
        .map(|i| {
            let j = i / 2;
            let sampler = &samplers[j % samplers.len()];
            if i % 2 == 0 {
                let mut tokens = Vec::new();
                let mut tags = Vec::new();
                for k in 0..ENTITY_TYPES.len() {
                    let entity = (j + k) % ENTITY_TYPES.len();
                    sampler.outside(&mut tokens, &mut tags, 1, &mut rng);
                    sampler.mention(entity, 2, &mut tokens, &mut tags, &mut rng);
                }
                Example {
                    tokens,
                    target: Target::Tags(tags),
                }
            } else {
                let label = j % RELATION_CLASSES;
                let pairs: Vec<(usize, usize)> = (0..ENTITY_TYPES.len())
                    .flat_map(|h| (0..ENTITY_TYPES.len()).map(move |t| (h, t)))
                    .filter(|&(h, t)| rule.relation(h, t) == label)
                    .collect();
                let &(h, t) = pairs.choose(&mut rng).expect("every relation class is reachable");
                sampler.relation_with(h, t, &mut rng)
            }
        })
        .collect();
    let spec = SiteSpec {
        site_id: "validation".into(),
        n_examples: n_v,
        dirichlet_alpha: UNSKEWED_ALPHA,
        noise_rate: 0.0,
        tasks: Task::ALL.to_vec(),
        token_shift: 0,
        seed,
    };
    Ok(SiteDataset {
        spec,
        clean_examples: examples.clone(),
        examples,
    })
}

/// Seeded random split of `pool` into `k` disjoint shards whose sizes differ
/// by at most one.
pub fn shard(pool: &SiteDataset, k: usize, seed: u64) -> Result<Vec<SiteDataset>> {
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidInput(format!(
            "cannot split {} examples into {k} shards",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = pool.len() / k;
    let extra = pool.len() % k;
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let idx = &order[start..start + size];
        start += size;
        let mut spec = pool.spec.clone();
        spec.site_id = format!("{}#{i}", pool.spec.site_id);
        spec.n_examples = size;
        shards.push(SiteDataset {
            spec,
            examples: idx.iter().map(|&j| pool.examples[j].clone()).collect(),
            clean_examples: idx.iter().map(|&j| pool.clean_examples[j].clone()).collect(),
        });
    }
    Ok(shards)
}

/// Concatenates several sites into one dataset (the pooled data of a
/// centralized run, or the pool to be sharded).
pub fn pool(site_id: &str, sites: &[SiteDataset]) -> SiteDataset {
    let mut tasks: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|t| sites.iter().any(|s| s.spec.has_task(*t)))
        .collect();
    if tasks.is_empty() {
        tasks = Task::ALL.to_vec();
    }
    let examples: Vec<Example> = sites.iter().flat_map(|s| s.examples.iter().cloned()).collect();
    let clean_examples = sites.iter().flat_map(|s| s.clean_examples.iter().cloned()).collect();
    let spec = SiteSpec {
        site_id: site_id.to_string(),
        n_examples: examples.len(),
        dirichlet_alpha: sites.first().map_or(1.0, |s| s.spec.dirichlet_alpha),
        noise_rate: sites.iter().map(|s| s.spec.noise_rate).fold(0.0, f64::max),
        tasks,
        token_shift: 0,
        seed: 0,
    };
    SiteDataset {
        spec,
        examples,
        clean_examples,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<usize>,
    target: Target,
    clean_target: Target,
}

/// Writes a dataset as JSON lines: the spec on the first line, then one
/// record per example with fields `tokens`, `target`, `clean_target`.
pub fn write_jsonl<W: Write>(dataset: &SiteDataset, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, &dataset.spec)?;
    out.write_all(b"\n")?;
    for (ex, clean) in dataset.examples.iter().zip(&dataset.clean_examples) {
        let record = Record {
            tokens: ex.tokens.clone(),
            target: ex.target.clone(),
            clean_target: clean.target.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<SiteDataset> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty dataset file".into()))??;
    let spec: SiteSpec = serde_json::from_str(&header)?;
    let mut examples = Vec::new();
    let mut clean_examples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)?;
        examples.push(Example {
            tokens: record.tokens.clone(),
            target: record.target,
        });
        clean_examples.push(Example {
            tokens: record.tokens,
            target: record.clean_target,
        });
    }
    Ok(SiteDataset {
        spec,
        examples,
        clean_examples,
    })
}
