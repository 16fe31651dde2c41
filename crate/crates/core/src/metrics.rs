//! Span and relation scoring, bootstrap intervals and the rank-sum test.
//!
//! Matching is one-to-one in both schemes. Strict matching pairs identical
//! spans (boundaries and type); lenient matching pairs overlapping spans of
//! the same type, and the true-positive count is the size of a maximum
//! matching. Micro scores sum counts over documents before taking ratios;
//! precision with no predictions is 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::OUTSIDE;
use crate::model::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub entity_type: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, entity_type: usize) -> Self {
        assert!(start < end, "span must be non-empty");
        Self { start, end, entity_type }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationInstance {
    pub head: Span,
    pub tail: Span,
    pub relation_type: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Strict,
    Lenient,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Strict, Scheme::Lenient];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Strict => "strict",
            Scheme::Lenient => "lenient",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn from_matching(tp: usize, n_gold: usize, n_pred: usize) -> Self {
        Self {
            tp: tp as u64,
            fp: (n_pred - tp) as u64,
            fn_: (n_gold - tp) as u64,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fixed-field record: task, scheme, tp, fp, fn, precision, recall, f1,
/// ci_lo, ci_hi.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub scheme: Scheme,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(task: Task, scheme: Scheme, c: Counts) -> Self {
        Self {
            task,
            scheme,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            ci_lo: None,
            ci_hi: None,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    pub fn with_ci(mut self, (lo, hi): (f64, f64)) -> Self {
        self.ci_lo = Some(lo);
        self.ci_hi = Some(hi);
        self
    }
}

/// BIO decoding over the tag ids of [`crate::data`]: `0 = O`,
/// `1 + 2e = B-e`, `2 + 2e = I-e`. An `I-e` that does not continue a
/// span of type `e` opens a new span.
pub fn decode_bio(tags: &[usize]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let (is_begin, entity) = match tag {
            OUTSIDE => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(s, i, e));
                }
                continue;
            }
            t => (t % 2 == 1, (t - 1) / 2),
        };
        match open {
            Some((_, e)) if !is_begin && e == entity => {}
            _ => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(s, i, e));
                }
                open = Some((i, entity));
            }
        }
    }
    if let Some((s, e)) = open {
        spans.push(Span::new(s, tags.len(), e));
    }
    spans
}

/// Inverse of [`decode_bio`] for non-overlapping spans.
pub fn encode_bio(spans: &[Span], len: usize) -> Vec<usize> {
    let mut tags = vec![OUTSIDE; len];
    for span in spans {
        tags[span.start] = 1 + 2 * span.entity_type;
        for t in &mut tags[span.start + 1..span.end] {
            *t = 2 + 2 * span.entity_type;
        }
    }
    tags
}

/// Size of a maximum one-to-one matching between `gold` and `pred` under
/// `compatible`. Candidates are tried in the given order (callers sort by
/// position), then augmenting paths repair any greedy choice that blocks a
/// larger matching.
pub fn max_matching<G, P>(gold: &[G], pred: &[P], compatible: impl Fn(&G, &P) -> bool) -> usize {
    let adj: Vec<Vec<usize>> = gold
        .iter()
        .map(|g| (0..pred.len()).filter(|&j| compatible(g, &pred[j])).collect())
        .collect();
    let mut pred_match: Vec<Option<usize>> = vec![None; pred.len()];

    fn augment(g: usize, adj: &[Vec<usize>], seen: &mut [bool], pred_match: &mut [Option<usize>]) -> bool {
        for &p in &adj[g] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if pred_match[p].is_none_or(|other| augment(other, adj, seen, pred_match)) {
                pred_match[p] = Some(g);
                return true;
            }
        }
        false
    }

    let mut size = 0;
    for g in 0..gold.len() {
        let mut seen = vec![false; pred.len()];
        if augment(g, &adj, &mut seen, &mut pred_match) {
            size += 1;
        }
    }
    size
}

fn sorted<T: Ord + Clone>(items: &[T]) -> Vec<T> {
    let mut v = items.to_vec();
    v.sort();
    v
}

pub fn span_counts(gold: &[Span], pred: &[Span], scheme: Scheme) -> Counts {
    let (g, p) = (sorted(gold), sorted(pred));
    let tp = match scheme {
        Scheme::Strict => max_matching(&g, &p, |a, b| a == b),
        Scheme::Lenient => max_matching(&g, &p, |a, b| a.entity_type == b.entity_type && a.overlaps(b)),
    };
    Counts::from_matching(tp, g.len(), p.len())
}

pub fn strict_f1(gold: &[Span], pred: &[Span]) -> EvalReport {
    EvalReport::from_counts(Task::Tagging, Scheme::Strict, span_counts(gold, pred, Scheme::Strict))
}

pub fn lenient_f1(gold: &[Span], pred: &[Span]) -> EvalReport {
    EvalReport::from_counts(Task::Tagging, Scheme::Lenient, span_counts(gold, pred, Scheme::Lenient))
}

pub fn relation_counts(gold: &[RelationInstance], pred: &[RelationInstance], scheme: Scheme) -> Counts {
    let (g, p) = (sorted(gold), sorted(pred));
    let tp = match scheme {
        Scheme::Strict => max_matching(&g, &p, |a, b| a == b),
        Scheme::Lenient => max_matching(&g, &p, |a, b| {
            a.relation_type == b.relation_type && a.head.overlaps(&b.head) && a.tail.overlaps(&b.tail)
        }),
    };
    Counts::from_matching(tp, g.len(), p.len())
}

pub fn relation_f1(gold: &[RelationInstance], pred: &[RelationInstance], scheme: Scheme) -> EvalReport {
    EvalReport::from_counts(Task::Relation, scheme, relation_counts(gold, pred, scheme))
}

/// Micro scores over documents: per-document counts are summed first.
pub fn micro_span_report(docs: &[(Vec<Span>, Vec<Span>)], scheme: Scheme) -> EvalReport {
    let c = docs.iter().map(|(g, p)| span_counts(g, p, scheme)).sum();
    EvalReport::from_counts(Task::Tagging, scheme, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub sample_size: usize,
    pub reps: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            sample_size: 200,
            reps: 30,
            level: 0.95,
        }
    }
}

/// Percentile bootstrap: `reps` resamples of `sample_size` instances drawn
/// with replacement, `statistic` evaluated on each, and the
/// `(1-level)/2` and `(1+level)/2` quantiles (linear interpolation)
/// returned.
pub fn bootstrap_ci<T>(
    instances: &[T],
    statistic: impl Fn(&[&T]) -> f64,
    config: &BootstrapConfig,
    seed: u64,
) -> (f64, f64) {
    assert!(!instances.is_empty(), "bootstrap needs at least one instance");
    assert!(config.reps >= 1 && config.sample_size >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..config.reps)
        .map(|_| {
            let sample: Vec<&T> = (0..config.sample_size)
                .map(|_| &instances[rng.random_range(0..instances.len())])
                .collect();
            statistic(&sample)
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    (quantile(&values, tail), quantile(&values, 1.0 - tail))
}

/// Bootstrap interval of the mean of per-instance scores.
pub fn bootstrap_ci_scores(scores: &[f64], config: &BootstrapConfig, seed: u64) -> (f64, f64) {
    bootstrap_ci(
        scores,
        |s| s.iter().copied().sum::<f64>() / s.len() as f64,
        config,
        seed,
    )
}

/// Bootstrap interval of micro F1 over per-instance counts.
pub fn bootstrap_ci_f1(counts: &[Counts], config: &BootstrapConfig, seed: u64) -> (f64, f64) {
    bootstrap_ci(counts, |s| s.iter().copied().copied().sum::<Counts>().f1(), config, seed)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Samples of combined size at most this use the exact permutation
/// distribution of the rank sum; larger ones use the normal approximation.
pub const EXACT_RANK_SUM_LIMIT: usize = 20;

/// Midranks (1-based) of the pooled sample, plus the tie groups' sizes.
fn midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut pooled: Vec<(f64, usize)> = a.iter().chain(b).copied().zip(0..).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &pooled[i..=j] {
            ranks[item.1] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-tailed Wilcoxon rank-sum p-value with midranks for ties.
///
/// For `|a| + |b| <= EXACT_RANK_SUM_LIMIT` the p-value is exact: the share
/// of all `C(N, |a|)` assignments of the pooled midranks whose rank sum is
/// at least as far from its mean as the observed one. Larger samples use
/// the normal approximation with tie-corrected variance and continuity
/// correction ([`rank_sum_normal_p`]).
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "both samples must be non-empty");
    if a.len() + b.len() <= EXACT_RANK_SUM_LIMIT {
        rank_sum_exact_p(a, b)
    } else {
        rank_sum_normal_p(a, b)
    }
}

/// Normal approximation of the two-tailed rank-sum p-value. Accurate to
/// about 0.04 when both samples have at least three values; with one or two
/// values on a side it can be off by more than 0.1.
pub fn rank_sum_normal_p(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let (ranks, ties) = midranks(a, b);
    let w: f64 = ranks[..a.len()].iter().sum();
    let mean = n1 * (n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 || !var.is_finite() {
        return 1.0;
    }
    let dev = (w - mean).abs() - 0.5;
    if dev <= 0.0 {
        return 1.0;
    }
    let z = dev / var.sqrt();
    let std = Normal::standard();
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Exact permutation p-value, counting rank-sum outcomes by dynamic
/// programming over doubled (integer) midranks.
fn rank_sum_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let n1 = a.len();
    let (ranks, _) = midranks(a, b);
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let observed: usize = doubled[..n1].iter().sum();
    // mean of the doubled sum is n1·(N+1); compare doubled deviations
    let mean2 = (n1 * (a.len() + b.len() + 1)) as i64;
    let obs_dev = (observed as i64 - mean2).abs();
    let (mut extreme, mut total) = (0.0, 0.0);
    for (s, &count) in ways[n1].iter().enumerate() {
        if count == 0.0 {
            continue;
        }
        total += count;
        if (s as i64 - mean2).abs() >= obs_dev {
            extreme += count;
        }
    }
    (extreme / total).min(1.0)
}
