//! Server-side client weighting and adapter aggregation.
//!
//! Two weightings are supported. Size weights use each client's dataset
//! size. Influence-aware weights first score every client's adapters on a
//! small server validation set, turn the negated losses into a softmax
//! (`I_k`), and then combine them with dataset sizes:
//! `C_k = n_k·I_k / Σ n_i·I_i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::matrix::Matrix;
use crate::model::{Example, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub usize);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `(1/m)·(n_k/N)` with `N` the size of all clients' data, as in the
    /// unnormalized update rule. Sums to less than one.
    Literal,
    /// Weights renormalized over the participating clients.
    #[default]
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub mode: WeightMode,
    pub weights: BTreeMap<ClientId, f64>,
}

impl AggregationWeights {
    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub client_ids: Vec<ClientId>,
    pub val_losses: Vec<f64>,
    pub influences: Vec<f64>,
    pub weights: Vec<f64>,
    /// Shift `c` subtracted inside the exponent, `exp(-l_k - c)`.
    pub stability_shift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationRule {
    /// Average both factors.
    MedLora,
    /// Average `A` only; every client keeps its own `B`.
    FedSa,
}

/// Mean cross-entropy of the merged model `backbone + adapters` over the
/// validation set.
pub fn validation_loss(model: &ToyModel, adapters: &AdapterSet, validation: &[Example]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    model.with_adapters(adapters.clone())?.loss(validation)
}

/// Softmax influence scores of negated losses, plus the shift used.
pub fn influence_scores(val_losses: &[f64]) -> Result<(Vec<f64>, f64)> {
    if val_losses.is_empty() {
        return Err(Error::InvalidInput("no validation losses".into()));
    }
    if let Some(bad) = val_losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::InvalidInput(format!("validation loss {bad} is not finite")));
    }
    // c = max_i(-l_i) keeps every exponent at or below zero.
    let shift = val_losses.iter().map(|l| -l).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = val_losses.iter().map(|l| (-l - shift).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok((exps.iter().map(|e| e / total).collect(), shift))
}

/// `C_k = n_k·I_k / Σ n_i·I_i`.
///
/// Influences are divided by their maximum first. This leaves the weights
/// unchanged mathematically, and when all influences are equal every ratio
/// is exactly one, so the result is bit-identical to normalized size
/// weights.
pub fn data_aware_weights(sizes: &[u64], influences: &[f64]) -> Result<Vec<f64>> {
    if sizes.len() != influences.len() || sizes.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} sizes for {} influences",
            sizes.len(),
            influences.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidInput("client dataset sizes must be positive".into()));
    }
    if influences.iter().any(|i| !(i.is_finite() && *i >= 0.0)) {
        return Err(Error::InvalidInput("influences must be finite and non-negative".into()));
    }
    let max = influences.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::InvalidInput("all size·influence products are zero".into()));
    }
    let products: Vec<f64> = sizes
        .iter()
        .zip(influences)
        .map(|(&n, &i)| n as f64 * (i / max))
        .collect();
    let total: f64 = products.iter().sum();
    Ok(products.iter().map(|p| p / total).collect())
}

/// Size-based weights for the participating clients. `n_total` is the
/// data size over all clients and is only used in `Literal` mode.
pub fn size_weights(sizes: &BTreeMap<ClientId, u64>, n_total: u64, mode: WeightMode) -> Result<AggregationWeights> {
    if sizes.is_empty() {
        return Err(Error::InvalidInput("no participating clients".into()));
    }
    let weights = match mode {
        WeightMode::Normalized => {
            let total: f64 = sizes.values().map(|&n| n as f64).sum();
            sizes.iter().map(|(&k, &n)| (k, n as f64 / total)).collect()
        }
        WeightMode::Literal => {
            let m = sizes.len() as f64;
            sizes
                .iter()
                .map(|(&k, &n)| (k, (1.0 / m) * (n as f64 / n_total as f64)))
                .collect()
        }
    };
    Ok(AggregationWeights { mode, weights })
}

/// Full influence-aware pipeline for one round: validation losses, softmax
/// influences, data-aware weights. In `Literal` mode the weights are
/// additionally multiplied by `1/m`.
pub fn influence_weights(
    val_losses: &BTreeMap<ClientId, f64>,
    sizes: &BTreeMap<ClientId, u64>,
    mode: WeightMode,
) -> Result<(AggregationWeights, InfluenceReport)> {
    if val_losses.keys().ne(sizes.keys()) {
        return Err(Error::InvalidInput("losses and sizes cover different clients".into()));
    }
    let client_ids: Vec<ClientId> = val_losses.keys().copied().collect();
    let losses: Vec<f64> = val_losses.values().copied().collect();
    let (influences, shift) = influence_scores(&losses)?;
    let n: Vec<u64> = sizes.values().copied().collect();
    let data_aware = data_aware_weights(&n, &influences)?;
    let m = client_ids.len() as f64;
    let weights = client_ids
        .iter()
        .zip(&data_aware)
        .map(|(&k, &c)| {
            let w = match mode {
                WeightMode::Normalized => c,
                WeightMode::Literal => (1.0 / m) * c,
            };
            (k, w)
        })
        .collect();
    let report = InfluenceReport {
        client_ids,
        val_losses: losses,
        influences,
        weights: data_aware,
        stability_shift: shift,
    };
    Ok((AggregationWeights { mode, weights }, report))
}

/// Result of one aggregation step.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregated {
    /// Both factors averaged into one global adapter set.
    Global(AdapterSet),
    /// `A` averaged; each client's next model pairs its own `B` with the
    /// shared `A`.
    SharedA {
        a: BTreeMap<String, Matrix>,
        personalized: BTreeMap<ClientId, AdapterSet>,
    },
}

/// `Σ w_k X_k` in ascending client order, seeded with the first term so a
/// single client with weight one is reproduced bit-for-bit.
fn weighted_sum<'a>(terms: impl Iterator<Item = (f64, &'a Matrix)>) -> Matrix {
    let mut acc: Option<Matrix> = None;
    for (w, m) in terms {
        match acc.as_mut() {
            None => acc = Some(m.scaled(w)),
            Some(acc) => {
                for (a, x) in acc.data_mut().iter_mut().zip(m.data()) {
                    *a += w * x;
                }
            }
        }
    }
    acc.expect("at least one term")
}

pub fn aggregate(
    sets: &BTreeMap<ClientId, AdapterSet>,
    weights: &AggregationWeights,
    rule: AggregationRule,
) -> Result<Aggregated> {
    let first = sets
        .values()
        .next()
        .ok_or_else(|| Error::InvalidInput("nothing to aggregate".into()))?;
    if sets.keys().ne(weights.weights.keys()) {
        return Err(Error::InvalidInput(format!(
            "weights cover clients {:?} but adapters come from {:?}",
            weights.weights.keys().collect::<Vec<_>>(),
            sets.keys().collect::<Vec<_>>()
        )));
    }
    for set in sets.values().skip(1) {
        first.check_compatible(set)?;
    }
    fn terms<'a>(
        sets: &'a BTreeMap<ClientId, AdapterSet>,
        weights: &'a AggregationWeights,
        key: &'a str,
        pick_b: bool,
    ) -> impl Iterator<Item = (f64, &'a Matrix)> + 'a {
        sets.iter().map(move |(k, set)| {
            let pair = set.get(key).expect("compatible sets share keys");
            (weights.weights[k], if pick_b { pair.b() } else { pair.a() })
        })
    }
    match rule {
        AggregationRule::MedLora => {
            let mut global = first.clone();
            for (key, pair) in global.iter_mut() {
                *pair.b_mut() = weighted_sum(terms(sets, weights, key, true));
                *pair.a_mut() = weighted_sum(terms(sets, weights, key, false));
            }
            Ok(Aggregated::Global(global))
        }
        AggregationRule::FedSa => {
            let a: BTreeMap<String, Matrix> = first
                .keys()
                .map(|key| (key.clone(), weighted_sum(terms(sets, weights, key, false))))
                .collect();
            let personalized = sets
                .iter()
                .map(|(&k, set)| {
                    let mut next = set.clone();
                    for (key, pair) in next.iter_mut() {
                        pair.set_a(a[key].clone());
                    }
                    (k, next)
                })
                .collect();
            Ok(Aggregated::SharedA { a, personalized })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::AdapterPair;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng) -> AdapterSet {
        let mut set = AdapterSet::new();
        for (key, d, l) in [("x", 3, 4), ("y", 5, 2)] {
            set.insert(
                key,
                AdapterPair::new(key, Matrix::normal(d, 2, 1.0, rng), Matrix::normal(2, l, 1.0, rng), 4.0).unwrap(),
            );
        }
        set
    }

    fn normalized(ws: &[f64]) -> AggregationWeights {
        AggregationWeights {
            mode: WeightMode::Normalized,
            weights: ws.iter().enumerate().map(|(i, &w)| (ClientId(i), w)).collect(),
        }
    }

    #[test]
    fn influence_examples() {
        let (eq, _) = influence_scores(&[0.7; 4]).unwrap();
        assert!(eq.iter().all(|&i| i == 0.25));

        let (pair, _) = influence_scores(&[0.5, 1.0]).unwrap();
        let e = (-0.5f64).exp();
        assert!((pair[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((pair[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((pair[0] - 0.62246).abs() < 1e-5 && (pair[1] - 0.37754).abs() < 1e-5);

        assert!(influence_scores(&[0.1, f64::NAN]).is_err());
        assert!(influence_scores(&[]).is_err());
    }

    #[test]
    fn huge_losses_do_not_overflow() {
        let (i, _) = influence_scores(&[0.0, 5_000.0]).unwrap();
        assert_eq!(i, vec![1.0, 0.0]);
    }

    #[test]
    fn data_aware_examples() {
        let c = data_aware_weights(&[100, 300], &[0.75, 0.25]).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        assert_eq!(data_aware_weights(&[17], &[1.0]).unwrap(), vec![1.0]);

        let sizes = [120u64, 75, 310];
        let c = data_aware_weights(&sizes, &[1.0 / 3.0; 3]).unwrap();
        let n: BTreeMap<ClientId, u64> = sizes.iter().enumerate().map(|(i, &n)| (ClientId(i), n)).collect();
        let s = size_weights(&n, 505, WeightMode::Normalized).unwrap();
        let s: Vec<f64> = s.weights.values().copied().collect();
        assert_eq!(c, s);
        assert!(data_aware_weights(&[1, 2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn size_weight_modes() {
        let sizes: BTreeMap<ClientId, u64> = [(ClientId(0), 1), (ClientId(1), 1)].into();
        let lit = size_weights(&sizes, 2, WeightMode::Literal).unwrap();
        assert_eq!(lit.weights.values().copied().collect::<Vec<_>>(), vec![0.25, 0.25]);
        assert_eq!(lit.sum(), 0.5);

        let sizes: BTreeMap<ClientId, u64> = (0..5).map(|i| (ClientId(i), 40)).collect();
        let norm = size_weights(&sizes, 200, WeightMode::Normalized).unwrap();
        assert!(norm.weights.values().all(|&w| w == 0.2));
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1_000 {
            let k = rng.random_range(1..12);
            let sizes: BTreeMap<ClientId, u64> = (0..k).map(|i| (ClientId(i), rng.random_range(1..10_000))).collect();
            let w = size_weights(&sizes, 1, WeightMode::Normalized).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_set(&mut rng);
        let sets: BTreeMap<_, _> = (0..3).map(|i| (ClientId(i), s.clone())).collect();
        let Aggregated::Global(g) = aggregate(&sets, &normalized(&[0.2, 0.3, 0.5]), AggregationRule::MedLora).unwrap()
        else {
            panic!()
        };
        for (key, pair) in g.iter() {
            assert!(pair.b().max_abs_diff(s.get(key).unwrap().b()) < 1e-12);
            assert!(pair.a().max_abs_diff(s.get(key).unwrap().a()) < 1e-12);
        }

        let t = random_set(&mut rng);
        let sets: BTreeMap<_, _> = [(ClientId(0), s.clone()), (ClientId(1), t)].into();
        let Aggregated::Global(g) = aggregate(&sets, &normalized(&[1.0, 0.0]), AggregationRule::MedLora).unwrap()
        else {
            panic!()
        };
        assert_eq!(g, s);
    }

    #[test]
    fn aggregate_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets: BTreeMap<_, _> = (0..3).map(|i| (ClientId(i), random_set(&mut rng))).collect();
        let w = [0.2, 0.3, 0.5];
        let Aggregated::Global(g) = aggregate(&sets, &normalized(&w), AggregationRule::MedLora).unwrap() else {
            panic!()
        };
        for (key, pair) in g.iter() {
            for (pick_b, got) in [(true, pair.b()), (false, pair.a())] {
                for idx in 0..got.len() {
                    let mut expected = 0.0;
                    for (i, set) in sets.values().enumerate() {
                        let p = set.get(key).unwrap();
                        expected += w[i] * if pick_b { p.b().data()[idx] } else { p.a().data()[idx] };
                    }
                    assert!((got.data()[idx] - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn fedsa_keeps_b_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sets: BTreeMap<_, _> = (0..2).map(|i| (ClientId(i), random_set(&mut rng))).collect();
        let Aggregated::SharedA { a, personalized } =
            aggregate(&sets, &normalized(&[0.5, 0.5]), AggregationRule::FedSa).unwrap()
        else {
            panic!()
        };
        for (k, set) in &personalized {
            for (key, pair) in set.iter() {
                assert_eq!(pair.b(), sets[k].get(key).unwrap().b());
                assert_eq!(pair.a(), &a[key]);
            }
        }
    }

    #[test]
    fn aggregate_rejects_incompatible_and_mismatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut odd = random_set(&mut rng);
        odd.insert(
            "x",
            AdapterPair::new("x", Matrix::zeros(3, 1), Matrix::zeros(1, 4), 4.0).unwrap(),
        );
        let sets: BTreeMap<_, _> = [(ClientId(0), random_set(&mut rng)), (ClientId(1), odd)].into();
        let err = aggregate(&sets, &normalized(&[0.5, 0.5]), AggregationRule::MedLora).unwrap_err();
        assert!(matches!(err, Error::Incompatible(ref m) if m.contains("`x`")), "{err}");

        let sets: BTreeMap<_, _> = [(ClientId(0), random_set(&mut rng))].into();
        assert!(aggregate(&sets, &normalized(&[0.5, 0.5]), AggregationRule::MedLora).is_err());
    }

    /// Averaging factors is not averaging products: (ΣwB)(ΣwA) ≠ Σw(BA).
    #[test]
    fn factor_average_differs_from_product_average() {
        let mk = |b: [f64; 2], a: [f64; 2]| {
            let mut s = AdapterSet::new();
            s.insert(
                "w",
                AdapterPair::new("w", Matrix::new(2, 1, b.to_vec()).unwrap(), Matrix::new(1, 2, a.to_vec()).unwrap(), 1.0)
                    .unwrap(),
            );
            s
        };
        let s0 = mk([1.0, 0.0], [1.0, 0.0]);
        let s1 = mk([0.0, 1.0], [0.0, 1.0]);
        let sets: BTreeMap<_, _> = [(ClientId(0), s0.clone()), (ClientId(1), s1.clone())].into();
        let Aggregated::Global(g) = aggregate(&sets, &normalized(&[0.5, 0.5]), AggregationRule::MedLora).unwrap() else {
            panic!()
        };
        let product_of_average = g.get("w").unwrap().delta();
        let mut average_of_products = s0.get("w").unwrap().delta().scaled(0.5);
        average_of_products.add_scaled(&s1.get("w").unwrap().delta(), 0.5);
        assert_eq!(product_of_average.data(), &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(average_of_products.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn influences_sum_to_one_and_are_monotone(losses in prop::collection::vec(0.0f64..20.0, 1..10), shift in -5.0f64..5.0) {
            let (inf, _) = influence_scores(&losses).unwrap();
            prop_assert!((inf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
            let (inf2, _) = influence_scores(&shifted).unwrap();
            for (a, b) in inf.iter().zip(&inf2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..losses.len() {
                for j in 0..losses.len() {
                    if losses[i] < losses[j] {
                        prop_assert!(inf[i] > inf[j]);
                    }
                }
            }
        }

        #[test]
        fn aggregate_is_convex(seed in 0u64..1_000, raw in prop::collection::vec(0.01f64..1.0, 2..5)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let sets: BTreeMap<_, _> = (0..w.len()).map(|i| (ClientId(i), random_set(&mut rng))).collect();
            let Aggregated::Global(g) = aggregate(&sets, &normalized(&w), AggregationRule::MedLora).unwrap() else {
                panic!()
            };
            for (key, pair) in g.iter() {
                for idx in 0..pair.b().len() {
                    let vals: Vec<f64> = sets.values().map(|s| s.get(key).unwrap().b().data()[idx]).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let v = pair.b().data()[idx];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
