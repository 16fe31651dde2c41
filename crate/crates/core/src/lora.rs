//! Low-rank adapter algebra.
//!
//! A layer with frozen weight `W0 ∈ R^{d×l}` is adapted by a pair
//! `B ∈ R^{d×r}`, `A ∈ R^{r×l}`; the effective weight is
//! `W0 + (alpha / r) · B · A`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Half-width of the uniform distribution `A` is initialized from.
pub const A_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    b: Matrix,
    a: Matrix,
    alpha: f64,
}

impl AdapterPair {
    pub fn new(key: &str, b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidAdapter {
            key: key.to_string(),
            reason,
        };
        if b.cols() != a.rows() {
            return Err(invalid(format!(
                "B is {}x{} but A is {}x{}; B.cols must equal A.rows",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let rank = b.cols();
        if rank > b.rows().min(a.cols()) {
            return Err(invalid(format!(
                "rank {rank} exceeds min(d, l) = {}",
                b.rows().min(a.cols())
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(invalid(format!("alpha must be a positive finite number, got {alpha}")));
        }
        if !b.is_finite() || !a.is_finite() {
            return Err(invalid("non-finite factor entry".into()));
        }
        Ok(Self { b, a, alpha })
    }

    /// Standard initialization: `B = 0`, `A ~ U[-0.05, 0.05]`.
    pub fn init<R: Rng + ?Sized>(d: usize, l: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        let b = Matrix::zeros(d, rank);
        let a = Matrix::uniform(rank, l, -A_INIT_RANGE, A_INIT_RANGE, rng);
        Self::new("<init>", b, a, alpha).expect("valid initial adapter")
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub(crate) fn set_a(&mut self, a: Matrix) {
        debug_assert_eq!(a.shape(), self.a.shape());
        self.a = a;
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d(&self) -> usize {
        self.b.rows()
    }

    pub fn l(&self) -> usize {
        self.a.cols()
    }

    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(alpha / rank) · B · A`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).scaled(self.scale())
    }

    pub fn param_count(&self) -> u64 {
        (self.b.len() + self.a.len()) as u64
    }

    /// `(d, l, rank, alpha)`: everything two pairs must share to be averaged.
    pub fn signature(&self) -> (usize, usize, usize, u64) {
        (self.d(), self.l(), self.rank(), self.alpha.to_bits())
    }
}

/// Adapters keyed by layer, ordered by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    layers: BTreeMap<String, AdapterPair>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, pair: AdapterPair) -> Option<AdapterPair> {
        self.layers.insert(key.into(), pair)
    }

    pub fn get(&self, key: &str) -> Option<&AdapterPair> {
        self.layers.get(key)
    }

    #[cfg(test)]
    pub(crate) fn get_mut(&mut self, key: &str) -> Option<&mut AdapterPair> {
        self.layers.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AdapterPair)> {
        self.layers.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut AdapterPair)> {
        self.layers.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.layers.keys()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> u64 {
        self.layers.values().map(AdapterPair::param_count).sum()
    }

    /// Parameters in the `A` factors only.
    pub fn a_param_count(&self) -> u64 {
        self.layers.values().map(|p| p.a().len() as u64).sum()
    }

    /// Checks that both sets have the same keys and, per key, the same
    /// `(d, l, rank, alpha)`.
    pub fn check_compatible(&self, other: &AdapterSet) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.layers.keys().zip(other.layers.keys()).any(|(a, b)| a != b)
        {
            let ours: Vec<_> = self.layers.keys().collect();
            let theirs: Vec<_> = other.layers.keys().collect();
            return Err(Error::Incompatible(format!("layer keys differ: {ours:?} vs {theirs:?}")));
        }
        for (key, pair) in &self.layers {
            let other_pair = &other.layers[key];
            if pair.signature() != other_pair.signature() {
                return Err(Error::Incompatible(format!(
                    "layer `{key}`: (d, l, rank, alpha) = ({}, {}, {}, {}) vs ({}, {}, {}, {})",
                    pair.d(),
                    pair.l(),
                    pair.rank(),
                    pair.alpha(),
                    other_pair.d(),
                    other_pair.l(),
                    other_pair.rank(),
                    other_pair.alpha()
                )));
            }
        }
        Ok(())
    }

    /// Same set with every `B` replaced by zeros.
    pub fn with_zero_b(&self) -> AdapterSet {
        let mut out = self.clone();
        for (_, pair) in out.iter_mut() {
            pair.b_mut().data_mut().fill(0.0);
        }
        out
    }
}

/// Frozen parameters: adaptable layers by key plus the embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    layers: BTreeMap<String, Matrix>,
    embedding: Matrix,
}

impl BackboneWeights {
    pub fn new(layers: BTreeMap<String, Matrix>, embedding: Matrix) -> Self {
        Self { layers, embedding }
    }

    pub fn layer(&self, key: &str) -> Option<&Matrix> {
        self.layers.get(key)
    }

    pub fn layers(&self) -> &BTreeMap<String, Matrix> {
        &self.layers
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    /// SHA-256 over every frozen entry, in key order.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        let push = |bytes: &mut Vec<u8>, m: &Matrix| {
            bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&mut bytes, &self.embedding);
        for (key, m) in &self.layers {
            bytes.extend_from_slice(key.as_bytes());
            push(&mut bytes, m);
        }
        crate::seed::checksum(&bytes)
    }
}

/// Effective weights `W0 + (alpha/r)·B·A` for adapted layers; other layers
/// are passed through unchanged.
pub fn merge(backbone: &BackboneWeights, adapters: &AdapterSet) -> Result<BTreeMap<String, Matrix>> {
    for (key, pair) in adapters.iter() {
        let w0 = backbone
            .layer(key)
            .ok_or_else(|| Error::UnknownLayer { key: key.clone() })?;
        if w0.shape() != (pair.d(), pair.l()) {
            return Err(Error::ShapeMismatch {
                key: key.clone(),
                expected: w0.shape(),
                found: (pair.d(), pair.l()),
            });
        }
    }
    let mut out = BTreeMap::new();
    for (key, w0) in backbone.layers() {
        let merged = match adapters.get(key) {
            Some(pair) => {
                let mut w = w0.clone();
                w.add_scaled(&pair.b().matmul(pair.a()), pair.scale());
                w
            }
            None => w0.clone(),
        };
        out.insert(key.clone(), merged);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub full: u64,
    pub lora: u64,
}

/// Parameters moved per round for one `d×l` layer: `d·l` for the full
/// matrix, `d·r + r·l` for its adapter.
pub fn param_counts(d: u64, l: u64, r: u64) -> ParamCounts {
    ParamCounts {
        full: d * l,
        lora: d * r + r * l,
    }
}

/// One adapted projection shape inside a decoder block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetModule {
    pub name: &'static str,
    pub d: u64,
    pub l: u64,
}

/// A named backbone shape: the adapted projections of each decoder block,
/// how many blocks there are, and the total backbone size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackbonePreset {
    pub name: &'static str,
    pub total_params: u64,
    pub blocks: u64,
    pub rank: u64,
    pub modules: Vec<TargetModule>,
}

impl BackbonePreset {
    /// LLaMA3-8B with rank-16 adapters on every attention and MLP projection
    /// (q, k, v, o, gate, up, down) of all 32 blocks. Grouped-query attention
    /// gives k/v an output width of 1024.
    pub fn llama3_8b() -> Self {
        let m = |name, d, l| TargetModule { name, d, l };
        Self {
            name: "llama3-8b",
            total_params: 8_030_261_248,
            blocks: 32,
            rank: 16,
            modules: vec![
                m("q_proj", 4096, 4096),
                m("k_proj", 4096, 1024),
                m("v_proj", 4096, 1024),
                m("o_proj", 4096, 4096),
                m("gate_proj", 4096, 14336),
                m("up_proj", 4096, 14336),
                m("down_proj", 14336, 4096),
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "llama3-8b" => Some(Self::llama3_8b()),
            _ => None,
        }
    }

    pub fn lora_params(&self) -> u64 {
        self.blocks
            * self
                .modules
                .iter()
                .map(|m| param_counts(m.d, m.l, self.rank).lora)
                .sum::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone_1x1(w: f64) -> BackboneWeights {
        let mut layers = BTreeMap::new();
        layers.insert("w".to_string(), Matrix::new(1, 1, vec![w]).unwrap());
        BackboneWeights::new(layers, Matrix::zeros(1, 1))
    }

    fn naive_product(b: &Matrix, a: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), a.cols());
        for i in 0..b.rows() {
            for j in 0..a.cols() {
                let mut acc = 0.0;
                for k in 0..b.cols() {
                    acc += b.get(i, k) * a.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn merge_one_by_one() {
        let backbone = backbone_1x1(2.0);
        let mut set = AdapterSet::new();
        let pair = AdapterPair::new(
            "w",
            Matrix::new(1, 1, vec![3.0]).unwrap(),
            Matrix::new(1, 1, vec![4.0]).unwrap(),
            1.0,
        )
        .unwrap();
        set.insert("w", pair);
        let merged = merge(&backbone, &set).unwrap();
        assert_eq!(merged["w"].data(), &[14.0]);
    }

    #[test]
    fn zero_b_leaves_backbone_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layers = BTreeMap::new();
        layers.insert("w".to_string(), Matrix::normal(5, 4, 1.0, &mut rng));
        layers.insert("frozen".to_string(), Matrix::normal(2, 2, 1.0, &mut rng));
        let backbone = BackboneWeights::new(layers, Matrix::zeros(1, 1));
        let mut set = AdapterSet::new();
        set.insert("w", AdapterPair::init(5, 4, 2, 8.0, &mut rng));
        let merged = merge(&backbone, &set).unwrap();
        for (key, w) in backbone.layers() {
            let bits: Vec<u64> = w.data().iter().map(|v| v.to_bits()).collect();
            let merged_bits: Vec<u64> = merged[key].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, merged_bits, "layer {key}");
        }
    }

    #[test]
    fn merge_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = Matrix::normal(4, 4, 1.0, &mut rng);
        let b = Matrix::normal(4, 2, 1.0, &mut rng);
        let a = Matrix::normal(2, 4, 1.0, &mut rng);
        let mut layers = BTreeMap::new();
        layers.insert("w".to_string(), w0.clone());
        let backbone = BackboneWeights::new(layers, Matrix::zeros(1, 1));
        let mut set = AdapterSet::new();
        set.insert("w", AdapterPair::new("w", b.clone(), a.clone(), 4.0).unwrap());
        let merged = merge(&backbone, &set).unwrap();

        // alpha / rank = 2
        let prod = naive_product(&b, &a);
        let expected = Matrix::from_fn(4, 4, |i, j| w0.get(i, j) + 2.0 * prod.get(i, j));
        assert!(merged["w"].max_abs_diff(&expected) < 1e-12);
        assert_eq!(backbone.layer("w").unwrap(), &w0);
    }

    #[test]
    fn merge_of_weighted_factor_sums_expands_as_product_of_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = Matrix::normal(3, 3, 1.0, &mut rng);
        let bs: Vec<Matrix> = (0..2).map(|_| Matrix::normal(3, 2, 1.0, &mut rng)).collect();
        let as_: Vec<Matrix> = (0..2).map(|_| Matrix::normal(2, 3, 1.0, &mut rng)).collect();
        let w = [0.3, 0.7];
        let mut b_sum = Matrix::zeros(3, 2);
        let mut a_sum = Matrix::zeros(2, 3);
        for i in 0..2 {
            b_sum.add_scaled(&bs[i], w[i]);
            a_sum.add_scaled(&as_[i], w[i]);
        }
        let mut layers = BTreeMap::new();
        layers.insert("w".to_string(), w0.clone());
        let backbone = BackboneWeights::new(layers, Matrix::zeros(1, 1));
        let mut set = AdapterSet::new();
        set.insert("w", AdapterPair::new("w", b_sum, a_sum, 2.0).unwrap());
        let merged = merge(&backbone, &set).unwrap();

        // brute-force expansion of s · (Σ w_i B_i)(Σ w_j A_j), s = 1
        let expected = Matrix::from_fn(3, 3, |r, c| {
            let mut acc = w0.get(r, c);
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        acc += w[i] * w[j] * bs[i].get(r, k) * as_[j].get(k, c);
                    }
                }
            }
            acc
        });
        assert!(merged["w"].max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn merge_reports_shape_mismatch_with_key() {
        let backbone = backbone_1x1(1.0);
        let mut set = AdapterSet::new();
        set.insert(
            "w",
            AdapterPair::new("w", Matrix::zeros(2, 1), Matrix::zeros(1, 2), 1.0).unwrap(),
        );
        match merge(&backbone, &set) {
            Err(Error::ShapeMismatch { key, expected, found }) => {
                assert_eq!(key, "w");
                assert_eq!(expected, (1, 1));
                assert_eq!(found, (2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut set = AdapterSet::new();
        set.insert(
            "missing",
            AdapterPair::new("missing", Matrix::zeros(1, 1), Matrix::zeros(1, 1), 1.0).unwrap(),
        );
        assert!(matches!(merge(&backbone, &set), Err(Error::UnknownLayer { .. })));
    }

    #[test]
    fn adapter_pair_validation() {
        assert!(AdapterPair::new("k", Matrix::zeros(4, 2), Matrix::zeros(3, 4), 1.0).is_err());
        assert!(AdapterPair::new("k", Matrix::zeros(4, 3), Matrix::zeros(3, 2), 1.0).is_err());
        assert!(AdapterPair::new("k", Matrix::zeros(4, 2), Matrix::zeros(2, 4), 0.0).is_err());
        assert!(AdapterPair::new("k", Matrix::zeros(4, 2), Matrix::zeros(2, 4), 8.0).is_ok());
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(
            param_counts(4096, 4096, 16),
            ParamCounts {
                full: 16_777_216,
                lora: 131_072
            }
        );
        assert_eq!(param_counts(1, 1, 1), ParamCounts { full: 1, lora: 2 });
    }

    #[test]
    fn lora_not_larger_than_full_up_to_half_min_dim() {
        for d in 2..40u64 {
            for l in 2..40u64 {
                for r in 1..=d.min(l) / 2 {
                    let c = param_counts(d, l, r);
                    // r(d + l) <= dl, with equality only at d = l = 2r
                    assert!(c.lora <= c.full, "d={d} l={l} r={r}");
                    assert_eq!(c.lora == c.full, d == l && d == 2 * r, "d={d} l={l} r={r}");
                }
            }
        }
    }

    #[test]
    fn llama3_8b_preset_matches_reported_adapter_size() {
        let preset = BackbonePreset::llama3_8b();
        assert_eq!(preset.lora_params(), 41_943_040);
        assert_eq!(preset.total_params, 8_030_261_248);
    }
}
