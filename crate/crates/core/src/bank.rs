//! Attribute prefix banks: the N x M x D table holding one prefix per
//! attribute of an aspect, its training-time low-rank parameterization, and
//! the composition/permutation operations on exported banks.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrefixKv};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, Tensor};

/// A controllable aspect: its name and the ordered attribute set. Attribute
/// order is fixed at creation; label index equals prefix index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AspectSchema {
    pub aspect_name: String,
    pub attributes: Vec<String>,
}

impl AspectSchema {
    pub fn new(aspect_name: impl Into<String>, attributes: Vec<String>) -> Result<Self> {
        let aspect_name = aspect_name.into();
        if attributes.is_empty() {
            return Err(Error::Config(format!("aspect {aspect_name} has no attributes")));
        }
        for (i, a) in attributes.iter().enumerate() {
            if attributes[..i].contains(a) {
                return Err(Error::Config(format!("duplicate attribute {a} in {aspect_name}")));
            }
        }
        Ok(Self { aspect_name, attributes })
    }

    pub fn n(&self) -> usize {
        self.attributes.len()
    }

    pub fn index_of(&self, attribute: &str) -> Result<usize> {
        self.attributes.iter().position(|a| a == attribute).ok_or_else(|| {
            Error::InvalidInput(format!(
                "attribute {attribute} not in aspect {}",
                self.aspect_name
            ))
        })
    }
}

/// Where a bank came from; saved alongside the table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BankProvenance {
    pub regime: String,
    pub seed: u64,
    pub config_hash: String,
}

/// An exported prefix bank: the dense table only, one row block per
/// attribute. This is all that generation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank<T> {
    pub schema: AspectSchema,
    pub prefix_len: usize,
    pub activation_dim: usize,
    rows: Vec<Tensor<T>>,
    pub trained: bool,
    pub provenance: BankProvenance,
}

impl<T: Scalar> PrefixBank<T> {
    pub fn from_rows(
        schema: AspectSchema,
        rows: Vec<Tensor<T>>,
        trained: bool,
        provenance: BankProvenance,
    ) -> Result<Self> {
        if rows.len() != schema.n() {
            return Err(Error::Shape(format!(
                "bank has {} row blocks for {} attributes",
                rows.len(),
                schema.n()
            )));
        }
        let (m, d) = rows[0].shape();
        for r in &rows {
            if r.shape() != (m, d) {
                return Err(Error::Shape("prefix row blocks differ in shape".into()));
            }
            if !r.is_finite() {
                return Err(Error::NonFinite("prefix bank table".into()));
            }
        }
        Ok(Self { schema, prefix_len: m, activation_dim: d, rows, trained, provenance })
    }

    pub fn n(&self) -> usize {
        self.schema.n()
    }

    pub fn row(&self, i: usize) -> &Tensor<T> {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Tensor<T>] {
        &self.rows
    }

    /// Flattened [1 x M*D] view of prefix i, the space encoder embeddings
    /// live in.
    pub fn flat_row(&self, i: usize) -> Tensor<T> {
        self.rows[i].reshaped(1, self.prefix_len * self.activation_dim)
    }

    /// Per-layer key/value blocks for prefix i.
    pub fn materialize(&self, i: usize, config: &ModelConfig) -> Result<PrefixKv<T>> {
        if i >= self.rows.len() {
            return Err(Error::InvalidInput(format!("prefix index {i} out of range")));
        }
        PrefixKv::from_rows(&self.rows[i], config)
    }

    /// Reorder prefix rows: row j of the result is row perm[j] of the input.
    /// Attribute names keep their schema order, so this changes which prefix
    /// each attribute name selects; it is how unsupervised clusters get
    /// aligned to ground-truth names.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        if perm.len() != n {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidInput(format!("{perm:?} is not a bijection on 0..{n}")));
            }
            seen[p] = true;
        }
        let rows = perm.iter().map(|&p| self.rows[p].clone()).collect();
        Ok(Self {
            schema: self.schema.clone(),
            prefix_len: self.prefix_len,
            activation_dim: self.activation_dim,
            rows,
            trained: self.trained,
            provenance: self.provenance.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> PrefixBank<U> {
        PrefixBank {
            schema: self.schema.clone(),
            prefix_len: self.prefix_len,
            activation_dim: self.activation_dim,
            rows: self.rows.iter().map(Tensor::cast).collect(),
            trained: self.trained,
            provenance: self.provenance.clone(),
        }
    }
}

/// Multi-aspect composition: materialize each selection and concatenate the
/// blocks along the position axis in the given order.
pub fn concat_aspects<T: Scalar>(
    selections: &[(&PrefixBank<T>, usize)],
    config: &ModelConfig,
) -> Result<PrefixKv<T>> {
    if selections.is_empty() {
        return Err(Error::InvalidInput("no prefixes selected".into()));
    }
    let d = selections[0].0.activation_dim;
    for (bank, _) in selections {
        if bank.activation_dim != d {
            return Err(Error::Shape(format!(
                "cannot concatenate banks with activation dims {} and {d}",
                bank.activation_dim
            )));
        }
    }
    let parts: Vec<PrefixKv<T>> = selections
        .iter()
        .map(|(bank, i)| bank.materialize(*i, config))
        .collect::<Result<_>>()?;
    let refs: Vec<&PrefixKv<T>> = parts.iter().collect();
    PrefixKv::concat(&refs)
}

/// Training-time parameterization of the bank.
#[derive(Clone, Debug)]
pub enum BankParam<T> {
    /// Low-rank: row j of prefix i is bottleneck[i][j, :] projected through
    /// proj[i]; the projection is shared across positions within a prefix
    /// and distinct per prefix.
    Reparam { bottleneck: Vec<Tensor<T>>, proj: Vec<Tensor<T>> },
    /// Direct dense rows, used when a run starts from an exported bank.
    Dense { rows: Vec<Tensor<T>> },
}

#[derive(Clone, Debug)]
pub struct TrainingBank<T> {
    pub schema: AspectSchema,
    pub prefix_len: usize,
    pub activation_dim: usize,
    pub param: BankParam<T>,
}

impl<T: Scalar> TrainingBank<T> {
    pub fn new_reparam(
        schema: AspectSchema,
        prefix_len: usize,
        activation_dim: usize,
        bottleneck_dim: usize,
        seed: u64,
    ) -> Self {
        let n = schema.n();
        let mut bottleneck = Vec::with_capacity(n);
        let mut proj = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = SeededRng::derive(seed, "bank-init", &[i as u64]);
            bottleneck.push(Tensor::randn(prefix_len, bottleneck_dim, 0.02, &mut rng));
            proj.push(Tensor::randn(bottleneck_dim, activation_dim, 0.02, &mut rng));
        }
        Self { schema, prefix_len, activation_dim, param: BankParam::Reparam { bottleneck, proj } }
    }

    pub fn from_exported(bank: &PrefixBank<T>) -> Self {
        Self {
            schema: bank.schema.clone(),
            prefix_len: bank.prefix_len,
            activation_dim: bank.activation_dim,
            param: BankParam::Dense { rows: bank.rows().to_vec() },
        }
    }

    pub fn n(&self) -> usize {
        self.schema.n()
    }

    /// Dense [M x D] block of prefix i under the current parameters.
    pub fn materialize_rows(&self, i: usize) -> Result<Tensor<T>> {
        if i >= self.n() {
            return Err(Error::InvalidInput(format!("prefix index {i} out of range")));
        }
        Ok(match &self.param {
            BankParam::Reparam { bottleneck, proj } => matmul_nn(&bottleneck[i], &proj[i]),
            BankParam::Dense { rows } => rows[i].clone(),
        })
    }

    pub fn materialize(&self, i: usize, config: &ModelConfig) -> Result<PrefixKv<T>> {
        PrefixKv::from_rows(&self.materialize_rows(i)?, config)
    }

    /// Dense bank for generation; the low-rank factors are dropped.
    /// Materializing twice is idempotent by construction.
    pub fn export(&self, provenance: BankProvenance) -> Result<PrefixBank<T>> {
        let rows: Vec<Tensor<T>> =
            (0..self.n()).map(|i| self.materialize_rows(i)).collect::<Result<_>>()?;
        PrefixBank::from_rows(self.schema.clone(), rows, true, provenance)
    }

    /// Named parameter tensors, the unit the optimizer sees.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match &self.param {
            BankParam::Reparam { bottleneck, proj } => bottleneck
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("p{i}.h"), t))
                .chain(proj.iter().enumerate().map(|(i, t)| (format!("p{i}.w"), t)))
                .collect(),
            BankParam::Dense { rows } => {
                rows.iter().enumerate().map(|(i, t)| (format!("p{i}.rows"), t)).collect()
            }
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match &mut self.param {
            BankParam::Reparam { bottleneck, proj } => bottleneck
                .iter_mut()
                .enumerate()
                .map(|(i, t)| (format!("p{i}.h"), t))
                .chain(proj.iter_mut().enumerate().map(|(i, t)| (format!("p{i}.w"), t)))
                .collect(),
            BankParam::Dense { rows } => {
                rows.iter_mut().enumerate().map(|(i, t)| (format!("p{i}.rows"), t)).collect()
            }
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Exported size is always N * M * D regardless of parameterization.
    pub fn exported_param_count(&self) -> usize {
        self.n() * self.prefix_len * self.activation_dim
    }
}

/// Trainable-vs-frozen parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParameterBudget {
    pub trainable: usize,
    pub frozen: usize,
    pub exported: usize,
    pub training_ratio: f64,
    pub exported_ratio: f64,
}

pub fn parameter_budget<T: Scalar>(bank: &TrainingBank<T>, frozen_params: usize) -> ParameterBudget {
    let trainable = bank.trainable_param_count();
    let exported = bank.exported_param_count();
    ParameterBudget {
        trainable,
        frozen: frozen_params,
        exported,
        training_ratio: trainable as f64 / frozen_params as f64,
        exported_ratio: exported as f64 / frozen_params as f64,
    }
}

/// All permutations of 0..n in a deterministic order (lexicographic).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Exhaustive search for the row permutation that best aligns cluster
/// assignments with labels: maximizes the rate of assignment == perm[label].
/// Returns (permutation, match rate). Deterministic: first maximum in
/// lexicographic order wins.
pub fn best_permutation(assignments: &[usize], labels: &[usize], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(assignments.len(), labels.len());
    assert!(!assignments.is_empty());
    let mut best_perm = (0..n).collect::<Vec<_>>();
    let mut best_hits = usize::MIN;
    let mut first = true;
    for perm in permutations(n) {
        let hits = assignments
            .iter()
            .zip(labels)
            .filter(|&(&a, &y)| a == perm[y])
            .count();
        if first || hits > best_hits {
            best_hits = hits;
            best_perm = perm;
            first = false;
        }
    }
    (best_perm, best_hits as f64 / assignments.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> AspectSchema {
        AspectSchema::new("polarity", vec!["negative".into(), "positive".into()]).unwrap()
    }

    #[test]
    fn zero_bottleneck_materializes_to_zero_prefix() {
        let mut bank = TrainingBank::<f64>::new_reparam(schema2(), 3, 16, 4, 0);
        if let BankParam::Reparam { bottleneck, .. } = &mut bank.param {
            for t in bottleneck.iter_mut() {
                *t = Tensor::zeros(t.rows(), t.cols());
            }
        }
        let cfg = ModelConfig { num_layers: 1, hidden_size: 8, num_heads: 2, vocab_size: 8, max_positions: 16 };
        let kv = bank.materialize(0, &cfg).unwrap();
        assert!(kv.layers[0].0.as_slice().iter().all(|&v| v == 0.0));
        assert!(kv.layers[0].1.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reproduces_bottleneck() {
        let mut bank = TrainingBank::<f64>::new_reparam(schema2(), 3, 8, 8, 1);
        let want = match &mut bank.param {
            BankParam::Reparam { bottleneck, proj } => {
                for t in proj.iter_mut() {
                    *t = Tensor::identity(8);
                }
                bottleneck[1].clone()
            }
            BankParam::Dense { .. } => unreachable!(),
        };
        let got = bank.materialize_rows(1).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn reparam_matches_per_position_loop_oracle() {
        let bank = TrainingBank::<f64>::new_reparam(schema2(), 3, 12, 5, 7);
        let BankParam::Reparam { bottleneck, proj } = &bank.param else { unreachable!() };
        for i in 0..2 {
            let got = bank.materialize_rows(i).unwrap();
            for j in 0..3 {
                for c in 0..12 {
                    let mut want = 0.0;
                    for b in 0..5 {
                        want += bottleneck[i].at(j, b) * proj[i].at(b, c);
                    }
                    assert!((got.at(j, c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn export_equals_materialize_exactly_and_is_idempotent() {
        let bank = TrainingBank::<f32>::new_reparam(schema2(), 4, 32, 8, 3);
        let exported = bank.export(BankProvenance::default()).unwrap();
        for i in 0..2 {
            assert_eq!(exported.row(i), &bank.materialize_rows(i).unwrap());
        }
        let re = TrainingBank::from_exported(&exported);
        let exported2 = re.export(BankProvenance::default()).unwrap();
        assert_eq!(exported.rows(), exported2.rows());
    }

    #[test]
    fn permute_identity_and_swap() {
        let bank = TrainingBank::<f64>::new_reparam(schema2(), 2, 8, 4, 5)
            .export(BankProvenance::default())
            .unwrap();
        let id = bank.permute(&[0, 1]).unwrap();
        assert_eq!(id.rows(), bank.rows());
        let swapped = bank.permute(&[1, 0]).unwrap();
        assert_eq!(swapped.row(0), bank.row(1));
        assert_eq!(swapped.row(1), bank.row(0));
        assert!(bank.permute(&[0, 0]).is_err());
        assert!(bank.permute(&[0]).is_err());
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let schema =
            AspectSchema::new("topic", vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
        let bank = TrainingBank::<f64>::new_reparam(schema, 2, 8, 4, 6)
            .export(BankProvenance::default())
            .unwrap();
        for perm in permutations(4) {
            let mut inverse = vec![0; 4];
            for (j, &p) in perm.iter().enumerate() {
                inverse[p] = j;
            }
            let round = bank.permute(&perm).unwrap().permute(&inverse).unwrap();
            assert_eq!(round.rows(), bank.rows());
        }
    }

    #[test]
    fn concat_length_additivity_and_d_mismatch() {
        let cfg = ModelConfig { num_layers: 2, hidden_size: 8, num_heads: 2, vocab_size: 8, max_positions: 64 };
        let d = cfg.activation_dim();
        let b1 = TrainingBank::<f64>::new_reparam(schema2(), 10, d, 4, 1)
            .export(BankProvenance::default())
            .unwrap();
        let b2 = TrainingBank::<f64>::new_reparam(schema2(), 10, d, 4, 2)
            .export(BankProvenance::default())
            .unwrap();
        let kv = concat_aspects(&[(&b1, 0), (&b2, 1)], &cfg).unwrap();
        assert_eq!(kv.m_total(), 20);
        let single = concat_aspects(&[(&b1, 1)], &cfg).unwrap();
        assert_eq!(single, b1.materialize(1, &cfg).unwrap());

        let other = TrainingBank::<f64>::new_reparam(schema2(), 10, d * 2, 4, 3)
            .export(BankProvenance::default())
            .unwrap();
        assert!(concat_aspects(&[(&b1, 0), (&other, 0)], &cfg).is_err());
    }

    #[test]
    fn budget_arithmetic_matches_closed_form() {
        let cfg = ModelConfig::desk();
        let d = cfg.activation_dim();
        assert_eq!(d, 1024);
        let bank = TrainingBank::<f32>::new_reparam(schema2(), 10, d, 256, 0);
        let budget = parameter_budget(&bank, cfg.param_count());
        // training params: N * (M * D' + D' * D)
        assert_eq!(budget.trainable, 2 * (10 * 256 + 256 * 1024));
        assert_eq!(budget.exported, 2 * 10 * 1024);
        assert!((budget.training_ratio
            - budget.trainable as f64 / cfg.param_count() as f64)
            .abs()
            < 1e-15);
    }

    #[test]
    fn exhaustive_alignment_recovers_planted_permutation() {
        // clusters are labels shuffled through a known permutation with a
        // little noise; exhaustive search must recover it
        for n in 2..=4usize {
            let planted: Vec<usize> = (0..n).rev().collect();
            let mut assignments = Vec::new();
            let mut labels = Vec::new();
            for rep in 0..40 {
                let y = rep % n;
                labels.push(y);
                if rep % 11 == 0 {
                    assignments.push((planted[y] + 1) % n); // noise
                } else {
                    assignments.push(planted[y]);
                }
            }
            let (perm, rate) = best_permutation(&assignments, &labels, n);
            assert_eq!(perm, planted, "n={n}");
            assert!(rate > 0.85);
            // the winner beats every alternative by construction
            for other in permutations(n) {
                let hits = assignments
                    .iter()
                    .zip(&labels)
                    .filter(|&(&a, &y)| a == other[y])
                    .count();
                assert!(hits as f64 / labels.len() as f64 <= rate);
            }
        }
    }
}
