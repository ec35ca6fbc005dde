//! Contrastive losses over an image/text embedding batch: InfoNCE, the
//! decoupled variant, and their hardness-weighted forms, with exact
//! gradients.
//!
//! Every variant is a sum over anchors of
//! `-s_ii/τ + logsumexp_j(s_ij/τ + ln W_ij)` in both retrieval directions,
//! where the decoupled variants drop `j = i` from the log-sum and `W` are
//! the hardness weights of [`hardness_weights`] (all ones when `β = 0`).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[serde(rename = "infonce")]
    InfoNce,
    Dcl,
    HnNce,
    DhnNce,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::InfoNce,
        LossVariant::Dcl,
        LossVariant::HnNce,
        LossVariant::DhnNce,
    ];

    /// Whether the positive pair is excluded from the log-sum.
    pub fn is_decoupled(self) -> bool {
        matches!(self, LossVariant::Dcl | LossVariant::DhnNce)
    }

    pub fn uses_hardness(self) -> bool {
        matches!(self, LossVariant::HnNce | LossVariant::DhnNce)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::InfoNce => "infonce",
            LossVariant::Dcl => "dcl",
            LossVariant::HnNce => "hn_nce",
            LossVariant::DhnNce => "dhn_nce",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// Hardness for the image→text direction.
    pub beta1: f64,
    /// Hardness for the text→image direction.
    pub beta2: f64,
    pub variant: LossVariant,
    pub reduce: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            beta1: 0.15,
            beta2: 0.15,
            variant: LossVariant::DhnNce,
            reduce: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn new(variant: LossVariant, temperature: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            temperature,
            beta1,
            beta2,
            variant,
            reduce: Reduction::Mean,
        }
    }

    pub fn with_reduction(mut self, reduce: Reduction) -> Self {
        self.reduce = reduce;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.temperature)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Hardness actually applied per direction (zero for unweighted variants).
    fn betas(&self) -> (f64, f64) {
        if self.variant.uses_hardness() {
            (self.beta1, self.beta2)
        } else {
            (0.0, 0.0)
        }
    }
}

/// `S[i][j] = image_i · text_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn batch_size(&self) -> usize {
        self.s.nrows()
    }
}

/// Similarities of a normalized batch.
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    if !batch.is_normalized() {
        return Err(Error::InvalidArgument("similarity_matrix expects unit-norm rows".into()));
    }
    Ok(SimilarityMatrix {
        s: batch.image().dot(&batch.text().t()),
    })
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Hardness weights over one anchor's negatives:
/// `W_j = (B−1)·softmax(β·s/τ)_j`, so the weights sum to `B−1`.
pub fn hardness_weights(negatives: ArrayView1<'_, f64>, beta: f64, tau: f64) -> Array1<f64> {
    let n = negatives.len() as f64;
    let lse = logsumexp(negatives.iter().map(|&s| beta * s / tau));
    negatives.mapv(|s| n * (beta * s / tau - lse).exp())
}

/// Loss and gradient for one anchor given its similarity row.
///
/// Returns the anchor's term and `∂term/∂row`.
fn anchor_term(row: ArrayView1<'_, f64>, i: usize, tau: f64, beta: f64, decoupled: bool) -> (f64, Array1<f64>) {
    let b = row.len();
    let neg = || (0..b).filter(move |&j| j != i);
    // ln W_j = ln(B−1) + βs_j/τ − logsumexp_k(βs_k/τ); exactly zero when β = 0.
    let ln_n = ((b - 1) as f64).ln();
    let lse_beta = logsumexp(neg().map(|j| beta * row[j] / tau));
    let a = |j: usize| row[j] / tau + (beta * row[j] / tau + ln_n - lse_beta);

    let pos = row[i] / tau;
    let lse = if decoupled {
        logsumexp(neg().map(a))
    } else {
        logsumexp(neg().map(a).chain(std::iter::once(pos)))
    };
    let value = -pos + lse;

    let mut grad = Array1::zeros(b);
    let mut neg_mass = 0.0;
    for j in neg() {
        let p = (a(j) - lse).exp();
        grad[j] = p * (1.0 + beta) / tau;
        neg_mass += p;
    }
    if beta != 0.0 {
        for j in neg() {
            let q = (beta * row[j] / tau - lse_beta).exp();
            grad[j] -= neg_mass * beta / tau * q;
        }
    }
    grad[i] = -1.0 / tau;
    if !decoupled {
        grad[i] += (pos - lse).exp() / tau;
    }
    (value, grad)
}

/// Loss split by retrieval direction. `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

fn check_batch(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    if batch.image().iter().chain(batch.text().iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding batch".into()));
    }
    Ok(())
}

/// Loss and `∂L/∂S` from a raw similarity matrix (any `B × B`, `B ≥ 2`).
pub fn loss_from_similarity(s: &Array2<f64>, cfg: &LossConfig) -> Result<(LossValue, Array2<f64>)> {
    cfg.validate()?;
    let b = s.nrows();
    if b < 2 || s.ncols() != b {
        return Err(Error::BatchTooSmall(b));
    }
    let (beta1, beta2) = cfg.betas();
    let tau = cfg.temperature;
    let decoupled = cfg.variant.is_decoupled();
    let scale = match cfg.reduce {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / b as f64,
    };
    let mut gs = Array2::zeros((b, b));
    let (mut v2t, mut t2v) = (0.0, 0.0);
    for i in 0..b {
        let (v, g) = anchor_term(s.row(i), i, tau, beta1, decoupled);
        v2t += v;
        gs.row_mut(i).scaled_add(scale, &g);
    }
    for i in 0..b {
        let (v, g) = anchor_term(s.column(i), i, tau, beta2, decoupled);
        t2v += v;
        gs.column_mut(i).scaled_add(scale, &g);
    }
    let value = LossValue {
        total: (v2t + t2v) * scale,
        image_to_text: v2t * scale,
        text_to_image: t2v * scale,
    };
    if !value.total.is_finite() {
        return Err(Error::NonFinite(format!("{} loss evaluated to {}", cfg.variant, value.total)));
    }
    Ok((value, gs))
}

pub fn loss_value(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossValue> {
    Ok(loss_and_gradient(batch, cfg)?.0)
}

pub fn loss_gradient(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossGradient> {
    Ok(loss_and_gradient(batch, cfg)?.1)
}

/// Value and gradient with respect to both embedding matrices.
pub fn loss_and_gradient(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<(LossValue, LossGradient)> {
    check_batch(batch, cfg)?;
    let s = batch.image().dot(&batch.text().t());
    let (value, gs) = loss_from_similarity(&s, cfg)?;
    let grad = LossGradient {
        image: gs.dot(batch.text()),
        text: gs.t().dot(batch.image()),
    };
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> EmbeddingBatch {
        let mut m = || Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
        let (i, t) = (m(), m());
        EmbeddingBatch::normalized(i, t).unwrap()
    }

    // Straight transcription of the loss definitions, without shared code.
    fn oracle(batch: &EmbeddingBatch, cfg: &LossConfig) -> f64 {
        let s = batch.image().dot(&batch.text().t());
        let b = s.nrows();
        let tau = cfg.temperature;
        let (b1, b2) = if cfg.variant.uses_hardness() {
            (cfg.beta1, cfg.beta2)
        } else {
            (0.0, 0.0)
        };
        let mut total = 0.0;
        for (m, beta) in [(s.clone(), b1), (s.t().to_owned(), b2)] {
            for i in 0..b {
                let negs: Vec<f64> = (0..b).filter(|&j| j != i).map(|j| m[[i, j]]).collect();
                let z: f64 = negs.iter().map(|&x| (beta * x / tau).exp()).sum();
                let mut denom: f64 = negs
                    .iter()
                    .map(|&x| (x / tau).exp() * (b - 1) as f64 * (beta * x / tau).exp() / z)
                    .sum();
                if !cfg.variant.is_decoupled() {
                    denom += (m[[i, i]] / tau).exp();
                }
                total += -m[[i, i]] / tau + denom.ln();
            }
        }
        match cfg.reduce {
            Reduction::Sum => total,
            Reduction::Mean => total / b as f64,
        }
    }

    fn orthonormal_pair() -> EmbeddingBatch {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        EmbeddingBatch::new(e.clone(), e).unwrap()
    }

    #[test]
    fn similarity_of_orthonormal_rows_is_identity() {
        let s = similarity_matrix(&orthonormal_pair()).unwrap();
        assert_eq!(s.s, array![[1.0, 0.0], [0.0, 1.0]]);
        let anti = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0]], array![[-1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(similarity_matrix(&anti).unwrap().s[[0, 0]], -1.0);
    }

    #[test]
    fn single_pair_batch_is_rejected() {
        let b = EmbeddingBatch::new(array![[1.0, 0.0]], array![[1.0, 0.0]]).unwrap();
        let err = similarity_matrix(&b).unwrap_err();
        assert!(err.to_string().contains("need at least one negative"));
        assert!(loss_value(&b, &LossConfig::default()).is_err());
    }

    #[test]
    fn hand_computed_anchors() {
        let b = orthonormal_pair();
        let cfg = LossConfig::new(LossVariant::DhnNce, 1.0, 0.0, 0.0).with_reduction(Reduction::Sum);
        let v = loss_value(&b, &cfg).unwrap();
        assert_eq!(v.image_to_text, -2.0);
        assert_eq!(v.text_to_image, -2.0);
        assert!((v.total + 4.0).abs() < 1e-12);

        let cfg = LossConfig::new(LossVariant::InfoNce, 1.0, 0.0, 0.0).with_reduction(Reduction::Sum);
        let v = loss_value(&b, &cfg).unwrap();
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((v.total - expected).abs() < 1e-12);
        assert!((v.total - 1.2530).abs() < 1e-4);
    }

    #[test]
    fn hardness_weight_example() {
        let w = hardness_weights(array![0.9, 0.1].view(), 0.15, 0.6);
        assert!((w[0] - 1.0997).abs() < 1e-3 && (w[1] - 0.9003).abs() < 1e-3, "{w}");
        let flat = hardness_weights(array![0.3, -0.2, 0.8].view(), 0.0, 0.6);
        assert!(flat.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for b in [2, 3, 5, 8] {
            let batch = random_batch(&mut rng, b, 6);
            for variant in LossVariant::ALL {
                for reduce in [Reduction::Sum, Reduction::Mean] {
                    let cfg = LossConfig::new(variant, 0.6, 0.15, 0.4).with_reduction(reduce);
                    let got = loss_value(&batch, &cfg).unwrap().total;
                    let want = oracle(&batch, &cfg);
                    assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{variant} {got} {want}");
                }
            }
        }
    }

    #[test]
    fn infonce_is_row_and_column_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 6, 5);
        let tau = 0.3;
        let s = batch.image().dot(&batch.text().t()) / tau;
        let ce = |m: &Array2<f64>| -> f64 {
            (0..m.nrows())
                .map(|i| {
                    let row = m.row(i);
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    -(row[i].exp() / z).ln()
                })
                .sum()
        };
        let want = ce(&s) + ce(&s.t().to_owned());
        let cfg = LossConfig::new(LossVariant::InfoNce, tau, 0.5, 0.5).with_reduction(Reduction::Sum);
        assert!((loss_value(&batch, &cfg).unwrap().total - want).abs() < 1e-10);
    }

    #[test]
    fn zero_hardness_reduces_to_dcl() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 4, 8);
            let dhn = LossConfig::new(LossVariant::DhnNce, 0.6, 0.0, 0.0);
            let dcl = LossConfig::new(LossVariant::Dcl, 0.6, 0.0, 0.0);
            let (a, ga) = loss_and_gradient(&batch, &dhn).unwrap();
            let (b, gb) = loss_and_gradient(&batch, &dcl).unwrap();
            assert!((a.total - b.total).abs() < 1e-12);
            assert!((&ga.image - &gb.image).iter().all(|x| x.abs() < 1e-12));
        }
    }

    fn max_rel_fd_error(batch: &EmbeddingBatch, cfg: &LossConfig) -> f64 {
        let h = 1e-4;
        let g = loss_gradient(batch, cfg).unwrap();
        let mut num_max: f64 = 0.0;
        let mut diff_max: f64 = 0.0;
        for side in 0..2 {
            let base = if side == 0 { batch.image() } else { batch.text() };
            for idx in ndarray::indices(base.dim()) {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m[idx] += delta;
                    let b = if side == 0 {
                        EmbeddingBatch::new(m, batch.text().clone())
                    } else {
                        EmbeddingBatch::new(batch.image().clone(), m)
                    };
                    loss_value(&b.unwrap(), cfg).unwrap().total
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = if side == 0 { g.image[idx] } else { g.text[idx] };
                num_max = num_max.max(num.abs());
                diff_max = diff_max.max((num - ana).abs());
            }
        }
        diff_max / num_max
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..3 {
            let batch = random_batch(&mut rng, 4, 8);
            for variant in LossVariant::ALL {
                let cfg = LossConfig::new(variant, 0.6, 0.15, 0.35);
                let err = max_rel_fd_error(&batch, &cfg);
                assert!(err < 1e-4, "{variant}: {err}");
            }
        }
    }

    #[test]
    fn symmetric_batch_has_mirrored_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_batch(&mut rng, 5, 4);
        let sym = EmbeddingBatch::new(b.image().clone(), b.image().clone()).unwrap();
        for variant in LossVariant::ALL {
            let g = loss_gradient(&sym, &LossConfig::new(variant, 0.6, 0.2, 0.2)).unwrap();
            assert!((&g.image - &g.text).iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn loss_config_json_keys() {
        let cfg: LossConfig =
            serde_json::from_str(r#"{"temperature": 0.5, "beta1": 0.1, "beta2": 0.2, "variant": "hn_nce", "reduce": "sum"}"#)
                .unwrap();
        assert_eq!(cfg.variant, LossVariant::HnNce);
        assert_eq!(cfg.reduce, Reduction::Sum);
        let v: LossConfig = serde_json::from_str(r#"{"variant": "infonce"}"#).unwrap();
        assert_eq!(v.variant, LossVariant::InfoNce);
        assert_eq!(v.temperature, 0.6);
        assert!(LossConfig::new(LossVariant::Dcl, 0.0, 0.0, 0.0).validate().is_err());
        assert!(LossConfig::new(LossVariant::Dcl, 1.0, -0.1, 0.0).validate().is_err());
    }

    #[test]
    fn non_finite_embeddings_are_rejected() {
        let b = EmbeddingBatch::new(array![[f64::NAN, 0.0], [0.0, 1.0]], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(loss_value(&b, &LossConfig::default()), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn weights_sum_to_negative_count(s in prop::collection::vec(-1.0f64..1.0, 1..64), beta in 0.0f64..5.0, tau in 0.05f64..2.0) {
            let w = hardness_weights(Array1::from(s.clone()).view(), beta, tau);
            prop_assert!((w.sum() - s.len() as f64).abs() <= 1e-12 * s.len() as f64);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn hardness_never_lowers_an_anchor_term(s in prop::collection::vec(-1.0f64..1.0, 3..10), beta in 0.0f64..3.0) {
            let row = Array1::from(s);
            let (base, _) = anchor_term(row.view(), 0, 0.6, 0.0, true);
            let (hard, _) = anchor_term(row.view(), 0, 0.6, beta, true);
            prop_assert!(hard >= base - 1e-12);
        }

        #[test]
        fn invariant_under_joint_permutation(seed in 0u64..1000, b in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, b, 6);
            let mut perm: Vec<usize> = (0..b).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let permuted = batch.select(&perm);
            for variant in LossVariant::ALL {
                let cfg = LossConfig::new(variant, 0.6, 0.15, 0.3);
                let a = loss_value(&batch, &cfg).unwrap().total;
                let p = loss_value(&permuted, &cfg).unwrap().total;
                prop_assert!((a - p).abs() < 1e-10);
            }
        }

        #[test]
        fn decoupled_denominator_has_b_minus_one_terms(seed in 0u64..1000, b in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, b, 4);
            let s = batch.image().dot(&batch.text().t());
            let tau = 0.6;
            for i in 0..b {
                let (v, _) = anchor_term(s.row(i), i, tau, 0.0, true);
                let negs: f64 = (0..b).filter(|&j| j != i).map(|j| (s[[i, j]] / tau).exp()).sum();
                prop_assert!((v - (-s[[i, i]] / tau + negs.ln())).abs() < 1e-12);
            }
        }
    }
}
