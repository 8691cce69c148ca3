//! Zero-shot classifiers built from fixed, never-trained prompts, and the
//! base/new space probabilities they induce.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{ClassSpace, ClassWeights, FrozenEncoder, ProbabilityDistribution, PromptVector, Temperature};

/// Scale of the seeded stand-in for a hand-written prompt template.
pub const FIXED_PROMPT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotModel {
    enc: Arc<FrozenEncoder>,
    fixed_prompts: Vec<PromptVector>,
    temp: Temperature,
    weights: ClassWeights,
}

impl ZeroShotModel {
    /// Class embeddings are averaged over `fixed_prompts`, then renormalized.
    pub fn new(enc: Arc<FrozenEncoder>, fixed_prompts: Vec<PromptVector>, temp: Temperature) -> Result<Self> {
        let weights = ClassWeights::averaged(&enc, &fixed_prompts)?;
        Ok(Self { enc, fixed_prompts, temp, weights })
    }

    /// `count` seeded Gaussian prompts; prompt `i` uses seed `seed + i`.
    pub fn seeded(enc: Arc<FrozenEncoder>, prompt_len: usize, count: usize, seed: u64, temp: Temperature) -> Result<Self> {
        let prompts = (0..count as u64)
            .map(|i| PromptVector::gaussian(prompt_len, enc.token_dim(), FIXED_PROMPT_SCALE, seed + i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(enc, prompts, temp)
    }

    pub fn encoder(&self) -> &Arc<FrozenEncoder> {
        &self.enc
    }

    pub fn fixed_prompts(&self) -> &[PromptVector] {
        &self.fixed_prompts
    }

    pub fn temperature(&self) -> Temperature {
        self.temp
    }

    pub fn weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn predict(&self, support: &[usize], z: &DVector<f64>) -> Result<ProbabilityDistribution> {
        self.weights.classify(support, self.temp, z)
    }

    /// Largest full-space probability inside the base and the new classes.
    pub fn msp_space_scores(&self, space: &ClassSpace, z: &DVector<f64>) -> Result<(f64, f64)> {
        let full = self.predict(space.all(), z)?;
        Ok((full.max_over(space.base()), full.max_over(space.new_classes())))
    }

    /// Full-space probability mass of the base and the new classes.
    pub fn mass_space_probability(&self, space: &ClassSpace, z: &DVector<f64>) -> Result<(f64, f64)> {
        let full = self.predict(space.all(), z)?;
        let base = full.mass_of(space.base());
        Ok((base, 1.0 - base))
    }
}

/// Free-function form of [`ZeroShotModel::predict`].
pub fn zs_predict(model: &ZeroShotModel, support: &[usize], z: &DVector<f64>) -> Result<ProbabilityDistribution> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    model.predict(support, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{classify, EncoderShape};

    fn encoder() -> Arc<FrozenEncoder> {
        let shape = EncoderShape { token_dim: 6, embed_dim: 5, feature_dim: 4, num_classes: 4 };
        Arc::new(FrozenEncoder::random(shape, 21).unwrap())
    }

    fn z(enc: &FrozenEncoder) -> DVector<f64> {
        enc.image_embedding(&[0.4, -1.0, 0.3, 2.0]).unwrap()
    }

    #[test]
    fn single_prompt_matches_classify() {
        let enc = encoder();
        let p = PromptVector::gaussian(3, 6, 0.3, 9).unwrap();
        let zs = ZeroShotModel::new(enc.clone(), vec![p.clone()], Temperature::default()).unwrap();
        let a = zs_predict(&zs, &[0, 1, 2, 3], &z(&enc)).unwrap();
        let b = classify(&enc, &p, &[0, 1, 2, 3], Temperature::default(), &z(&enc)).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_prompts_match_one() {
        let enc = encoder();
        let p = PromptVector::gaussian(3, 6, 0.3, 9).unwrap();
        let one = ZeroShotModel::new(enc.clone(), vec![p.clone()], Temperature::default()).unwrap();
        let two = ZeroShotModel::new(enc.clone(), vec![p.clone(), p], Temperature::default()).unwrap();
        let a = one.predict(&[0, 1, 2, 3], &z(&enc)).unwrap();
        let b = two.predict(&[0, 1, 2, 3], &z(&enc)).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(ZeroShotModel::new(enc, vec![], Temperature::default()).is_err());
    }

    #[test]
    fn restriction_is_renormalized_full_output() {
        let enc = encoder();
        let zs = ZeroShotModel::seeded(enc.clone(), 3, 4, 100, Temperature::new(0.5).unwrap()).unwrap();
        let full = zs.predict(&[0, 1, 2, 3], &z(&enc)).unwrap();
        let part = zs.predict(&[1, 3], &z(&enc)).unwrap();
        let mass = full.prob_of(1) + full.prob_of(3);
        assert!((part.prob_of(1) - full.prob_of(1) / mass).abs() < 1e-14);
        assert!((part.prob_of(3) - full.prob_of(3) / mass).abs() < 1e-14);
    }

    #[test]
    fn space_scores_follow_argmax_cell() {
        let enc = encoder();
        let zs = ZeroShotModel::seeded(enc.clone(), 3, 2, 5, Temperature::new(0.3).unwrap()).unwrap();
        let space = ClassSpace::new(4, &[0, 2]).unwrap();
        let zv = z(&enc);
        let full = zs.predict(space.all(), &zv).unwrap();
        let (sb, sn) = zs.msp_space_scores(&space, &zv).unwrap();
        assert_eq!(sb >= sn, space.is_base(full.argmax()));
        let (pb, pn) = zs.mass_space_probability(&space, &zv).unwrap();
        assert!((pb + pn - 1.0).abs() < 1e-12);
        assert!((pb - full.mass_of(&[0, 2])).abs() < 1e-15);
    }

    #[test]
    fn two_class_scores_sum_to_one() {
        let shape = EncoderShape { token_dim: 3, embed_dim: 3, feature_dim: 3, num_classes: 2 };
        let enc = Arc::new(FrozenEncoder::random(shape, 2).unwrap());
        let zs = ZeroShotModel::seeded(enc.clone(), 2, 1, 3, Temperature::new(1.0).unwrap()).unwrap();
        let space = ClassSpace::new(2, &[1]).unwrap();
        let zv = enc.image_embedding(&[1.0, 0.0, 0.5]).unwrap();
        let (sb, sn) = zs.msp_space_scores(&space, &zv).unwrap();
        assert!((sb + sn - 1.0).abs() < 1e-15);
    }
}
