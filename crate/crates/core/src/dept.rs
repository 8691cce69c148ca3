//! Decomposed routing between a tuned base-class classifier and the
//! zero-shot model, the product-form soft distribution, the per-example
//! cross-entropy decomposition and the empirical bound checker.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::model::{ClassSpace, ClassWeights, ProbabilityDistribution};
use crate::numeric::CompensatedSum;
use crate::tuning::TrainedClassifier;
use crate::zeroshot::ZeroShotModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Tuned,
    ZeroShot,
}

#[derive(Debug, Clone)]
pub struct DeptModel {
    zs: ZeroShotModel,
    pt: TrainedClassifier,
    pt_weights: ClassWeights,
    class_space: ClassSpace,
}

/// Per-example cross-entropy terms; `finite` is false when some
/// probability underflowed to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeTerms {
    pub h_ood_zs: f64,
    pub h_cls_zs: f64,
    pub h_cls_pt: f64,
    pub h_zs: f64,
    pub h_dept: f64,
    pub finite: bool,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl DeptModel {
    pub fn new(zs: ZeroShotModel, pt: TrainedClassifier, class_space: ClassSpace) -> Result<Self> {
        if pt.support != class_space.base() {
            return Err(Error::InvalidClassSpace("tuned classifier must be trained on the base classes".into()));
        }
        let pt_weights = pt.class_weights(zs.encoder())?;
        Ok(Self { zs, pt, pt_weights, class_space })
    }

    pub fn zero_shot(&self) -> &ZeroShotModel {
        &self.zs
    }

    pub fn tuned(&self) -> &TrainedClassifier {
        &self.pt
    }

    pub fn tuned_weights(&self) -> &ClassWeights {
        &self.pt_weights
    }

    pub fn class_space(&self) -> &ClassSpace {
        &self.class_space
    }

    /// Hard routing: tuned classifier over the full space when the base
    /// MSP score is at least the new one, zero-shot otherwise.
    pub fn predict(&self, z: &DVector<f64>) -> Result<(usize, Branch)> {
        let (sb, sn) = self.zs.msp_space_scores(&self.class_space, z)?;
        if sb >= sn {
            let p = self.pt_weights.classify(self.class_space.all(), self.zs.temperature(), z)?;
            Ok((p.argmax(), Branch::Tuned))
        } else {
            Ok((self.zs.predict(self.class_space.all(), z)?.argmax(), Branch::ZeroShot))
        }
    }

    /// Log-probabilities over the full space of the product-form
    /// distribution, indexed by class id.
    fn soft_log_probs(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        let temp = self.zs.temperature();
        let space = &self.class_space;
        let zs_full = self.zs.weights().log_probs(space.all(), temp, z)?;
        let base_logs: Vec<f64> = space.base().iter().map(|&c| zs_full[c]).collect();
        let log_pb = log_sum_exp(&base_logs);
        let new_logs: Vec<f64> = space.new_classes().iter().map(|&c| zs_full[c]).collect();
        let pt_base = self.pt_weights.log_probs(space.base(), temp, z)?;
        let mut out = vec![0.0; space.num_classes()];
        for (&c, lp) in space.base().iter().zip(pt_base) {
            out[c] = lp + log_pb;
        }
        // new-class conditional times the new mass is the joint zero-shot probability
        for (&c, lz) in space.new_classes().iter().zip(new_logs) {
            out[c] = lz;
        }
        Ok(out)
    }

    /// Base mass times the tuned conditional on base classes, new mass
    /// times the zero-shot conditional on new classes.
    pub fn soft_distribution(&self, z: &DVector<f64>) -> Result<ProbabilityDistribution> {
        let temp = self.zs.temperature();
        let space = &self.class_space;
        let (pb, pn) = self.zs.mass_space_probability(space, z)?;
        let pt = self.pt_weights.classify(space.base(), temp, z)?;
        let zs_new = self.zs.predict(space.new_classes(), z)?;
        let mut probs = vec![0.0; space.num_classes()];
        for &c in space.base() {
            probs[c] = pt.prob_of(c) * pb;
        }
        for &c in space.new_classes() {
            probs[c] = zs_new.prob_of(c) * pn;
        }
        ProbabilityDistribution::new(space.all().to_vec(), probs)
    }

    /// Cross-entropy decomposition for an example with ground truth `label`.
    pub fn cross_entropy_terms(&self, label: usize, z: &DVector<f64>) -> Result<CeTerms> {
        let space = &self.class_space;
        if label >= space.num_classes() {
            return Err(Error::UnknownClass(label));
        }
        let temp = self.zs.temperature();
        let cell = if space.is_base(label) { space.base() } else { space.new_classes() };
        let zs_full = self.zs.weights().log_probs(space.all(), temp, z)?;
        let cell_logs: Vec<f64> = cell.iter().map(|&c| zs_full[c]).collect();
        let log_pk = log_sum_exp(&cell_logs);
        let pos = cell.iter().position(|&c| c == label).expect("label lies in its cell");
        let pt_cell = self.pt_weights.log_probs(cell, temp, z)?;

        let h_ood_zs = -log_pk;
        let h_cls_zs = -(zs_full[label] - log_pk);
        let h_cls_pt = -pt_cell[pos];
        let h_zs = -zs_full[label];
        let h_dept = -self.soft_log_probs(z)?[label];
        let finite = [h_ood_zs, h_cls_zs, h_cls_pt, h_zs, h_dept].iter().all(|v| v.is_finite());
        Ok(CeTerms { h_ood_zs, h_cls_zs, h_cls_pt, h_zs, h_dept, finite })
    }

    /// Measures the bound constants on `test` (embedding, label) pairs and
    /// checks both inequalities.
    pub fn check_theorem(&self, test: &[(DVector<f64>, usize)]) -> Result<TheoremReport> {
        if test.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut all_cls_zs = CompensatedSum::new();
        let mut all_ood = CompensatedSum::new();
        let mut base_cls_zs = CompensatedSum::new();
        let mut base_cls_pt = CompensatedSum::new();
        let mut sum_zs = CompensatedSum::new();
        let mut sum_dept = CompensatedSum::new();
        let (mut n_base, mut infinite) = (0usize, 0usize);
        for (z, label) in test {
            let t = self.cross_entropy_terms(*label, z)?;
            if !t.finite {
                infinite += 1;
            }
            all_cls_zs.add(t.h_cls_zs);
            all_ood.add(t.h_ood_zs);
            sum_zs.add(t.h_zs);
            sum_dept.add(t.h_dept);
            if self.class_space.is_base(*label) {
                n_base += 1;
                base_cls_zs.add(t.h_cls_zs);
                base_cls_pt.add(t.h_cls_pt);
            }
        }
        let n = test.len();
        let n_new = n - n_base;
        let nf = n as f64;
        let alpha = n_base as f64 / nf;
        let delta = all_cls_zs.value() / nf;
        let epsilon = all_ood.value() / nf;
        let big_delta = if n_base > 0 {
            (base_cls_zs.value() - base_cls_pt.value()) / n_base as f64
        } else {
            f64::NAN
        };
        let lhs_zs = sum_zs.value() / nf;
        let lhs_dept = sum_dept.value() / nf;
        let rhs_zs = epsilon + delta;
        let rhs_dept = rhs_zs - alpha * big_delta;
        let valid = infinite == 0 && n_base > 0 && n_new > 0;
        Ok(TheoremReport {
            delta,
            big_delta,
            epsilon,
            alpha,
            lhs_zs,
            lhs_dept,
            rhs_zs,
            rhs_dept,
            bound_zs_holds: valid && holds(lhs_zs, rhs_zs),
            bound_dept_holds: valid && holds(lhs_dept, rhs_dept),
            n_examples: n,
            infinite_terms: infinite,
            valid,
        })
    }
}

/// Relative slack for comparing quantities that are equal up to rounding.
pub const BOUND_TOLERANCE: f64 = 1e-12;

fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + BOUND_TOLERANCE * rhs.abs().max(1.0)
}

/// Measured constants and verdicts of the expected cross-entropy bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremReport {
    /// Mean within-space zero-shot cross-entropy over all examples.
    pub delta: f64,
    /// Base-only gain of the tuned classifier over zero-shot, within the base space.
    pub big_delta: f64,
    /// Mean space-level cross-entropy of the zero-shot mass detector.
    pub epsilon: f64,
    /// Empirical base fraction.
    pub alpha: f64,
    pub lhs_zs: f64,
    pub lhs_dept: f64,
    pub rhs_zs: f64,
    pub rhs_dept: f64,
    pub bound_zs_holds: bool,
    pub bound_dept_holds: bool,
    pub n_examples: usize,
    pub infinite_terms: usize,
    pub valid: bool,
}

impl TheoremReport {
    pub fn to_kv(&self) -> String {
        let mut rec = KvRecord::new();
        rec.push("delta", self.delta)
            .push("big_delta", self.big_delta)
            .push("epsilon", self.epsilon)
            .push("alpha", self.alpha)
            .push("lhs_zs", self.lhs_zs)
            .push("lhs_dept", self.lhs_dept)
            .push("rhs_zs", self.rhs_zs)
            .push("rhs_dept", self.rhs_dept)
            .push("bound_zs_holds", self.bound_zs_holds)
            .push("bound_dept_holds", self.bound_dept_holds)
            .push("n_examples", self.n_examples)
            .push("infinite_terms", self.infinite_terms)
            .push("valid", self.valid);
        rec.to_text()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let rec = KvRecord::parse(text)?;
        Ok(Self {
            delta: rec.require("delta")?,
            big_delta: rec.require("big_delta")?,
            epsilon: rec.require("epsilon")?,
            alpha: rec.require("alpha")?,
            lhs_zs: rec.require("lhs_zs")?,
            lhs_dept: rec.require("lhs_dept")?,
            rhs_zs: rec.require("rhs_zs")?,
            rhs_dept: rec.require("rhs_dept")?,
            bound_zs_holds: rec.require("bound_zs_holds")?,
            bound_dept_holds: rec.require("bound_dept_holds")?,
            n_examples: rec.require("n_examples")?,
            infinite_terms: rec.require("infinite_terms")?,
            valid: rec.require("valid")?,
        })
    }
}
