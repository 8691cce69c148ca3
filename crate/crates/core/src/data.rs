//! Seeded open-world classification problems: unit-sphere class
//! prototypes, Gaussian class clusters, a few-shot base-class training set
//! and a mixed base + new test set.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{seeded_rng, ClassSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceTag {
    Base,
    New,
}

impl SpaceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceTag::Base => "base",
            SpaceTag::New => "new",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(SpaceTag::Base),
            "new" => Some(SpaceTag::New),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub feature: Vec<f64>,
    pub label: usize,
    pub space: SpaceTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Minimum pairwise cosine distance `1 - cos` between prototypes.
    pub min_separation: f64,
    pub shots_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of base-class examples in the test set.
    pub mixing_ratio: f64,
    pub base_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 32,
            noise_sigma: 0.1,
            min_separation: 0.3,
            shots_per_class: 16,
            test_per_class: 100,
            mixing_ratio: 0.5,
            base_fraction: 0.5,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes < 4 {
            return fail(format!("num_classes must be at least 4, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return fail(format!("base_fraction must be in (0, 1), got {}", self.base_fraction));
        }
        if !(self.mixing_ratio > 0.0 && self.mixing_ratio < 1.0) {
            return fail(format!("mixing_ratio must be in (0, 1), got {}", self.mixing_ratio));
        }
        if self.shots_per_class == 0 || self.test_per_class == 0 {
            return fail("shots_per_class and test_per_class must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if !(0.0..=2.0).contains(&self.min_separation) {
            return fail(format!("min_separation must be in [0, 2], got {}", self.min_separation));
        }
        Ok(())
    }

    /// Number of base classes, `ceil(C * base_fraction)`, capped so one new class remains.
    pub fn num_base(&self) -> usize {
        ((self.num_classes as f64 * self.base_fraction).ceil() as usize).clamp(1, self.num_classes - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldDataset {
    pub spec: DatasetSpec,
    pub class_space: ClassSpace,
    /// Unit-norm class prototypes, indexed by class id.
    pub prototypes: Vec<Vec<f64>>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

const MAX_SEPARATION_ATTEMPTS: usize = 10_000;

fn gaussian_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

/// Splits `total` into `parts` near-equal counts, larger counts first.
fn even_counts(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

pub fn generate(spec: &DatasetSpec) -> Result<OpenWorldDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let c = spec.num_classes;

    let mut prototypes = None;
    for _ in 0..MAX_SEPARATION_ATTEMPTS {
        let candidate: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let v = DVector::from_vec(gaussian_vec(&mut rng, spec.feature_dim));
                let n = v.norm();
                (v / n).iter().copied().collect()
            })
            .collect();
        let separated = (0..c).all(|i| {
            (i + 1..c).all(|j| {
                let cos: f64 = candidate[i].iter().zip(&candidate[j]).map(|(a, b)| a * b).sum();
                1.0 - cos >= spec.min_separation
            })
        });
        if separated {
            prototypes = Some(candidate);
            break;
        }
    }
    let prototypes = prototypes.ok_or(Error::SeparationFailed)?;

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    let class_space = ClassSpace::new(c, &order[..spec.num_base()])?;

    let mut sample = |class: usize, space: SpaceTag| {
        let noise = gaussian_vec(&mut rng, spec.feature_dim);
        let feature = prototypes[class]
            .iter()
            .zip(noise)
            .map(|(u, e)| u + spec.noise_sigma * e)
            .collect();
        LabeledExample { feature, label: class, space }
    };

    let mut train = Vec::with_capacity(class_space.base().len() * spec.shots_per_class);
    for &class in class_space.base() {
        for _ in 0..spec.shots_per_class {
            train.push(sample(class, SpaceTag::Base));
        }
    }

    let total = spec.test_per_class * c;
    let n_base_test = ((total as f64 * spec.mixing_ratio).round() as usize).clamp(1, total - 1);
    let mut test = Vec::with_capacity(total);
    for (classes, n, space) in [
        (class_space.base(), n_base_test, SpaceTag::Base),
        (class_space.new_classes(), total - n_base_test, SpaceTag::New),
    ] {
        for (&class, count) in classes.iter().zip(even_counts(n, classes.len())) {
            for _ in 0..count {
                test.push(sample(class, space));
            }
        }
    }

    Ok(OpenWorldDataset { spec: *spec, class_space, prototypes, train, test })
}

/// Indices of the training examples whose labels fall in `sim_base` and
/// `sim_new`; the two sets must partition the base classes.
pub fn split_simulated(
    dataset: &OpenWorldDataset,
    sim_base: &[usize],
    sim_new: &[usize],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut cover: Vec<usize> = sim_base.iter().chain(sim_new).copied().collect();
    cover.sort_unstable();
    if cover != dataset.class_space.base() {
        return Err(Error::InvalidPartition);
    }
    let (mut d_base, mut d_new) = (Vec::new(), Vec::new());
    for (i, example) in dataset.train.iter().enumerate() {
        if sim_new.contains(&example.label) {
            d_new.push(i);
        } else {
            d_base.push(i);
        }
    }
    Ok((d_base, d_new))
}

const HEADER_TAG: &str = "owpt-dataset-v1";

fn push_row(out: &mut String, split: &str, e: &LabeledExample) {
    let _ = write!(out, "{split},{},{}", e.label, e.space.as_str());
    for v in &e.feature {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

/// Line-oriented text export: one header row with the `DatasetSpec` fields, then one
/// `split,label,space_tag,f_0,...` row per prototype, train and test example.
/// Numbers use the shortest representation that parses back to the same bits.
pub fn export_text(dataset: &OpenWorldDataset) -> String {
    let s = &dataset.spec;
    let mut out = format!(
        "{HEADER_TAG},num_classes={},feature_dim={},noise_sigma={},min_separation={},shots_per_class={},\
test_per_class={},mixing_ratio={},base_fraction={},seed={}\n",
        s.num_classes,
        s.feature_dim,
        s.noise_sigma,
        s.min_separation,
        s.shots_per_class,
        s.test_per_class,
        s.mixing_ratio,
        s.base_fraction,
        s.seed
    );
    for (class, u) in dataset.prototypes.iter().enumerate() {
        let space = if dataset.class_space.is_base(class) { SpaceTag::Base } else { SpaceTag::New };
        push_row(&mut out, "prototype", &LabeledExample { feature: u.clone(), label: class, space });
    }
    for e in &dataset.train {
        push_row(&mut out, "train", e);
    }
    for e in &dataset.test {
        push_row(&mut out, "test", e);
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| parse_err(line, format!("bad value for {key}: {v}")))
}

fn parse_header(line: &str) -> Result<DatasetSpec> {
    let mut fields = line.split(',');
    if fields.next() != Some(HEADER_TAG) {
        return Err(parse_err(1, "missing dataset header"));
    }
    let mut spec = DatasetSpec::default();
    let mut seen = Vec::new();
    for field in fields {
        let (k, v) = field.split_once('=').ok_or_else(|| parse_err(1, format!("malformed field {field}")))?;
        match k {
            "num_classes" => spec.num_classes = parse_num(1, k, v)?,
            "feature_dim" => spec.feature_dim = parse_num(1, k, v)?,
            "noise_sigma" => spec.noise_sigma = parse_num(1, k, v)?,
            "min_separation" => spec.min_separation = parse_num(1, k, v)?,
            "shots_per_class" => spec.shots_per_class = parse_num(1, k, v)?,
            "test_per_class" => spec.test_per_class = parse_num(1, k, v)?,
            "mixing_ratio" => spec.mixing_ratio = parse_num(1, k, v)?,
            "base_fraction" => spec.base_fraction = parse_num(1, k, v)?,
            "seed" => spec.seed = parse_num(1, k, v)?,
            _ => return Err(parse_err(1, format!("unknown header field {k}"))),
        }
        seen.push(k);
    }
    if seen.len() != 9 {
        return Err(parse_err(1, "header must list all nine dataset fields"));
    }
    Ok(spec)
}

pub fn import_text(text: &str) -> Result<OpenWorldDataset> {
    let mut lines = text.lines();
    let spec = parse_header(lines.next().ok_or_else(|| parse_err(1, "empty input"))?)?;
    spec.validate()?;
    let mut prototypes: Vec<Option<Vec<f64>>> = vec![None; spec.num_classes];
    let mut base = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let split = cols.next().unwrap_or_default();
        let label: usize = parse_num(n, "label", cols.next().unwrap_or_default())?;
        if label >= spec.num_classes {
            return Err(parse_err(n, format!("label {label} out of range")));
        }
        let tag = cols.next().unwrap_or_default();
        let space = SpaceTag::parse(tag).ok_or_else(|| parse_err(n, format!("bad space tag {tag}")))?;
        let feature = cols.map(|v| parse_num(n, "feature", v)).collect::<Result<Vec<f64>>>()?;
        if feature.len() != spec.feature_dim {
            return Err(parse_err(n, format!("expected {} features, got {}", spec.feature_dim, feature.len())));
        }
        let example = LabeledExample { feature, label, space };
        match split {
            "prototype" => {
                if prototypes[label].is_some() {
                    return Err(parse_err(n, format!("duplicate prototype for class {label}")));
                }
                if space == SpaceTag::Base {
                    base.push(label);
                }
                prototypes[label] = Some(example.feature);
            }
            "train" => train.push(example),
            "test" => test.push(example),
            other => return Err(parse_err(n, format!("unknown split {other}"))),
        }
    }
    let prototypes = prototypes
        .into_iter()
        .enumerate()
        .map(|(c, p)| p.ok_or_else(|| parse_err(0, format!("missing prototype for class {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let class_space = ClassSpace::new(spec.num_classes, &base)?;
    for e in train.iter().chain(&test) {
        let expected = if class_space.is_base(e.label) { SpaceTag::Base } else { SpaceTag::New };
        if e.space != expected {
            return Err(parse_err(0, format!("space tag of class {} disagrees with prototypes", e.label)));
        }
    }
    if train.iter().any(|e| e.space != SpaceTag::Base) {
        return Err(parse_err(0, "training data must come from base classes"));
    }
    Ok(OpenWorldDataset { spec, class_space, prototypes, train, test })
}
