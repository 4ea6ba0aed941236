//! Synthetic subject data: generation, feature-space augmentation, split
//! protocols, and dataset file I/O.
//!
//! Ages drive the signal coordinates of each feature vector through a fixed
//! bank of sinusoids plus a linear ramp, so age is recoverable but not
//! linearly. Remaining coordinates are pure noise. Every float stored in a
//! dataset is canonicalized to the file precision (9 significant digits),
//! which makes write→read round-trips bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// splitmix64 finalizer; the basis of all derived-seed rules.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Documented seed-mixing rule: `derived = splitmix64(root ^ splitmix64(tag))`.
/// Per-sample work uses `mix_seed(run_seed, sample_id)` so samples can be
/// processed in any order (or in parallel) without changing their streams.
pub fn mix_seed(root: u64, tag: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag))
}

/// Format with 9 significant digits in plain decimal notation — the dataset
/// file precision. Parsing the result back reproduces the canonical value.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i64;
    let decimals = (8 - magnitude).clamp(0, 40) as usize;
    let mut s = format!("{v:.decimals$}");
    if !s.contains('.') {
        s.push_str(".0");
    }
    s
}

/// Canonicalize to the exact f64 the dataset file would yield back.
pub fn canonical_f64(v: f64) -> f64 {
    format_sig9(v).parse().expect("sig9 output always parses")
}

/// One demographic category and its share of subjects.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub proportion: f64,
}

impl GroupSpec {
    pub fn new(name: &str, proportion: f64) -> Self {
        GroupSpec {
            name: name.to_string(),
            proportion,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    /// Feature dimension F.
    pub feature_dim: usize,
    /// Leading coordinates that carry the age signal.
    pub age_signal_dims: usize,
    /// Observation noise added to signal coordinates.
    pub noise_sigma: f64,
    pub min_age: f64,
    pub max_age: f64,
    /// Maximum age spread across one subject's samples.
    pub longitudinal_span: f64,
    pub genders: Vec<GroupSpec>,
    pub ethnicities: Vec<GroupSpec>,
    /// Magnitude of the systematic per-group feature offset; zero for
    /// unbiased-control experiments.
    pub group_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 1000,
            samples_per_subject: 5,
            feature_dim: 16,
            age_signal_dims: 8,
            noise_sigma: 0.1,
            min_age: 16.0,
            max_age: 77.0,
            longitudinal_span: 4.0,
            genders: vec![GroupSpec::new("male", 0.846), GroupSpec::new("female", 0.154)],
            ethnicities: vec![
                GroupSpec::new("black", 0.772),
                GroupSpec::new("white", 0.192),
                GroupSpec::new("asian", 0.003),
                GroupSpec::new("hispanic", 0.032),
                GroupSpec::new("other", 0.001),
            ],
            group_shift: 0.05,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return Err(Error::config("subject and sample counts must be positive".to_string()));
        }
        if self.feature_dim == 0 || self.age_signal_dims == 0 || self.age_signal_dims > self.feature_dim {
            return Err(Error::config(format!(
                "need 1 <= age_signal_dims <= feature_dim, got {} and {}",
                self.age_signal_dims, self.feature_dim
            )));
        }
        if !(self.min_age < self.max_age) {
            return Err(Error::config(format!(
                "age range invalid: [{}, {}]",
                self.min_age, self.max_age
            )));
        }
        if self.noise_sigma < 0.0 || self.group_shift < 0.0 || self.longitudinal_span < 0.0 {
            return Err(Error::config("noise, shift and span must be non-negative".to_string()));
        }
        for (axis, groups) in [("genders", &self.genders), ("ethnicities", &self.ethnicities)] {
            if groups.is_empty() {
                return Err(Error::config(format!("{axis} must be non-empty")));
            }
            let total: f64 = groups.iter().map(|g| g.proportion).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "{axis} proportions must sum to 1, got {total}"
                )));
            }
            for g in groups.iter() {
                if g.proportion < 0.0 {
                    return Err(Error::config(format!("negative proportion for {}", g.name)));
                }
                validate_tag(&g.name)?;
            }
        }
        Ok(())
    }
}

fn validate_tag(tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains(',') || tag.contains('\n') || tag.contains('\r') {
        return Err(Error::config(format!(
            "demographic tag {tag:?} must be non-empty and free of commas/newlines"
        )));
    }
    Ok(())
}

/// One labeled sample. Ages and features are canonicalized to file precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub sample_id: u64,
    pub subject_id: u64,
    pub age: f64,
    pub gender: String,
    pub ethnicity: String,
    pub features: Vec<f64>,
}

/// Ordered collection of samples with a fixed feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    feature_dim: usize,
}

impl Dataset {
    /// Validates feature widths, tag well-formedness, per-subject tag
    /// consistency, and unique sample ids; canonicalizes all floats.
    pub fn new(mut records: Vec<SubjectRecord>, feature_dim: usize) -> Result<Self> {
        let mut seen_ids = std::collections::BTreeSet::new();
        let mut subject_tags: BTreeMap<u64, (String, String)> = BTreeMap::new();
        for r in records.iter_mut() {
            if r.features.len() != feature_dim {
                return Err(Error::contract(format!(
                    "sample {} has {} features, dataset expects {}",
                    r.sample_id,
                    r.features.len(),
                    feature_dim
                )));
            }
            validate_tag(&r.gender)?;
            validate_tag(&r.ethnicity)?;
            if !r.age.is_finite() || r.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::contract(format!(
                    "sample {} contains non-finite values",
                    r.sample_id
                )));
            }
            if !seen_ids.insert(r.sample_id) {
                return Err(Error::contract(format!("duplicate sample_id {}", r.sample_id)));
            }
            match subject_tags.entry(r.subject_id) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert((r.gender.clone(), r.ethnicity.clone()));
                }
                std::collections::btree_map::Entry::Occupied(e) => {
                    if e.get() != &(r.gender.clone(), r.ethnicity.clone()) {
                        return Err(Error::contract(format!(
                            "subject {} has inconsistent demographic tags",
                            r.subject_id
                        )));
                    }
                }
            }
            r.age = canonical_f64(r.age);
            for f in r.features.iter_mut() {
                *f = canonical_f64(*f);
            }
        }
        Ok(Dataset {
            records,
            feature_dim,
        })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn subject_ids(&self) -> Vec<u64> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.subject_id) {
                out.push(r.subject_id);
            }
        }
        out
    }
}

/// Largest-remainder allocation of `total` items to group proportions;
/// marginal counts are exact (within the rounding the method defines).
fn allocate_counts(total: usize, groups: &[GroupSpec]) -> Vec<usize> {
    let mut counts: Vec<usize> = groups
        .iter()
        .map(|g| (g.proportion * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (i, g.proportion * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total - assigned {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    counts
}

fn shuffled_assignment(total: usize, groups: &[GroupSpec], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let counts = allocate_counts(total, groups);
    let mut assignment = Vec::with_capacity(total);
    for (g, &c) in counts.iter().enumerate() {
        assignment.extend(std::iter::repeat(g).take(c));
    }
    for i in (1..assignment.len()).rev() {
        assignment.swap(i, rng.gen_range(0..=i));
    }
    assignment
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic smooth injective map from age to the signal coordinates:
/// a linear ramp plus sinusoids of increasing frequency, all in [−1, 1].
pub fn age_signal(age: f64, config: &SyntheticConfig) -> Vec<f64> {
    let t = (age - config.min_age) / (config.max_age - config.min_age);
    (0..config.age_signal_dims)
        .map(|j| {
            if j == 0 {
                2.0 * t - 1.0
            } else {
                let m = ((j + 1) / 2) as f64;
                if j % 2 == 1 {
                    (m * std::f64::consts::PI * t).sin()
                } else {
                    (m * std::f64::consts::PI * t).cos()
                }
            }
        })
        .collect()
}

fn group_offset(config: &SyntheticConfig, gender_idx: usize, ethnicity_idx: usize) -> Vec<f64> {
    if config.group_shift == 0.0 {
        return vec![0.0; config.feature_dim];
    }
    let tag = 0xB1A5_0000 + (gender_idx as u64) * 101 + ethnicity_idx as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, tag));
    let raw: Vec<f64> = (0..config.feature_dim).map(|_| gaussian(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.iter()
        .map(|v| v / norm * config.group_shift * (config.feature_dim as f64).sqrt())
        .collect()
}

/// Deterministic synthetic dataset: `features = signal(age) + group offset
/// + noise`, demographics allocated by largest remainder, ages longitudinal
/// per subject.
pub fn generate_dataset(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let total = config.n_subjects * config.samples_per_subject;
    let mut assign_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xA551));
    let genders = shuffled_assignment(config.n_subjects, &config.genders, &mut assign_rng);
    let ethnicities = shuffled_assignment(config.n_subjects, &config.ethnicities, &mut assign_rng);

    let span = config.longitudinal_span.min(config.max_age - config.min_age);
    let mut records = Vec::with_capacity(total);
    let mut sample_id = 0u64;
    for subject in 0..config.n_subjects {
        let (gi, ei) = (genders[subject], ethnicities[subject]);
        let offset = group_offset(config, gi, ei);
        let mut subject_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5B00 + subject as u64));
        let base_age = subject_rng.gen_range(config.min_age..=config.max_age - span);
        for _ in 0..config.samples_per_subject {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, sample_id));
            let age = if span > 0.0 {
                base_age + rng.gen_range(0.0..=span)
            } else {
                base_age
            };
            let signal = age_signal(age, config);
            let features: Vec<f64> = (0..config.feature_dim)
                .map(|j| {
                    let base = if j < config.age_signal_dims {
                        signal[j] + config.noise_sigma * gaussian(&mut rng)
                    } else {
                        gaussian(&mut rng)
                    };
                    base + offset[j]
                })
                .collect();
            records.push(SubjectRecord {
                sample_id,
                subject_id: subject as u64,
                age,
                gender: config.genders[gi].name.clone(),
                ethnicity: config.ethnicities[ei].name.clone(),
                features,
            });
            sample_id += 1;
        }
    }
    Dataset::new(records, config.feature_dim)
}

/// Feature-space analogs of image augmentation: additive noise, coordinate
/// masking (erasing), global scaling (affine), and coordinate-pair swaps
/// (flips), each applied independently with its own probability.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentationSpec {
    pub noise_probability: f64,
    pub noise_sigma: f64,
    pub mask_probability: f64,
    /// Fraction of coordinates zeroed when masking fires; exactly
    /// `floor(fraction·F)` coordinates are chosen without replacement.
    pub mask_fraction: f64,
    pub scale_probability: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    pub swap_probability: f64,
    pub swap_pairs: usize,
    /// When set, view 0 is the unaugmented input, so K=1 is the identity.
    pub include_original: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            noise_probability: 0.5,
            noise_sigma: 0.1,
            mask_probability: 0.5,
            mask_fraction: 0.25,
            scale_probability: 0.5,
            scale_low: 0.9,
            scale_high: 1.1,
            swap_probability: 0.5,
            swap_pairs: 1,
            include_original: true,
        }
    }
}

impl AugmentationSpec {
    /// Spec with every transform disabled; augment becomes a copy.
    pub fn disabled() -> Self {
        AugmentationSpec {
            noise_probability: 0.0,
            mask_probability: 0.0,
            scale_probability: 0.0,
            swap_probability: 0.0,
            ..AugmentationSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise_probability", self.noise_probability),
            ("mask_probability", self.mask_probability),
            ("scale_probability", self.scale_probability),
            ("swap_probability", self.swap_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config(format!(
                "mask_fraction must be in [0,1), got {}",
                self.mask_fraction
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be non-negative".to_string()));
        }
        if !(self.scale_low.is_finite() && self.scale_high.is_finite())
            || self.scale_low > self.scale_high
        {
            return Err(Error::config(format!(
                "scale range [{}, {}] invalid",
                self.scale_low, self.scale_high
            )));
        }
        Ok(())
    }
}

/// K stochastic views of one feature vector, row-major `K×F`, deterministic
/// in the seed. Transforms apply in a fixed order: noise, mask, scale, swap.
pub fn augment(features: &[f64], k: usize, spec: &AugmentationSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::contract("augment requires K >= 1".to_string()));
    }
    let f = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * f);
    for view in 0..k {
        let mut row = features.to_vec();
        if !(view == 0 && spec.include_original) {
            if spec.noise_probability > 0.0 && rng.gen::<f64>() < spec.noise_probability {
                for v in row.iter_mut() {
                    *v += spec.noise_sigma * gaussian(&mut rng);
                }
            }
            if spec.mask_probability > 0.0 && rng.gen::<f64>() < spec.mask_probability {
                let m = (spec.mask_fraction * f as f64).floor() as usize;
                let mut indices: Vec<usize> = (0..f).collect();
                for i in 0..m.min(f) {
                    let j = rng.gen_range(i..f);
                    indices.swap(i, j);
                    row[indices[i]] = 0.0;
                }
            }
            if spec.scale_probability > 0.0 && rng.gen::<f64>() < spec.scale_probability {
                let s = if spec.scale_low == spec.scale_high {
                    spec.scale_low
                } else {
                    rng.gen_range(spec.scale_low..spec.scale_high)
                };
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
            if spec.swap_probability > 0.0 && rng.gen::<f64>() < spec.swap_probability {
                for _ in 0..spec.swap_pairs {
                    let a = rng.gen_range(0..f);
                    let b = rng.gen_range(0..f);
                    row.swap(a, b);
                }
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Random sample-level split; samples of one subject may land on both
    /// sides (the leaky legacy protocol).
    Rs,
    /// Subject-exclusive: every subject's samples stay on one side.
    Se,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitProtocol {
    pub kind: SplitKind,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol {
            kind: SplitKind::Se,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

/// Partition into train and test. Both sides keep the original record
/// order; together they cover the dataset exactly once.
pub fn split(dataset: &Dataset, protocol: &SplitProtocol) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot split an empty dataset".to_string()));
    }
    if !(protocol.train_fraction > 0.0 && protocol.train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train_fraction must lie in (0,1), got {}",
            protocol.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let in_train: Vec<bool> = match protocol.kind {
        SplitKind::Rs => {
            let n = dataset.len();
            let n_train = ((protocol.train_fraction * n as f64).round() as usize).clamp(1, n);
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut mask = vec![false; n];
            for &i in order.iter().take(n_train) {
                mask[i] = true;
            }
            mask
        }
        SplitKind::Se => {
            let subjects = dataset.subject_ids();
            let m = subjects.len();
            let m_train = ((protocol.train_fraction * m as f64).round() as usize).clamp(1, m);
            let mut order: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let train_subjects: std::collections::BTreeSet<u64> =
                order.iter().take(m_train).map(|&i| subjects[i]).collect();
            dataset
                .records()
                .iter()
                .map(|r| train_subjects.contains(&r.subject_id))
                .collect()
        }
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, &keep) in dataset.records().iter().zip(&in_train) {
        if keep {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((
        Dataset::new(train, dataset.feature_dim())?,
        Dataset::new(test, dataset.feature_dim())?,
    ))
}

/// Dataset file header for a given feature dimension.
fn dataset_header(feature_dim: usize) -> String {
    let mut h = String::from("sample_id,subject_id,age,gender,ethnicity");
    for j in 0..feature_dim {
        let _ = write!(h, ",f{j}");
    }
    h
}

/// Write as CSV: UTF-8, LF line endings, floats at 9 significant digits.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", dataset_header(dataset.feature_dim()))?;
    for r in dataset.records() {
        let mut line = format!(
            "{},{},{},{},{}",
            r.sample_id,
            r.subject_id,
            format_sig9(r.age),
            r.gender,
            r.ethnicity
        );
        for f in &r.features {
            let _ = write!(line, ",{}", format_sig9(*f));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty file, expected a header row".to_string(),
    })?;
    let header = header?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 6 || columns[..5] != ["sample_id", "subject_id", "age", "gender", "ethnicity"]
    {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let feature_dim = columns.len() - 5;
    for (j, c) in columns[5..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected feature column f{j}, found {c:?}"),
            });
        }
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + feature_dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", 5 + feature_dim, fields.len()),
            });
        }
        let parse_u64 = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what}: {s:?}"),
            })
        };
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what}: {s:?}"),
            })
        };
        let mut features = Vec::with_capacity(feature_dim);
        for (j, s) in fields[5..].iter().enumerate() {
            features.push(parse_f64(s, &format!("feature f{j}"))?);
        }
        records.push(SubjectRecord {
            sample_id: parse_u64(fields[0], "sample_id")?,
            subject_id: parse_u64(fields[1], "subject_id")?,
            age: parse_f64(fields[2], "age")?,
            gender: fields[3].to_string(),
            ethnicity: fields[4].to_string(),
            features,
        });
    }
    Dataset::new(records, feature_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 100,
            samples_per_subject: 5,
            feature_dim: 8,
            age_signal_dims: 4,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn sig9_round_trips_its_own_output() {
        for v in [
            0.0,
            1.0,
            -43.2981374,
            0.000123456789,
            123456.789,
            -7.0e-11,
            76.99999999,
        ] {
            let c = canonical_f64(v);
            let s = format_sig9(c);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), c.to_bits(), "{v} -> {s}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let a = generate_dataset(&config).unwrap();
        let b = generate_dataset(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_counts_are_exact() {
        let config = small_config();
        let data = generate_dataset(&config).unwrap();
        assert_eq!(data.len(), 500);
        let mut per_subject: BTreeMap<u64, usize> = BTreeMap::new();
        for r in data.records() {
            *per_subject.entry(r.subject_id).or_insert(0) += 1;
        }
        assert_eq!(per_subject.len(), 100);
        assert!(per_subject.values().all(|&c| c == 5));
    }

    #[test]
    fn demographic_counts_follow_skew_within_one() {
        let config = small_config();
        let data = generate_dataset(&config).unwrap();
        let mut genders: BTreeMap<String, usize> = BTreeMap::new();
        for subject in data.subject_ids() {
            let r = data.records().iter().find(|r| r.subject_id == subject).unwrap();
            *genders.entry(r.gender.clone()).or_insert(0) += 1;
        }
        for g in &config.genders {
            let expected = g.proportion * config.n_subjects as f64;
            let got = *genders.get(&g.name).unwrap_or(&0) as f64;
            assert!(
                (got - expected).abs() <= 1.0,
                "{}: {got} vs {expected}",
                g.name
            );
        }
    }

    #[test]
    fn noiseless_equal_ages_share_signal_coordinates() {
        let config = SyntheticConfig {
            noise_sigma: 0.0,
            group_shift: 0.0,
            longitudinal_span: 0.0,
            n_subjects: 10,
            samples_per_subject: 3,
            ..small_config()
        };
        let data = generate_dataset(&config).unwrap();
        // All samples of one subject share an age, hence signal coords.
        let subject: Vec<_> = data
            .records()
            .iter()
            .filter(|r| r.subject_id == 3)
            .collect();
        assert_eq!(subject.len(), 3);
        for r in &subject[1..] {
            assert_eq!(r.age, subject[0].age);
            assert_eq!(
                r.features[..config.age_signal_dims],
                subject[0].features[..config.age_signal_dims]
            );
        }
    }

    #[test]
    fn age_marginal_covers_the_range() {
        let config = SyntheticConfig {
            n_subjects: 400,
            samples_per_subject: 2,
            ..small_config()
        };
        let data = generate_dataset(&config).unwrap();
        let ages: Vec<f64> = data.records().iter().map(|r| r.age).collect();
        let lo = ages.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < config.min_age + 2.0, "min age {lo}");
        assert!(hi > config.max_age - 2.0, "max age {hi}");
        assert!(lo >= config.min_age && hi <= config.max_age);
    }

    #[test]
    fn augment_noop_spec_copies_input() {
        let features = vec![1.0, -2.0, 3.0, 0.5];
        let views = augment(&features, 4, &AugmentationSpec::disabled(), 9).unwrap();
        assert_eq!(views.len(), 16);
        for row in views.chunks_exact(4) {
            assert_eq!(row, &features[..]);
        }
    }

    #[test]
    fn augment_masking_zeroes_exact_count() {
        let spec = AugmentationSpec {
            noise_probability: 0.0,
            mask_probability: 1.0,
            mask_fraction: 0.5,
            scale_probability: 0.0,
            swap_probability: 0.0,
            include_original: false,
            ..AugmentationSpec::default()
        };
        let features = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let views = augment(&features, 6, &spec, 10).unwrap();
        for row in views.chunks_exact(7) {
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 3); // floor(0.5·7)
        }
    }

    #[test]
    fn augment_is_deterministic_and_row0_is_original() {
        let features = vec![0.3, -1.1, 2.2];
        let spec = AugmentationSpec::default();
        let a = augment(&features, 5, &spec, 42).unwrap();
        let b = augment(&features, 5, &spec, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..3], &features[..]);
        let c = augment(&features, 5, &spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn augment_k1_with_original_is_identity() {
        let features = vec![0.3, -1.1, 2.2];
        let views = augment(&features, 1, &AugmentationSpec::default(), 7).unwrap();
        assert_eq!(views, features);
    }

    #[test]
    fn se_split_is_subject_disjoint() {
        let data = generate_dataset(&small_config()).unwrap();
        for seed in 0..20 {
            let protocol = SplitProtocol {
                kind: SplitKind::Se,
                train_fraction: 0.5,
                seed,
            };
            let (train, test) = split(&data, &protocol).unwrap();
            let train_subjects: std::collections::BTreeSet<u64> =
                train.subject_ids().into_iter().collect();
            for s in test.subject_ids() {
                assert!(!train_subjects.contains(&s));
            }
            assert_eq!(train.len() + test.len(), data.len());
        }
    }

    #[test]
    fn rs_split_sizes_are_exact() {
        let config = SyntheticConfig {
            n_subjects: 200,
            samples_per_subject: 5,
            ..small_config()
        };
        let data = generate_dataset(&config).unwrap();
        let protocol = SplitProtocol {
            kind: SplitKind::Rs,
            train_fraction: 0.8,
            seed: 3,
        };
        let (train, test) = split(&data, &protocol).unwrap();
        assert_eq!(train.len(), 800);
        assert_eq!(test.len(), 200);
    }

    #[test]
    fn rs_split_leaks_subjects_across_sides() {
        // Fixture: subjects with many same-age samples.
        let config = SyntheticConfig {
            n_subjects: 30,
            samples_per_subject: 10,
            longitudinal_span: 0.0,
            ..small_config()
        };
        let data = generate_dataset(&config).unwrap();
        let mut leaky = 0;
        for seed in 0..20 {
            let protocol = SplitProtocol {
                kind: SplitKind::Rs,
                train_fraction: 0.8,
                seed,
            };
            let (train, test) = split(&data, &protocol).unwrap();
            let train_subjects: std::collections::BTreeSet<u64> =
                train.subject_ids().into_iter().collect();
            if test.subject_ids().iter().any(|s| train_subjects.contains(s)) {
                leaky += 1;
            }
        }
        assert_eq!(leaky, 20);
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = generate_dataset(&small_config()).unwrap();
        write_dataset(&data, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data, back);

        // And byte-for-byte stable on rewrite.
        let path2 = dir.path().join("data2.csv");
        write_dataset(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        let data = Dataset::new(vec![], 5).unwrap();
        write_dataset(&data, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.feature_dim(), 5);
    }

    #[test]
    fn parse_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "sample_id,subject_id,age,gender,ethnicity,f0\n0,0,21.5,male,white,0.5\n1,0,not_a_number,male,white,0.5\n",
        )
        .unwrap();
        let err = read_dataset(&path).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("age"), "{message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn inconsistent_subject_tags_rejected() {
        let mk = |gender: &str| SubjectRecord {
            sample_id: 0,
            subject_id: 7,
            age: 30.0,
            gender: gender.to_string(),
            ethnicity: "white".to_string(),
            features: vec![0.0],
        };
        let mut b = mk("female");
        b.sample_id = 1;
        let err = Dataset::new(vec![mk("male"), b], 1).unwrap_err();
        assert!(err.to_string().contains("inconsistent"));
    }
}
