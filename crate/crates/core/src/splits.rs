//! Patient-level train/validation/test splits.
//!
//! Patients are sorted, shuffled with Fisher-Yates driven by SplitMix64
//! seeded directly with the split seed, and cut into contiguous blocks.
//! Swap index `j` for position `i` is `(r * (i + 1)) >> 64` on the 128-bit
//! product of the next 64-bit output `r`. Block sizes use largest-remainder
//! rounding; equal remainders favour test, then validation, then train.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{CimtError, Result};

pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 999];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = CimtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(CimtError::InvalidConfig(format!(
                "unknown partition {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CimtError::InvalidConfig(format!(
                "ratios must be non-negative, got {self}"
            )));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CimtError::InvalidConfig(format!(
                "ratios must sum to 1, got {self}"
            )));
        }
        Ok(())
    }

    /// Largest-remainder partition sizes for `n` patients.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let quotas = [self.train, self.val, self.test].map(|r| r * n as f64);
        let mut sizes = quotas.map(|q| q.floor() as usize);
        let mut leftover = n - sizes.iter().sum::<usize>();
        // remainders within 1e-9 count as equal; later partitions win ties
        let mut order = [2usize, 1, 0];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            if (ra - rb).abs() <= 1e-9 {
                b.cmp(&a)
            } else {
                rb.total_cmp(&ra)
            }
        });
        for &k in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            sizes[k] += 1;
            leftover -= 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(CimtError::InvalidConfig(format!(
                "ratios {self} leave the {} partition empty for {n} patients",
                Partition::ALL[k]
            )));
        }
        Ok(sizes)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.val, self.test)
    }
}

impl FromStr for SplitRatios {
    type Err = CimtError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CimtError::InvalidConfig(format!("cannot parse ratios {s:?}")))?;
        let [train, val, test] = parts[..] else {
            return Err(CimtError::InvalidConfig(format!(
                "expected three ratios, got {s:?}"
            )));
        };
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }
}

/// Patient id (`clin_` plus at least four digits) embedded in an image id.
pub fn extract_patient_id(image_id: &str) -> Result<String> {
    let mut rest = image_id;
    while let Some(pos) = rest.find("clin_") {
        let after = &rest[pos + 5..];
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() {
            return Ok(format!("clin_{digits:0>4}"));
        }
        rest = after;
    }
    Err(CimtError::UnparseableId(image_id.to_string()))
}

/// In-place Fisher-Yates shuffle with the bounded draw described above.
pub fn shuffle<T>(items: &mut [T], rng: &mut SplitMix64) {
    for i in (1..items.len()).rev() {
        let r = rng.next_u64();
        let j = ((u128::from(r) * (i as u128 + 1)) >> 64) as usize;
        items.swap(i, j);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub assignment: BTreeMap<String, Partition>,
    pub image_assignment: BTreeMap<String, Partition>,
}

impl SplitManifest {
    pub fn patients_in(&self, part: Partition) -> usize {
        self.assignment.values().filter(|&&p| p == part).count()
    }

    pub fn images_in(&self, part: Partition) -> Vec<&str> {
        self.image_assignment
            .iter()
            .filter(|(_, &p)| p == part)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

pub fn make_split(patients: &[String], seed: u64, ratios: SplitRatios) -> Result<SplitManifest> {
    let mut sorted: Vec<String> = patients
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if sorted.len() < 3 {
        return Err(CimtError::InvalidConfig(format!(
            "need at least 3 patients to split, got {}",
            sorted.len()
        )));
    }
    let [n_train, n_val, _] = ratios.sizes(sorted.len())?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    shuffle(&mut sorted, &mut rng);
    let assignment = sorted
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let part = if i < n_train {
                Partition::Train
            } else if i < n_train + n_val {
                Partition::Val
            } else {
                Partition::Test
            };
            (p, part)
        })
        .collect();
    Ok(SplitManifest {
        seed,
        ratios,
        assignment,
        image_assignment: BTreeMap::new(),
    })
}

/// Splits patients derived from `image_ids`; every image follows its patient.
pub fn make_image_split(
    image_ids: &[String],
    seed: u64,
    ratios: SplitRatios,
) -> Result<SplitManifest> {
    let patient_of: Vec<(String, String)> = image_ids
        .iter()
        .map(|id| Ok((id.clone(), extract_patient_id(id)?)))
        .collect::<Result<_>>()?;
    let patients: Vec<String> = patient_of.iter().map(|(_, p)| p.clone()).collect();
    let mut manifest = make_split(&patients, seed, ratios)?;
    manifest.image_assignment = patient_of
        .into_iter()
        .map(|(img, patient)| {
            let part = manifest.assignment[&patient];
            (img, part)
        })
        .collect();
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeakageViolation {
    /// Image partition differs from its patient's partition.
    ImageMismatch {
        image_id: String,
        image: Partition,
        patient: Partition,
    },
    /// Image whose patient is absent from the patient assignment.
    UnknownPatient {
        image_id: String,
    },
    UnparseableImage {
        image_id: String,
    },
}

impl LeakageViolation {
    pub fn image_id(&self) -> &str {
        match self {
            LeakageViolation::ImageMismatch { image_id, .. }
            | LeakageViolation::UnknownPatient { image_id }
            | LeakageViolation::UnparseableImage { image_id } => image_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakageReport {
    pub patients_checked: usize,
    pub images_checked: usize,
    pub violations: Vec<LeakageViolation>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_no_leakage(m: &SplitManifest) -> LeakageReport {
    let violations = m
        .image_assignment
        .iter()
        .filter_map(|(image_id, &image)| {
            let Ok(patient_id) = extract_patient_id(image_id) else {
                return Some(LeakageViolation::UnparseableImage {
                    image_id: image_id.clone(),
                });
            };
            match m.assignment.get(&patient_id) {
                None => Some(LeakageViolation::UnknownPatient {
                    image_id: image_id.clone(),
                }),
                Some(&patient) if patient != image => Some(LeakageViolation::ImageMismatch {
                    image_id: image_id.clone(),
                    image,
                    patient,
                }),
                Some(_) => None,
            }
        })
        .collect();
    LeakageReport {
        patients_checked: m.assignment.len(),
        images_checked: m.image_assignment.len(),
        violations,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image_id: String,
    patient_id: String,
    partition: Partition,
    seed: u64,
}

/// Writes `image_id,patient_id,partition,seed` rows sorted by image id.
pub fn write_manifest<W: Write>(sink: W, m: &SplitManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for (image_id, &partition) in &m.image_assignment {
        w.serialize(ManifestRow {
            image_id: image_id.clone(),
            patient_id: extract_patient_id(image_id)?,
            partition,
            seed: m.seed,
        })
        .map_err(|e| CimtError::csv("manifest", e))?;
    }
    w.flush().map_err(|e| CimtError::io("manifest", e))
}

/// Reads a manifest. A patient's partition is taken from its first row, so
/// rows that disagree surface through `verify_no_leakage`.
pub fn read_manifest<R: Read>(source: R, ratios: SplitRatios) -> Result<SplitManifest> {
    let mut reader = csv::Reader::from_reader(source);
    let mut seed = None;
    let mut assignment = BTreeMap::new();
    let mut image_assignment = BTreeMap::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| CimtError::csv("manifest", e))?;
        seed.get_or_insert(row.seed);
        assignment.entry(row.patient_id).or_insert(row.partition);
        image_assignment.insert(row.image_id, row.partition);
    }
    Ok(SplitManifest {
        seed: seed.unwrap_or_default(),
        ratios,
        assignment,
        image_assignment,
    })
}
