use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grade::NUM_GRADES;
use super::manifest::{csv_err, headers, open_csv, ImageRecord};
use crate::error::{Error, Result};

pub const SPLIT_HEADER: [&str; 2] = ["id_code", "subset"];

/// Disjoint train/validation partition of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub validation: Vec<ImageRecord>,
    pub seed: u64,
    pub stratified: bool,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded split holding out exactly `validation_count` records.
///
/// Both subsets keep the manifest's relative order. With `stratified`, each grade
/// contributes its proportional share of the validation set (largest-remainder
/// rounding, so the shares sum to `validation_count` and each is within one of the
/// exact proportion).
pub fn split_dataset(
    records: &[ImageRecord],
    validation_count: usize,
    seed: u64,
    stratified: bool,
) -> Result<DatasetSplit> {
    if validation_count > records.len() {
        return Err(Error::Split(format!(
            "validation_count {validation_count} exceeds the {} available records",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_validation = vec![false; records.len()];

    if stratified {
        let mut by_class: [Vec<usize>; NUM_GRADES] = Default::default();
        for (i, r) in records.iter().enumerate() {
            by_class[r.grade.index()].push(i);
        }
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let quotas = stratified_quotas(&sizes, validation_count);
        for (members, quota) in by_class.iter_mut().zip(quotas) {
            members.shuffle(&mut rng);
            for &i in &members[..quota] {
                in_validation[i] = true;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..validation_count] {
            in_validation[i] = true;
        }
    }

    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(in_validation) {
        if v {
            validation.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        seed,
        stratified,
    })
}

/// Per-class validation counts proportional to `sizes`, summing to `total`.
pub fn stratified_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut remainders: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(k, &s)| (s * total % n, k)).collect();
    // largest fractional part first, lower class on ties
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - quotas.iter().sum::<usize>();
    for &(_, k) in remainders.iter().take(missing) {
        quotas[k] += 1;
    }
    quotas
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SPLIT_HEADER).map_err(|e| csv_err(path, e))?;
    for (subset, records) in [("train", &split.train), ("validation", &split.validation)] {
        for r in records {
            w.write_record([r.id.as_str(), subset]).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Re-partitions `records` according to a persisted split file. Every record must
/// be assigned exactly once.
pub fn read_split(path: &Path, records: &[ImageRecord]) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let mut reader = open_csv(path)?;
    if headers(&mut reader, path)? != SPLIT_HEADER {
        return Err(Error::Split(format!(
            "{}: expected header `id_code,subset`",
            path.display()
        )));
    }
    let mut assignment: HashMap<String, bool> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let id = row.get(0).unwrap_or("").to_string();
        let is_val = match row.get(1) {
            Some("train") => false,
            Some("validation") => true,
            other => {
                return Err(Error::Split(format!(
                    "{}: unknown subset {:?} for `{id}`",
                    path.display(),
                    other
                )))
            }
        };
        if assignment.insert(id.clone(), is_val).is_some() {
            return Err(Error::Split(format!("{}: `{id}` listed twice", path.display())));
        }
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    let mut used = HashSet::new();
    for r in records {
        match assignment.get(&r.id) {
            Some(true) => validation.push(r.clone()),
            Some(false) => train.push(r.clone()),
            None => {
                return Err(Error::Split(format!(
                    "{}: record `{}` has no subset",
                    path.display(),
                    r.id
                )))
            }
        }
        used.insert(r.id.as_str());
    }
    if used.len() != assignment.len() {
        return Err(Error::Split(format!(
            "{}: lists ids absent from the manifest",
            path.display()
        )));
    }
    Ok((train, validation))
}
