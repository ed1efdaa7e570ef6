//! Stratified fold assignment and inner hold-out splits.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::seed::{rng_for, stream};

/// Fold index for every case, in input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub seed: u64,
    pub assignment: Vec<(String, usize)>,
    /// Classes with fewer cases than folds leave some folds without them.
    pub warnings: Vec<String>,
}

impl FoldPlan {
    /// Positions (in input order) of the cases held out in fold `f`.
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i].1 == f)
            .collect()
    }

    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i].1 != f)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for (_, f) in &self.assignment {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Shuffles each class with its own seeded stream, then deals the classes
/// round-robin into folds. The dealing position carries over from one class
/// to the next so overall fold sizes also differ by at most one.
pub fn stratified_folds<S: AsRef<str>>(
    cases: &[(S, usize)],
    folds: usize,
    seed: u64,
) -> Result<FoldPlan, EvalError> {
    if folds < 2 {
        return Err(EvalError::Validation(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if cases.len() < folds {
        return Err(EvalError::Validation(format!(
            "{} cases cannot fill {folds} folds",
            cases.len()
        )));
    }
    let mut seen = HashSet::new();
    for (id, _) in cases {
        if !seen.insert(id.as_ref()) {
            return Err(EvalError::Validation(format!(
                "duplicate case id `{}`",
                id.as_ref()
            )));
        }
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in cases.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }
    let mut fold_of = vec![0; cases.len()];
    let mut warnings = Vec::new();
    let mut offset = 0;
    for (&label, members) in &mut by_class {
        if members.len() < folds {
            warnings.push(format!(
                "class {label} has {} cases for {folds} folds; some folds will lack it",
                members.len()
            ));
        }
        members.shuffle(&mut rng_for(seed, &[stream::FOLDS, label as u64]));
        for &i in members.iter() {
            fold_of[i] = offset % folds;
            offset += 1;
        }
    }
    Ok(FoldPlan {
        folds,
        seed,
        assignment: cases
            .iter()
            .zip(fold_of)
            .map(|((id, _), f)| (id.as_ref().to_string(), f))
            .collect(),
        warnings,
    })
}

/// Splits positions into `(train, validation)`, holding out
/// `round(fraction · n_c)` cases of every class `c`.
///
/// Both halves keep the input order.
pub fn stratified_holdout(
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(EvalError::Validation(format!(
            "hold-out fraction {fraction} outside [0, 0.5]"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut val = vec![false; labels.len()];
    for (&label, members) in &mut by_class {
        members.shuffle(&mut rng_for(seed, &[stream::SPLIT, label as u64]));
        let take = (fraction * members.len() as f64).round() as usize;
        for &i in &members[..take] {
            val[i] = true;
        }
    }
    let (v, t): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| val[i]);
    Ok((t, v))
}
