use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Session, SkinTone};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitScheme {
    /// Subjects shuffled and cut by fraction.
    Random { train: f64, val: f64, test: f64 },
    /// Same fold sizes, with each fold's skin-tone mix tracking the global one.
    Stratified { train: f64, val: f64, test: f64 },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Stratified {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Session indices per fold plus the skin-tone subject counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Folds {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// `[train, val, test]` subject counts per tone.
    pub tone_counts: BTreeMap<SkinTone, [usize; 3]>,
}

impl Folds {
    pub fn fold(&self, k: usize) -> &[usize] {
        match k {
            0 => &self.train,
            1 => &self.val,
            _ => &self.test,
        }
    }
}

fn fold_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || fractions.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config(format!("split fractions {fractions:?} must be >= 0 with a positive sum")));
    }
    if n < 3 {
        return Err(Error::Split(format!("{n} subjects cannot form three disjoint folds")));
    }
    let total: f64 = fractions.iter().sum();
    let val = ((fractions[1] / total) * n as f64).round().max(1.0) as usize;
    let test = ((fractions[2] / total) * n as f64).round().max(1.0) as usize;
    if val + test >= n {
        return Err(Error::Split(format!(
            "{n} subjects leave no training subject after {val} val and {test} test"
        )));
    }
    Ok([n - val - test, val, test])
}

/// Subject-disjoint train / val / test folds; a pure function of the
/// session list (subject names and tones) and the seed.
pub fn split_dataset(sessions: &[Session], scheme: SplitScheme, seed: u64) -> Result<Folds> {
    if sessions.len() < 3 {
        return Err(Error::Split(format!("need at least 3 sessions, got {}", sessions.len())));
    }
    let mut subjects: BTreeMap<&str, SkinTone> = BTreeMap::new();
    for s in sessions {
        if let Some(prev) = subjects.insert(&s.subject, s.skin_tone) {
            if prev != s.skin_tone {
                return Err(Error::Split(format!("subject {} has mixed skin-tone labels", s.subject)));
            }
        }
    }
    let (fractions, stratified) = match scheme {
        SplitScheme::Random { train, val, test } => ([train, val, test], false),
        SplitScheme::Stratified { train, val, test } => ([train, val, test], true),
    };
    let sizes = fold_sizes(subjects.len(), fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(&str, SkinTone)> = subjects.into_iter().collect();
    order.shuffle(&mut rng);

    let assignment: Vec<usize> = if stratified {
        let tones: Vec<SkinTone> = order.iter().map(|(_, t)| *t).collect();
        let counts = stratified_counts(&tones, sizes);
        let mut taken: BTreeMap<SkinTone, [usize; 3]> = BTreeMap::new();
        tones
            .iter()
            .map(|t| {
                let got = taken.entry(*t).or_default();
                let want = counts[t];
                let k = (0..3).find(|&k| got[k] < want[k]).expect("row sums match");
                got[k] += 1;
                k
            })
            .collect()
    } else {
        (0..order.len())
            .map(|i| if i < sizes[0] { 0 } else if i < sizes[0] + sizes[1] { 1 } else { 2 })
            .collect()
    };

    let fold_of: BTreeMap<&str, usize> = order.iter().zip(&assignment).map(|((s, _), &k)| (*s, k)).collect();
    let mut tone_counts: BTreeMap<SkinTone, [usize; 3]> = BTreeMap::new();
    for ((_, tone), &k) in order.iter().zip(&assignment) {
        tone_counts.entry(*tone).or_default()[k] += 1;
    }
    let mut folds = Folds {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        tone_counts,
    };
    for (i, s) in sessions.iter().enumerate() {
        match fold_of[s.subject.as_str()] {
            0 => folds.train.push(i),
            1 => folds.val.push(i),
            _ => folds.test.push(i),
        }
    }
    Ok(folds)
}

/// Per-tone fold counts: each entry is the floor or ceiling of its quota
/// `n_tone * size_fold / n`, with tone totals and fold sizes preserved
/// (controlled rounding of a 3 x 3 table, solved by enumeration).
fn stratified_counts(tones: &[SkinTone], sizes: [usize; 3]) -> BTreeMap<SkinTone, [usize; 3]> {
    let n = tones.len() as f64;
    let present: Vec<(SkinTone, usize)> = SkinTone::ALL
        .iter()
        .map(|&t| (t, tones.iter().filter(|&&x| x == t).count()))
        .filter(|(_, c)| *c > 0)
        .collect();
    let quota = |nt: usize, k: usize| nt as f64 * sizes[k] as f64 / n;
    let floor: Vec<[usize; 3]> = present
        .iter()
        .map(|&(_, nt)| std::array::from_fn(|k| (quota(nt, k) + 1e-9).floor() as usize))
        .collect();
    let row_need: Vec<usize> = present.iter().zip(&floor).map(|((_, nt), f)| nt - f.iter().sum::<usize>()).collect();
    let col_need: Vec<usize> = (0..3).map(|k| sizes[k] - floor.iter().map(|f| f[k]).sum::<usize>()).collect();
    let cells = present.len() * 3;
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1 << cells) {
        let bit = |r: usize, k: usize| (mask >> (r * 3 + k)) & 1 == 1;
        let rows_ok = (0..present.len()).all(|r| (0..3).filter(|&k| bit(r, k)).count() == row_need[r]);
        let cols_ok = (0..3).all(|k| (0..present.len()).filter(|&r| bit(r, k)).count() == col_need[k]);
        if !(rows_ok && cols_ok) {
            continue;
        }
        let score: f64 = (0..present.len())
            .flat_map(|r| (0..3).map(move |k| (r, k)))
            .filter(|&(r, k)| bit(r, k))
            .map(|(r, k)| quota(present[r].1, k) - floor[r][k] as f64)
            .sum();
        if best.map_or(true, |(s, _)| score > s + 1e-12) {
            best = Some((score, mask));
        }
    }
    let (_, mask) = best.expect("a controlled rounding always exists");
    present
        .iter()
        .enumerate()
        .map(|(r, &(t, _))| (t, std::array::from_fn(|k| floor[r][k] + ((mask >> (r * 3 + k)) & 1) as usize)))
        .collect()
}
