//! Classification metrics, the teacher-correctness / discrepancy grouping
//! analysis, fusion-ratio distribution reports, and early-stopping logic.

use crate::error::{Error, Result};
use crate::geometry::{st_discrepancy, PredictionTriplet};
use crate::numcore::tensor::{argmax, Tensor};

/// Headline metrics over one evaluation set.
#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub acc: f64,
    pub macro_auc: f64,
    pub nll: f64,
    pub n: usize,
}

fn check_rows(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::Config(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= probs.cols()) {
        return Err(Error::Config("label out of class range".into()));
    }
    Ok(())
}

/// Fraction of rows whose argmax matches the label; argmax ties break to the
/// lowest class index.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(probs.row(*i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// One-vs-rest ranking AUC for one class column, with midrank tie handling.
fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    // midranks: tied scores share the average of their 1-based positions
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&k| positive[k]).map(|k| ranks[k]).sum();
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Unweighted mean over classes of the one-vs-rest AUC. Classes without both
/// a positive and a negative are skipped and reported; if every class is
/// skipped the metric is undefined.
pub fn macro_auc_with_skips(probs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<usize>)> {
    check_rows(probs, labels)?;
    let c = probs.cols();
    let n = probs.rows();
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for class in 0..c {
        let scores: Vec<f64> = (0..n).map(|i| probs.row(i)[class]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        match binary_auc(&scores, &positive) {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => skipped.push(class),
        }
    }
    if used == 0 {
        return Err(Error::Data(
            "macro AUC undefined: every class lacks positives or negatives".into(),
        ));
    }
    Ok((sum / used as f64, skipped))
}

pub fn macro_auc(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(macro_auc_with_skips(probs, labels)?.0)
}

const NLL_CLAMP: f64 = 1e-12;

/// Mean negative log-likelihood of the true class, probabilities clamped
/// below at 1e-12 so confident mistakes stay finite.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.row(i)[l].max(NLL_CLAMP).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn metric_report(probs: &Tensor, labels: &[usize]) -> Result<MetricReport> {
    Ok(MetricReport {
        acc: accuracy(probs, labels)?,
        macro_auc: macro_auc(probs, labels)?,
        nll: nll(probs, labels)?,
        n: labels.len(),
    })
}

/// Per-sample slot in the discrepancy analysis: which correctness subset the
/// sample falls in, its quintile group by ascending discrepancy, and the
/// discrepancy itself.
#[derive(Debug, Clone, Copy)]
pub struct GroupAssignment {
    pub teacher_correct: bool,
    pub group: usize,
    pub st: f64,
}

/// Quintile grouping of samples by student-teacher discrepancy, separately
/// within the teacher-correct (D) and teacher-incorrect (D') subsets.
#[derive(Debug, Clone)]
pub struct DiscrepancyGrouping {
    pub assignments: Vec<GroupAssignment>,
    /// The four quantile cut values per subset (empty when degenerate).
    pub correct_boundaries: Vec<f64>,
    pub incorrect_boundaries: Vec<f64>,
    pub correct_count: usize,
    pub incorrect_count: usize,
    /// A subset smaller than 5 collapses to one group.
    pub degenerate_correct: bool,
    pub degenerate_incorrect: bool,
}

pub const GROUPS: usize = 5;

fn group_subset(
    members: &mut Vec<(usize, f64)>,
    assignments: &mut [GroupAssignment],
) -> (Vec<f64>, bool) {
    members.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let n = members.len();
    if n == 0 {
        return (Vec::new(), false);
    }
    if n < GROUPS {
        for &(idx, _) in members.iter() {
            assignments[idx].group = 0;
        }
        return (Vec::new(), true);
    }
    let base = n / GROUPS;
    let extra = n % GROUPS;
    let mut boundaries = Vec::with_capacity(GROUPS - 1);
    let mut pos = 0;
    for g in 0..GROUPS {
        let size = base + usize::from(g < extra);
        for &(idx, _) in &members[pos..pos + size] {
            assignments[idx].group = g;
        }
        pos += size;
        if g < GROUPS - 1 {
            boundaries.push(members[pos - 1].1);
        }
    }
    (boundaries, false)
}

/// Splits the samples into teacher-correct and teacher-incorrect subsets and
/// ranks each subset into five near-equal groups by ascending discrepancy.
pub fn discrepancy_grouping(triplets: &[PredictionTriplet]) -> Result<DiscrepancyGrouping> {
    if triplets.is_empty() {
        return Err(Error::Data("cannot group an empty triplet list".into()));
    }
    let mut assignments = Vec::with_capacity(triplets.len());
    let mut correct: Vec<(usize, f64)> = Vec::new();
    let mut incorrect: Vec<(usize, f64)> = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        let st = st_discrepancy(&t.student_probs, &t.teacher_probs)?;
        let tc = t.teacher_correct();
        assignments.push(GroupAssignment {
            teacher_correct: tc,
            group: 0,
            st,
        });
        if tc {
            correct.push((i, st));
        } else {
            incorrect.push((i, st));
        }
    }
    let correct_count = correct.len();
    let incorrect_count = incorrect.len();
    let (correct_boundaries, degenerate_correct) = group_subset(&mut correct, &mut assignments);
    let (incorrect_boundaries, degenerate_incorrect) =
        group_subset(&mut incorrect, &mut assignments);
    Ok(DiscrepancyGrouping {
        assignments,
        correct_boundaries,
        incorrect_boundaries,
        correct_count,
        incorrect_count,
        degenerate_correct,
        degenerate_incorrect,
    })
}

/// The four analysis partitions: within each correctness subset, "large" is
/// the top discrepancy quintile and "small" the bottom one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    IncorrectLarge,
    IncorrectSmall,
    CorrectLarge,
    CorrectSmall,
}

pub const PARTITIONS: [Partition; 4] = [
    Partition::IncorrectLarge,
    Partition::IncorrectSmall,
    Partition::CorrectLarge,
    Partition::CorrectSmall,
];

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::IncorrectLarge => "teacher_incorrect_large_st",
            Partition::IncorrectSmall => "teacher_incorrect_small_st",
            Partition::CorrectLarge => "teacher_correct_large_st",
            Partition::CorrectSmall => "teacher_correct_small_st",
        }
    }

    /// Membership of one grouped sample; degenerate subsets have no
    /// large/small partition.
    pub fn contains(self, a: &GroupAssignment, g: &DiscrepancyGrouping) -> bool {
        let (want_correct, want_large) = match self {
            Partition::IncorrectLarge => (false, true),
            Partition::IncorrectSmall => (false, false),
            Partition::CorrectLarge => (true, true),
            Partition::CorrectSmall => (true, false),
        };
        if a.teacher_correct != want_correct {
            return false;
        }
        let degenerate = if want_correct {
            g.degenerate_correct || g.correct_count == 0
        } else {
            g.degenerate_incorrect || g.incorrect_count == 0
        };
        if degenerate {
            return false;
        }
        a.group == if want_large { GROUPS - 1 } else { 0 }
    }
}

/// One logged fusion ratio: which sample, at which epoch.
#[derive(Debug, Clone, Copy)]
pub struct AlphaRecord {
    pub sample: usize,
    pub epoch: u64,
    pub alpha: f64,
}

/// Mean fusion ratio per (epoch x partition) cell; empty cells are absent,
/// not zero.
#[derive(Debug, Clone)]
pub struct FusionRatioTable {
    pub epochs: Vec<u64>,
    /// cells[e][p] pairs with PARTITIONS[p].
    pub cells: Vec<[Option<f64>; 4]>,
}

pub fn fusion_ratio_report(
    alpha_log: &[AlphaRecord],
    grouping: &DiscrepancyGrouping,
    epochs: &[u64],
) -> Result<FusionRatioTable> {
    let mut cells = Vec::with_capacity(epochs.len());
    for &epoch in epochs {
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        let mut seen = false;
        for rec in alpha_log.iter().filter(|r| r.epoch == epoch) {
            seen = true;
            let a = grouping.assignments.get(rec.sample).ok_or_else(|| {
                Error::Data(format!("alpha record names unknown sample {}", rec.sample))
            })?;
            for (p, part) in PARTITIONS.iter().enumerate() {
                if part.contains(a, grouping) {
                    sums[p] += rec.alpha;
                    counts[p] += 1;
                }
            }
        }
        if !seen {
            return Err(Error::Data(format!("alpha log has no records for epoch {epoch}")));
        }
        let mut row = [None; 4];
        for p in 0..4 {
            if counts[p] > 0 {
                row[p] = Some(sums[p] / counts[p] as f64);
            }
        }
        cells.push(row);
    }
    Ok(FusionRatioTable {
        epochs: epochs.to_vec(),
        cells,
    })
}

/// True once the best value lies `patience` or more evaluations in the past.
/// Improvement is strict, so plateaus age out.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    assert!(patience >= 1, "patience must be at least 1");
    if history.is_empty() {
        return false;
    }
    let mut best_idx = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best_idx] {
            best_idx = i;
        }
    }
    history.len() - 1 - best_idx >= patience
}

pub const HIST_BINS: usize = 20;

/// 20-bin histogram over [0,1] as (bin center, density) pairs, density
/// normalized so the bin masses sum to one.
pub fn ratio_histogram(values: &[f64]) -> Vec<(f64, f64)> {
    let width = 1.0 / HIST_BINS as f64;
    let mut counts = vec![0usize; HIST_BINS];
    for &v in values {
        let idx = ((v / width) as usize).min(HIST_BINS - 1);
        counts[idx] += 1;
    }
    let n = values.len();
    (0..HIST_BINS)
        .map(|i| {
            let center = (i as f64 + 0.5) * width;
            let density = if n == 0 {
                0.0
            } else {
                counts[i] as f64 / (n as f64 * width)
            };
            (center, density)
        })
        .collect()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Some(0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}
