//! Trilateral geometric feature construction: edge vectors among student
//! prediction, teacher prediction, and ground truth, the teacher's
//! class-average prediction table, and the concatenated per-sample feature
//! read by the fusion network.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::tensor::{argmax, Tensor};

const PROB_SUM_TOL: f64 = 1e-9;

fn check_prob_vector(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Numeric(format!("{what} has entries outside [0,1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Numeric(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Per-sample (student, teacher, ground-truth) probability vectors plus the
/// true class index.
#[derive(Debug, Clone)]
pub struct PredictionTriplet {
    pub student_probs: Vec<f64>,
    pub teacher_probs: Vec<f64>,
    pub ground_truth: Vec<f64>,
    pub class_index: usize,
}

impl PredictionTriplet {
    pub fn new(student_probs: Vec<f64>, teacher_probs: Vec<f64>, class_index: usize) -> Result<Self> {
        let c = student_probs.len();
        if teacher_probs.len() != c {
            return Err(Error::Config(format!(
                "student/teacher widths differ: {c} vs {}",
                teacher_probs.len()
            )));
        }
        if class_index >= c {
            return Err(Error::Config(format!(
                "class index {class_index} out of range for {c} classes"
            )));
        }
        check_prob_vector(&student_probs, "student probabilities")?;
        check_prob_vector(&teacher_probs, "teacher probabilities")?;
        let mut ground_truth = vec![0.0; c];
        ground_truth[class_index] = 1.0;
        Ok(PredictionTriplet {
            student_probs,
            teacher_probs,
            ground_truth,
            class_index,
        })
    }

    pub fn classes(&self) -> usize {
        self.student_probs.len()
    }

    /// True when the teacher's argmax matches the label (lowest index wins ties).
    pub fn teacher_correct(&self) -> bool {
        argmax(&self.teacher_probs) == self.class_index
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// The three triangle edges: e_sg = G - S, e_tg = G - T, e_st = T - S.
/// They encode the student's correctness, the teacher's correctness, and the
/// student-teacher discrepancy.
pub fn edge_vectors(triplet: &PredictionTriplet) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let e_sg = sub(&triplet.ground_truth, &triplet.student_probs);
    let e_tg = sub(&triplet.ground_truth, &triplet.teacher_probs);
    let e_st = sub(&triplet.teacher_probs, &triplet.student_probs);
    (e_sg, e_tg, e_st)
}

/// Euclidean distance between the student's and teacher's predicted class
/// probabilities; lies in [0, sqrt(2)] for probability vectors.
pub fn st_discrepancy(student_probs: &[f64], teacher_probs: &[f64]) -> Result<f64> {
    if student_probs.len() != teacher_probs.len() {
        return Err(Error::Config(format!(
            "probability widths differ: {} vs {}",
            student_probs.len(),
            teacher_probs.len()
        )));
    }
    Ok(student_probs
        .iter()
        .zip(teacher_probs)
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        .sqrt())
}

/// Teacher's global average prediction per class, row c holding the mean
/// teacher probability vector over all training samples labeled c. Computed
/// once from the frozen teacher; immutable afterwards.
#[derive(Debug, Clone)]
pub struct ClassAverageTable {
    rows: Tensor,
}

impl ClassAverageTable {
    pub fn classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.rows.row(class)
    }

    /// One row per class, comma separated, 17 significant digits.
    pub fn to_delimited(&self) -> String {
        let mut out = String::new();
        for c in 0..self.classes() {
            let cells: Vec<String> = self.row(c).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_delimited(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut cols = None;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("line {}: bad number {s:?}", ln + 1)))
                })
                .collect::<Result<_>>()?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Data(format!(
                        "line {}: expected {c} columns, got {}",
                        ln + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend(row);
        }
        let c = cols.ok_or_else(|| Error::Data("empty class-average table".into()))?;
        let n = data.len() / c;
        if n != c {
            return Err(Error::Data(format!(
                "class-average table must be square, got {n} rows x {c} columns"
            )));
        }
        let table = ClassAverageTable {
            rows: Tensor::from_vec(vec![c, c], data)?,
        };
        for class in 0..c {
            check_prob_vector(table.row(class), &format!("class {class} average"))?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_delimited())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_delimited(&fs::read_to_string(path)?)
    }
}

/// Arithmetic mean of teacher probability rows per class. Every class must
/// contribute at least one sample.
pub fn build_class_averages(teacher_probs: &Tensor, labels: &[usize]) -> Result<ClassAverageTable> {
    let n = teacher_probs.rows();
    let c = teacher_probs.cols();
    if labels.len() != n {
        return Err(Error::Config(format!(
            "{n} probability rows but {} labels",
            labels.len()
        )));
    }
    let mut sums = vec![0.0; c * c];
    let mut counts = vec![0usize; c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Config(format!("label {label} out of range for {c} classes")));
        }
        check_prob_vector(teacher_probs.row(i), &format!("teacher row {i}"))?;
        for (j, v) in teacher_probs.row(i).iter().enumerate() {
            sums[label * c + j] += v;
        }
        counts[label] += 1;
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Config(format!(
                "class {class} has no samples; cannot average teacher predictions"
            )));
        }
        for j in 0..c {
            sums[class * c + j] /= count as f64;
        }
    }
    Ok(ClassAverageTable {
        rows: Tensor::from_vec(vec![c, c], sums)?,
    })
}

/// Which parts of the trilateral geometry enter the fusion feature.
/// R1 keeps the four vertices, R2 the five edges, R3 everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    R1,
    R2,
    R3,
}

impl FeatureMode {
    pub fn feature_len(self, classes: usize) -> usize {
        match self {
            FeatureMode::R1 => 4 * classes,
            FeatureMode::R2 => 5 * classes,
            FeatureMode::R3 => 9 * classes,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(FeatureMode::R1),
            "r2" => Ok(FeatureMode::R2),
            "r3" => Ok(FeatureMode::R3),
            other => Err(Error::Config(format!(
                "unknown feature mode {other:?} (expected r1, r2, or r3)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::R1 => "r1",
            FeatureMode::R2 => "r2",
            FeatureMode::R3 => "r3",
        }
    }
}

/// Concatenated geometric feature for one sample. The full layout is
/// [e_sg | e_tg | e_st | e_tbar_g | e_s_tbar | S | T | Tbar_c | G],
/// each slice C wide.
#[derive(Debug, Clone)]
pub struct GeometryFeature {
    pub delta: Tensor,
    pub mode: FeatureMode,
    pub classes: usize,
}

impl GeometryFeature {
    /// The i-th C-wide slice of the layout.
    pub fn slice(&self, i: usize) -> &[f64] {
        &self.delta.as_slice()[i * self.classes..(i + 1) * self.classes]
    }
}

/// Assembles the fusion-network input from one triplet and the class-average
/// table. The inter-sample edges mirror the intra-sample ones with the
/// class-average teacher prediction substituted: e_tbar_g = G - Tbar_c,
/// e_s_tbar = Tbar_c - S.
pub fn build_feature(
    triplet: &PredictionTriplet,
    table: &ClassAverageTable,
    mode: FeatureMode,
) -> Result<GeometryFeature> {
    let c = triplet.classes();
    if table.classes() != c {
        return Err(Error::Config(format!(
            "triplet has {c} classes but table has {}",
            table.classes()
        )));
    }
    let t_bar = table.row(triplet.class_index);
    let (e_sg, e_tg, e_st) = edge_vectors(triplet);
    let e_tbar_g = sub(&triplet.ground_truth, t_bar);
    let e_s_tbar = sub(t_bar, &triplet.student_probs);

    let mut delta = Vec::with_capacity(mode.feature_len(c));
    match mode {
        FeatureMode::R1 => {
            delta.extend_from_slice(&triplet.student_probs);
            delta.extend_from_slice(&triplet.teacher_probs);
            delta.extend_from_slice(t_bar);
            delta.extend_from_slice(&triplet.ground_truth);
        }
        FeatureMode::R2 => {
            delta.extend(e_sg);
            delta.extend(e_tg);
            delta.extend(e_st);
            delta.extend(e_tbar_g);
            delta.extend(e_s_tbar);
        }
        FeatureMode::R3 => {
            delta.extend(e_sg);
            delta.extend(e_tg);
            delta.extend(e_st);
            delta.extend(e_tbar_g);
            delta.extend(e_s_tbar);
            delta.extend_from_slice(&triplet.student_probs);
            delta.extend_from_slice(&triplet.teacher_probs);
            delta.extend_from_slice(t_bar);
            delta.extend_from_slice(&triplet.ground_truth);
        }
    }
    Ok(GeometryFeature {
        delta: Tensor::vector(delta)?,
        mode,
        classes: c,
    })
}

/// Positions of the slices that depend on the student probabilities, with
/// their signs: the gradient of the feature with respect to S is -1 on
/// e_sg, e_st, e_s_tbar and +1 on the S vertex slice.
pub fn student_slice_signs(mode: FeatureMode) -> Vec<(usize, f64)> {
    match mode {
        FeatureMode::R1 => vec![(0, 1.0)],
        FeatureMode::R2 => vec![(0, -1.0), (2, -1.0), (4, -1.0)],
        FeatureMode::R3 => vec![(0, -1.0), (2, -1.0), (4, -1.0), (5, 1.0)],
    }
}
