//! Dataset ingestion, synthetic cluster generation, class balancing by
//! oversampling, Gaussian-noise outlier injection, and deterministic
//! stratified splitting. Every operation is a pure function of its inputs
//! and seed; reruns are bit-identical.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Labeled feature table with per-sample outlier flags.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub is_outlier: Vec<bool>,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Image mode means every feature lies in [0,1].
    pub fn image_mode(&self) -> bool {
        self.features
            .as_slice()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if self.features.rows() != self.len() || self.is_outlier.len() != self.len() {
            return Err(Error::Data("dataset field lengths disagree".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Train/validation/test partition with pairwise-disjoint sample identities.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn parse_number(field: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("row {row}: cannot parse {field:?} as a number")))
}

/// Loads comma-separated text with a header row. The named label column must
/// hold nonnegative integral values; the class count becomes max label + 1.
/// With `normalize` each feature column is min-max scaled to [0,1]
/// (constant columns map to 0).
pub fn load_delimited(path: &Path, label_column: &str, normalize: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|c| *c == label_column)
        .ok_or_else(|| Error::Data(format!("no column named {label_column:?} in header")))?;
    let arity = columns.len();
    if arity < 2 {
        return Err(Error::Data("need at least one feature column and a label".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row_no = ln + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != arity {
            return Err(Error::Data(format!(
                "row {row_no}: expected {arity} fields, got {}",
                fields.len()
            )));
        }
        for (i, field) in fields.iter().enumerate() {
            let v = parse_number(field, row_no)?;
            if i == label_idx {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Data(format!(
                        "row {row_no}: label {v} is not a nonnegative integer"
                    )));
                }
                labels.push(v as usize);
            } else {
                if !v.is_finite() {
                    return Err(Error::Data(format!("row {row_no}: non-finite feature")));
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("file has a header but no data rows".into()));
    }
    let n = labels.len();
    let d = arity - 1;
    let classes = labels.iter().max().unwrap() + 1;
    let mut ds = Dataset {
        features: Tensor::from_vec(vec![n, d], features)?,
        labels,
        is_outlier: vec![false; n],
        classes,
        provenance: path.display().to_string(),
    };
    if normalize {
        ds = min_max_normalize(&ds);
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes the comma-separated form read back by `load_delimited`.
pub fn save_delimited(ds: &Dataset, path: &Path) -> Result<()> {
    let d = ds.dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for v in ds.sample(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.labels[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-column min-max scaling into [0,1]; constant columns map to 0.
pub fn min_max_normalize(ds: &Dataset) -> Dataset {
    let (n, d) = (ds.len(), ds.dim());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (j, &v) in ds.sample(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for (j, &v) in ds.sample(i).iter().enumerate() {
            let range = hi[j] - lo[j];
            data.push(if range > 0.0 { (v - lo[j]) / range } else { 0.0 });
        }
    }
    Dataset {
        features: Tensor::from_vec(vec![n, d], data).unwrap(),
        labels: ds.labels.clone(),
        is_outlier: ds.is_outlier.clone(),
        classes: ds.classes,
        provenance: format!("{} (normalized)", ds.provenance),
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Isotropic Gaussian blobs, one fixed center per class, with an exact count
/// of uniformly re-labeled samples: round(label_noise * N) samples get a
/// uniformly chosen *different* label.
///
/// Centers sit on orthogonal unit axes (class c at the c-th axis, cycling
/// with an offset when classes exceed the dimension), so every class pair is
/// equally separated and task difficulty depends only on `spread`.
pub fn synth_gaussian_clusters(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    label_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::Config("per_class and dim must be positive".into()));
    }
    if !(spread > 0.0) {
        return Err(Error::Config(format!("spread must be positive, got {spread}")));
    }
    if !(0.0..1.0).contains(&label_noise) {
        return Err(Error::Config(format!(
            "label_noise must lie in [0,1), got {label_noise}"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut center = vec![0.0; dim];
            center[c % dim] += 1.0 + (c / dim) as f64;
            center
        })
        .collect();
    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                features.push(centers[class][j] + spread * standard_normal(rng));
            }
            labels.push(class);
        }
    }
    let flips = (label_noise * n as f64).round() as usize;
    if flips > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, rng);
        for &i in order.iter().take(flips) {
            let shift = 1 + rng.gen_range(0..classes - 1);
            labels[i] = (labels[i] + shift) % classes;
        }
    }
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, dim], features)?,
        labels,
        is_outlier: vec![false; n],
        classes,
        provenance: format!(
            "synth(classes={classes}, per_class={per_class}, dim={dim}, spread={spread}, label_noise={label_noise})"
        ),
    })
}

fn shuffle<R: Rng>(items: &mut [usize], rng: &mut R) {
    // Fisher-Yates with explicit index draws so the stream layout is stable.
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Duplicates uniform-random minority-class samples until every class count
/// equals the maximum original count. Originals are all retained unchanged;
/// duplicates append after them, minority classes in ascending order.
pub fn oversample_minority(ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    ds.validate()?;
    let counts = ds.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no samples to oversample")));
    }
    let target = *counts.iter().max().unwrap();
    let mut features = ds.features.as_slice().to_vec();
    let mut labels = ds.labels.clone();
    let mut flags = ds.is_outlier.clone();
    for class in 0..ds.classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        for _ in counts[class]..target {
            let pick = members[rng.gen_range(0..members.len())];
            features.extend_from_slice(ds.sample(pick));
            labels.push(class);
            flags.push(ds.is_outlier[pick]);
        }
    }
    let n = labels.len();
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, ds.dim()], features)?,
        labels,
        is_outlier: flags,
        classes: ds.classes,
        provenance: format!("{} (oversampled)", ds.provenance),
    })
}

/// Appends `count` pure-noise samples: every feature drawn from a Gaussian
/// with mean 0.5 and unit variance, clipped to [0,1]; labels uniform over
/// the classes; outlier flag set. Requires an image-mode dataset.
pub fn inject_gaussian_outliers(
    ds: &Dataset,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    ds.validate()?;
    if !ds.image_mode() {
        return Err(Error::Data(
            "outlier injection needs features in [0,1]; normalize the dataset first".into(),
        ));
    }
    if count == 0 {
        return Ok(ds.clone());
    }
    let d = ds.dim();
    let mut features = ds.features.as_slice().to_vec();
    let mut labels = ds.labels.clone();
    let mut flags = ds.is_outlier.clone();
    for _ in 0..count {
        for _ in 0..d {
            let v = 0.5 + standard_normal(rng);
            features.push(v.clamp(0.0, 1.0));
        }
        labels.push(rng.gen_range(0..ds.classes));
        flags.push(true);
    }
    let n = labels.len();
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, d], features)?,
        labels,
        is_outlier: flags,
        classes: ds.classes,
        provenance: format!("{} (+{count} outliers)", ds.provenance),
    })
}

fn take_subset(ds: &Dataset, ids: &[usize], tag: &str) -> Dataset {
    let d = ds.dim();
    let mut features = Vec::with_capacity(ids.len() * d);
    let mut labels = Vec::with_capacity(ids.len());
    let mut flags = Vec::with_capacity(ids.len());
    for &i in ids {
        features.extend_from_slice(ds.sample(i));
        labels.push(ds.labels[i]);
        flags.push(ds.is_outlier[i]);
    }
    Dataset {
        features: Tensor::from_vec(vec![ids.len(), d], features).unwrap(),
        labels,
        is_outlier: flags,
        classes: ds.classes,
        provenance: format!("{} [{tag}]", ds.provenance),
    }
}

/// Deterministic stratified shuffle-split. Per class, round(n*train_frac)
/// samples go to train and round(n*val_frac) to validation; the remainder is
/// test. Outlier samples always land in train regardless of fractions.
pub fn split(
    ds: &Dataset,
    train_frac: f64,
    val_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSplits> {
    ds.validate()?;
    if !(train_frac > 0.0) || !(val_frac > 0.0) || train_frac + val_frac >= 1.0 {
        return Err(Error::Config(format!(
            "fractions must be positive and sum below 1, got {train_frac} and {val_frac}"
        )));
    }
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut test_ids = Vec::new();
    for class in 0..ds.classes {
        let mut members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.labels[i] == class && !ds.is_outlier[i])
            .collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class {class} has no regular samples")));
        }
        shuffle(&mut members, rng);
        let n = members.len();
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = (n as f64 * val_frac).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::Data(format!(
                "class {class} with {n} samples is too small to appear in every split"
            )));
        }
        train_ids.extend(&members[..n_train]);
        val_ids.extend(&members[n_train..n_train + n_val]);
        test_ids.extend(&members[n_train + n_val..]);
    }
    // Outliers never reach validation or test.
    train_ids.extend((0..ds.len()).filter(|&i| ds.is_outlier[i]));
    Ok(DatasetSplits {
        train: take_subset(ds, &train_ids, "train"),
        val: take_subset(ds, &val_ids, "val"),
        test: take_subset(ds, &test_ids, "test"),
    })
}

const DS_MAGIC: &[u8; 4] = b"TGDS";
const DS_VERSION: u32 = 1;

/// Raw binary fixture: magic "TGDS", u32 version, u32 N, u32 d, u32 C,
/// features (N*d little-endian f64), labels (N u32), outlier flags (N u8).
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DS_MAGIC);
    buf.extend_from_slice(&DS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    for v in ds.features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &f in &ds.is_outlier {
        buf.push(f as u8);
    }
    buf
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let need = |ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(Error::Data("dataset file truncated".into()))
        }
    };
    need(buf.len() >= 20)?;
    if &buf[0..4] != DS_MAGIC {
        return Err(Error::Data("bad magic, not a TGDS dataset file".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    if u32_at(4) != DS_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {}", u32_at(4))));
    }
    let n = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let c = u32_at(16) as usize;
    let expect = 20 + n * d * 8 + n * 4 + n;
    if buf.len() != expect {
        return Err(Error::Data(format!(
            "dataset payload is {} bytes, expected {expect}",
            buf.len()
        )));
    }
    let mut pos = 20;
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        features.push(f64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()));
        pos += 8;
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let mut flags = Vec::with_capacity(n);
    for _ in 0..n {
        flags.push(buf[pos] != 0);
        pos += 1;
    }
    let ds = Dataset {
        features: Tensor::from_vec(vec![n, d], features)
            .map_err(|e| Error::Data(format!("bad feature payload: {e}")))?,
        labels,
        is_outlier: flags,
        classes: c,
        provenance: "TGDS file".into(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = dataset_from_bytes(&fs::read(path)?)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn load_and_normalize_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.csv");
        fs::write(
            &path,
            "a,b,label\n0,5,0\n10,5,1\n5,5,0\n2.5,5,1\n7.5,5,0\n",
        )
        .unwrap();
        let ds = load_delimited(&path, "label", true).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.classes, 2);
        // column a scales to [0,1]; constant column b maps to 0
        let col_a: Vec<f64> = (0..5).map(|i| ds.sample(i)[0]).collect();
        assert_eq!(col_a, vec![0.0, 1.0, 0.5, 0.25, 0.75]);
        assert!((0..5).all(|i| ds.sample(i)[1] == 0.0));
        assert_eq!(ds.labels, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn load_without_normalize_keeps_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.csv");
        fs::write(&path, "x,y,label\n1.5,-2.25,0\n0.125,4.0,1\n").unwrap();
        let ds = load_delimited(&path, "label", false).unwrap();
        assert_eq!(ds.sample(0), &[1.5, -2.25]);
        assert_eq!(ds.sample(1), &[0.125, 4.0]);
    }

    #[test]
    fn load_reports_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,label\n1,0\n2\n").unwrap();
        let err = load_delimited(&path, "label", false).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        fs::write(&path, "a,label\n1,0.5\n").unwrap();
        assert!(load_delimited(&path, "label", false).is_err());
        fs::write(&path, "a,label\n").unwrap();
        assert!(load_delimited(&path, "label", false).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_separable_at_tiny_spread() {
        let a = synth_gaussian_clusters(3, 20, 4, 1e-6, 0.0, &mut rng(9)).unwrap();
        let b = synth_gaussian_clusters(3, 20, 4, 1e-6, 0.0, &mut rng(9)).unwrap();
        assert_eq!(a.features.as_slice(), b.features.as_slice());
        assert_eq!(a.labels, b.labels);
        // point clusters: nearest-center classification is perfect
        let mut centers = vec![vec![0.0; 4]; 3];
        let mut counts = vec![0usize; 3];
        for i in 0..a.len() {
            for j in 0..4 {
                centers[a.labels[i]][j] += a.sample(i)[j];
            }
            counts[a.labels[i]] += 1;
        }
        for c in 0..3 {
            for v in centers[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        for i in 0..a.len() {
            let best = (0..3)
                .min_by(|&p, &q| {
                    let dp: f64 = a.sample(i).iter().zip(&centers[p]).map(|(x, m)| (x - m).powi(2)).sum();
                    let dq: f64 = a.sample(i).iter().zip(&centers[q]).map(|(x, m)| (x - m).powi(2)).sum();
                    dp.partial_cmp(&dq).unwrap()
                })
                .unwrap();
            assert_eq!(best, a.labels[i]);
        }
    }

    #[test]
    fn label_noise_flips_exact_count() {
        let clean = synth_gaussian_clusters(2, 500, 3, 1.0, 0.0, &mut rng(4)).unwrap();
        let noisy = synth_gaussian_clusters(2, 500, 3, 1.0, 0.1, &mut rng(4)).unwrap();
        assert_eq!(clean.features.as_slice(), noisy.features.as_slice());
        let flipped = clean
            .labels
            .iter()
            .zip(&noisy.labels)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flipped, 100);
    }

    #[test]
    fn oversample_equalizes_counts_without_touching_originals() {
        let mut ds = synth_gaussian_clusters(2, 10, 3, 1.0, 0.0, &mut rng(5)).unwrap();
        // drop 6 samples of class 1 to fake imbalance {10, 4}
        let keep: Vec<usize> = (0..14).collect();
        ds = take_subset(&ds, &keep, "imbalanced");
        assert_eq!(ds.class_counts(), vec![10, 4]);
        let balanced = oversample_minority(&ds, &mut rng(6)).unwrap();
        assert_eq!(balanced.class_counts(), vec![10, 10]);
        assert_eq!(balanced.len(), 20);
        // originals retained bit-for-bit, in order
        assert_eq!(
            &balanced.features.as_slice()[..ds.features.len()],
            ds.features.as_slice()
        );
        assert_eq!(&balanced.labels[..14], &ds.labels[..]);
        // duplicates all come from class 1
        assert!(balanced.labels[14..].iter().all(|&l| l == 1));
        // already balanced input comes back unchanged
        let again = oversample_minority(&balanced, &mut rng(7)).unwrap();
        assert_eq!(again.len(), balanced.len());
        assert_eq!(again.features.as_slice(), balanced.features.as_slice());
    }

    #[test]
    fn outlier_injection_respects_clipping_and_count() {
        let base = synth_gaussian_clusters(3, 30, 5, 1.0, 0.0, &mut rng(8)).unwrap();
        // unnormalized features are outside [0,1] -> rejected
        assert!(inject_gaussian_outliers(&base, 5, &mut rng(9)).is_err());
        let norm = min_max_normalize(&base);
        let none = inject_gaussian_outliers(&norm, 0, &mut rng(9)).unwrap();
        assert_eq!(none.len(), norm.len());
        let with = inject_gaussian_outliers(&norm, 10, &mut rng(9)).unwrap();
        assert_eq!(with.len(), norm.len() + 10);
        assert_eq!(with.is_outlier.iter().filter(|&&f| f).count(), 10);
        assert!(with.image_mode());
    }

    #[test]
    fn injected_features_have_clipped_gaussian_mean() {
        let base = min_max_normalize(&synth_gaussian_clusters(2, 8, 16, 1.0, 0.0, &mut rng(10)).unwrap());
        let with = inject_gaussian_outliers(&base, 10_000, &mut rng(11)).unwrap();
        let start = base.len();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in start..with.len() {
            for &v in with.sample(i) {
                assert!((0.0..=1.0).contains(&v));
                sum += v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let ds = synth_gaussian_clusters(2, 50, 3, 1.0, 0.0, &mut rng(12)).unwrap();
        let s1 = split(&ds, 0.8, 0.1, &mut rng(13)).unwrap();
        let s2 = split(&ds, 0.8, 0.1, &mut rng(13)).unwrap();
        assert_eq!(s1.train.features.as_slice(), s2.train.features.as_slice());
        assert_eq!(s1.val.labels, s2.val.labels);
        assert_eq!(s1.train.len(), 80);
        assert_eq!(s1.val.len(), 10);
        assert_eq!(s1.test.len(), 10);
        assert_eq!(s1.train.class_counts(), vec![40, 40]);
        assert_eq!(s1.val.class_counts(), vec![5, 5]);
        assert_eq!(s1.test.class_counts(), vec![5, 5]);
    }

    #[test]
    fn split_keeps_outliers_in_train() {
        let base = min_max_normalize(&synth_gaussian_clusters(2, 40, 3, 1.0, 0.0, &mut rng(14)).unwrap());
        let with = inject_gaussian_outliers(&base, 12, &mut rng(15)).unwrap();
        let s = split(&with, 0.7, 0.15, &mut rng(16)).unwrap();
        assert!(s.val.is_outlier.iter().all(|&f| !f));
        assert!(s.test.is_outlier.iter().all(|&f| !f));
        assert_eq!(s.train.is_outlier.iter().filter(|&&f| f).count(), 12);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), with.len());
    }

    #[test]
    fn split_rejects_too_small_classes() {
        let ds = synth_gaussian_clusters(2, 3, 2, 1.0, 0.0, &mut rng(17)).unwrap();
        assert!(split(&ds, 0.5, 0.4, &mut rng(18)).is_err());
    }

    #[test]
    fn dataset_binary_round_trip() {
        let base = min_max_normalize(&synth_gaussian_clusters(3, 7, 4, 1.0, 0.0, &mut rng(19)).unwrap());
        let with = inject_gaussian_outliers(&base, 3, &mut rng(20)).unwrap();
        let bytes = dataset_to_bytes(&with);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back.features.as_slice(), with.features.as_slice());
        assert_eq!(back.labels, with.labels);
        assert_eq!(back.is_outlier, with.is_outlier);
        assert_eq!(back.classes, with.classes);
        assert!(dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(dataset_from_bytes(b"XXXX").is_err());
    }
}
