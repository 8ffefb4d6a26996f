//! Datasets, client shards, and the generators/loaders that produce them.
//!
//! Features are always dense f64 rows scaled into [0, 1]. Shards are index lists
//! into a dataset, never copies, so a poisoned shard is just a different view of
//! the same rows with its labels overridden.

pub mod idx;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ClientId;

/// How a dataset came to exist; carried along for manifests and error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Drawn from seeded Gaussian class clusters.
    Synthetic { seed: u64 },
    /// Parsed from an IDX image/label file pair.
    Idx { images: String, labels: String },
}

/// A labeled dataset: row-major features in [0, 1] plus one class label per row.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
    provenance: Provenance,
}

/// One training example as seen by a model: borrowed features and an effective label.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

impl Dataset {
    /// Validates and wraps raw rows. `features` is row-major with `input_dim` columns.
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("dataset has no examples"));
        }
        if input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if num_classes < 2 {
            return Err(Error::config("a dataset needs at least 2 classes"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.iter().all(|x| x.is_finite()) {
            return Err(Error::config("dataset features must all be finite"));
        }
        Ok(Dataset { features, labels, input_dim, num_classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// The example at row `i` with its true label.
    pub fn example(&self, i: usize) -> Example<'_> {
        Example { features: self.features(i), label: self.labels[i] }
    }

    /// Row indices carrying the given label, in row order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// One client's training subset: indices into a dataset plus an optional label override.
///
/// When `label_override` is set, every example this shard exposes reports that label —
/// the true labels never reach training code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shard {
    pub owner: ClientId,
    pub indices: Vec<usize>,
    pub label_override: Option<usize>,
}

impl Shard {
    pub fn new(
        owner: ClientId,
        indices: Vec<usize>,
        label_override: Option<usize>,
        ds: &Dataset,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("shard has no examples"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::config(format!(
                "shard index {bad} out of range for dataset of {}",
                ds.len()
            )));
        }
        if let Some(lbl) = label_override {
            if lbl >= ds.num_classes() {
                return Err(Error::config(format!(
                    "label_override {lbl} out of range for {} classes",
                    ds.num_classes()
                )));
            }
            // An override that changes nothing is a configuration mistake.
            if indices.iter().all(|&i| ds.label(i) == lbl) {
                return Err(Error::config(
                    "label_override equals the true label of every shard example",
                ));
            }
        }
        Ok(Shard { owner, indices, label_override })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The `k`-th example of this shard (positional, not a dataset row index),
    /// with the override applied if present.
    pub fn example<'a>(&self, ds: &'a Dataset, k: usize) -> Example<'a> {
        let row = self.indices[k];
        Example {
            features: ds.features(row),
            label: self.label_override.unwrap_or_else(|| ds.label(row)),
        }
    }

    /// All examples in shard order, overrides applied.
    pub fn examples<'a>(&self, ds: &'a Dataset) -> Vec<Example<'a>> {
        (0..self.len()).map(|k| self.example(ds, k)).collect()
    }
}

/// Draws a seeded synthetic classification corpus and splits it 80/20 per class.
///
/// Each class gets a random unit-norm center; examples are the center plus isotropic
/// Gaussian noise with standard deviation `spread`, and the pooled corpus is then
/// rescaled feature-by-feature into [0, 1]. The split is deterministic: the first
/// 80% of each class's examples (in generation order) become training rows.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if input_dim == 0 {
        return Err(Error::config("input_dim must be at least 1"));
    }
    if per_class < 2 {
        return Err(Error::config("per_class must be at least 2 so both splits are non-empty"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::config("spread must be a finite non-negative real"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        // Unit-norm center; redraw in the (measure-zero) case of a degenerate sample.
        loop {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                centers.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
                break;
            }
        }
    }

    let n = num_classes * per_class;
    let mut raw = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let noise: f64 = rng.sample(StandardNormal);
                raw.push(mu + spread * noise);
            }
            labels.push(c);
        }
    }

    // Affine rescale each feature over the pooled corpus so everything lands in [0, 1].
    for col in 0..input_dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in 0..n {
            let x = raw[row * input_dim + col];
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let range = hi - lo;
        for row in 0..n {
            let slot = &mut raw[row * input_dim + col];
            *slot = if range < 1e-12 { 0.5 } else { (*slot - lo) / range };
        }
    }

    let train_per_class = per_class * 4 / 5;
    let mut tr = (Vec::new(), Vec::new());
    let mut te = (Vec::new(), Vec::new());
    for row in 0..n {
        let within_class = row % per_class;
        let sink = if within_class < train_per_class { &mut tr } else { &mut te };
        sink.0.extend_from_slice(&raw[row * input_dim..(row + 1) * input_dim]);
        sink.1.push(labels[row]);
    }

    let prov = Provenance::Synthetic { seed };
    let train = Dataset::new(tr.0, tr.1, input_dim, num_classes, prov.clone())?;
    let test = Dataset::new(te.0, te.1, input_dim, num_classes, prov)?;
    Ok((train, test))
}

/// Loads an IDX image/label file pair into a dataset, pixels scaled by 1/255.
///
/// `limit_per_class` keeps only the first k examples of each class in file order.
/// The number of classes is the highest label in the file plus one.
pub fn load_idx(
    images_path: &str,
    labels_path: &str,
    limit_per_class: Option<usize>,
) -> Result<Dataset> {
    if limit_per_class == Some(0) {
        return Err(Error::config("limit_per_class must be at least 1 when given"));
    }
    let image_bytes = std::fs::read(images_path)
        .map_err(|source| Error::Io { path: images_path.into(), source })?;
    let label_bytes = std::fs::read(labels_path)
        .map_err(|source| Error::Io { path: labels_path.into(), source })?;
    let images = idx::parse_images(&image_bytes)?;
    let labels = idx::parse_labels(&label_bytes)?;
    if images.count as usize != labels.labels.len() {
        return Err(Error::Format {
            field: "count".into(),
            message: format!(
                "images declare {} examples but labels declare {}",
                images.count,
                labels.labels.len()
            ),
        });
    }

    let input_dim = (images.rows * images.cols) as usize;
    let num_classes = match labels.labels.iter().max() {
        Some(&m) => m as usize + 1,
        None => return Err(Error::EmptyInput("idx files declare zero examples")),
    };

    let mut kept_per_class = vec![0usize; num_classes];
    let mut features = Vec::new();
    let mut kept_labels = Vec::new();
    for (i, &lbl) in labels.labels.iter().enumerate() {
        let class = lbl as usize;
        if let Some(limit) = limit_per_class {
            if kept_per_class[class] >= limit {
                continue;
            }
        }
        kept_per_class[class] += 1;
        let start = i * input_dim;
        features.extend(images.pixels[start..start + input_dim].iter().map(|&p| p as f64 / 255.0));
        kept_labels.push(class);
    }

    Dataset::new(
        features,
        kept_labels,
        input_dim,
        num_classes,
        Provenance::Idx { images: images_path.to_string(), labels: labels_path.to_string() },
    )
}

/// Splits a dataset into one shard per class: client i owns exactly the label-i rows.
///
/// This is the fully non-IID partition, so `num_clients` must equal the number of
/// classes and every class must actually occur.
pub fn partition_non_iid(ds: &Dataset, num_clients: usize) -> Result<Vec<Shard>> {
    if num_clients != ds.num_classes() {
        return Err(Error::config(format!(
            "non-IID partition needs num_clients == num_classes ({} != {})",
            num_clients,
            ds.num_classes()
        )));
    }
    let mut shards = Vec::with_capacity(num_clients);
    for c in 0..num_clients {
        let indices = ds.class_indices(c);
        if indices.is_empty() {
            return Err(Error::config(format!("class {c} has no examples to assign")));
        }
        shards.push(Shard::new(ClientId(c), indices, None, ds)?);
    }
    Ok(shards)
}

/// Shuffles one class's row indices with a seeded generator and deals them into
/// `parts` disjoint near-equal slices (sizes differ by at most one).
pub fn split_class_indices(
    ds: &Dataset,
    class: usize,
    parts: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if parts == 0 {
        return Err(Error::config("cannot split a class into zero parts"));
    }
    let mut indices = ds.class_indices(class);
    if indices.len() < parts {
        return Err(Error::config(format!(
            "class {class} has {} examples, fewer than the {parts} requested parts",
            indices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let base = indices.len() / parts;
    let extra = indices.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut cursor = 0;
    for p in 0..parts {
        let take = base + usize::from(p < extra);
        out.push(indices[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(out)
}

/// Builds the poison shards for a sybil group: the source class's rows are shuffled,
/// divided disjointly among `num_sybils` shards, and every shard reports
/// `target_class` as its label.
///
/// Shard owners are numbered 0..num_sybils; callers wiring a full experiment
/// re-assign the real client ids.
pub fn build_sybil_shards(
    ds: &Dataset,
    source_class: usize,
    target_class: usize,
    num_sybils: usize,
    seed: u64,
) -> Result<Vec<Shard>> {
    if source_class == target_class {
        return Err(Error::config("source_class and target_class must differ"));
    }
    let parts = split_class_indices(ds, source_class, num_sybils, seed)?;
    parts
        .into_iter()
        .enumerate()
        .map(|(i, indices)| Shard::new(ClientId(i), indices, Some(target_class), ds))
        .collect()
}
