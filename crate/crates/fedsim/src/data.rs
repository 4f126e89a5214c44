//! Datasets, synthetic generation, CSV loading, splitting, and the
//! client partition strategies (IID plus five non-IID skew families).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Feature matrix with dense integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Precondition("dataset needs at least one sample".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Precondition(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if n_classes == 0 || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::Precondition(format!(
                "labels must lie in [0, {n_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Precondition(format!("index {bad} out of range")));
        }
        let features = self.features.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.n_classes)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.n_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut per_class = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l].push(i);
        }
        per_class
    }
}

/// Gaussian class clusters with unit variance. Class means sit on scaled
/// coordinate axes whenever they fit, so any two means are exactly
/// `separation` apart; labels cycle round-robin for balanced classes.
pub fn generate_blobs(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(Error::Precondition("blob counts must be positive".into()));
    }
    if separation < 0.0 {
        return Err(Error::Precondition("separation must be non-negative".into()));
    }
    let mut rng = rng::stream(seed, "blobs");
    let scale = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|k| {
            let mut mean = vec![0.0; n_features];
            if n_classes <= n_features {
                mean[k] = scale;
            } else {
                // more classes than axes: random directions of the same length
                let dir: Vec<f64> = (0..n_features).map(|_| rng::normal(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for (m, d) in mean.iter_mut().zip(dir) {
                    *m = scale * d / norm;
                }
            }
            mean
        })
        .collect();

    let mut features = Array2::zeros((n_samples, n_features));
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % n_classes;
        labels.push(label);
        for j in 0..n_features {
            features[[i, j]] = means[label][j] + rng::normal(&mut rng);
        }
    }
    Dataset::new(features, labels, n_classes)
}

/// Load a CSV with a header row: numeric features, integer labels in the
/// named column. Labels are re-indexed to a dense [0, n_classes) range
/// preserving the sort order of the original values.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let display = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: display.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, format!("cannot open: {e}")))?;

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_err(1, format!("no column named `{label_column}`")))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(row_idx + 2, format!("bad row: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(row_idx + 2);
        let mut row = Vec::with_capacity(headers.len().saturating_sub(1));
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let label: i64 = cell.parse().map_err(|_| {
                    parse_err(line, format!("expected integer label, got `{cell}`"))
                })?;
                raw_labels.push(label);
            } else {
                let value: f64 = cell.parse().map_err(|_| {
                    parse_err(
                        line,
                        format!("non-numeric value `{cell}` in column `{}`", &headers[col]),
                    )
                })?;
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(1, "empty dataset: header but no data rows".into()));
    }

    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let rank: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(r, &v)| (v, r)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|v| rank[v]).collect();

    let n_features = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), n_features), flat)
        .map_err(|e| parse_err(0, format!("ragged rows: {e}")))?;
    Dataset::new(features, labels, distinct.len())
}

/// Companion writer for [`load_csv`]: feature columns f0..fN then the label.
pub fn save_csv(dataset: &Dataset, path: &Path, label_column: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.n_features()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    writer.write_record(&header)?;
    for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        record.push(label.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Disjoint train/test cover. Stratified splits take
/// round(fraction × class count) test samples per class, always keeping at
/// least one training sample per class.
pub fn train_test_split(
    dataset: &Dataset,
    test_fraction: f64,
    stratified: bool,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::Precondition("need at least 2 samples to split".into()));
    }
    let mut rng = rng::stream(seed, "train-test-split");
    let mut test_indices: Vec<usize> = Vec::new();
    if stratified {
        for (class, mut indices) in dataset.class_indices().into_iter().enumerate() {
            if indices.is_empty() {
                continue;
            }
            if indices.len() == 1 {
                log::warn!(
                    "class {class} has a single sample; keeping it in the training set"
                );
                continue;
            }
            let mut take = (test_fraction * indices.len() as f64).round() as usize;
            take = take.min(indices.len() - 1);
            rng::shuffle(&mut indices, &mut rng);
            test_indices.extend_from_slice(&indices[..take]);
        }
    } else {
        let mut indices: Vec<usize> = (0..dataset.len()).collect();
        rng::shuffle(&mut indices, &mut rng);
        let take = ((test_fraction * dataset.len() as f64).round() as usize)
            .clamp(1, dataset.len() - 1);
        test_indices.extend_from_slice(&indices[..take]);
    }
    test_indices.sort_unstable();
    let mut in_test = vec![false; dataset.len()];
    for &i in &test_indices {
        in_test[i] = true;
    }
    let train_indices: Vec<usize> = (0..dataset.len()).filter(|&i| !in_test[i]).collect();
    if train_indices.is_empty() || test_indices.is_empty() {
        return Err(Error::Precondition(
            "split left train or test empty; adjust test_fraction".into(),
        ));
    }
    Ok((dataset.subset(&train_indices)?, dataset.subset(&test_indices)?))
}

/// The six partition strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionStrategy {
    /// Random equal-size split.
    Iid,
    /// Per class, client proportions drawn from Dirichlet(alpha).
    DirichletLabel { alpha: f64 },
    /// Client sizes drawn from Dirichlet(beta) over a class-balanced pool.
    QuantitySkew { beta: f64 },
    /// Label-sorted data cut into shards; each client takes shards from
    /// `classes_per_client` distinct classes.
    PathologicalLabel { classes_per_client: usize },
    /// Each client owns exactly `classes_per_client` classes, assigned
    /// round-robin; class samples divided equally among owners.
    LabelQuantity { classes_per_client: usize },
    /// IID split, then each client's features shifted by a client-specific
    /// Gaussian offset with scale sigma; labels untouched.
    CovariateShift { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub seed: u64,
}

impl PartitionSpec {
    fn validate(&self, n_classes: usize) -> Result<()> {
        match self.strategy {
            PartitionStrategy::Iid => Ok(()),
            PartitionStrategy::DirichletLabel { alpha } if alpha > 0.0 => Ok(()),
            PartitionStrategy::DirichletLabel { alpha } => Err(Error::config(
                "distribution.alpha",
                format!("must be positive, got {alpha}"),
            )),
            PartitionStrategy::QuantitySkew { beta } if beta > 0.0 => Ok(()),
            PartitionStrategy::QuantitySkew { beta } => Err(Error::config(
                "distribution.beta",
                format!("must be positive, got {beta}"),
            )),
            PartitionStrategy::PathologicalLabel { classes_per_client }
            | PartitionStrategy::LabelQuantity { classes_per_client } => {
                if classes_per_client == 0 {
                    Err(Error::config("distribution.k", "must be at least 1"))
                } else if classes_per_client > n_classes {
                    Err(Error::InfeasiblePartition(format!(
                        "k={classes_per_client} classes per client exceeds {n_classes} classes"
                    )))
                } else {
                    Ok(())
                }
            }
            PartitionStrategy::CovariateShift { sigma } if sigma >= 0.0 => Ok(()),
            PartitionStrategy::CovariateShift { sigma } => Err(Error::config(
                "distribution.sigma",
                format!("must be non-negative, got {sigma}"),
            )),
        }
    }
}

/// Client index -> sorted, pairwise-disjoint sample indices, plus the
/// per-client feature offsets used by covariate shift.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    assignment: BTreeMap<usize, Vec<usize>>,
    feature_offsets: BTreeMap<usize, Vec<f64>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn client_indices(&self, client: usize) -> &[usize] {
        self.assignment
            .get(&client)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignment.values().map(Vec::len).collect()
    }

    pub fn feature_offset(&self, client: usize) -> Option<&[f64]> {
        self.feature_offsets.get(&client).map(Vec::as_slice)
    }

    /// Materialize a client's local view, applying its feature offset.
    pub fn client_dataset(&self, base: &Dataset, client: usize) -> Result<Dataset> {
        let indices = self
            .assignment
            .get(&client)
            .ok_or_else(|| Error::Precondition(format!("no client {client} in partition")))?;
        let mut local = base.subset(indices)?;
        if let Some(offset) = self.feature_offsets.get(&client) {
            for mut row in local.features.rows_mut() {
                for (v, o) in row.iter_mut().zip(offset) {
                    *v += o;
                }
            }
        }
        Ok(local)
    }
}

/// Largest-remainder apportionment of `total` items by `proportions`.
/// Ties in the fractional part go to the lower index.
fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let norm: Vec<f64> = if sum > 0.0 {
        proportions.iter().map(|p| p / sum).collect()
    } else {
        vec![1.0 / proportions.len() as f64; proportions.len()]
    };
    let raw: Vec<f64> = norm.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

fn iid_assignment(
    n_samples: usize,
    n_clients: usize,
    rng: &mut ChaCha20Rng,
) -> BTreeMap<usize, Vec<usize>> {
    let mut indices: Vec<usize> = (0..n_samples).collect();
    rng::shuffle(&mut indices, rng);
    let base = n_samples / n_clients;
    let rem = n_samples % n_clients;
    let mut assignment = BTreeMap::new();
    let mut cursor = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < rem);
        assignment.insert(c, indices[cursor..cursor + size].to_vec());
        cursor += size;
    }
    assignment
}

fn dirichlet_label_assignment(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    rng: &mut ChaCha20Rng,
) -> BTreeMap<usize, Vec<usize>> {
    let mut assignment: BTreeMap<usize, Vec<usize>> =
        (0..n_clients).map(|c| (c, Vec::new())).collect();
    for mut indices in dataset.class_indices() {
        if indices.is_empty() {
            continue;
        }
        rng::shuffle(&mut indices, rng);
        let proportions = rng::dirichlet(alpha, n_clients, rng);
        let counts = apportion(&proportions, indices.len());
        let mut cursor = 0;
        for (c, count) in counts.into_iter().enumerate() {
            assignment
                .get_mut(&c)
                .unwrap()
                .extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    assignment
}

fn quantity_skew_assignment(
    dataset: &Dataset,
    n_clients: usize,
    beta: f64,
    rng: &mut ChaCha20Rng,
) -> BTreeMap<usize, Vec<usize>> {
    // Round-robin over shuffled classes keeps every contiguous chunk of the
    // pool close to the global class mix.
    let mut per_class = dataset.class_indices();
    for indices in &mut per_class {
        rng::shuffle(indices, rng);
    }
    let mut pool = Vec::with_capacity(dataset.len());
    let mut cursors = vec![0usize; per_class.len()];
    while pool.len() < dataset.len() {
        for (class, indices) in per_class.iter().enumerate() {
            if cursors[class] < indices.len() {
                pool.push(indices[cursors[class]]);
                cursors[class] += 1;
            }
        }
    }
    let proportions = rng::dirichlet(beta, n_clients, rng);
    let sizes = apportion(&proportions, dataset.len());
    let mut assignment = BTreeMap::new();
    let mut cursor = 0;
    for (c, size) in sizes.into_iter().enumerate() {
        assignment.insert(c, pool[cursor..cursor + size].to_vec());
        cursor += size;
    }
    assignment
}

/// Split `count` into `parts` near-equal chunk sizes, larger chunks first.
fn even_chunks(count: usize, parts: usize) -> Vec<usize> {
    let base = count / parts;
    let rem = count % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

fn pathological_assignment(
    dataset: &Dataset,
    n_clients: usize,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Option<BTreeMap<usize, Vec<usize>>>> {
    let total_shards = n_clients * k;
    let per_class = dataset.class_indices();
    let class_counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let n = dataset.len();

    // Shard quota per class, proportional to class size. A class cannot
    // supply more shards than it has samples, nor more than one shard per
    // client (a client never takes two shards of the same class).
    let proportions: Vec<f64> = class_counts.iter().map(|&c| c as f64 / n as f64).collect();
    let mut quotas = apportion(&proportions, total_shards);
    let caps: Vec<usize> = class_counts
        .iter()
        .map(|&c| c.min(n_clients))
        .collect();
    if caps.iter().sum::<usize>() < total_shards {
        return Err(Error::InfeasiblePartition(format!(
            "{n_clients} clients x k={k} needs {total_shards} label-pure shards, \
             but the classes can supply at most {}",
            caps.iter().sum::<usize>()
        )));
    }
    loop {
        let mut surplus = 0;
        for (q, &cap) in quotas.iter_mut().zip(&caps) {
            if *q > cap {
                surplus += *q - cap;
                *q = cap;
            }
        }
        if surplus == 0 {
            break;
        }
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by_key(|&y| std::cmp::Reverse(caps[y] - quotas[y]));
        for &y in &order {
            if surplus == 0 {
                break;
            }
            let spare = caps[y] - quotas[y];
            let take = spare.min(surplus);
            quotas[y] += take;
            surplus -= take;
        }
    }

    // Label-sorted contiguous shards within each class.
    let mut shards_by_class: Vec<Vec<Vec<usize>>> = Vec::with_capacity(per_class.len());
    for (indices, &quota) in per_class.iter().zip(&quotas) {
        let mut shards = Vec::new();
        if quota > 0 {
            let mut cursor = 0;
            for size in even_chunks(indices.len(), quota) {
                shards.push(indices[cursor..cursor + size].to_vec());
                cursor += size;
            }
        }
        shards_by_class.push(shards);
    }

    // Deal shards: classes with the most shards first; each shard goes to a
    // random client among those with the most remaining capacity that do
    // not hold this class yet.
    let mut capacity = vec![k; n_clients];
    let mut holds = vec![vec![false; per_class.len()]; n_clients];
    let mut assignment: BTreeMap<usize, Vec<usize>> =
        (0..n_clients).map(|c| (c, Vec::new())).collect();
    let mut class_order: Vec<usize> = (0..per_class.len()).collect();
    class_order.sort_by_key(|&y| std::cmp::Reverse(quotas[y]));
    for &class in &class_order {
        for shard in &shards_by_class[class] {
            let max_cap = match (0..n_clients)
                .filter(|&c| capacity[c] > 0 && !holds[c][class])
                .map(|c| capacity[c])
                .max()
            {
                Some(m) => m,
                None => return Ok(None), // dead end; caller resamples
            };
            let candidates: Vec<usize> = (0..n_clients)
                .filter(|&c| capacity[c] == max_cap && !holds[c][class])
                .collect();
            let chosen = candidates[rng.gen_range(0..candidates.len())];
            capacity[chosen] -= 1;
            holds[chosen][class] = true;
            assignment
                .get_mut(&chosen)
                .unwrap()
                .extend_from_slice(shard);
        }
    }
    Ok(Some(assignment))
}

fn label_quantity_assignment(
    dataset: &Dataset,
    n_clients: usize,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let n_classes = dataset.n_classes;
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for c in 0..n_clients {
        for j in 0..k {
            owners[(c * k + j) % n_classes].push(c);
        }
    }
    let per_class = dataset.class_indices();
    for (class, class_owners) in owners.iter().enumerate() {
        if per_class[class].len() < class_owners.len() {
            return Err(Error::InfeasiblePartition(format!(
                "class {class} has {} samples for {} owning clients",
                per_class[class].len(),
                class_owners.len()
            )));
        }
    }
    let mut assignment: BTreeMap<usize, Vec<usize>> =
        (0..n_clients).map(|c| (c, Vec::new())).collect();
    for (class, mut indices) in per_class.into_iter().enumerate() {
        let class_owners = &owners[class];
        if class_owners.is_empty() {
            continue; // n_clients*k < n_classes: this class stays unassigned
        }
        rng::shuffle(&mut indices, rng);
        let shares = apportion(&vec![1.0; class_owners.len()], indices.len());
        let mut cursor = 0;
        for (&owner, share) in class_owners.iter().zip(shares) {
            assignment
                .get_mut(&owner)
                .unwrap()
                .extend_from_slice(&indices[cursor..cursor + share]);
            cursor += share;
        }
    }
    Ok(assignment)
}

/// Dispatch on the strategy. Deterministic per (dataset, spec, seed); a
/// draw that leaves some client empty is retried with fresh randomness up
/// to 100 times before failing.
pub fn partition(dataset: &Dataset, n_clients: usize, spec: &PartitionSpec) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::Precondition("need at least one client".into()));
    }
    spec.validate(dataset.n_classes)?;

    const MAX_ATTEMPTS: usize = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng::stream(spec.seed, &format!("partition/{attempt}"));
        let mut feature_offsets = BTreeMap::new();
        let assignment = match spec.strategy {
            PartitionStrategy::Iid => iid_assignment(dataset.len(), n_clients, &mut rng),
            PartitionStrategy::DirichletLabel { alpha } => {
                dirichlet_label_assignment(dataset, n_clients, alpha, &mut rng)
            }
            PartitionStrategy::QuantitySkew { beta } => {
                quantity_skew_assignment(dataset, n_clients, beta, &mut rng)
            }
            PartitionStrategy::PathologicalLabel { classes_per_client } => {
                match pathological_assignment(dataset, n_clients, classes_per_client, &mut rng)? {
                    Some(a) => a,
                    None => continue,
                }
            }
            PartitionStrategy::LabelQuantity { classes_per_client } => {
                label_quantity_assignment(dataset, n_clients, classes_per_client, &mut rng)?
            }
            PartitionStrategy::CovariateShift { sigma } => {
                let assignment = iid_assignment(dataset.len(), n_clients, &mut rng);
                for c in 0..n_clients {
                    let offset: Vec<f64> = (0..dataset.n_features())
                        .map(|_| sigma * rng::normal(&mut rng))
                        .collect();
                    feature_offsets.insert(c, offset);
                }
                assignment
            }
        };
        if assignment.values().any(Vec::is_empty) {
            continue;
        }
        let mut assignment = assignment;
        for indices in assignment.values_mut() {
            indices.sort_unstable();
        }
        return Ok(Partition {
            assignment,
            feature_offsets,
        });
    }
    Err(Error::InfeasiblePartition(format!(
        "strategy left an empty client in {MAX_ATTEMPTS} attempts \
         ({n_clients} clients on {} samples)",
        dataset.len()
    )))
}

/// Per-client sizes and label mixes, plus the mean pairwise total-variation
/// distance between client label distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewReport {
    pub client_sizes: Vec<usize>,
    pub label_histograms: Vec<Vec<usize>>,
    pub mean_pairwise_tv: f64,
}

pub fn partition_stats(dataset: &Dataset, partition: &Partition) -> Result<SkewReport> {
    let n_clients = partition.n_clients();
    let mut client_sizes = Vec::with_capacity(n_clients);
    let mut label_histograms = Vec::with_capacity(n_clients);
    for (&client, indices) in &partition.assignment {
        let _ = client;
        let mut hist = vec![0usize; dataset.n_classes];
        for &i in indices {
            if i >= dataset.len() {
                return Err(Error::Precondition(format!("index {i} out of range")));
            }
            hist[dataset.labels[i]] += 1;
        }
        client_sizes.push(indices.len());
        label_histograms.push(hist);
    }

    let distributions: Vec<Vec<f64>> = label_histograms
        .iter()
        .zip(&client_sizes)
        .map(|(hist, &size)| {
            hist.iter()
                .map(|&c| if size > 0 { c as f64 / size as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut tv_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n_clients {
        for j in i + 1..n_clients {
            tv_sum += total_variation(&distributions[i], &distributions[j]);
            pairs += 1;
        }
    }
    Ok(SkewReport {
        client_sizes,
        label_histograms,
        mean_pairwise_tv: if pairs > 0 { tv_sum / pairs as f64 } else { 0.0 },
    })
}

/// 0.5 · Σ |p_i − q_i|
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blob4(n: usize) -> Dataset {
        generate_blobs(n, 5, 4, 4.0, 7).unwrap()
    }

    /// Nearest-centroid rule; with unit-variance spherical clusters this is
    /// the closed-form LDA classifier.
    fn centroid_accuracy(dataset: &Dataset) -> f64 {
        let mut sums = vec![vec![0.0; dataset.n_features()]; dataset.n_classes];
        let mut counts = vec![0usize; dataset.n_classes];
        for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(row) {
                *s += v;
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
            .collect();
        let mut correct = 0;
        for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, mean) in means.iter().enumerate() {
                let d: f64 = row
                    .iter()
                    .zip(mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        correct as f64 / dataset.len() as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let d = generate_blobs(200, 6, 2, 10.0, 3).unwrap();
        assert!(centroid_accuracy(&d) >= 0.99);
        let hist = d.label_histogram();
        assert_eq!(hist, vec![100, 100]);
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let d = generate_blobs(2000, 6, 2, 0.0, 3).unwrap();
        let acc = centroid_accuracy(&d);
        assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn blobs_with_more_classes_than_features_still_work() {
        let d = generate_blobs(90, 2, 5, 4.0, 6).unwrap();
        assert_eq!(d.n_classes, 5);
        assert_eq!(d.label_histogram(), vec![18, 18, 18, 18, 18]);
        assert_eq!(d, generate_blobs(90, 2, 5, 4.0, 6).unwrap());
    }

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let a = generate_blobs(50, 3, 2, 1.0, 11).unwrap();
        let b = generate_blobs(50, 3, 2, 1.0, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_blobs(50, 3, 2, 1.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_labels_reindex_densely() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.csv");
        std::fs::write(&path, "a,b,label\n1.0,2.0,5\n3.0,4.0,9\n5.0,6.0,5\n").unwrap();
        let d = load_csv(&path, "label").unwrap();
        assert_eq!(d.labels, vec![0, 1, 0]);
        assert_eq!(d.n_classes, 2);
        assert_eq!(d.n_features(), 2);
    }

    #[test]
    fn csv_errors_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let header_only = dir.path().join("empty.csv");
        std::fs::write(&header_only, "a,label\n").unwrap();
        let err = load_csv(&header_only, "label").unwrap_err();
        assert!(err.to_string().contains("empty dataset"));

        let bad_cell = dir.path().join("bad.csv");
        std::fs::write(&bad_cell, "a,label\n1.0,0\nnope,1\n").unwrap();
        let err = load_csv(&bad_cell, "label").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("line 3") && text.contains("nope"), "{text}");

        let missing = load_csv(Path::new("/no/such/file.csv"), "label").unwrap_err();
        assert!(missing.to_string().contains("cannot open"));

        let no_col = dir.path().join("nocol.csv");
        std::fs::write(&no_col, "a,b\n1.0,2.0\n").unwrap();
        let err = load_csv(&no_col, "label").unwrap_err();
        assert!(err.to_string().contains("no column named"));
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.csv");
        let d = generate_blobs(40, 3, 3, 2.5, 5).unwrap();
        save_csv(&d, &path, "label").unwrap();
        let back = load_csv(&path, "label").unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn split_sizes_and_cover() {
        let d = blob4(100);
        let (train, test) = train_test_split(&d, 0.2, false, 1).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);

        let balanced = generate_blobs(100, 4, 2, 3.0, 2).unwrap();
        let (train, test) = train_test_split(&balanced, 0.2, true, 1).unwrap();
        assert_eq!(test.label_histogram(), vec![10, 10]);
        assert_eq!(train.len() + test.len(), 100);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = blob4(10);
        assert!(train_test_split(&d, 0.0, false, 1).is_err());
        assert!(train_test_split(&d, 1.0, false, 1).is_err());
    }

    fn assert_disjoint_cover(partition: &Partition, n: usize) {
        let mut seen = vec![false; n];
        for c in 0..partition.n_clients() {
            for &i in partition.client_indices(c) {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "some index unassigned");
    }

    #[test]
    fn iid_splits_evenly() {
        let d = blob4(100);
        let spec = PartitionSpec {
            strategy: PartitionStrategy::Iid,
            seed: 3,
        };
        let p = partition(&d, 4, &spec).unwrap();
        assert_eq!(p.sizes(), vec![25, 25, 25, 25]);
        assert_disjoint_cover(&p, 100);
    }

    #[test]
    fn partition_is_deterministic_per_seed() {
        let d = blob4(200);
        let spec = PartitionSpec {
            strategy: PartitionStrategy::DirichletLabel { alpha: 0.5 },
            seed: 9,
        };
        assert_eq!(partition(&d, 5, &spec).unwrap(), partition(&d, 5, &spec).unwrap());
    }

    #[test]
    fn pathological_gives_exactly_k_labels() {
        let d = generate_blobs(1000, 4, 10, 3.0, 1).unwrap();
        let spec = PartitionSpec {
            strategy: PartitionStrategy::PathologicalLabel {
                classes_per_client: 2,
            },
            seed: 4,
        };
        let p = partition(&d, 5, &spec).unwrap();
        assert_disjoint_cover(&p, 1000);
        for c in 0..5 {
            let local = p.client_dataset(&d, c).unwrap();
            let distinct = local
                .label_histogram()
                .iter()
                .filter(|&&n| n > 0)
                .count();
            assert_eq!(distinct, 2, "client {c}");
        }
    }

    #[test]
    fn label_quantity_gives_exactly_k_labels() {
        let d = generate_blobs(600, 4, 6, 3.0, 2).unwrap();
        let spec = PartitionSpec {
            strategy: PartitionStrategy::LabelQuantity {
                classes_per_client: 3,
            },
            seed: 5,
        };
        let p = partition(&d, 4, &spec).unwrap();
        assert_disjoint_cover(&p, 600);
        for c in 0..4 {
            let local = p.client_dataset(&d, c).unwrap();
            let distinct = local
                .label_histogram()
                .iter()
                .filter(|&&n| n > 0)
                .count();
            assert_eq!(distinct, 3, "client {c}");
        }
    }

    #[test]
    fn k_larger_than_classes_is_infeasible() {
        let d = blob4(100);
        for strategy in [
            PartitionStrategy::PathologicalLabel {
                classes_per_client: 5,
            },
            PartitionStrategy::LabelQuantity {
                classes_per_client: 5,
            },
        ] {
            let err = partition(&d, 3, &PartitionSpec { strategy, seed: 0 }).unwrap_err();
            assert!(matches!(err, Error::InfeasiblePartition(_)), "{err}");
        }
    }

    #[test]
    fn dirichlet_high_alpha_matches_global_mix() {
        let d = blob4(2000);
        let spec = PartitionSpec {
            strategy: PartitionStrategy::DirichletLabel { alpha: 1e6 },
            seed: 6,
        };
        let p = partition(&d, 10, &spec).unwrap();
        assert_disjoint_cover(&p, 2000);
        let global: Vec<f64> = d
            .label_histogram()
            .iter()
            .map(|&c| c as f64 / d.len() as f64)
            .collect();
        let stats = partition_stats(&d, &p).unwrap();
        for (hist, &size) in stats.label_histograms.iter().zip(&stats.client_sizes) {
            let dist: Vec<f64> = hist.iter().map(|&c| c as f64 / size as f64).collect();
            let tv = total_variation(&dist, &global);
            assert!(tv <= 0.05, "client tv {tv}");
        }
    }

    #[test]
    fn dirichlet_low_alpha_concentrates_labels() {
        let d = generate_blobs(2000, 5, 10, 3.0, 8).unwrap();
        let spec = PartitionSpec {
            strategy: PartitionStrategy::DirichletLabel { alpha: 0.01 },
            seed: 13,
        };
        let p = partition(&d, 8, &spec).unwrap();
        let stats = partition_stats(&d, &p).unwrap();
        let concentrated = stats
            .label_histograms
            .iter()
            .zip(&stats.client_sizes)
            .filter(|(hist, &size)| {
                let mut sorted: Vec<usize> = (*hist).clone();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                let top2: usize = sorted.iter().take(2).sum();
                top2 as f64 >= 0.9 * size as f64
            })
            .count();
        assert!(
            concentrated as f64 >= 0.8 * 8.0,
            "only {concentrated}/8 clients concentrated"
        );
    }

    #[test]
    fn quantity_skew_sizes_follow_beta() {
        let d = blob4(1000);
        let skewed = partition(
            &d,
            5,
            &PartitionSpec {
                strategy: PartitionStrategy::QuantitySkew { beta: 0.3 },
                seed: 7,
            },
        )
        .unwrap();
        assert_disjoint_cover(&skewed, 1000);
        let sizes = skewed.sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 50);

        let even = partition(
            &d,
            5,
            &PartitionSpec {
                strategy: PartitionStrategy::QuantitySkew { beta: 1e6 },
                seed: 7,
            },
        )
        .unwrap();
        let sizes = even.sizes();
        assert!(
            sizes.iter().all(|&s| (s as i64 - 200).abs() <= 2),
            "{sizes:?}"
        );
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn covariate_shift_moves_features_not_labels() {
        let d = blob4(100);
        let spec = PartitionSpec {
            strategy: PartitionStrategy::CovariateShift { sigma: 5.0 },
            seed: 8,
        };
        let p = partition(&d, 4, &spec).unwrap();
        assert_disjoint_cover(&p, 100);
        assert_eq!(p.sizes(), vec![25, 25, 25, 25]);
        for c in 0..4 {
            let offset = p.feature_offset(c).unwrap();
            let local = p.client_dataset(&d, c).unwrap();
            for (pos, &i) in p.client_indices(c).iter().enumerate() {
                assert_eq!(local.labels[pos], d.labels[i]);
                for j in 0..d.n_features() {
                    let expected = d.features[[i, j]] + offset[j];
                    assert!((local.features[[pos, j]] - expected).abs() < 1e-15);
                }
            }
        }
        // distinct clients get distinct offsets
        assert_ne!(p.feature_offset(0), p.feature_offset(1));
    }

    #[test]
    fn empty_client_configs_fail_after_resampling() {
        let d = generate_blobs(2, 3, 2, 1.0, 1).unwrap();
        let err = partition(
            &d,
            3,
            &PartitionSpec {
                strategy: PartitionStrategy::Iid,
                seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasiblePartition(_)));
    }

    #[test]
    fn stats_sizes_sum_and_disjoint_tv() {
        let d = generate_blobs(400, 4, 4, 3.0, 9).unwrap();
        let p = partition(
            &d,
            4,
            &PartitionSpec {
                strategy: PartitionStrategy::PathologicalLabel {
                    classes_per_client: 1,
                },
                seed: 10,
            },
        )
        .unwrap();
        let stats = partition_stats(&d, &p).unwrap();
        assert_eq!(stats.client_sizes.iter().sum::<usize>(), 400);
        // k=1 on 4 classes over 4 clients: disjoint supports, TV exactly 1
        assert!((stats.mean_pairwise_tv - 1.0).abs() < 1e-12);

        let iid = partition(
            &d,
            4,
            &PartitionSpec {
                strategy: PartitionStrategy::Iid,
                seed: 10,
            },
        )
        .unwrap();
        let stats = partition_stats(&d, &iid).unwrap();
        assert!(stats.mean_pairwise_tv <= 0.1, "{}", stats.mean_pairwise_tv);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn covering_strategies_cover_disjointly(
            seed in 0u64..1000,
            n_clients in 1usize..8,
            strategy_pick in 0usize..4,
        ) {
            let d = generate_blobs(120, 3, 4, 2.0, 99).unwrap();
            let strategy = match strategy_pick {
                0 => PartitionStrategy::Iid,
                1 => PartitionStrategy::DirichletLabel { alpha: 0.7 },
                2 => PartitionStrategy::QuantitySkew { beta: 2.0 },
                _ => PartitionStrategy::CovariateShift { sigma: 1.0 },
            };
            let p = partition(&d, n_clients, &PartitionSpec { strategy, seed }).unwrap();
            let mut seen = [false; 120];
            for c in 0..p.n_clients() {
                prop_assert!(!p.client_indices(c).is_empty());
                for &i in p.client_indices(c) {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
