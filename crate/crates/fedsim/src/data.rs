//! Dataset construction, IDX ingestion, and the Dirichlet heterogeneity
//! partitioner.

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::numkit::{dirichlet, Mat64, RngStream, Vec64};
use std::io::{Read, Write};
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory classification dataset: `N x D` features and one class
/// label per row. Image sources are scaled into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Mat64,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Mat64,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        if features.rows() == 0 {
            return Err(Error::Validation(
                "dataset needs at least one sample".into(),
            ));
        }
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Gathers the given rows into a minibatch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut values = Vec::with_capacity(indices.len() * self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            values.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Mat64::from_vec(indices.len(), self.dim(), values)?, labels)
    }

    /// A new dataset holding only the given rows, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let b = self.batch(indices)?;
        Dataset::new(b.features, b.labels, self.num_classes, name)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Normalized label histogram.
    pub fn label_histogram(&self) -> Vec64 {
        histogram(&self.labels, self.num_classes)
    }
}

fn histogram(labels: &[usize], num_classes: usize) -> Vec64 {
    let mut h = vec![0.0; num_classes];
    for &y in labels {
        h[y] += 1.0;
    }
    if !labels.is_empty() {
        let n = labels.len() as f64;
        for v in &mut h {
            *v /= n;
        }
    }
    Vec64::from_vec(h)
}

/// Total variation distance between two histograms: `0.5 * sum |p - q|`.
pub fn tv_distance(p: &Vec64, q: &Vec64) -> f64 {
    0.5 * p
        .iter()
        .zip(q.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Gaussian blobs: class `c` is centered at `separation * u_c` for
/// deterministic unit directions (evenly spaced on a circle in the first
/// two coordinates; evenly spaced points on the line when `dim == 1`).
/// Labels are balanced with `n_per_class` samples each.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if num_classes < 1 || dim < 1 || n_per_class < 1 {
        return Err(Error::Validation("blob counts must be >= 1".into()));
    }
    if noise_std < 0.0 {
        return Err(Error::Validation("noise_std must be nonnegative".into()));
    }
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut center = vec![0.0; dim];
            if dim == 1 {
                center[0] = separation * (c as f64 - (num_classes as f64 - 1.0) / 2.0);
            } else {
                let theta = std::f64::consts::TAU * c as f64 / num_classes as f64;
                center[0] = separation * theta.cos();
                center[1] = separation * theta.sin();
            }
            center
        })
        .collect();

    let n = num_classes * n_per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in center {
                let v = m + noise_std * rng.standard_normal();
                values.push(v.clamp(-1e9, 1e9));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Mat64::from_vec(n, dim, values)?,
        labels,
        num_classes,
        format!("blobs-k{num_classes}-d{dim}"),
    )
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(buf)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Loads an IDX image/label file pair. Pixel bytes are scaled by 1/255
/// into flattened `rows * cols` features; the number of classes is the
/// largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_all(images_path)?;
    let mut cur = Cursor {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    let magic = cur.read_u32_be("magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = cur.read_u32_be("image count")? as usize;
    let rows = cur.read_u32_be("row count")? as usize;
    let cols = cur.read_u32_be("column count")? as usize;
    let pixels = cur.take(count * rows * cols, "pixel data")?;
    cur.expect_end()?;

    let label_bytes = read_all(labels_path)?;
    let mut cur = Cursor {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    let magic = cur.read_u32_be("magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = cur.read_u32_be("label count")? as usize;
    let raw_labels = cur.take(label_count, "label data")?;
    cur.expect_end()?;

    if count != label_count {
        return Err(Error::CountMismatch(format!(
            "{} images in {} but {} labels in {}",
            count,
            images_path.display(),
            label_count,
            labels_path.display()
        )));
    }
    if count == 0 {
        return Err(Error::Validation(format!(
            "{}: empty dataset",
            images_path.display()
        )));
    }

    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Mat64::from_vec(count, rows * cols, features)?,
        labels,
        num_classes,
        images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
    )
}

/// Writes the dataset as an IDX image/label file pair (one row of
/// `dim` columns per sample). Features are clamped to `[0, 1]` and
/// quantized to bytes, so this is bit-exact only for byte-valued data.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.labels.iter().any(|&y| y > u8::MAX as usize) {
        return Err(Error::Validation(
            "IDX labels are single bytes; labels above 255 cannot be saved".into(),
        ));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&1u32.to_be_bytes());
    img.extend_from_slice(&(ds.dim() as u32).to_be_bytes());
    for v in ds.features.as_slice() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&y| y as u8));

    std::fs::File::create(images_path)
        .and_then(|mut f| f.write_all(&img))
        .map_err(|e| Error::io(format!("writing {}", images_path.display()), e))?;
    std::fs::File::create(labels_path)
        .and_then(|mut f| f.write_all(&lab))
        .map_err(|e| Error::io(format!("writing {}", labels_path.display()), e))?;
    Ok(())
}

/// Assignment of dataset rows to clients.
#[derive(Clone, Debug)]
pub struct Partition {
    /// One sorted index list per client; disjoint and jointly exhaustive.
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    /// Puts every row on a single client. Degenerate but valid; used by
    /// the centralized baseline.
    pub fn single_client(n: usize) -> Partition {
        Partition {
            client_indices: vec![(0..n).collect()],
            alpha: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }
}

/// Per-class Dirichlet allocation: for each class, a
/// `Dirichlet(alpha * 1_num_clients)` draw splits that class's shuffled
/// indices across clients proportionally. If any client ends below
/// `min_size`, the whole draw is retried with the advanced stream, up to
/// 1000 attempts.
pub fn dirichlet_partition(
    ds: &Dataset,
    num_clients: usize,
    alpha: f64,
    min_size: usize,
    rng: &mut RngStream,
) -> Result<Partition> {
    if num_clients < 2 {
        return Err(Error::Validation(
            "partition needs at least 2 clients".into(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::Validation(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if min_size < 1 {
        return Err(Error::Validation("min_size must be >= 1".into()));
    }
    if ds.len() < num_clients * min_size {
        return Err(Error::Infeasible(format!(
            "{} samples cannot give {num_clients} clients at least {min_size} each",
            ds.len()
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let alphas = Vec64::splat(alpha, num_clients);

    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..MAX_ATTEMPTS {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut shuffled = class_indices.clone();
            rng.shuffle(&mut shuffled);
            let p = dirichlet(rng, &alphas)?;
            let n = shuffled.len() as f64;
            let mut cum = 0.0;
            let mut start = 0usize;
            for (k, client) in clients.iter_mut().enumerate() {
                cum += p[k];
                let end = if k + 1 == num_clients {
                    shuffled.len()
                } else {
                    (cum * n).round().min(n) as usize
                };
                let end = end.max(start);
                client.extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= min_size) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(Partition {
                client_indices: clients,
                alpha,
                seed: rng.seed(),
            });
        }
    }
    Err(Error::Infeasible(format!(
        "no draw satisfied min_size={min_size} for alpha={alpha} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Shard sizes, label histograms, and total-variation distances for a
/// partition.
#[derive(Clone, Debug)]
pub struct HeterogeneityReport {
    pub client_sizes: Vec<usize>,
    pub label_histograms: Vec<Vec64>,
    pub global_histogram: Vec64,
    pub tv_to_global: Vec<f64>,
    pub pairwise_tv: Vec<Vec<f64>>,
    pub mean_tv_to_global: f64,
}

pub fn heterogeneity_report(p: &Partition, ds: &Dataset) -> Result<HeterogeneityReport> {
    if p.client_indices.is_empty() {
        return Err(Error::Validation("partition has no clients".into()));
    }
    let global = ds.label_histogram();
    let mut sizes = Vec::new();
    let mut hists = Vec::new();
    for shard in &p.client_indices {
        let labels: Vec<usize> = shard.iter().map(|&i| ds.labels[i]).collect();
        sizes.push(shard.len());
        hists.push(histogram(&labels, ds.num_classes));
    }
    let tv_to_global: Vec<f64> = hists.iter().map(|h| tv_distance(h, &global)).collect();
    let k = hists.len();
    let mut pairwise = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            pairwise[i][j] = tv_distance(&hists[i], &hists[j]);
        }
    }
    let mean = tv_to_global.iter().sum::<f64>() / k as f64;
    Ok(HeterogeneityReport {
        client_sizes: sizes,
        label_histograms: hists,
        global_histogram: global,
        tv_to_global,
        pairwise_tv: pairwise,
        mean_tv_to_global: mean,
    })
}

/// Disjoint, exhaustive train/eval split, stratified by label where the
/// class counts permit.
pub fn train_eval_split(
    ds: &Dataset,
    eval_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "eval_fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for indices in &mut by_class {
        rng.shuffle(indices);
    }

    // Largest-remainder allocation of the eval quota across classes.
    let target_total = ((ds.len() as f64) * eval_fraction).round() as usize;
    let target_total = target_total.clamp(1, ds.len() - 1);
    let mut take: Vec<usize> = by_class
        .iter()
        .map(|c| ((c.len() as f64) * eval_fraction).floor() as usize)
        .collect();
    let mut remainders: Vec<(usize, f64)> = by_class
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            let exact = idx.len() as f64 * eval_fraction;
            (c, exact - exact.floor())
        })
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = take.iter().sum();
    let mut r = 0;
    while assigned < target_total && r < 2 * remainders.len() {
        let c = remainders[r % remainders.len()].0;
        if take[c] < by_class[c].len() {
            take[c] += 1;
            assigned += 1;
        }
        r += 1;
    }

    let mut eval_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (c, indices) in by_class.iter().enumerate() {
        eval_idx.extend_from_slice(&indices[..take[c]]);
        train_idx.extend_from_slice(&indices[take[c]..]);
    }
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    if train_idx.is_empty() || eval_idx.is_empty() {
        return Err(Error::Validation(
            "split left one side empty; adjust eval_fraction".into(),
        ));
    }
    Ok((
        ds.subset(&train_idx, format!("{}-train", ds.name))?,
        ds.subset(&eval_idx, format!("{}-eval", ds.name))?,
    ))
}
