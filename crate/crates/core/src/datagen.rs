//! Per-client dataset production: a synthetic Gaussian-cluster generator,
//! Dirichlet partitioning with a shared ratio, stratified train/test splits,
//! and IDX-format ingestion for real image data.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// One labeled sample; `features` has the dataset's input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    input_dim: usize,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, input_dim: usize, class_count: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != input_dim {
                return Err(Error::ShapeMismatch {
                    context: "LabeledDataset::new",
                    lhs: vec![i, s.features.len()],
                    rhs: vec![input_dim],
                });
            }
            if s.label >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    class_count,
                });
            }
        }
        Ok(LabeledDataset {
            samples,
            input_dim,
            class_count,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Materialize a subset by index list, preserving order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            input_dim: self.input_dim,
            class_count: self.class_count,
        }
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }
}

/// Parameters of the heterogeneous partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    /// Number of clients, >= 1.
    pub clients: usize,
    /// Percent of each class distributed uniformly before the Dirichlet draw,
    /// in [0, 100].
    pub shared_percent: f64,
    /// Dirichlet concentration, > 0. Small values give strongly non-IID splits.
    pub beta: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidParameter {
                name: "clients",
                message: "must be >= 1".into(),
            });
        }
        if !(0.0..=100.0).contains(&self.shared_percent) {
            return Err(Error::InvalidParameter {
                name: "shared_percent",
                message: format!("must be in [0, 100], got {}", self.shared_percent),
            });
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter {
                name: "beta",
                message: format!("must be > 0, got {}", self.beta),
            });
        }
        Ok(())
    }
}

/// Per-client index lists into a source dataset. Lists are disjoint and cover
/// the source exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn indices(&self, client: usize) -> &[usize] {
        &self.client_indices[client]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.client_indices.iter().map(|v| v.len()).collect()
    }

    /// True iff the index lists are disjoint and cover 0..n exactly once.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        let mut total = 0usize;
        for list in &self.client_indices {
            for &i in list {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
                total += 1;
            }
        }
        total == n
    }

    /// Per-client, per-class counts; rows are clients, columns classes.
    pub fn class_counts(&self, data: &LabeledDataset) -> Vec<Vec<usize>> {
        let mut table = vec![vec![0usize; data.class_count()]; self.clients()];
        for (j, list) in self.client_indices.iter().enumerate() {
            for &i in list {
                table[j][data.samples()[i].label] += 1;
            }
        }
        table
    }

    /// CSV export: `client_id,class_id,count` with a header row.
    pub fn to_csv(&self, data: &LabeledDataset) -> String {
        let mut out = String::from("client_id,class_id,count\n");
        for (j, row) in self.class_counts(data).iter().enumerate() {
            for (c, count) in row.iter().enumerate() {
                out.push_str(&format!("{j},{c},{count}\n"));
            }
        }
        out
    }
}

/// Gaussian clusters, one mean per class. Means are placed on a sphere of
/// radius 4 with pairwise distance >= 2 (enforced by deterministic redraw),
/// so classes stay linearly separable for `spread` up to about 0.25
/// (3-sigma balls of the clusters never meet below min_distance / 8).
pub fn generate_synthetic(
    class_count: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 || input_dim < 2 || per_class < 1 {
        return Err(Error::InvalidParameter {
            name: "generate_synthetic",
            message: format!(
                "need class_count >= 2, input_dim >= 2, per_class >= 1; got {class_count}, {input_dim}, {per_class}"
            ),
        });
    }
    if spread < 0.0 {
        return Err(Error::InvalidParameter {
            name: "spread",
            message: format!("must be >= 0, got {spread}"),
        });
    }
    const RADIUS: f64 = 4.0;
    const MIN_DIST: f64 = 2.0;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let mut r = rng::stream(seed, &[tag::SYNTH_MEANS, c as u64]);
        loop {
            let mut dir: Vec<f64> = (0..input_dim)
                .map(|_| r.sample::<f64, _>(StandardNormal))
                .collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for v in dir.iter_mut() {
                *v *= RADIUS / norm;
            }
            let ok = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&dir).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= MIN_DIST
            });
            if ok {
                means.push(dir);
                break;
            }
        }
    }
    let mut samples = Vec::with_capacity(class_count * per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut r = rng::stream(seed, &[tag::SYNTH_SAMPLES, c as u64]);
        for _ in 0..per_class {
            let features: Vec<f64> = mean
                .iter()
                .map(|&m| m + spread * r.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample { features, label: c });
        }
    }
    LabeledDataset::new(samples, input_dim, class_count)
}

/// Integer counts from fractional weights using largest-remainder rounding:
/// floor every quota, then hand the shortfall to the largest fractional parts
/// (ties to the lower index). Sums to `total` exactly.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_draw(beta: f64, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0 validated");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        // All-zero draws can occur for tiny beta in f64; fall back to uniform.
        return vec![1.0 / n as f64; n];
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Partition a dataset across clients: for each class, `shared_percent` of the
/// samples are split evenly (remainder round-robin by client index) and the
/// rest follow a per-class Dirichlet draw, rounded with largest remainder.
pub fn partition_dirichlet(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    if spec.clients > data.len() {
        return Err(Error::InvalidParameter {
            name: "clients",
            message: format!(
                "more clients ({}) than samples ({})",
                spec.clients,
                data.len()
            ),
        });
    }
    let m = spec.clients;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, s) in data.samples().iter().enumerate() {
        per_class[s.label].push(i);
    }
    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (c, indices) in per_class.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        if spec.shared_percent > 0.0 && indices.len() < m {
            return Err(Error::ClassTooSmall {
                class: c,
                samples: indices.len(),
                clients: m,
            });
        }
        let mut r = rng::stream(spec.seed, &[tag::PARTITION, c as u64]);
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut r);

        let shared = (indices.len() as f64 * spec.shared_percent / 100.0).floor() as usize;
        let base = shared / m;
        let rem = shared % m;
        let mut cursor = 0usize;
        for (j, sink) in client_indices.iter_mut().enumerate() {
            let take = base + usize::from(j < rem);
            sink.extend_from_slice(&shuffled[cursor..cursor + take]);
            cursor += take;
        }

        let remaining = &shuffled[shared..];
        if !remaining.is_empty() {
            let weights = dirichlet_draw(spec.beta, m, &mut r);
            let counts = largest_remainder(&weights, remaining.len());
            let mut pos = 0usize;
            for (j, &count) in counts.iter().enumerate() {
                client_indices[j].extend_from_slice(&remaining[pos..pos + count]);
                pos += count;
            }
        }
    }
    Ok(Partition { client_indices })
}

/// Per-client train/test index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified-by-class split of each client's indices. The train share is
/// floor(fraction * n) per client, allocated across that client's classes by
/// largest remainder; deterministic given the seed.
pub fn train_test_split(
    data: &LabeledDataset,
    partition: &Partition,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ClientSplit>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter {
            name: "fraction",
            message: format!("must be in (0, 1), got {fraction}"),
        });
    }
    let mut out = Vec::with_capacity(partition.clients());
    for j in 0..partition.clients() {
        let indices = partition.indices(j);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
        for &i in indices {
            by_class[data.samples()[i].label].push(i);
        }
        for (c, list) in by_class.iter_mut().enumerate() {
            let mut r = rng::stream(seed, &[tag::SPLIT, j as u64, c as u64]);
            list.shuffle(&mut r);
        }
        let train_total = (fraction * indices.len() as f64).floor() as usize;
        let class_sizes: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
        let train_counts = if indices.is_empty() {
            vec![0; data.class_count()]
        } else {
            largest_remainder_capped(&class_sizes, train_total, &by_class)
        };
        let mut split = ClientSplit {
            train: Vec::with_capacity(train_total),
            test: Vec::with_capacity(indices.len() - train_total),
        };
        for (list, &take) in by_class.iter().zip(&train_counts) {
            split.train.extend_from_slice(&list[..take]);
            split.test.extend_from_slice(&list[take..]);
        }
        split.train.sort_unstable();
        split.test.sort_unstable();
        out.push(split);
    }
    Ok(out)
}

/// Largest remainder, but never allocate more to a class than it has samples.
fn largest_remainder_capped(weights: &[f64], total: usize, groups: &[Vec<usize>]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    if wsum == 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(groups)
        .map(|(q, g)| (q.floor() as usize).min(g.len()))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    // First pass by fractional part, then top up anywhere with room.
    for &i in &order {
        if assigned == total {
            break;
        }
        if counts[i] < groups[i].len() {
            counts[i] += 1;
            assigned += 1;
        }
    }
    let mut k = 0;
    while assigned < total && k < counts.len() {
        let room = groups[k].len() - counts[k];
        let take = room.min(total - assigned);
        counts[k] += take;
        assigned += take;
        k += 1;
    }
    counts
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::IdxTruncated {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse IDX image/label byte buffers (big-endian headers, u8 payloads).
/// Pixels are scaled to [0, 1].
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = read_be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(images, 4)? as usize;
    let rows = read_be_u32(images, 8)? as usize;
    let cols = read_be_u32(images, 12)? as usize;
    let pixels = count * rows * cols;
    if images.len() < 16 + pixels {
        return Err(Error::IdxTruncated {
            needed: 16 + pixels,
            available: images.len(),
        });
    }

    let lmagic = read_be_u32(labels, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let lcount = read_be_u32(labels, 4)? as usize;
    if lcount != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: lcount,
        });
    }
    if labels.len() < 8 + lcount {
        return Err(Error::IdxTruncated {
            needed: 8 + lcount,
            available: labels.len(),
        });
    }

    let dim = rows * cols;
    let mut samples = Vec::with_capacity(count);
    let mut max_label = 0usize;
    for i in 0..count {
        let start = 16 + i * dim;
        let features: Vec<f64> = images[start..start + dim]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let label = labels[8 + i] as usize;
        max_label = max_label.max(label);
        samples.push(Sample { features, label });
    }
    LabeledDataset::new(samples, dim, max_label + 1)
}

/// Load an IDX image/label file pair from disk.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}
