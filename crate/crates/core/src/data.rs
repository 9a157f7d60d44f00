//! Datasets, synthetic task generation and non-IID client partitioning.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::nn::gather_rows;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        if labels.len() != inputs.nrows() {
            return Err(Error::LengthMismatch { expected: inputs.nrows(), actual: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::LabelOutOfRange { index, label, classes: class_count });
        }
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            gather_rows(self.inputs.view(), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn drop_labels(self) -> UnlabeledPool {
        UnlabeledPool { inputs: self.inputs }
    }
}

/// The server's unlabeled distillation data.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    inputs: Array2<f64>,
}

impl UnlabeledPool {
    pub fn new(inputs: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("pool needs at least one sample".into()));
        }
        Ok(Self { inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub(crate) fn rows(&self, idx: &[usize]) -> Array2<f64> {
        gather_rows(self.inputs.view(), idx)
    }
}

/// Gaussian class clusters with unit covariance. Class means lie on a sphere
/// of radius `separation`; samples come out shuffled.
pub fn make_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("dim and per_class must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad separation {separation}")));
    }
    let mut rng = rng_for(seed, "synthetic", &[]);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| v / norm * separation).collect()
        })
        .collect();
    let n = classes * per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut inputs = Array2::zeros((n, dim));
    let mut labels = vec![0; n];
    for (slot, &k) in order.iter().enumerate() {
        let class = k / per_class;
        labels[slot] = class;
        for (j, m) in means[class].iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            inputs[[slot, j]] = m + noise;
        }
    }
    LabeledDataset::new(inputs, labels, classes)
}

/// Seeded permutation split of `0..n` into `(kept, taken)` with
/// `round(fraction * n)` taken indices. Both sides are returned sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} not in (0, 1)")));
    }
    let taken = (fraction * n as f64).round() as usize;
    if taken == 0 || taken >= n {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {n} samples leaves an empty side"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, "split", &[n as u64]));
    let mut held = perm[..taken].to_vec();
    let mut kept = perm[taken..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    Ok((kept, held))
}

/// Splits off a labeled held-out part (test or validation data).
pub fn split_labeled(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (kept, held) = split_indices(ds.len(), fraction, seed)?;
    Ok((ds.subset(&kept)?, ds.subset(&held)?))
}

/// Splits off the server's pool; its labels are discarded.
pub fn split_server_pool(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, UnlabeledPool)> {
    let (kept, held) = split_labeled(ds, fraction, seed)?;
    Ok((kept, held.drop_labels()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// `counts[client][class]`.
    pub fn class_counts(&self, ds: &LabeledDataset) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut counts = vec![0; ds.class_count()];
                for &i in idx {
                    counts[ds.labels()[i]] += 1;
                }
                counts
            })
            .collect()
    }

    /// Mean over clients of the total-variation distance between the client
    /// label distribution and the pooled one.
    pub fn mean_tv_distance(&self, ds: &LabeledDataset) -> f64 {
        let global = ds.class_histogram();
        let total = ds.len() as f64;
        let per_client = self.class_counts(ds);
        let sum: f64 = per_client
            .iter()
            .map(|counts| {
                let n: usize = counts.iter().sum();
                0.5 * counts
                    .iter()
                    .zip(&global)
                    .map(|(&c, &g)| (c as f64 / n as f64 - g as f64 / total).abs())
                    .sum::<f64>()
            })
            .sum();
        sum / per_client.len() as f64
    }

    /// FNV-1a digest of the index lists, for cross-method equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for idx in &self.client_indices {
            feed(u64::MAX);
            for &i in idx {
                feed(i as u64);
            }
        }
        h
    }

    /// CSV rows `client_id,class_id,count`.
    pub fn write_stats_csv<W: Write>(&self, ds: &LabeledDataset, mut out: W) -> std::io::Result<()> {
        writeln!(out, "client_id,class_id,count")?;
        for (client, counts) in self.class_counts(ds).iter().enumerate() {
            for (class, count) in counts.iter().enumerate() {
                writeln!(out, "{client},{class},{count}")?;
            }
        }
        Ok(())
    }
}

fn sample_dirichlet<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: all mass on one client
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        p
    }
}

/// Per-class Dirichlet(alpha) allocation of samples over clients.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionSpec> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if n_clients > ds.len() {
        return Err(Error::TooManyClients(n_clients, ds.len()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = rng_for(seed, "dirichlet", &[n_clients as u64]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for mut members in by_class {
        members.shuffle(&mut rng);
        let props = sample_dirichlet(&mut rng, alpha, n_clients);
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == n_clients { n } else { ((cum * n as f64).floor() as usize).clamp(start, n) };
            clients[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let largest = (0..n_clients).max_by_key(|&c| (clients[c].len(), std::cmp::Reverse(c))).unwrap();
        let moved = clients[largest].pop().expect("largest client holds >= 2 samples");
        clients[empty].push(moved);
    }
    for idx in &mut clients {
        idx.sort_unstable();
    }
    Ok(PartitionSpec { client_indices: clients, alpha, seed })
}

const MAGIC: &[u8; 4] = b"FSD1";
const HEADER_LEN: usize = 16;

fn encode(inputs: &Array2<f64>, labels: Option<(&[usize], usize)>) -> Vec<u8> {
    let (n, d) = inputs.dim();
    let classes = labels.map_or(0, |(_, c)| c);
    let mut buf = Vec::with_capacity(HEADER_LEN + n * d * 8 + n * 2);
    buf.extend_from_slice(MAGIC);
    for v in [n, d, classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in inputs.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some((labels, _)) = labels {
        for &l in labels {
            buf.extend_from_slice(&(l as u16).to_le_bytes());
        }
    }
    buf
}

struct Decoded {
    inputs: Array2<f64>,
    labels: Option<(Vec<usize>, usize)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded, FormatError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (n, d, classes) = (field(0) as usize, field(1) as usize, field(2));
    if n == 0 || d == 0 {
        return Err(FormatError::Empty);
    }
    let label_bytes = if classes == 0 { 0 } else { n * 2 };
    let expected = HEADER_LEN + n * d * 8 + label_bytes;
    if bytes.len() < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FormatError::PayloadMismatch { expected, actual: bytes.len() });
    }
    let mut values = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[HEADER_LEN..HEADER_LEN + n * d * 8].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFiniteFeature(i / d));
        }
        values.push(v);
    }
    let inputs = Array2::from_shape_vec((n, d), values).expect("length checked");
    let labels = if classes == 0 {
        None
    } else {
        let mut labels = Vec::with_capacity(n);
        for (index, chunk) in bytes[HEADER_LEN + n * d * 8..].chunks_exact(2).enumerate() {
            let label = u16::from_le_bytes(chunk.try_into().unwrap());
            if u32::from(label) >= classes {
                return Err(FormatError::LabelOutOfRange { index, label, classes });
            }
            labels.push(label as usize);
        }
        Some((labels, classes as usize))
    };
    Ok(Decoded { inputs, labels })
}

pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    encode(&ds.inputs, Some((&ds.labels, ds.class_count)))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let decoded = decode(bytes)?;
    let (labels, classes) = decoded.labels.ok_or(FormatError::Unlabeled)?;
    LabeledDataset::new(decoded.inputs, labels, classes)
}

pub fn encode_pool(pool: &UnlabeledPool) -> Vec<u8> {
    encode(&pool.inputs, None)
}

pub fn decode_pool(bytes: &[u8]) -> Result<UnlabeledPool> {
    let decoded = decode(bytes)?;
    if decoded.labels.is_some() {
        return Err(FormatError::Labeled.into());
    }
    UnlabeledPool::new(decoded.inputs)
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.class_count() > usize::from(u16::MAX) + 1 {
        return Err(Error::InvalidArgument("class count exceeds u16 labels".into()));
    }
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_dataset(&std::fs::read(path)?)
}

pub fn save_pool(pool: &UnlabeledPool, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pool(pool))?;
    Ok(())
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<UnlabeledPool> {
    decode_pool(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn recount(partition: &PartitionSpec, n: usize) -> (bool, usize) {
        let mut seen = BTreeSet::new();
        let mut disjoint = true;
        for idx in &partition.client_indices {
            for &i in idx {
                disjoint &= i < n && seen.insert(i);
            }
        }
        (disjoint, seen.len())
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(4, 3, 10, 2.0, 9).unwrap();
        assert_eq!(a, make_synthetic(4, 3, 10, 2.0, 9).unwrap());
        assert_ne!(a, make_synthetic(4, 3, 10, 2.0, 10).unwrap());
        assert_eq!(a.class_histogram(), vec![10; 4]);
        assert!(make_synthetic(1, 3, 10, 2.0, 9).is_err());
    }

    #[test]
    fn synthetic_means_sit_on_the_sphere() {
        let ds = make_synthetic(3, 8, 4000, 5.0, 1).unwrap();
        for class in 0..3 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
            let mut mean = [0.0; 8];
            for &i in &rows {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += ds.inputs()[[i, j]] / rows.len() as f64;
                }
            }
            let radius = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((radius - 5.0).abs() < 0.15, "class {class} radius {radius}");
        }
    }

    #[test]
    fn near_infinite_alpha_is_iid() {
        let ds = make_synthetic(10, 2, 1000, 1.0, 3).unwrap();
        let part = dirichlet_partition(&ds, 10, 1e6, 4).unwrap();
        let global = ds.class_histogram();
        for counts in part.class_counts(&ds) {
            let n: usize = counts.iter().sum();
            for (c, g) in counts.iter().zip(&global) {
                let diff = *c as f64 / n as f64 - *g as f64 / ds.len() as f64;
                assert!(diff.abs() < 0.03);
            }
        }
    }

    #[test]
    fn too_many_clients() {
        let ds = make_synthetic(2, 2, 3, 1.0, 3).unwrap();
        assert!(matches!(dirichlet_partition(&ds, 7, 1.0, 0), Err(Error::TooManyClients(7, 6))));
        let part = dirichlet_partition(&ds, 6, 0.01, 0).unwrap();
        assert!(part.client_indices.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn smaller_alpha_is_more_skewed() {
        let ds = make_synthetic(10, 2, 100, 1.0, 3).unwrap();
        let tv = |alpha: f64| -> f64 {
            (0..20).map(|s| dirichlet_partition(&ds, 20, alpha, s).unwrap().mean_tv_distance(&ds)).sum::<f64>()
                / 20.0
        };
        assert!(tv(0.1) > tv(1.0));
    }

    #[test]
    fn pool_split() {
        let ds = make_synthetic(2, 3, 50, 1.0, 5).unwrap();
        let (kept, held) = split_indices(100, 0.5, 1).unwrap();
        assert_eq!((kept.len(), held.len()), (50, 50));
        let union: BTreeSet<usize> = kept.iter().chain(&held).copied().collect();
        assert_eq!(union.len(), 100);
        assert_eq!(union, (0..100).collect());
        let (train, pool) = split_server_pool(&ds, 0.5, 1).unwrap();
        assert_eq!((train.len(), pool.len()), (50, 50));
        assert_eq!(split_server_pool(&ds, 0.5, 1).unwrap().1, pool);
        assert!(split_indices(3, 0.1, 0).is_err());
        assert!(split_indices(3, 1.0, 0).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let ds = make_synthetic(3, 4, 5, 1.0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fsd");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert!(back.inputs().iter().zip(ds.inputs().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = encode_dataset(&ds);
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 3]).unwrap_err(),
            Error::Format(FormatError::Truncated { .. })
        ));
        assert!(matches!(decode_dataset(&bytes[..7]).unwrap_err(), Error::Format(FormatError::Truncated { .. })));

        // header declares one sample fewer than the payload carries
        let mut shrunk = bytes.clone();
        shrunk[4..8].copy_from_slice(&14u32.to_le_bytes());
        assert!(matches!(
            decode_dataset(&shrunk).unwrap_err(),
            Error::Format(FormatError::PayloadMismatch { .. })
        ));

        let mut bad_label = bytes.clone();
        let last = bad_label.len() - 2;
        bad_label[last..].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(
            decode_dataset(&bad_label).unwrap_err(),
            Error::Format(FormatError::LabelOutOfRange { index: 14, label: 9, classes: 3 })
        ));

        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(decode_dataset(&bad_magic).unwrap_err(), Error::Format(FormatError::BadMagic(_))));
    }

    #[test]
    fn pool_file_has_no_labels() {
        let ds = make_synthetic(3, 4, 5, 1.0, 5).unwrap();
        let pool = ds.clone().drop_labels();
        let bytes = encode_pool(&pool);
        assert_eq!(bytes.len(), 16 + 15 * 4 * 8);
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert_eq!(decode_pool(&bytes).unwrap(), pool);
        assert!(matches!(decode_dataset(&bytes).unwrap_err(), Error::Format(FormatError::Unlabeled)));
        assert!(matches!(decode_pool(&encode_dataset(&ds)).unwrap_err(), Error::Format(FormatError::Labeled)));
    }

    #[test]
    fn stats_csv() {
        let ds = make_synthetic(2, 2, 3, 1.0, 5).unwrap();
        let part = dirichlet_partition(&ds, 2, 1.0, 0).unwrap();
        let mut out = Vec::new();
        part.write_stats_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "client_id,class_id,count");
        assert_eq!(lines.len(), 1 + 2 * 2);
        let total: usize = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn partition_is_a_disjoint_cover(
            seed in any::<u64>(),
            log_alpha in -2.0f64..6.0,
            n_clients in 1usize..40,
            per_class in 1usize..30,
            classes in 2usize..6,
        ) {
            let ds = make_synthetic(classes, 2, per_class, 1.0, seed).unwrap();
            prop_assume!(n_clients <= ds.len());
            let part = dirichlet_partition(&ds, n_clients, 10f64.powf(log_alpha), seed).unwrap();
            prop_assert_eq!(part.n_clients(), n_clients);
            prop_assert!(part.client_indices.iter().all(|c| !c.is_empty()));
            let (disjoint, covered) = recount(&part, ds.len());
            prop_assert!(disjoint);
            prop_assert_eq!(covered, ds.len());
            prop_assert_eq!(part.clone(), dirichlet_partition(&ds, n_clients, 10f64.powf(log_alpha), seed).unwrap());
        }
    }
}
