//! Synthetic composed-retrieval data.
//!
//! Each modification code `m` owns a fixed random linear edit `A_m` with unit
//! columns. A triplet draws a reference uniformly on the sphere and a code
//! uniformly, and its target is `normalize(A_m ref + sigma * noise)`. The
//! gallery holds every train and validation target plus distractors made by
//! the same process, in a seeded shuffled order. Each triplet carries a
//! candidate subset: its target plus the gallery items closest to it.

use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &str = "WRFDATA v1";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub d_ref: usize,
    pub d_mod: usize,
    pub n_mods: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub gallery_size: usize,
    pub noise_sigma: f64,
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            d_ref: 32,
            d_mod: 8,
            n_mods: 8,
            n_train: 512,
            n_val: 512,
            gallery_size: 2048,
            noise_sigma: 0.1,
            subset_size: 6,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_ref == 0 || self.d_mod == 0 {
            return Err(Error::config("feature dimensions must be at least 1"));
        }
        if self.n_mods < 2 {
            return Err(Error::config("need at least 2 modification codes"));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::config("train and validation splits must be nonempty"));
        }
        if self.gallery_size < self.n_train + self.n_val {
            return Err(Error::config(format!(
                "gallery_size {} cannot hold {} train + {} val targets",
                self.gallery_size, self.n_train, self.n_val
            )));
        }
        if self.subset_size < 2 || self.subset_size > self.gallery_size {
            return Err(Error::config("subset_size must lie in [2, gallery_size]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn echo(&self) -> String {
        format!(
            "d_ref={}\nd_mod={}\nn_mods={}\nn_train={}\nn_val={}\ngallery_size={}\nnoise_sigma={}\nsubset_size={}\nseed={}\n",
            self.d_ref,
            self.d_mod,
            self.n_mods,
            self.n_train,
            self.n_val,
            self.gallery_size,
            self.noise_sigma,
            self.subset_size,
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// Unit-norm reference features.
    pub reference: Vec<f64>,
    pub mod_code: usize,
    pub target_index: usize,
    /// Candidate gallery indices (ascending), always containing `target_index`.
    pub subset: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    /// `gallery_size x d_ref`, unit rows.
    pub gallery: Tensor<f64>,
    /// `n_mods x d_mod` fixed embedding of each modification code.
    pub mod_embeddings: Tensor<f64>,
}

/// The generator's hidden edit maps, one `d_ref x d_ref` matrix per code.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub edits: Vec<Tensor<f64>>,
}

impl GroundTruth {
    /// `A_m ref` for one triplet.
    pub fn apply(&self, mod_code: usize, reference: &[f64]) -> Vec<f64> {
        let a = &self.edits[mod_code];
        (0..a.rows()).map(|r| scalar::dot(a.row(r), reference)).collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = scalar::l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, n);
        if normalize(&mut v) > 1e-6 {
            return v;
        }
    }
}

/// Random edit maps with unit-norm columns.
pub fn random_edits(config: &DatasetConfig) -> Vec<Tensor<f64>> {
    let mut rng = stream(config.seed, 1);
    let d = config.d_ref;
    (0..config.n_mods)
        .map(|_| {
            let mut data = gaussian_vec(&mut rng, d * d);
            for c in 0..d {
                let norm = (0..d).map(|r| data[r * d + c].powi(2)).sum::<f64>().sqrt();
                for r in 0..d {
                    data[r * d + c] /= norm;
                }
            }
            Tensor::from_raw(vec![d, d], data)
        })
        .collect()
}

pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    Ok(generate_with_truth(config)?.0)
}

pub fn generate_with_truth(config: &DatasetConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let edits = random_edits(config);
    generate_with_edits(config, edits)
}

/// Generates a dataset from caller-supplied edit maps.
pub fn generate_with_edits(config: &DatasetConfig, edits: Vec<Tensor<f64>>) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let d = config.d_ref;
    if edits.len() != config.n_mods || edits.iter().any(|e| e.shape() != [d, d]) {
        return Err(Error::config(format!(
            "need {} edit maps of shape {d}x{d}",
            config.n_mods
        )));
    }
    let truth = GroundTruth { edits };

    let mut mod_rng = stream(config.seed, 2);
    let mut mods = Vec::with_capacity(config.n_mods * config.d_mod);
    for _ in 0..config.n_mods {
        mods.extend(unit_vector(&mut mod_rng, config.d_mod));
    }
    let mod_embeddings = Tensor::from_raw(vec![config.n_mods, config.d_mod], mods);

    // items: train, then val, then distractors
    let mut item_rng = stream(config.seed, 3);
    let total = config.gallery_size;
    let mut items: Vec<(Vec<f64>, usize, Vec<f64>)> = Vec::with_capacity(total);
    while items.len() < total {
        let reference = unit_vector(&mut item_rng, d);
        let code = item_rng.random_range(0..config.n_mods);
        let mut target = truth.apply(code, &reference);
        for t in target.iter_mut() {
            let e: f64 = item_rng.sample(StandardNormal);
            *t += config.noise_sigma * e;
        }
        if normalize(&mut target) < 1e-6 {
            continue;
        }
        items.push((reference, code, target));
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(config.seed, 4));
    // order[position] = item; invert to item -> position
    let mut position = vec![0; total];
    let mut gallery = vec![0.0; total * d];
    for (pos, &item) in order.iter().enumerate() {
        position[item] = pos;
        gallery[pos * d..(pos + 1) * d].copy_from_slice(&items[item].2);
    }
    let gallery = Tensor::from_raw(vec![total, d], gallery);

    let make = |range: std::ops::Range<usize>| -> Vec<Triplet> {
        range
            .map(|i| {
                let target_index = position[i];
                Triplet {
                    reference: items[i].0.clone(),
                    mod_code: items[i].1,
                    target_index,
                    subset: nearest_subset(&gallery, target_index, config.subset_size),
                }
            })
            .collect()
    };
    let train = make(0..config.n_train);
    let val = make(config.n_train..config.n_train + config.n_val);
    Ok((
        Dataset {
            config: config.clone(),
            train,
            val,
            gallery,
            mod_embeddings,
        },
        truth,
    ))
}

/// The target plus its `size - 1` highest-dot-product neighbours, ascending by index.
fn nearest_subset(gallery: &Tensor<f64>, target: usize, size: usize) -> Vec<usize> {
    let t = gallery.row(target);
    let mut scored: Vec<(f64, usize)> = (0..gallery.rows())
        .filter(|&j| j != target)
        .map(|j| (scalar::dot(t, gallery.row(j)), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut subset: Vec<usize> = scored.iter().take(size - 1).map(|&(_, j)| j).collect();
    subset.push(target);
    subset.sort_unstable();
    subset
}

/// Number of triplets kept for a fraction, `ceil(fraction * n)`.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    // guard against products like 0.6 * 5 = 3.0000000000000004
    ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Seeded sample without replacement of `ceil(fraction * n)` triplets.
///
/// The sample is a prefix of one seeded permutation, so for a fixed seed a
/// smaller fraction always selects a subset of a larger one. Selected
/// triplets keep their original relative order; `fraction == 1` returns the
/// input unchanged.
pub fn subsample(triplets: &[Triplet], fraction: f64, seed: u64) -> Result<Vec<Triplet>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(triplets.to_vec());
    }
    let mut perm: Vec<usize> = (0..triplets.len()).collect();
    perm.shuffle(&mut stream(seed, 5));
    let mut keep = perm[..subsample_count(triplets.len(), fraction)].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| triplets[i].clone()).collect())
}

impl Dataset {
    /// Copy with the training split reduced to `fraction` of its triplets.
    pub fn with_train_fraction(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        let mut out = self.clone();
        out.train = subsample(&self.train, fraction, seed)?;
        out.config.n_train = out.train.len();
        Ok(out)
    }

    /// Batch tensors `(refs, mods, targets)` for the given triplets.
    pub fn batch_tensors<T: Scalar>(&self, triplets: &[&Triplet]) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let d = self.config.d_ref;
        let dm = self.config.d_mod;
        let b = triplets.len();
        let mut refs = Vec::with_capacity(b * d);
        let mut mods = Vec::with_capacity(b * dm);
        let mut targets = Vec::with_capacity(b * d);
        for t in triplets {
            refs.extend(t.reference.iter().map(|&v| T::of(v)));
            mods.extend(self.mod_embeddings.row(t.mod_code).iter().map(|&v| T::of(v)));
            targets.extend(self.gallery.row(t.target_index).iter().map(|&v| T::of(v)));
        }
        (
            Tensor::from_raw(vec![b, d], refs),
            Tensor::from_raw(vec![b, dm], mods),
            Tensor::from_raw(vec![b, d], targets),
        )
    }

    /// Writes the dataset in the `WRFDATA v1` format.
    ///
    /// ```text
    /// WRFDATA v1\n
    /// key=value\n ...        config echo (n_train / n_val are the actual split sizes)
    /// \n
    /// gallery                gallery_size * d_ref f64 LE
    /// mod embeddings         n_mods * d_mod f64 LE
    /// train table            per triplet: d_ref f64, mod_code u32, target_index u32, subset_size u32
    /// val table              same layout
    /// ```
    pub fn export<W: Write>(&self, mut out: W) -> Result<()> {
        let mut config = self.config.clone();
        config.n_train = self.train.len();
        config.n_val = self.val.len();
        let mut bytes = format!("{MAGIC}\n{}\n", config.echo()).into_bytes();
        for v in self.gallery.data().iter().chain(self.mod_embeddings.data()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.train.iter().chain(&self.val) {
            for v in &t.reference {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            for idx in [t.mod_code, t.target_index].iter().chain(&t.subset) {
                let idx = u32::try_from(*idx).map_err(|_| Error::Format("index exceeds u32".into()))?;
                bytes.extend_from_slice(&idx.to_le_bytes());
            }
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn import<R: Read>(input: R) -> Result<Dataset> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(Error::Format(format!("expected `{MAGIC}` header")));
        }
        let mut kv = std::collections::BTreeMap::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("dataset header is not terminated".into()));
            }
            let l = line.trim_end_matches('\n');
            if l.is_empty() {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line `{l}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k).ok_or_else(|| Error::Format(format!("missing `{k}`")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Format(format!("`{k}`: {e}")))
        };
        let config = DatasetConfig {
            d_ref: int("d_ref")?,
            d_mod: int("d_mod")?,
            n_mods: int("n_mods")?,
            n_train: int("n_train")?,
            n_val: int("n_val")?,
            gallery_size: int("gallery_size")?,
            noise_sigma: get("noise_sigma")?
                .parse()
                .map_err(|e| Error::Format(format!("`noise_sigma`: {e}")))?,
            subset_size: int("subset_size")?,
            seed: get("seed")?.parse().map_err(|e| Error::Format(format!("`seed`: {e}")))?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("header: {e}")))?;

        let mut body = Vec::new();
        reader.read_to_end(&mut body)?;
        let mut cur = Cursor { bytes: &body, pos: 0 };
        let gallery = cur.f64s(config.gallery_size * config.d_ref)?;
        let mods = cur.f64s(config.n_mods * config.d_mod)?;
        let mut read_table = |n: usize| -> Result<Vec<Triplet>> {
            (0..n)
                .map(|_| {
                    let reference = cur.f64s(config.d_ref)?;
                    let mod_code = cur.u32()? as usize;
                    let target_index = cur.u32()? as usize;
                    let subset = (0..config.subset_size)
                        .map(|_| cur.u32().map(|v| v as usize))
                        .collect::<Result<Vec<_>>>()?;
                    if mod_code >= config.n_mods
                        || target_index >= config.gallery_size
                        || !subset.contains(&target_index)
                        || subset.iter().any(|&s| s >= config.gallery_size)
                    {
                        return Err(Error::Format("triplet index out of range".into()));
                    }
                    Ok(Triplet {
                        reference,
                        mod_code,
                        target_index,
                        subset,
                    })
                })
                .collect()
        };
        let train = read_table(config.n_train)?;
        let val = read_table(config.n_val)?;
        if cur.pos != body.len() {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Dataset {
            gallery: Tensor::new(vec![config.gallery_size, config.d_ref], gallery)
                .map_err(|e| Error::Format(e.to_string()))?,
            mod_embeddings: Tensor::new(vec![config.n_mods, config.d_mod], mods)
                .map_err(|e| Error::Format(e.to_string()))?,
            config,
            train,
            val,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("dataset body is truncated".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.take::<8>().map(f64::from_le_bytes)).collect()
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            d_ref: 8,
            d_mod: 4,
            n_mods: 3,
            n_train: 40,
            n_val: 30,
            gallery_size: 100,
            noise_sigma: 0.1,
            subset_size: 4,
            seed: 3,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&DatasetConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(generate(&small()).unwrap(), other);
    }

    #[test]
    fn counts_and_disjoint_splits() {
        let config = DatasetConfig {
            n_train: 512,
            n_val: 100,
            gallery_size: 700,
            ..small()
        };
        let ds = generate(&config).unwrap();
        assert_eq!(ds.train.len(), 512);
        assert_eq!(ds.val.len(), 100);
        let train_targets: std::collections::HashSet<_> = ds.train.iter().map(|t| t.target_index).collect();
        assert_eq!(train_targets.len(), 512);
        assert!(ds.val.iter().all(|t| !train_targets.contains(&t.target_index)));
    }

    #[test]
    fn targets_point_at_gallery_rows() {
        let (ds, truth) = generate_with_truth(&DatasetConfig { noise_sigma: 0.0, ..small() }).unwrap();
        for t in ds.train.iter().chain(&ds.val) {
            let mut expect = truth.apply(t.mod_code, &t.reference);
            normalize(&mut expect);
            assert_eq!(ds.gallery.row(t.target_index), expect.as_slice());
            assert!((scalar::l2_norm(&t.reference) - 1.0).abs() < 1e-12);
            assert_eq!(t.subset.len(), 4);
            assert!(t.subset.contains(&t.target_index));
        }
        for r in 0..ds.gallery.rows() {
            assert!((scalar::l2_norm(ds.gallery.row(r)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_edits_reproduce_reference() {
        let config = DatasetConfig { noise_sigma: 0.0, ..small() };
        let edits = vec![Tensor::identity(8); 3];
        let (ds, _) = generate_with_edits(&config, edits).unwrap();
        for t in &ds.train {
            for (a, b) in ds.gallery.row(t.target_index).iter().zip(&t.reference) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn edit_columns_are_unit() {
        for a in random_edits(&small()) {
            for c in 0..8 {
                let n: f64 = (0..8).map(|r| a.get(r, c).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&DatasetConfig { n_mods: 1, ..small() }).is_err());
        assert!(generate(&DatasetConfig { gallery_size: 60, ..small() }).is_err());
        assert!(generate(&DatasetConfig { subset_size: 1, ..small() }).is_err());
    }

    #[test]
    fn subsample_counts_and_identity() {
        let ds = generate(&DatasetConfig { n_train: 512, n_val: 10, gallery_size: 600, ..small() }).unwrap();
        assert_eq!(subsample(&ds.train, 1.0, 9).unwrap(), ds.train);
        let half = subsample(&ds.train, 0.5, 9).unwrap();
        assert_eq!(half.len(), 256);
        assert!(half.iter().all(|t| ds.train.contains(t)));
        assert_eq!(subsample_count(5, 0.6), 3);
        assert_eq!(subsample_count(512, 0.2), 103);
        assert!(subsample(&ds.train, 0.0, 1).is_err());
        assert!(subsample(&ds.train, 1.1, 1).is_err());
    }

    #[test]
    fn nested_fractions() {
        let ds = generate(&DatasetConfig { n_train: 200, n_val: 10, gallery_size: 300, ..small() }).unwrap();
        let fractions = [0.2, 0.4, 0.6, 0.8, 1.0];
        let sets: Vec<Vec<usize>> = fractions
            .iter()
            .map(|&f| subsample(&ds.train, f, 7).unwrap().iter().map(|t| t.target_index).collect())
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].len() < w[1].len());
            assert!(w[0].iter().all(|i| w[1].contains(i)));
        }
    }

    #[test]
    fn export_import_round_trip() {
        let ds = generate(&small()).unwrap();
        let mut bytes = Vec::new();
        ds.export(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"WRFDATA v1\nd_ref=8\n"));
        let back = Dataset::import(bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        back.export(&mut again).unwrap();
        assert_eq!(again, bytes);
        assert!(Dataset::import(&bytes[..bytes.len() - 1]).is_err());
    }
}
