//! Datasets and query streams: synthetic confidential data, raw-tensor
//! loading, class-holdout splits, the outlier dataset construction, and
//! benign query streams.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Labeled vectors in the unit hypercube.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<(Tensor, usize)>,
    d: usize,
    k: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Tensor, usize)>, d: usize, k: usize) -> Result<Self> {
        for (i, (x, y)) in samples.iter().enumerate() {
            if x.len() != d {
                return Err(Error::argument(format!(
                    "sample {i}: dimension {} != {d}",
                    x.len()
                )));
            }
            if *y >= k {
                return Err(Error::argument(format!("sample {i}: label {y} >= k {k}")));
            }
            if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::argument(format!(
                    "sample {i}: component outside [0,1]"
                )));
            }
        }
        Ok(Self { samples, d, k })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> &[(Tensor, usize)] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> (&Tensor, usize) {
        let (x, y) = &self.samples[i];
        (x, *y)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Tensor> {
        self.samples.iter().map(|(x, _)| x)
    }

    /// Subset by index list (clones the selected samples).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            d: self.d,
            k: self.k,
        }
    }

    /// Distinct labels present.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.k];
        for (_, y) in &self.samples {
            seen[*y] = true;
        }
        (0..self.k).filter(|&c| seen[c]).collect()
    }
}

/// Train/test over retained classes plus the held-out sibling classes.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: Dataset,
    pub test: Dataset,
    /// Samples of the held-out classes, labels kept at their original indices.
    pub held_out: Dataset,
    /// original class index -> retained dense index
    pub class_map: Vec<(usize, usize)>,
}

/// Where a stream's queries came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Pd,
    AltPd,
    Syn,
    AdvPd,
    Npd,
    Diluted,
    Perturbed,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Pd => "PD",
            Provenance::AltPd => "AltPD",
            Provenance::Syn => "Syn",
            Provenance::AdvPd => "AdvPD",
            Provenance::Npd => "NPD",
            Provenance::Diluted => "diluted",
            Provenance::Perturbed => "perturbed",
        }
    }
}

/// A materialized, deterministic query sequence with per-query provenance.
#[derive(Debug, Clone)]
pub struct QueryStream {
    queries: Vec<Tensor>,
    tags: Vec<Provenance>,
    seed: u64,
}

impl QueryStream {
    pub fn new(queries: Vec<Tensor>, tag: Provenance, seed: u64) -> Self {
        let tags = vec![tag; queries.len()];
        Self { queries, tags, seed }
    }

    pub fn with_tags(queries: Vec<Tensor>, tags: Vec<Provenance>, seed: u64) -> Self {
        assert_eq!(queries.len(), tags.len());
        Self { queries, tags, seed }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn queries(&self) -> &[Tensor] {
        &self.queries
    }

    pub fn tags(&self) -> &[Provenance] {
        &self.tags
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, Provenance)> {
        self.queries.iter().zip(self.tags.iter().copied())
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Synthesizes a desk-scale confidential dataset: each class is a clamped
/// isotropic Gaussian blob around a template drawn once per class. Templates
/// are single-period waves sharing one phase, differing only in signed
/// amplitude, so all classes (including ones later held out) lie on one line
/// through the cube center that coordinate-wise noise misses.
pub fn gen_synthetic_dataset(
    d: usize,
    k: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if d < 4 {
        return Err(Error::argument(format!("d must be >= 4, got {d}")));
    }
    if k < 2 {
        return Err(Error::argument(format!("k must be >= 2, got {k}")));
    }
    if spread < 0.0 {
        return Err(Error::argument(format!("spread must be >= 0, got {spread}")));
    }
    let phase = rng.uniform();
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            // amplitude slots keep classes separable; the permutation parks
            // the highest class indices on interior slots
            let slot = match c {
                0 => 0,
                1 => k - 1,
                c => c - 1,
            };
            let amp = -0.2 + 0.4 * (slot as f64 + 0.2 + 0.6 * rng.uniform()) / k as f64;
            (0..d)
                .map(|j| {
                    let t = j as f64 / d as f64 + phase;
                    0.5 + amp * (std::f64::consts::TAU * t).sin()
                })
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(k * n_per_class);
    for (c, template) in templates.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<f64> = template
                .iter()
                .map(|t| clamp01(t + spread * rng.normal()))
                .collect();
            samples.push((Tensor::vector(x), c));
        }
    }
    Dataset::new(samples, d, k)
}

/// Holds out the highest `ceil(k * fraction)` class indices; the lowest
/// classes are retained and re-indexed densely. The deterministic
/// lowest-index rule keeps splits reproducible.
pub fn split_holdout_classes(ds: &Dataset, fraction: f64) -> Result<SplitBundle> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::argument(format!("fraction {fraction} outside [0,1)")));
    }
    let k = ds.num_classes();
    let retained_count = ((k as f64) * (1.0 - fraction)).ceil() as usize;
    if retained_count < 2 {
        return Err(Error::argument(format!(
            "holdout fraction {fraction} leaves {retained_count} < 2 classes"
        )));
    }
    let class_map: Vec<(usize, usize)> = (0..retained_count).map(|c| (c, c)).collect();
    let mut retained = Vec::new();
    let mut held = Vec::new();
    for (x, y) in ds.samples() {
        if *y < retained_count {
            retained.push((x.clone(), *y));
        } else {
            held.push((x.clone(), *y));
        }
    }
    // deterministic interleaved train/test split: every 5th retained sample
    // goes to test
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in retained.into_iter().enumerate() {
        if i % 5 == 4 {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok(SplitBundle {
        train: Dataset::new(train, ds.dim(), retained_count)?,
        test: Dataset::new(test, ds.dim(), retained_count)?,
        held_out: Dataset::new(held, ds.dim(), k)?,
        class_map,
    })
}

/// Outlier dataset: for each confidential sample, a clamped convex mix with
/// unit-variance noise centered on the mixing weight itself. One output per
/// input; labels carried over but semantically ignored.
pub fn make_outlier_dataset(d_c: &Dataset, rng: &mut Rng) -> Result<Dataset> {
    make_outlier_dataset_with_weight(d_c, rng, None)
}

/// Test hook: forces the mixing weight instead of drawing it.
pub fn make_outlier_dataset_with_weight(
    d_c: &Dataset,
    rng: &mut Rng,
    forced_weight: Option<f64>,
) -> Result<Dataset> {
    if d_c.is_empty() {
        return Err(Error::argument("outlier construction needs a nonempty dataset"));
    }
    let d = d_c.dim();
    let mut samples = Vec::with_capacity(d_c.len());
    for (x, y) in d_c.samples() {
        let nu = forced_weight.unwrap_or_else(|| rng.uniform());
        let noise: Vec<f64> = (0..d).map(|_| rng.normal_scaled(nu, 1.0)).collect();
        let mixed: Vec<f64> = x
            .data()
            .iter()
            .zip(&noise)
            .map(|(xi, ni)| clamp01(nu * xi + (1.0 - nu) * ni))
            .collect();
        samples.push((Tensor::vector(mixed), *y));
    }
    Dataset::new(samples, d, d_c.num_classes())
}

/// `budget` samples drawn uniformly with replacement from `source`.
pub fn benign_stream(
    kind: Provenance,
    source: &Dataset,
    budget: usize,
    rng: &mut Rng,
) -> Result<QueryStream> {
    assert!(matches!(kind, Provenance::Pd | Provenance::AltPd));
    if source.is_empty() {
        return Err(Error::argument("benign stream needs a nonempty source"));
    }
    let seed = rng.seed();
    let queries: Vec<Tensor> = (0..budget)
        .map(|_| source.sample(rng.index(source.len())).0.clone())
        .collect();
    Ok(QueryStream::new(queries, kind, seed))
}

// --- raw tensor loading ----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    count: usize,
    d: usize,
    k: usize,
    dtype: String,
    label_dtype: String,
}

/// Loads a dataset directory: `manifest.json` plus little-endian `x.bin`
/// (count x d values) and `y.bin` (count labels). Integer pixel data is
/// rescaled by 1/255 into [0,1].
pub fn load_raw_tensors(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != 1 {
        return Err(Error::format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    if manifest.label_dtype != "u16" {
        return Err(Error::format(format!(
            "unsupported label dtype {:?}",
            manifest.label_dtype
        )));
    }
    let value_size = match manifest.dtype.as_str() {
        "u8" => 1,
        "f32" => 4,
        other => return Err(Error::format(format!("unsupported dtype {other:?}"))),
    };
    let xs = fs::read(dir.join("x.bin"))?;
    let expect = manifest.count * manifest.d * value_size;
    if xs.len() != expect {
        return Err(Error::format(format!(
            "x.bin: expected {expect} bytes, found {}",
            xs.len()
        )));
    }
    let ys = fs::read(dir.join("y.bin"))?;
    let expect_y = manifest.count * 2;
    if ys.len() != expect_y {
        return Err(Error::format(format!(
            "y.bin: expected {expect_y} bytes, found {}",
            ys.len()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let mut x = Vec::with_capacity(manifest.d);
        for j in 0..manifest.d {
            let off = (i * manifest.d + j) * value_size;
            let v = match manifest.dtype.as_str() {
                "u8" => xs[off] as f64 / 255.0,
                _ => f32::from_le_bytes(xs[off..off + 4].try_into().unwrap()) as f64,
            };
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::format(format!(
                    "sample {i} component {j}: value {v} outside [0,1]"
                )));
            }
            x.push(v);
        }
        let label = u16::from_le_bytes(ys[i * 2..i * 2 + 2].try_into().unwrap()) as usize;
        if label >= manifest.k {
            return Err(Error::format(format!(
                "sample {i}: label {label} out of range (k = {})",
                manifest.k
            )));
        }
        samples.push((Tensor::vector(x), label));
    }
    Dataset::new(samples, manifest.d, manifest.k)
}

/// Writes a dataset in the raw-tensor directory format (f32 values).
pub fn save_raw_tensors(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: 1,
        count: ds.len(),
        d: ds.dim(),
        k: ds.num_classes(),
        dtype: "f32".into(),
        label_dtype: "u16".into(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    let mut xs = Vec::with_capacity(ds.len() * ds.dim() * 4);
    let mut ys = Vec::with_capacity(ds.len() * 2);
    for (x, y) in ds.samples() {
        for v in x.data() {
            xs.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        ys.extend_from_slice(&(*y as u16).to_le_bytes());
    }
    fs::write(dir.join("x.bin"), xs)?;
    fs::write(dir.join("y.bin"), ys)?;
    Ok(())
}
