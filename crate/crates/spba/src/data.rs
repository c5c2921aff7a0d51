//! Synthetic labeled shape data and a versioned binary dataset container.
//!
//! Four parametric surfaces (sphere, cube, cylinder, cone) are sampled
//! uniformly by area with analytic normals, then individually perturbed —
//! ±10% isotropic scale jitter, a uniform rotation about z (applied to both
//! coordinates and normals), optional Gaussian coordinate noise — and
//! normalized to the unit sphere. All randomness is keyed by
//! `(seed, sample index)`, so any sample can be regenerated in isolation.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{derive, Domain};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const DATASET_MAGIC: &[u8; 8] = b"SPBADSET";
const DATASET_VERSION: u32 = 1;

/// The canonical shape families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl ShapeClass {
    /// All shape classes in canonical order.
    pub fn all() -> [ShapeClass; 4] {
        [
            ShapeClass::Sphere,
            ShapeClass::Cube,
            ShapeClass::Cylinder,
            ShapeClass::Cone,
        ]
    }
}

impl std::fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ShapeClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(ShapeClass::Sphere),
            "cube" => Ok(ShapeClass::Cube),
            "cylinder" => Ok(ShapeClass::Cylinder),
            "cone" => Ok(ShapeClass::Cone),
            other => Err(format!(
                "unknown shape {other:?}; expected sphere, cube, cylinder, or cone"
            )),
        }
    }
}

/// Which portion of the data a container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    /// Freshly generated, not yet split.
    Full,
    Train,
    Test,
}

impl SplitTag {
    fn to_byte(self) -> u8 {
        match self {
            SplitTag::Full => 0,
            SplitTag::Train => 1,
            SplitTag::Test => 2,
        }
    }

    fn from_byte(b: u8) -> Option<SplitTag> {
        match b {
            0 => Some(SplitTag::Full),
            1 => Some(SplitTag::Train),
            2 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        };
        f.write_str(s)
    }
}

/// A labeled collection of equally sized point clouds.
///
/// Invariants enforced at construction: every sample carries a label smaller
/// than the class count, and all samples have the same number of points.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<PointCloud>,
    class_names: Vec<String>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(
        samples: Vec<PointCloud>,
        class_names: Vec<String>,
        split: SplitTag,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::BadCount {
                name: "classes",
                got: 0,
                reason: "a dataset needs at least one class name",
            });
        }
        let n_points = samples.first().map(PointCloud::len);
        for (index, sample) in samples.iter().enumerate() {
            let label = sample
                .label()
                .ok_or(Error::UnlabeledSample { index })?;
            if label >= class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: class_names.len(),
                });
            }
            if Some(sample.len()) != n_points {
                return Err(Error::DimensionMismatch {
                    context: "dataset sample sizes",
                    left: sample.len(),
                    right: n_points.unwrap_or(0),
                });
            }
        }
        Ok(Dataset {
            samples,
            class_names,
            split,
        })
    }

    pub fn samples(&self) -> &[PointCloud] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of classes K.
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Points per sample (0 for an empty dataset).
    pub fn n_points(&self) -> usize {
        self.samples.first().map_or(0, PointCloud::len)
    }

    /// Label of sample `i` (guaranteed present by the constructor).
    pub fn label_of(&self, i: usize) -> usize {
        self.samples[i].label().expect("validated at construction")
    }

    /// Sample count per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes()];
        for i in 0..self.len() {
            counts[self.label_of(i)] += 1;
        }
        counts
    }
}

/// Sample `n` points uniformly by surface area from the canonical (unscaled,
/// unrotated) shape, returning coordinates and exact analytic unit normals.
pub fn sample_shape_surface<R: Rng>(
    class: ShapeClass,
    n: usize,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let mut points = Array2::zeros((n, 3));
    let mut normals = Array2::zeros((n, 3));
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let (p, nv) = match class {
            ShapeClass::Sphere => {
                // unit sphere: z uniform in [-1,1], azimuth uniform
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi = rng.random_range(0.0..tau);
                let r = (1.0 - z * z).sqrt();
                let p = [r * phi.cos(), r * phi.sin(), z];
                (p, p)
            }
            ShapeClass::Cube => {
                // half-extent 1; the six faces have equal area
                let face = rng.random_range(0..6u8);
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                match face {
                    0 => ([1.0, u, v], [1.0, 0.0, 0.0]),
                    1 => ([-1.0, u, v], [-1.0, 0.0, 0.0]),
                    2 => ([u, 1.0, v], [0.0, 1.0, 0.0]),
                    3 => ([u, -1.0, v], [0.0, -1.0, 0.0]),
                    4 => ([u, v, 1.0], [0.0, 0.0, 1.0]),
                    _ => ([u, v, -1.0], [0.0, 0.0, -1.0]),
                }
            }
            ShapeClass::Cylinder => {
                // radius 1/2, z in [-1,1]; lateral area 2π, each cap π/4
                let radius = 0.5;
                let u = rng.random_range(0.0..1.0);
                if u < 0.8 {
                    let theta = rng.random_range(0.0..tau);
                    let z = rng.random_range(-1.0..1.0);
                    (
                        [radius * theta.cos(), radius * theta.sin(), z],
                        [theta.cos(), theta.sin(), 0.0],
                    )
                } else {
                    let (z, nz) = if u < 0.9 { (1.0, 1.0) } else { (-1.0, -1.0) };
                    let r = radius * rng.random_range(0.0..1.0f64).sqrt();
                    let theta = rng.random_range(0.0..tau);
                    ([r * theta.cos(), r * theta.sin(), z], [0.0, 0.0, nz])
                }
            }
            ShapeClass::Cone => {
                // apex (0,0,1), base radius 0.8 at z = -1, slant √4.64
                let base_r = 0.8f64;
                let slant = (4.0 + base_r * base_r).sqrt();
                let lateral_area = std::f64::consts::PI * base_r * slant;
                let base_area = std::f64::consts::PI * base_r * base_r;
                let p_lateral = lateral_area / (lateral_area + base_area);
                let u = rng.random_range(0.0..1.0);
                if u < p_lateral {
                    // t = fraction of the way from apex to rim; √ for area
                    let t = rng.random_range(0.0..1.0f64).sqrt();
                    let theta = rng.random_range(0.0..tau);
                    let (c, s) = (theta.cos(), theta.sin());
                    (
                        [t * base_r * c, t * base_r * s, 1.0 - 2.0 * t],
                        [2.0 * c / slant, 2.0 * s / slant, base_r / slant],
                    )
                } else {
                    let r = base_r * rng.random_range(0.0..1.0f64).sqrt();
                    let theta = rng.random_range(0.0..tau);
                    (
                        [r * theta.cos(), r * theta.sin(), -1.0],
                        [0.0, 0.0, -1.0],
                    )
                }
            }
        };
        for c in 0..3 {
            points[[i, c]] = p[c];
            normals[[i, c]] = nv[c];
        }
    }
    (points, normals)
}

fn generate_sample(
    class: ShapeClass,
    label: usize,
    n_points: usize,
    noise: f64,
    seed: u64,
    sample_index: u64,
) -> Result<PointCloud> {
    let mut rng = derive(seed, Domain::ShapeSample, sample_index);
    let scale = rng.random_range(0.9..1.1);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut points, mut normals) = sample_shape_surface(class, n_points, &mut rng);

    let (cos_a, sin_a) = (angle.cos(), angle.sin());
    let rotate_z = |m: &mut Array2<f64>| {
        for i in 0..m.nrows() {
            let (x, y) = (m[[i, 0]], m[[i, 1]]);
            m[[i, 0]] = cos_a * x - sin_a * y;
            m[[i, 1]] = sin_a * x + cos_a * y;
        }
    };
    points.mapv_inplace(|v| v * scale);
    rotate_z(&mut points);
    rotate_z(&mut normals);

    let gauss = Normal::new(0.0, noise).map_err(|_| Error::BadParam {
        name: "noise",
        got: noise,
        reason: "must be a finite non-negative standard deviation",
    })?;
    for i in 0..n_points {
        for c in 0..3 {
            points[[i, c]] += gauss.sample(&mut rng);
        }
    }

    PointCloud::new(points)?
        .with_normals(normals)?
        .with_label(label)
        .normalize()
}

/// Generate `per_class` samples of `n_points` points for each listed class.
/// `noise` is the per-coordinate Gaussian σ added before normalization.
pub fn generate_shapes(
    classes: &[ShapeClass],
    per_class: usize,
    n_points: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::BadCount {
            name: "classes",
            got: 0,
            reason: "need at least one shape class",
        });
    }
    if per_class == 0 {
        return Err(Error::BadCount {
            name: "per_class",
            got: 0,
            reason: "need at least one sample per class",
        });
    }
    if n_points == 0 {
        return Err(Error::BadCount {
            name: "n_points",
            got: 0,
            reason: "need at least one point per sample",
        });
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::BadParam {
            name: "noise",
            got: noise,
            reason: "must be a finite non-negative standard deviation",
        });
    }
    let total = classes.len() * per_class;
    let samples: Vec<PointCloud> = (0..total)
        .into_par_iter()
        .map(|i| {
            let class_idx = i / per_class;
            generate_sample(
                classes[class_idx],
                class_idx,
                n_points,
                noise,
                seed,
                i as u64,
            )
        })
        .collect::<Result<_>>()?;
    Dataset::new(
        samples,
        classes.iter().map(ShapeClass::to_string).collect(),
        SplitTag::Full,
    )
}

/// Split per class: within each class the samples are shuffled by a seeded
/// stream and `round(test_fraction · count)` go to the test side. Original
/// sample order is preserved inside each output split.
pub fn split_train_test(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::BadParam {
            name: "test_fraction",
            got: test_fraction,
            reason: "must lie strictly between 0 and 1",
        });
    }
    let mut test_mask = vec![false; dataset.len()];
    for class in 0..dataset.classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label_of(i) == class)
            .collect();
        let mut rng = derive(seed, Domain::TrainTestSplit, class as u64);
        members.shuffle(&mut rng);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        for &i in members.iter().take(n_test) {
            test_mask[i] = true;
        }
    }
    let collect = |want_test: bool, tag: SplitTag| -> Result<Dataset> {
        let picked: Vec<PointCloud> = (0..dataset.len())
            .filter(|&i| test_mask[i] == want_test)
            .map(|i| dataset.samples[i].clone())
            .collect();
        if picked.is_empty() {
            return Err(Error::EmptyDataset {
                context: "train/test split",
            });
        }
        Dataset::new(picked, dataset.class_names.clone(), tag)
    };
    Ok((
        collect(false, SplitTag::Train)?,
        collect(true, SplitTag::Test)?,
    ))
}

/// Write a dataset container. Layout (all integers little-endian):
/// 8-byte magic, format version u32, split tag u8, class count K u32,
/// points per sample N u32, sample count u32, has-normals u8, K class names
/// (u16 length + UTF-8 bytes), then per sample a u32 label followed by the
/// row-major N×3 coordinates (and N×3 normals when present) as f64.
/// Floats round-trip bit-exactly.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let has_normals = dataset
        .samples
        .first()
        .is_some_and(|s| s.normals().is_some());
    if dataset
        .samples
        .iter()
        .any(|s| s.normals().is_some() != has_normals)
    {
        return Err(Error::CorruptContainer {
            path: path.display().to_string(),
            reason: "samples mix normals and no-normals".to_string(),
        });
    }
    let mut w = crate::ioutil::create_writer(path)?;
    w.write_bytes(DATASET_MAGIC)?;
    w.write_u32(DATASET_VERSION)?;
    w.write_u8(dataset.split.to_byte())?;
    w.write_u32(u32::try_from(dataset.classes()).expect("class count fits u32"))?;
    w.write_u32(u32::try_from(dataset.n_points()).expect("point count fits u32"))?;
    w.write_u32(u32::try_from(dataset.len()).expect("sample count fits u32"))?;
    w.write_u8(u8::from(has_normals))?;
    for name in &dataset.class_names {
        let bytes = name.as_bytes();
        w.write_u16(u16::try_from(bytes.len()).expect("class name fits u16"))?;
        w.write_bytes(bytes)?;
    }
    for (i, sample) in dataset.samples.iter().enumerate() {
        w.write_u32(dataset.label_of(i) as u32)?;
        for v in sample.points().iter() {
            w.write_f64(*v)?;
        }
        if let Some(normals) = sample.normals() {
            for v in normals.iter() {
                w.write_f64(*v)?;
            }
        }
    }
    w.finish()
}

/// Read a container written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = crate::ioutil::open_reader(path)?;
    r.expect_magic(DATASET_MAGIC, "dataset container")?;
    let version = r.read_u32()?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            path: r.path().to_string(),
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let corrupt = |r: &crate::ioutil::BinReader<_>, reason: String| Error::CorruptContainer {
        path: r.path().to_string(),
        reason,
    };
    let split_byte = r.read_u8()?;
    let split = SplitTag::from_byte(split_byte)
        .ok_or_else(|| corrupt(&r, format!("unknown split tag {split_byte}")))?;
    let k = r.read_u32()? as usize;
    let n_points = r.read_u32()? as usize;
    let count = r.read_u32()? as usize;
    let has_normals = match r.read_u8()? {
        0 => false,
        1 => true,
        other => return Err(corrupt(&r, format!("bad has-normals flag {other}"))),
    };
    let mut class_names = Vec::with_capacity(k);
    for _ in 0..k {
        let len = r.read_u16()? as usize;
        let mut bytes = vec![0u8; len];
        r.read_bytes(&mut bytes)?;
        let name = String::from_utf8(bytes)
            .map_err(|_| corrupt(&r, "class name is not UTF-8".to_string()))?;
        class_names.push(name);
    }
    let mut samples = Vec::with_capacity(count);
    for s in 0..count {
        let label = r.read_u32()? as usize;
        if label >= k {
            return Err(corrupt(
                &r,
                format!("sample {s} label {label} out of range for {k} classes"),
            ));
        }
        let mut points = Array2::zeros((n_points, 3));
        for v in points.iter_mut() {
            *v = r.read_f64()?;
        }
        let mut cloud = PointCloud::new(points)?;
        if has_normals {
            let mut normals = Array2::zeros((n_points, 3));
            for v in normals.iter_mut() {
                *v = r.read_f64()?;
            }
            cloud = cloud.with_normals(normals)?;
        }
        samples.push(cloud.with_label(label));
    }
    if r.read_u8().is_ok() {
        return Err(corrupt(&r, "trailing bytes after last sample".to_string()));
    }
    Dataset::new(samples, class_names, split)
}
