//! Labeled synthetic shape clouds with stratified train/val/test splits.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid_arg, MmptError, Result};
use crate::geometry::{load_cloud, normalize_unit_sphere, save_cloud, CloudFormat, Point, PointCloud};

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.3;
pub const MIN_POINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Plane,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or_else(|| invalid_arg!("unknown class id {id}"))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Plane => "plane",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = MmptError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid_arg!("unknown shape kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n: usize,
    pub noise_sigma: f64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_POINTS {
            return Err(invalid_arg!("shapes need at least {MIN_POINTS} points, got {}", self.n));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid_arg!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

fn unit_normal<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = crate::geometry::norm(&v);
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn disc<R: Rng + ?Sized>(radius: f64, z: f64, rng: &mut R) -> Point {
    let r = radius * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    [r * t.cos(), r * t.sin(), z]
}

/// One point uniform on the surface of the primitive, before noise and
/// normalization. Cube: side 2; cylinder: radius 1, height 2, with caps;
/// cone: base radius 1, height 2, with base; plane: the square `[-1,1]²`.
pub fn surface_point<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Point {
    use std::f64::consts::{PI, TAU};
    match kind {
        ShapeKind::Sphere => unit_normal(rng),
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let a = rng.random_range(-1.0..1.0);
            let b = rng.random_range(-1.0..1.0);
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeKind::Torus => loop {
            let u = rng.random_range(0.0..TAU);
            let v = rng.random_range(0.0..TAU);
            let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
            if rng.random::<f64>() * (TORUS_MAJOR + TORUS_MINOR) <= ring {
                return [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()];
            }
        },
        ShapeKind::Cylinder => {
            let (side, caps) = (2.0 * TAU, 2.0 * PI);
            if rng.random::<f64>() * (side + caps) < side {
                let t = rng.random_range(0.0..TAU);
                [t.cos(), t.sin(), rng.random_range(-1.0..1.0)]
            } else {
                let z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                disc(1.0, z, rng)
            }
        }
        ShapeKind::Cone => {
            let (side, base) = (PI * 5f64.sqrt(), PI);
            if rng.random::<f64>() * (side + base) < side {
                // Radius grows linearly from the apex, so the sampled depth
                // fraction has density proportional to itself.
                let f = rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..TAU);
                [f * t.cos(), f * t.sin(), 1.0 - 2.0 * f]
            } else {
                disc(1.0, -1.0, rng)
            }
        }
        ShapeKind::Plane => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
    }
}

pub fn sample_surface<R: Rng + ?Sized>(kind: ShapeKind, n: usize, rng: &mut R) -> Vec<Point> {
    (0..n).map(|_| surface_point(kind, rng)).collect()
}

/// Surface sample plus isotropic Gaussian noise, normalized to the unit sphere.
pub fn generate_shape<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Result<PointCloud> {
    spec.validate()?;
    let mut pts = sample_surface(spec.kind, spec.n, rng);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid_arg!("noise: {e}"))?;
        for p in &mut pts {
            for x in p.iter_mut() {
                *x += noise.sample(rng);
            }
        }
    }
    normalize_unit_sphere(&PointCloud::new(pts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = MmptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(MmptError::Parse(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub per_class: usize,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub split_fracs: (f64, f64, f64),
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            per_class: 10,
            n_points: 512,
            noise_sigma: 0.01,
            split_fracs: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

/// Stream id for the per-class split shuffles, disjoint from sample streams.
const SPLIT_STREAM: u64 = 1 << 40;

/// `per_class` clouds of each of the six kinds, class-major. Sample `i` is
/// generated from its own ChaCha stream `i` under `seed`, so samples are
/// independent of each other and of the split draw.
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let (ft, fv, fs) = cfg.split_fracs;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(invalid_arg!(
            "split fractions {:?} must be non-negative and sum to 1",
            cfg.split_fracs
        ));
    }
    if cfg.per_class == 0 {
        return Err(invalid_arg!("need at least one sample per class"));
    }
    let mut samples = Vec::with_capacity(6 * cfg.per_class);
    for kind in ShapeKind::ALL {
        for j in 0..cfg.per_class {
            let index = kind.class_id() * cfg.per_class + j;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64);
            let spec = ShapeSpec {
                kind,
                n: cfg.n_points,
                noise_sigma: cfg.noise_sigma,
            };
            samples.push(Sample {
                cloud: generate_shape(&spec, &mut rng)?,
                class_id: kind.class_id(),
            });
        }
    }
    let n_train = (ft * cfg.per_class as f64).round() as usize;
    let n_val = ((fv * cfg.per_class as f64).round() as usize).min(cfg.per_class - n_train);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for kind in ShapeKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SPLIT_STREAM + kind.class_id() as u64);
        let base = kind.class_id() * cfg.per_class;
        let mut idx: Vec<usize> = (base..base + cfg.per_class).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for s in [&mut train, &mut val, &mut test] {
        s.sort_unstable();
    }
    Ok(Dataset {
        samples,
        train,
        val,
        test,
        seed: cfg.seed,
    })
}

pub const MANIFEST: &str = "manifest.tsv";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.split(s).binary_search(&index).is_ok())
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0)
    }

    /// Writes one text cloud per sample plus `manifest.tsv` with
    /// `path<TAB>class_id<TAB>split` lines (paths relative to `dir`).
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
        for (i, s) in self.samples.iter().enumerate() {
            let kind = ShapeKind::from_class_id(s.class_id).map(ShapeKind::name).unwrap_or("shape");
            let name = format!("{i:05}_{kind}.xyz");
            save_cloud(&dir.join(&name), &s.cloud, CloudFormat::Text)?;
            let split = self.split_of(i).map(Split::name).unwrap_or("train");
            writeln!(manifest, "{name}\t{}\t{split}", s.class_id)?;
        }
        manifest.flush()?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(dir.join(MANIFEST))?);
        let mut ds = Dataset {
            samples: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            seed: 0,
        };
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, class, split] = fields[..] else {
                return Err(MmptError::Parse(format!("manifest line {}: expected 3 fields", lineno + 1)));
            };
            let class_id = class
                .parse()
                .map_err(|e| MmptError::Parse(format!("manifest line {}: class id: {e}", lineno + 1)))?;
            let split: Split = split.parse()?;
            let i = ds.samples.len();
            ds.samples.push(Sample {
                cloud: load_cloud(&dir.join(path))?,
                class_id,
            });
            match split {
                Split::Train => ds.train.push(i),
                Split::Val => ds.val.push(i),
                Split::Test => ds.test.push(i),
            }
        }
        Ok(ds)
    }
}
