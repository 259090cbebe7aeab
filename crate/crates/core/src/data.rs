//! Hierarchical synthetic datasets, seen/novel splits, CSV I/O and
//! feature-space augmentation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Probability that a coordinate of the augmentation jitter is dropped.
pub const AUGMENT_DROPOUT: f64 = 0.1;

// RNG stream ids, so that each consumer of a root seed draws independently.
pub(crate) const STREAM_GENERATE: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
    pub target: usize,
    /// Ground-truth super-class. Used for generation and coarse-mapped
    /// evaluation only; the trainer never reads it.
    pub coarse: usize,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub num_super: usize,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub num_super: usize,
    pub children_per_super: usize,
    pub dim: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise_sigma: f64,
    pub per_class: usize,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            num_super: 4,
            children_per_super: 3,
            dim: 32,
            coarse_spread: 1.0,
            fine_spread: 0.35,
            noise_sigma: 0.3,
            per_class: 100,
        }
    }
}

impl HierarchySpec {
    pub fn num_classes(&self) -> usize {
        self.num_super * self.children_per_super
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_super < 1 || self.children_per_super < 1 {
            return bad("num_super and children_per_super must be positive".into());
        }
        if self.num_classes() < 2 {
            return bad("need at least two target classes".into());
        }
        if self.dim == 0 || self.per_class == 0 {
            return bad("dim and per_class must be positive".into());
        }
        let ordered = self.coarse_spread > self.fine_spread
            && self.fine_spread > self.noise_sigma
            && self.noise_sigma >= 0.0
            && self.fine_spread > 0.0;
        if !ordered || !self.coarse_spread.is_finite() {
            return bad(format!(
                "need coarse_spread > fine_spread > noise_sigma >= 0, got {} / {} / {}",
                self.coarse_spread, self.fine_spread, self.noise_sigma
            ));
        }
        Ok(())
    }
}

/// Centers drawn while generating a dataset.
#[derive(Debug, Clone)]
pub struct Centers {
    pub super_centers: Vec<Vec<f64>>,
    pub class_centers: Vec<Vec<f64>>,
    /// Parent super-class of each target class.
    pub parent: Vec<usize>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Draws super-centers, then class centers around them, then instances
/// around the class centers. Instances are ordered class by class.
pub fn generate(spec: &HierarchySpec, seed: u64) -> Result<(Dataset, Centers)> {
    spec.validate()?;
    let mut rng = rng_for(seed, STREAM_GENERATE);
    let super_centers: Vec<Vec<f64>> = (0..spec.num_super)
        .map(|_| gaussian_vec(&mut rng, spec.dim, spec.coarse_spread))
        .collect();
    let mut class_centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes());
    let mut parent = Vec::with_capacity(spec.num_classes());
    for (s, sc) in super_centers.iter().enumerate() {
        for _ in 0..spec.children_per_super {
            let offset = gaussian_vec(&mut rng, spec.dim, spec.fine_spread);
            class_centers.push(sc.iter().zip(&offset).map(|(a, b)| a + b).collect());
            parent.push(s);
        }
    }
    let mut instances = Vec::with_capacity(spec.num_classes() * spec.per_class);
    for (class, center) in class_centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let noise = gaussian_vec(&mut rng, spec.dim, spec.noise_sigma);
            instances.push(Instance {
                features: center.iter().zip(&noise).map(|(a, b)| a + b).collect(),
                target: class,
                coarse: parent[class],
                is_labeled: false,
            });
        }
    }
    let ds = Dataset {
        dim: spec.dim,
        num_classes: spec.num_classes(),
        num_super: spec.num_super,
        instances,
    };
    Ok((
        ds,
        Centers {
            super_centers,
            class_centers,
            parent,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub novel_ratio: f64,
    pub label_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            novel_ratio: 0.5,
            label_ratio: 0.5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.novel_ratio > 0.0 && self.novel_ratio < 1.0) {
            return Err(Error::Config(format!(
                "novel_ratio must lie in (0, 1), got {}",
                self.novel_ratio
            )));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "label_ratio must lie in (0, 1], got {}",
                self.label_ratio
            )));
        }
        Ok(())
    }
}

/// Seen/novel class partition plus labeled/unlabeled instance indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub seen: Vec<bool>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Partition {
    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.seen.len()).filter(|&c| self.seen[c]).collect()
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        (0..self.seen.len()).filter(|&c| !self.seen[c]).collect()
    }

    /// Rebuilds the partition from the `is_labeled` flags of a dataset:
    /// a class is seen iff it has at least one labeled instance.
    pub fn from_flags(ds: &Dataset) -> Result<Self> {
        let mut seen = vec![false; ds.num_classes];
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, inst) in ds.instances.iter().enumerate() {
            if inst.is_labeled {
                seen[inst.target] = true;
                labeled.push(i);
            } else {
                unlabeled.push(i);
            }
        }
        if labeled.is_empty() {
            return Err(Error::Config("dataset has no labeled instances".into()));
        }
        if unlabeled.is_empty() {
            return Err(Error::Config("dataset has no unlabeled instances".into()));
        }
        Ok(Self {
            seen,
            labeled,
            unlabeled,
        })
    }
}

/// Number of seen classes: `ceil(K * (1 - novel_ratio))`.
pub fn seen_class_count(num_classes: usize, novel_ratio: f64) -> usize {
    // The epsilon absorbs float noise such as 10 * (1 - 0.7) = 3.0000000000000004.
    (num_classes as f64 * (1.0 - novel_ratio) - 1e-9).ceil().max(0.0) as usize
}

/// Marks a random `ceil(K (1 - novel_ratio))` classes as seen and labels
/// `round(label_ratio * n_c)` instances of each seen class. Every other
/// instance goes to the unlabeled pool.
pub fn split(ds: &mut Dataset, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    if ds.instances.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let k = ds.num_classes;
    let n_seen = seen_class_count(k, spec.novel_ratio);
    if n_seen == 0 {
        return Err(Error::Config(format!(
            "novel_ratio {} leaves no seen classes out of {k}",
            spec.novel_ratio
        )));
    }
    if n_seen >= k {
        return Err(Error::Config(format!(
            "novel_ratio {} leaves no novel classes out of {k}",
            spec.novel_ratio
        )));
    }
    let mut rng = rng_for(spec.seed, STREAM_SPLIT);
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let mut seen = vec![false; k];
    for &c in &classes[..n_seen] {
        seen[c] = true;
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, inst) in ds.instances.iter_mut().enumerate() {
        inst.is_labeled = false;
        by_class[inst.target].push(i);
    }
    for c in 0..k {
        if !seen[c] {
            continue;
        }
        let members = &mut by_class[c];
        let n_lab = (members.len() as f64 * spec.label_ratio).round() as usize;
        if n_lab == 0 {
            return Err(Error::Config(format!(
                "label_ratio {} labels no instance of seen class {c}",
                spec.label_ratio
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..n_lab] {
            ds.instances[i].is_labeled = true;
        }
    }
    let labeled: Vec<usize> = (0..ds.instances.len())
        .filter(|&i| ds.instances[i].is_labeled)
        .collect();
    let unlabeled: Vec<usize> = (0..ds.instances.len())
        .filter(|&i| !ds.instances[i].is_labeled)
        .collect();
    if unlabeled.is_empty() {
        return Err(Error::Config("split left no unlabeled instances".into()));
    }
    Ok(Partition {
        seen,
        labeled,
        unlabeled,
    })
}

/// Pooled per-coordinate standard deviation of all features.
pub fn feature_sigma(ds: &Dataset) -> f64 {
    let n = ds.instances.len();
    if n < 2 || ds.dim == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for d in 0..ds.dim {
        let mean = ds.instances.iter().map(|x| x.features[d]).sum::<f64>() / n as f64;
        total += ds
            .instances
            .iter()
            .map(|x| (x.features[d] - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
    }
    (total / ds.dim as f64).sqrt()
}

/// Gaussian jitter of scale `strength * sigma` on each coordinate, with
/// each coordinate's jitter dropped with probability [`AUGMENT_DROPOUT`]
/// and the survivors rescaled so that the expected squared perturbation
/// stays `(strength * sigma)^2 * dim`.
pub fn augment(x: &[f64], strength: f64, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if strength == 0.0 {
        return x.to_vec();
    }
    let scale = strength * sigma / (1.0 - AUGMENT_DROPOUT).sqrt();
    x.iter()
        .map(|&v| {
            let eps: f64 = StandardNormal.sample(rng);
            if rng.random::<f64>() < AUGMENT_DROPOUT {
                v
            } else {
                v + scale * eps
            }
        })
        .collect()
}

/// Which labels a CSV export exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvView {
    /// Ground truth for every row.
    Full,
    /// What the trainer may see: unlabeled rows carry `target = -1` and
    /// every row carries `coarse = -1`.
    Trainer,
}

impl Dataset {
    pub fn features(&self, idx: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(&self.instances[i].features);
        }
        Tensor2::new(idx.len(), self.dim, data).expect("rows have dataset dim")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.instances.iter().map(|x| x.target).collect()
    }

    /// Parent super-class per target class, from the ground-truth labels.
    pub fn class_to_super(&self) -> Vec<usize> {
        let mut map = vec![0; self.num_classes];
        for inst in &self.instances {
            map[inst.target] = inst.coarse;
        }
        map
    }

    pub fn to_csv_string(&self, view: CsvView) -> String {
        let mut out = String::new();
        for d in 0..self.dim {
            let _ = write!(out, "f{d},");
        }
        out.push_str("target,coarse,is_labeled\n");
        for inst in &self.instances {
            for v in &inst.features {
                // `{:?}` prints the shortest representation that round-trips.
                let _ = write!(out, "{v:?},");
            }
            let (target, coarse) = match view {
                CsvView::Full => (inst.target as i64, inst.coarse as i64),
                CsvView::Trainer => (if inst.is_labeled { inst.target as i64 } else { -1 }, -1),
            };
            let _ = writeln!(out, "{target},{coarse},{}", u8::from(inst.is_labeled));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, view: CsvView) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string(view)).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = cols.len();
        if n < 4 || cols[n - 3..] != ["target", "coarse", "is_labeled"] {
            return Err(err(1, "header must end with target,coarse,is_labeled".into()));
        }
        let dim = n - 3;
        for (d, c) in cols[..dim].iter().enumerate() {
            if *c != format!("f{d}") {
                return Err(err(1, format!("expected column f{d}, found {c:?}")));
            }
        }
        let mut instances = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != n {
                return Err(err(
                    lineno,
                    format!("expected {n} fields, found {}", fields.len()),
                ));
            }
            let mut features = Vec::with_capacity(dim);
            for f in &fields[..dim] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(lineno, format!("bad feature value {f:?}")))?;
                if !v.is_finite() {
                    return Err(err(lineno, format!("non-finite feature {f:?}")));
                }
                features.push(v);
            }
            let label = |s: &str, what: &str| -> Result<usize> {
                let v: i64 = s
                    .parse()
                    .map_err(|_| err(lineno, format!("bad {what} {s:?}")))?;
                if v < 0 {
                    return Err(err(
                        lineno,
                        format!("{what} is hidden ({v}); trainer-view files carry no ground truth"),
                    ));
                }
                Ok(v as usize)
            };
            let target = label(fields[dim], "target")?;
            let coarse = label(fields[dim + 1], "coarse")?;
            let is_labeled = match fields[dim + 2] {
                "0" | "false" => false,
                "1" | "true" => true,
                other => return Err(err(lineno, format!("bad is_labeled {other:?}"))),
            };
            instances.push(Instance {
                features,
                target,
                coarse,
                is_labeled,
            });
        }
        if instances.is_empty() {
            return Err(err(1, "no data rows".into()));
        }
        let num_classes = instances.iter().map(|x| x.target).max().unwrap_or(0) + 1;
        let num_super = instances.iter().map(|x| x.coarse).max().unwrap_or(0) + 1;
        let ds = Dataset {
            dim,
            num_classes,
            num_super,
            instances,
        };
        let parents = ds.class_to_super();
        for (i, inst) in ds.instances.iter().enumerate() {
            if parents[inst.target] != inst.coarse {
                return Err(err(
                    i + 2,
                    format!("class {} appears under two super-classes", inst.target),
                ));
            }
        }
        Ok(ds)
    }
}
