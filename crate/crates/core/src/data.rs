//! Synthetic ID/OoD tasks and per-layer energy matrices.
//!
//! ID data are Gaussian blobs placed on a circle. Near outliers are extra
//! blobs halfway between the ID blobs, far outliers live in a shell well
//! outside the circle, and the seen outliers used for training form a ring
//! between the two. Covariate shift is simulated by corrupting ID test
//! points.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::nn::{LayeredNet, NnError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("matrix has {rows}×{cols} shape but {values} values")]
    Shape { rows: usize, cols: usize, values: usize },
    #[error("non-finite energy at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{which} labels have length {actual}, matrix has {expected} rows")]
    LabelLength {
        which: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("n·l = {n}·{l} overflows")]
    Overflow { n: u64, l: u64 },
    #[error("energy file: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape of a generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub dim: usize,
    pub classes: usize,
    /// Radius of the circle carrying the ID class means.
    pub radius: f64,
    pub n_train: usize,
    /// Size of each evaluation split.
    pub n_eval: usize,
    pub n_seen_ood: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            dim: 2,
            classes: 3,
            radius: 5.0,
            n_train: 2000,
            n_eval: 500,
            n_seen_ood: 2000,
        }
    }
}

/// Feature rows with class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Labeled {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train_id: Labeled,
    pub seen_ood: Vec<Vec<f64>>,
    pub test_id: Labeled,
    pub near_ood: Vec<Vec<f64>>,
    pub far_ood: Vec<Vec<f64>>,
    /// `(corruption name, corrupted copy of test_id.x)`.
    pub corrupted_id: Vec<(String, Vec<Vec<f64>>)>,
}

impl SyntheticTask {
    /// Evaluation OoD splits in report order: near, far, then corruptions.
    pub fn ood_splits(&self) -> Vec<(&str, &[Vec<f64>])> {
        let mut out: Vec<(&str, &[Vec<f64>])> =
            vec![("near_ood", &self.near_ood), ("far_ood", &self.far_ood)];
        for (name, x) in &self.corrupted_id {
            out.push((name.as_str(), x));
        }
        out
    }
}

/// Corruption applied to ID test features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    GaussianNoise(f64),
    Scale(f64),
    Shift(f64),
}

impl Corruption {
    pub const ALL: [Corruption; 7] = [
        Corruption::GaussianNoise(0.5),
        Corruption::GaussianNoise(1.0),
        Corruption::GaussianNoise(2.0),
        Corruption::Scale(0.5),
        Corruption::Scale(2.0),
        Corruption::Shift(1.0),
        Corruption::Shift(3.0),
    ];

    pub fn name(&self) -> String {
        match self {
            Corruption::GaussianNoise(s) => format!("gaussian_noise_{s}"),
            Corruption::Scale(s) => format!("scale_{s}"),
            Corruption::Shift(s) => format!("shift_{s}"),
        }
    }

    fn apply<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        match *self {
            Corruption::GaussianNoise(s) => x
                .iter()
                .map(|v| v + s * { let z: f64 = StandardNormal.sample(rng); z })
                .collect::<Vec<f64>>(),
            Corruption::Scale(s) => x.iter().map(|v| v * s).collect(),
            Corruption::Shift(s) => x.iter().map(|v| v + s).collect(),
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let g = gaussian(rng, dim);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Point on the circle of radius `r` in the first two coordinates.
fn on_circle(dim: usize, r: f64, angle: f64) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    p[0] = r * angle.cos();
    p[1] = r * angle.sin();
    p
}

fn blob_sample<R: Rng>(rng: &mut R, mean: &[f64]) -> Vec<f64> {
    gaussian(rng, mean.len())
        .into_iter()
        .zip(mean)
        .map(|(g, m)| g + m)
        .collect()
}

fn labeled_blobs<R: Rng>(rng: &mut R, means: &[Vec<f64>], n: usize) -> Labeled {
    let mut out = Labeled::default();
    for i in 0..n {
        let c = i % means.len();
        out.x.push(blob_sample(rng, &means[c]));
        out.y.push(c);
    }
    out
}

/// Radius uniform in volume between `r0` and `r1` in `dim` dimensions.
fn shell_sample<R: Rng>(rng: &mut R, dim: usize, r0: f64, r1: f64) -> Vec<f64> {
    let d = dim as f64;
    let u: f64 = rng.random();
    let r = (r0.powf(d) + u * (r1.powf(d) - r0.powf(d))).powf(1.0 / d);
    unit_direction(rng, dim).into_iter().map(|v| v * r).collect()
}

/// Generate a task. Each split draws from its own RNG stream, so changing
/// one split's size leaves the others untouched.
pub fn gen_task(spec: &TaskSpec, seed: u64) -> Result<SyntheticTask, DataError> {
    if spec.classes < 2 {
        return Err(DataError::Spec(format!("need ≥ 2 classes, got {}", spec.classes)));
    }
    if spec.dim < 2 {
        return Err(DataError::Spec(format!("need dim ≥ 2, got {}", spec.dim)));
    }
    if !(spec.radius.is_finite() && spec.radius > 0.0) {
        return Err(DataError::Spec(format!("radius must be positive, got {}", spec.radius)));
    }
    if spec.n_train == 0 || spec.n_eval == 0 {
        return Err(DataError::Spec("split sizes must be positive".into()));
    }
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let r = spec.radius;
    let c = spec.classes;
    let step = std::f64::consts::TAU / c as f64;
    let id_means: Vec<Vec<f64>> = (0..c).map(|k| on_circle(spec.dim, r, k as f64 * step)).collect();
    let near_means: Vec<Vec<f64>> = (0..c)
        .map(|k| on_circle(spec.dim, r, (k as f64 + 0.5) * step))
        .collect();

    let train_id = labeled_blobs(&mut stream(1), &id_means, spec.n_train);
    let test_id = labeled_blobs(&mut stream(2), &id_means, spec.n_eval);
    let near_ood = labeled_blobs(&mut stream(3), &near_means, spec.n_eval).x;
    let mut far_rng = stream(4);
    let far_ood = (0..spec.n_eval)
        .map(|_| shell_sample(&mut far_rng, spec.dim, 3.0 * r, 4.0 * r))
        .collect();
    let mut seen_rng = stream(5);
    let seen_ood = (0..spec.n_seen_ood)
        .map(|_| shell_sample(&mut seen_rng, spec.dim, 2.0 * r - 0.5, 2.0 * r + 0.5))
        .collect();
    let mut corrupt_rng = stream(6);
    let corrupted_id = Corruption::ALL
        .iter()
        .map(|cor| {
            let x = test_id.x.iter().map(|p| cor.apply(p, &mut corrupt_rng)).collect();
            (cor.name(), x)
        })
        .collect();

    Ok(SyntheticTask {
        spec: spec.clone(),
        train_id,
        seen_ood,
        test_id,
        near_ood,
        far_ood,
        corrupted_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistLabel {
    Id = 0,
    Ood = 1,
}

/// `n × l` per-layer energies, row-major; column `l − 1` is the logits
/// energy when the matrix comes from [`extract_energies`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMatrix {
    n: usize,
    l: usize,
    values: Vec<f64>,
    dist_labels: Option<Vec<DistLabel>>,
    class_labels: Option<Vec<i32>>,
}

impl EnergyMatrix {
    pub fn new(n: usize, l: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if n.checked_mul(l) != Some(values.len()) {
            return Err(DataError::Shape {
                rows: n,
                cols: l,
                values: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: i / l,
                col: i % l,
            });
        }
        Ok(EnergyMatrix {
            n,
            l,
            values,
            dist_labels: None,
            class_labels: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let l = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != l) {
            return Err(DataError::Shape {
                rows: rows.len(),
                cols: l,
                values: r.len(),
            });
        }
        Self::new(rows.len(), l, rows.concat())
    }

    pub fn with_dist_labels(mut self, labels: Vec<DistLabel>) -> Result<Self, DataError> {
        if labels.len() != self.n {
            return Err(DataError::LabelLength {
                which: "dist",
                expected: self.n,
                actual: labels.len(),
            });
        }
        self.dist_labels = Some(labels);
        Ok(self)
    }

    pub fn with_class_labels(mut self, labels: Vec<i32>) -> Result<Self, DataError> {
        if labels.len() != self.n {
            return Err(DataError::LabelLength {
                which: "class",
                expected: self.n,
                actual: labels.len(),
            });
        }
        self.class_labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.l..(i + 1) * self.l]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact would panic on l == 0
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn dist_labels(&self) -> Option<&[DistLabel]> {
        self.dist_labels.as_deref()
    }

    pub fn class_labels(&self) -> Option<&[i32]> {
        self.class_labels.as_deref()
    }

    const MAGIC: [u8; 4] = *b"LIRE";
    const VERSION: u16 = 1;

    /// Layout: magic `LIRE`, version u16 = 1, flags u16 (bit 0 dist labels,
    /// bit 1 class labels), n u64, l u64, n·l f64 row-major, then n u8 dist
    /// labels (0 = ID, 1 = OoD) and n i32 class labels when flagged.
    /// All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&Self::MAGIC);
        w.u16(Self::VERSION);
        let flags = u16::from(self.dist_labels.is_some()) | (u16::from(self.class_labels.is_some()) << 1);
        w.u16(flags);
        w.u64(self.n as u64);
        w.u64(self.l as u64);
        w.f64s(self.values.iter().copied());
        if let Some(d) = &self.dist_labels {
            for &v in d {
                w.u8(v as u8);
            }
        }
        if let Some(c) = &self.class_labels {
            for &v in c {
                w.i32(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader::new(bytes);
        r.magic(Self::MAGIC)?;
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(FormatError::Version(version).into());
        }
        let flags_at = r.offset();
        let flags = r.u16()?;
        if flags & !0b11 != 0 {
            return Err(FormatError::Invalid {
                offset: flags_at,
                what: format!("unknown flag bits {flags:#06x}"),
            }
            .into());
        }
        let n64 = r.u64()?;
        let l64 = r.u64()?;
        let count = n64
            .checked_mul(l64)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| usize::try_from(c).ok())
            .ok_or(DataError::Overflow { n: n64, l: l64 })?;
        let (n, l) = (n64 as usize, l64 as usize);
        let label_bytes = if flags & 1 != 0 { n } else { 0 } + if flags & 2 != 0 { 4 * n } else { 0 };
        r.require(count.saturating_add(label_bytes))?;
        let values = r.f64s(n * l)?;
        let mut m = EnergyMatrix::new(n, l, values)?;
        if flags & 1 != 0 {
            let at = r.offset();
            let raw = r.take(n)?;
            let labels = raw
                .iter()
                .enumerate()
                .map(|(i, &b)| match b {
                    0 => Ok(DistLabel::Id),
                    1 => Ok(DistLabel::Ood),
                    _ => Err(FormatError::Invalid {
                        offset: at + i,
                        what: format!("dist label {b}"),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            m = m.with_dist_labels(labels)?;
        }
        if flags & 2 != 0 {
            let labels = (0..n).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
            m = m.with_class_labels(labels)?;
        }
        r.finish()?;
        Ok(m)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, DataError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

pub fn write_energy_file(m: &EnergyMatrix, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, m.to_bytes())?;
    Ok(())
}

pub fn read_energy_file(path: &Path) -> Result<EnergyMatrix, DataError> {
    EnergyMatrix::from_bytes(&std::fs::read(path)?)
}

/// One row per sample: hidden-layer energies in depth order, then the
/// logits energy (t = 1).
pub fn extract_energies<T: Scalar>(
    net: &LayeredNet<T>,
    features: &[Vec<f64>],
) -> Result<EnergyMatrix, DataError> {
    let l = net.tap_count();
    let mut values = Vec::with_capacity(features.len() * l);
    for x in features {
        let xt: Vec<T> = x.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let trace = net.forward(&xt)?;
        values.extend(trace.energies().map_err(NnError::from)?);
    }
    EnergyMatrix::new(features.len(), l, values)
}

/// Logit rows for a feature set.
pub fn logits<T: Scalar>(net: &LayeredNet<T>, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DataError> {
    features
        .iter()
        .map(|x| {
            let xt: Vec<T> = x.iter().map(|&v| T::from_f64_lossy(v)).collect();
            let y = net.predict(&xt)?;
            Ok(y.into_iter().map(|v| v.to_f64_lossless()).collect())
        })
        .collect()
}

/// Features as CSV: `x0,..,x{d-1}[,label]`.
pub fn features_csv(x: &[Vec<f64>], labels: Option<&[usize]>) -> String {
    let dim = x.first().map_or(0, Vec::len);
    let mut out: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        out.push("label".into());
    }
    let mut s = out.join(",");
    s.push('\n');
    for (i, row) in x.iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(y) = labels {
            cells.push(y[i].to_string());
        }
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
