//! Score functions over logits or per-layer energy vectors.
//!
//! Single-value detectors (logit energy, one layer's energy, maximum softmax
//! probability) are oriented so that a higher score means in-distribution.
//! The aggregation detectors score the whole energy vector with a distance
//! to the training energies, where lower means in-distribution.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::data::EnergyMatrix;
use crate::energy::{self, EnergyError, Temperature};
use crate::metrics::{self, ScoredSplit};
use crate::nn::{Adam, LayeredNet, NnError, Vae};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("fit: {0}")]
    Fit(String),
    #[error("fit: VAE loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("dimension mismatch: detector expects {expected} values, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("{0} detector cannot score this input")]
    Input(&'static str),
    #[error("detector file: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation {
    pub high_is_id: bool,
}

impl Orientation {
    pub const HIGH_IS_ID: Orientation = Orientation { high_is_id: true };
    pub const LOW_IS_ID: Orientation = Orientation { high_is_id: false };

    /// Map a raw score to the "higher is ID" convention used by the metrics.
    pub fn id_score(self, s: f64) -> f64 {
        if self.high_is_id {
            s
        } else {
            -s
        }
    }

    pub fn flipped(self) -> Self {
        Orientation {
            high_is_id: !self.high_is_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Id,
    Ood,
}

/// Decision rule: ID iff the score is on the ID side of the threshold; the
/// boundary counts as ID.
pub fn classify(orientation: Orientation, s: f64, threshold: f64) -> Verdict {
    let id = if orientation.high_is_id {
        s >= threshold
    } else {
        s <= threshold
    };
    if id {
        Verdict::Id
    } else {
        Verdict::Ood
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    EboLogits,
    LayerEnergy(usize),
    AgMd,
    AgKnn,
    AgVae,
    Msp,
}

impl DetectorKind {
    fn code(self) -> u8 {
        match self {
            DetectorKind::EboLogits => 0,
            DetectorKind::LayerEnergy(_) => 1,
            DetectorKind::AgMd => 2,
            DetectorKind::AgKnn => 3,
            DetectorKind::AgVae => 4,
            DetectorKind::Msp => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::EboLogits => "ebo",
            DetectorKind::LayerEnergy(_) => "layer_energy",
            DetectorKind::AgMd => "ag_md",
            DetectorKind::AgKnn => "ag_knn",
            DetectorKind::AgVae => "ag_vae",
            DetectorKind::Msp => "msp",
        }
    }
}

/// Per-class means and inverse covariances of training energy vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MdState {
    pub means: Vec<Vec<f64>>,
    /// `L × L` row-major inverse covariance per class.
    pub precisions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnState {
    pub k: usize,
    /// `N × L` reference energies, row-major.
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeState {
    pub vae: Vae<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    EboLogits,
    LayerEnergy(usize),
    Md(MdState),
    Knn(KnnState),
    Vae(VaeState),
    Msp,
}

/// A fitted, immutable score function.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    model: Model,
    orientation: Orientation,
    /// Length of the energy vectors this detector reads (0 for MSP).
    n_layers: usize,
    threshold: Option<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Detector {
    /// Negated logit energy; reads the last column of an energy vector.
    pub fn ebo_logits(n_layers: usize) -> Self {
        Detector {
            model: Model::EboLogits,
            orientation: Orientation::HIGH_IS_ID,
            n_layers,
            threshold: None,
        }
    }

    /// Negated energy of one tap. `orientation` says how the negated
    /// energy relates to ID-ness; the usual choice is [`Orientation::HIGH_IS_ID`].
    pub fn layer_energy(layer: usize, n_layers: usize, orientation: Orientation) -> Result<Self, DetectorError> {
        if layer >= n_layers {
            return Err(DetectorError::Dim {
                expected: n_layers,
                actual: layer + 1,
            });
        }
        Ok(Detector {
            model: Model::LayerEnergy(layer),
            orientation,
            n_layers,
            threshold: None,
        })
    }

    pub fn msp() -> Self {
        Detector {
            model: Model::Msp,
            orientation: Orientation::HIGH_IS_ID,
            n_layers: 0,
            threshold: None,
        }
    }

    /// Mahalanobis detector from explicit means and inverse covariances.
    pub fn mahalanobis(state: MdState) -> Result<Self, DetectorError> {
        let l = state.means.first().map_or(0, Vec::len);
        if l == 0 || state.means.len() != state.precisions.len() {
            return Err(DetectorError::Fit("need one precision matrix per class mean".into()));
        }
        if state.means.iter().any(|m| m.len() != l) || state.precisions.iter().any(|p| p.len() != l * l) {
            return Err(DetectorError::Fit("inconsistent class parameter shapes".into()));
        }
        Ok(Detector {
            model: Model::Md(state),
            orientation: Orientation::LOW_IS_ID,
            n_layers: l,
            threshold: None,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        match &self.model {
            Model::EboLogits => DetectorKind::EboLogits,
            Model::LayerEnergy(l) => DetectorKind::LayerEnergy(*l),
            Model::Md(_) => DetectorKind::AgMd,
            Model::Knn(_) => DetectorKind::AgKnn,
            Model::Vae(_) => DetectorKind::AgVae,
            Model::Msp => DetectorKind::Msp,
        }
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }

    pub fn md_state(&self) -> Option<&MdState> {
        match &self.model {
            Model::Md(s) => Some(s),
            _ => None,
        }
    }

    fn check_len(&self, e: &[f64]) -> Result<(), DetectorError> {
        if e.len() != self.n_layers {
            return Err(DetectorError::Dim {
                expected: self.n_layers,
                actual: e.len(),
            });
        }
        Ok(())
    }

    /// Score one energy vector.
    pub fn score(&self, e: &[f64]) -> Result<f64, DetectorError> {
        if matches!(self.model, Model::Msp) {
            return Err(DetectorError::Input("msp needs logits, not energies; use score_activations"));
        }
        self.check_len(e)?;
        if let Some(i) = e.iter().position(|v| !v.is_finite()) {
            return Err(EnergyError::NonFinite { index: i }.into());
        }
        Ok(match &self.model {
            Model::EboLogits => -e[self.n_layers - 1],
            Model::LayerEnergy(l) => -e[*l],
            Model::Md(s) => s
                .means
                .iter()
                .zip(&s.precisions)
                .map(|(mu, p)| {
                    let d: Vec<f64> = e.iter().zip(mu).map(|(x, m)| x - m).collect();
                    let l = d.len();
                    let mut q = 0.0;
                    for i in 0..l {
                        let row = &p[i * l..(i + 1) * l];
                        q += d[i] * row.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
                    }
                    q.max(0.0).sqrt()
                })
                .fold(f64::INFINITY, f64::min),
            Model::Knn(s) => {
                let mut d: Vec<f64> = s.reference.chunks_exact(self.n_layers).map(|r| sq_dist(e, r)).collect();
                let k = s.k;
                if k < d.len() {
                    d.select_nth_unstable_by(k - 1, f64::total_cmp);
                }
                let mut near = d[..k].to_vec();
                // Fixed summation order keeps the score independent of the selection algorithm.
                near.sort_by(f64::total_cmp);
                near.iter().map(|v| v.sqrt()).sum::<f64>() / k as f64
            }
            Model::Vae(s) => {
                let z: Vec<f64> = e.iter().zip(&s.mean).zip(&s.std).map(|((x, m), sd)| (x - m) / sd).collect();
                let rec = s.vae.reconstruct(&z)?;
                sq_dist(&z, &rec).sqrt()
            }
            Model::Msp => unreachable!(),
        })
    }

    /// Score a raw activation or logit vector (EBO, layer energy, MSP).
    pub fn score_activations(&self, v: &[f64]) -> Result<f64, DetectorError> {
        match &self.model {
            Model::EboLogits | Model::LayerEnergy(_) => Ok(-energy::free_energy(v, Temperature::ONE)?),
            Model::Msp => Ok(energy::msp_score(v, Temperature::ONE)?),
            _ => Err(DetectorError::Input(self.kind().name())),
        }
    }

    /// Scores for every row of an energy matrix, in row order.
    pub fn score_matrix(&self, m: &EnergyMatrix) -> Result<Vec<f64>, DetectorError> {
        m.rows().map(|r| self.score(r)).collect()
    }

    /// Score mapped to "higher is ID".
    pub fn id_score(&self, s: f64) -> f64 {
        self.orientation.id_score(s)
    }

    pub fn classify(&self, s: f64, threshold: f64) -> Verdict {
        classify(self.orientation, s, threshold)
    }

    /// Oriented scores of two energy matrices as a metrics split.
    pub fn split(&self, id: &EnergyMatrix, ood: &EnergyMatrix) -> Result<ScoredSplit<f64>, DetectorError> {
        let orient = |v: Vec<f64>| v.into_iter().map(|s| self.id_score(s)).collect();
        Ok(ScoredSplit::new(
            orient(self.score_matrix(id)?),
            orient(self.score_matrix(ood)?),
        )?)
    }

    const MAGIC: [u8; 4] = *b"LIRD";
    const VERSION: u16 = 1;

    /// Little-endian layout: magic `LIRD`, version u16, kind u8,
    /// orientation u8 (1 = high is ID), L u32, then
    /// - layer energy: layer u32
    /// - MD: C u32, per class μ_c (L f64) and Σ_c⁻¹ (L×L f64 row-major)
    /// - KNN: K u32, N u32, N×L f64
    /// - VAE: encoder dims (u32 count, u32 each), decoder dims, standardisation
    ///   mean and std (L f64 each), then encoder and decoder parameters as f64
    ///   in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&Self::MAGIC);
        w.u16(Self::VERSION);
        w.u8(self.kind().code());
        w.u8(u8::from(self.orientation.high_is_id));
        w.u32(self.n_layers as u32);
        match &self.model {
            Model::EboLogits | Model::Msp => {}
            Model::LayerEnergy(l) => w.u32(*l as u32),
            Model::Md(s) => {
                w.u32(s.means.len() as u32);
                for (mu, p) in s.means.iter().zip(&s.precisions) {
                    w.f64s(mu.iter().copied());
                    w.f64s(p.iter().copied());
                }
            }
            Model::Knn(s) => {
                w.u32(s.k as u32);
                w.u32((s.reference.len() / self.n_layers) as u32);
                w.f64s(s.reference.iter().copied());
            }
            Model::Vae(s) => {
                for net in [&s.vae.encoder, &s.vae.decoder] {
                    w.u32(net.dims().len() as u32);
                    for &d in net.dims() {
                        w.u32(d as u32);
                    }
                }
                w.f64s(s.mean.iter().copied());
                w.f64s(s.std.iter().copied());
                w.f64s(s.vae.encoder.params());
                w.f64s(s.vae.decoder.params());
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectorError> {
        let mut r = Reader::new(bytes);
        r.magic(Self::MAGIC)?;
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(FormatError::Version(version).into());
        }
        let kind_at = r.offset();
        let kind = r.u8()?;
        let orient_at = r.offset();
        let orientation = match r.u8()? {
            0 => Orientation::LOW_IS_ID,
            1 => Orientation::HIGH_IS_ID,
            b => {
                return Err(FormatError::Invalid {
                    offset: orient_at,
                    what: format!("orientation byte {b}"),
                }
                .into())
            }
        };
        let l = r.u32()? as usize;
        let invalid = |offset: usize, what: String| DetectorError::Format(FormatError::Invalid { offset, what });
        let model = match kind {
            0 => Model::EboLogits,
            1 => {
                let at = r.offset();
                let layer = r.u32()? as usize;
                if layer >= l {
                    return Err(invalid(at, format!("layer {layer} ≥ L = {l}")));
                }
                Model::LayerEnergy(layer)
            }
            2 => {
                let c = r.u32()? as usize;
                r.require(c.saturating_mul(l.saturating_mul(l + 1)).saturating_mul(8))?;
                let mut means = Vec::with_capacity(c);
                let mut precisions = Vec::with_capacity(c);
                for _ in 0..c {
                    means.push(r.f64s(l)?);
                    precisions.push(r.f64s(l * l)?);
                }
                Model::Md(MdState { means, precisions })
            }
            3 => {
                let k_at = r.offset();
                let k = r.u32()? as usize;
                let n = r.u32()? as usize;
                if k == 0 || k > n || l == 0 {
                    return Err(invalid(k_at, format!("K = {k} with N = {n}, L = {l}")));
                }
                r.require(n.saturating_mul(l).saturating_mul(8))?;
                Model::Knn(KnnState {
                    k,
                    reference: r.f64s(n * l)?,
                })
            }
            4 => {
                let mut dims = Vec::new();
                for _ in 0..2 {
                    let count = r.u32()? as usize;
                    r.require(count.saturating_mul(4))?;
                    dims.push((0..count).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?);
                }
                let mean = r.f64s(l)?;
                let std = r.f64s(l)?;
                let mut encoder = LayeredNet::<f64>::zeros(&dims[0])?;
                encoder.set_params(&r.f64s(encoder.param_count())?)?;
                let mut decoder = LayeredNet::<f64>::zeros(&dims[1])?;
                decoder.set_params(&r.f64s(decoder.param_count())?)?;
                let vae = Vae::from_parts(encoder, decoder)?;
                if vae.input_dim() != l {
                    return Err(invalid(kind_at, format!("VAE input {} ≠ L = {l}", vae.input_dim())));
                }
                Model::Vae(VaeState { vae, mean, std })
            }
            5 => Model::Msp,
            k => return Err(invalid(kind_at, format!("detector kind {k}"))),
        };
        r.finish()?;
        let d = Detector {
            model,
            orientation,
            n_layers: l,
            threshold: None,
        };
        if let Model::Md(s) = d.model {
            return Detector::mahalanobis(s).map(|m| Detector { orientation, ..m });
        }
        Ok(d)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DetectorError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DetectorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Relative diagonal loading tried in turn until the covariance factors.
pub const MD_RIDGE_LADDER: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// `Σ + ε·tr(Σ)/L·I` inverted for the first ε on the ladder that leaves it
/// positive definite.
pub fn regularized_precision(cov: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let l = cov.nrows();
    let scale = cov.trace() / l as f64;
    for eps in MD_RIDGE_LADDER {
        let mut c = cov.clone();
        for i in 0..l {
            c[(i, i)] += eps * scale;
        }
        if let Some(ch) = c.cholesky() {
            let inv = ch.inverse();
            // Symmetrise away round-off.
            let inv = (&inv + inv.transpose()) * 0.5;
            return Some((eps, inv));
        }
    }
    None
}

/// Fit per-class Gaussian parameters of the training energy vectors.
pub fn fit_md(train: &EnergyMatrix) -> Result<Detector, DetectorError> {
    let labels = train
        .class_labels()
        .ok_or_else(|| DetectorError::Fit("Mahalanobis fit needs class labels".into()))?;
    let l = train.l();
    if l == 0 {
        return Err(DetectorError::Fit("energy vectors are empty".into()));
    }
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut means = Vec::new();
    let mut precisions = Vec::new();
    for &c in &classes {
        let rows: Vec<&[f64]> = train.rows().zip(labels).filter(|(_, &y)| y == c).map(|(r, _)| r).collect();
        if rows.len() < 2 {
            return Err(DetectorError::Fit(format!("class {c} has {} sample(s), need ≥ 2", rows.len())));
        }
        let n = rows.len() as f64;
        let mu: Vec<f64> = (0..l).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(l, l);
        for r in &rows {
            for i in 0..l {
                for j in 0..l {
                    cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]);
                }
            }
        }
        cov /= n - 1.0;
        let (eps, prec) = regularized_precision(&cov)
            .ok_or_else(|| DetectorError::Fit(format!("class {c} covariance is singular after regularisation")))?;
        log::debug!("md: class {c} regularised with eps {eps}");
        means.push(mu);
        precisions.push(prec.transpose().as_slice().to_vec());
    }
    Detector::mahalanobis(MdState { means, precisions })
}

/// Default neighbour count `min(50, ⌊N/10⌋)`, at least 1.
pub fn default_k(n_train: usize) -> usize {
    (n_train / 10).clamp(1, 50)
}

pub fn fit_knn(train: &EnergyMatrix, k: usize) -> Result<Detector, DetectorError> {
    if k == 0 || k > train.n() {
        return Err(DetectorError::Fit(format!("K = {k} outside [1, {}]", train.n())));
    }
    if train.l() == 0 {
        return Err(DetectorError::Fit("energy vectors are empty".into()));
    }
    Ok(Detector {
        model: Model::Knn(KnnState {
            k,
            reference: train.values().to_vec(),
        }),
        orientation: Orientation::LOW_IS_ID,
        n_layers: train.l(),
        threshold: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub hidden: usize,
    pub latent: usize,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden: 16,
            latent: 4,
            kl_weight: 1.0,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train a VAE on standardised training energies; score by reconstruction
/// distance through the posterior mean.
pub fn fit_vae(train: &EnergyMatrix, cfg: &VaeConfig) -> Result<Detector, DetectorError> {
    let (n, l) = (train.n(), train.l());
    if n < 16 {
        return Err(DetectorError::Fit(format!("VAE needs ≥ 16 training vectors, got {n}")));
    }
    if l == 0 || cfg.epochs == 0 || cfg.batch_size == 0 || cfg.latent == 0 || cfg.hidden == 0 {
        return Err(DetectorError::Fit("invalid VAE config".into()));
    }
    let mean: Vec<f64> = (0..l).map(|j| train.rows().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..l)
        .map(|j| {
            let var = train.rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let data: Vec<Vec<f64>> = train
        .rows()
        .map(|r| r.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vae = Vae::<f64>::new_random(l, cfg.hidden, cfg.latent, &mut rng)?;
    let mut enc_opt = Adam::new(&vae.encoder, cfg.lr);
    let mut dec_opt = Adam::new(&vae.decoder, cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let eps: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| (0..cfg.latent).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let (_, g) = match vae.loss_grad(&batch, &eps, cfg.kl_weight) {
                Ok(v) => v,
                Err(NnError::NonFinite) => return Err(DetectorError::Diverged { epoch }),
                Err(e) => return Err(e.into()),
            };
            enc_opt.step(&mut vae.encoder, &g.encoder);
            dec_opt.step(&mut vae.decoder, &g.decoder);
        }
    }
    Ok(Detector {
        model: Model::Vae(VaeState { vae, mean, std }),
        orientation: Orientation::LOW_IS_ID,
        n_layers: l,
        threshold: None,
    })
}

/// Best-hidden-layer oracle outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct BhlResult {
    /// Column of the energy matrix.
    pub best_layer: usize,
    /// `max(auroc, 1 − auroc)` at `best_layer`.
    pub oriented_auroc: f64,
    /// Whether high raw energy means ID at `best_layer`.
    pub orientation: Orientation,
    /// AUROC of each considered column with raw energy as the score
    /// (high = ID), indexed by column.
    pub per_layer_auroc: Vec<f64>,
}

impl BhlResult {
    /// Layer-energy detector reproducing the oracle's choice.
    pub fn detector(&self, n_layers: usize) -> Result<Detector, DetectorError> {
        // The layer detector scores −E, so the raw-energy orientation flips.
        Detector::layer_energy(self.best_layer, n_layers, self.orientation.flipped())
    }
}

/// Pick the layer with the largest `max(a, 1 − a)`; ties go to the earlier layer.
pub fn select_layer(per_layer_auroc: &[f64]) -> Option<(usize, f64, Orientation)> {
    let both: Vec<(f64, f64)> = per_layer_auroc.iter().map(|&a| (a, 1.0 - a)).collect();
    select_oriented(&both)
}

// Each entry is (AUROC with high energy as ID, AUROC with low energy as ID).
fn select_oriented(per_layer: &[(f64, f64)]) -> Option<(usize, f64, Orientation)> {
    let mut best: Option<(usize, f64, Orientation)> = None;
    for (l, &(a, flipped)) in per_layer.iter().enumerate() {
        let (o, orient) = if a >= flipped {
            (a, Orientation::HIGH_IS_ID)
        } else {
            (flipped, Orientation::LOW_IS_ID)
        };
        if best.is_none_or(|(_, b, _)| o > b) {
            best = Some((l, o, orient));
        }
    }
    best
}

/// Evaluate every layer's energy as a detector with either sign and keep
/// the best. The last column is taken to be the logits and is skipped
/// unless `include_logits` is set.
pub fn bhl(id: &EnergyMatrix, ood: &EnergyMatrix, include_logits: bool) -> Result<BhlResult, DetectorError> {
    if id.l() != ood.l() {
        return Err(DetectorError::Dim {
            expected: id.l(),
            actual: ood.l(),
        });
    }
    let cols = if include_logits { id.l() } else { id.l().saturating_sub(1) };
    if cols == 0 {
        return Err(DetectorError::Fit("no hidden layers to choose from".into()));
    }
    // The flipped AUROC is recomputed from counts rather than taken as 1 - a
    // so it matches the negated-score detector bit for bit.
    let both = (0..cols)
        .map(|j| {
            let split = ScoredSplit::new(id.column(j), ood.column(j))?;
            Ok((metrics::auroc(&split), metrics::auroc(&split.negated())))
        })
        .collect::<Result<Vec<_>, DetectorError>>()?;
    let per_layer_auroc = both.iter().map(|p| p.0).collect();
    let (best_layer, oriented_auroc, orientation) = select_oriented(&both).expect("cols > 0");
    Ok(BhlResult {
        best_layer,
        oriented_auroc,
        orientation,
        per_layer_auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(rows: &[&[f64]]) -> EnergyMatrix {
        EnergyMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn identity_md(means: Vec<Vec<f64>>) -> Detector {
        let l = means[0].len();
        let eye: Vec<f64> = (0..l * l).map(|i| if i % (l + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let precisions = vec![eye; means.len()];
        Detector::mahalanobis(MdState { means, precisions }).unwrap()
    }

    #[test]
    fn md_examples() {
        let d = identity_md(vec![vec![0.0, 0.0]]);
        assert_eq!(d.score(&[3.0, 4.0]).unwrap(), 5.0);
        let d = identity_md(vec![vec![0.0], vec![10.0]]);
        assert_eq!(d.score(&[2.0]).unwrap(), 2.0);
        assert_eq!(d.score(&[10.0]).unwrap(), 0.0);
        assert_eq!(d.orientation(), Orientation::LOW_IS_ID);
    }

    #[test]
    fn md_fit_and_errors() {
        let m = matrix(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.5], &[5.0, 5.0], &[6.0, 7.0], &[7.0, 5.5]])
            .with_class_labels(vec![0, 0, 0, 1, 1, 1])
            .unwrap();
        let d = fit_md(&m).unwrap();
        let s = d.md_state().unwrap();
        assert_eq!(s.means.len(), 2);
        assert_eq!(d.score(&s.means[1].clone()).unwrap(), 0.0);

        let few = matrix(&[&[0.0], &[1.0], &[2.0]]).with_class_labels(vec![0, 0, 1]).unwrap();
        assert!(matches!(fit_md(&few), Err(DetectorError::Fit(_))));
        let unlabeled = matrix(&[&[0.0], &[1.0]]);
        assert!(fit_md(&unlabeled).is_err());
        // Zero trace cannot be regularised.
        let constant = matrix(&[&[1.0, 1.0], &[1.0, 1.0]]).with_class_labels(vec![0, 0]).unwrap();
        assert!(matches!(fit_md(&constant), Err(DetectorError::Fit(_))));
    }

    #[test]
    fn md_regularises_collinear_energies() {
        // Two perfectly correlated columns: rank-one covariance.
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let m = EnergyMatrix::from_rows(&rows).unwrap().with_class_labels(vec![0; 10]).unwrap();
        let d = fit_md(&m).unwrap();
        assert!(d.score(&[3.0, 6.0]).unwrap().is_finite());
        assert!(d.score(&[3.0, 0.0]).unwrap() > d.score(&[3.0, 6.0]).unwrap());
    }

    #[test]
    fn knn_examples() {
        let m = matrix(&[&[0.0], &[1.0], &[2.0]]);
        let d = fit_knn(&m, 2).unwrap();
        assert_eq!(d.score(&[0.0]).unwrap(), 0.5);
        assert_eq!(fit_knn(&m, 1).unwrap().score(&[2.0]).unwrap(), 0.0);
        let d = fit_knn(&matrix(&[&[0.0], &[3.0]]), 2).unwrap();
        assert_eq!(d.score(&[1.0]).unwrap(), 1.5);
        assert!(fit_knn(&m, 0).is_err());
        assert!(fit_knn(&m, 4).is_err());
        assert_eq!(default_k(2000), 50);
        assert_eq!(default_k(120), 12);
        assert_eq!(default_k(5), 1);
    }

    #[test]
    fn single_value_scores() {
        let e = Detector::ebo_logits(2);
        assert!((e.score_activations(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(e.score(&[-1.0, -4.0]).unwrap(), 4.0);
        let l = Detector::layer_energy(0, 2, Orientation::HIGH_IS_ID).unwrap();
        assert!((l.score_activations(&[1.0, 2.0, 3.0]).unwrap() - 3.407_605_964_444_38).abs() < 1e-12);
        assert_eq!(l.score(&[-1.0, -4.0]).unwrap(), 1.0);
        assert_eq!(Detector::msp().score_activations(&[0.0, 0.0]).unwrap(), 0.5);
        assert!(Detector::msp().score(&[0.0]).is_err());
        assert!(matches!(e.score(&[1.0]), Err(DetectorError::Dim { expected: 2, actual: 1 })));
        assert!(Detector::layer_energy(2, 2, Orientation::HIGH_IS_ID).is_err());
    }

    #[test]
    fn classify_rule() {
        let hi = Orientation::HIGH_IS_ID;
        assert_eq!(classify(hi, 0.7, 0.5), Verdict::Id);
        assert_eq!(classify(hi, 0.5, 0.5), Verdict::Id);
        assert_eq!(classify(hi, 0.3, 0.5), Verdict::Ood);
        let lo = Orientation::LOW_IS_ID;
        assert_eq!(classify(lo, 0.3, 0.5), Verdict::Id);
        assert_eq!(classify(lo, 0.5, 0.5), Verdict::Id);
        assert_eq!(classify(lo, 0.7, 0.5), Verdict::Ood);
    }

    #[test]
    fn layer_selection() {
        let (l, a, o) = select_layer(&[0.6, 0.3, 0.55]).unwrap();
        assert_eq!(l, 1);
        assert!((a - 0.7).abs() < 1e-15);
        assert_eq!(o, Orientation::LOW_IS_ID);
        // Ties prefer the earlier layer.
        assert_eq!(select_layer(&[0.2, 0.8]).unwrap().0, 0);
        assert!(select_layer(&[]).is_none());
    }

    #[test]
    fn bhl_perfect_separation() {
        let id = matrix(&[&[5.0, 0.0], &[6.0, 0.0]]);
        let ood = matrix(&[&[1.0, 0.0], &[2.0, 0.0]]);
        let r = bhl(&id, &ood, false).unwrap();
        assert_eq!(r.best_layer, 0);
        assert_eq!(r.oriented_auroc, 1.0);
        assert_eq!(r.per_layer_auroc.len(), 1);
        assert!(bhl(&id, &matrix(&[&[1.0]]), false).is_err());
        assert!(bhl(&matrix(&[&[1.0]]), &matrix(&[&[0.0]]), false).is_err());
        assert_eq!(bhl(&matrix(&[&[1.0]]), &matrix(&[&[0.0]]), true).unwrap().oriented_auroc, 1.0);
    }

    #[test]
    fn bhl_detector_matches_oracle() {
        // High energy is ID here, so the layer detector must be low-is-ID.
        let id = matrix(&[&[5.0, -1.0], &[6.0, -2.0], &[4.0, -1.5]]);
        let ood = matrix(&[&[1.0, -1.0], &[2.0, -3.0]]);
        let r = bhl(&id, &ood, false).unwrap();
        let d = r.detector(2).unwrap();
        assert_eq!(metrics::auroc(&d.split(&id, &ood).unwrap()), r.oriented_auroc);
    }

    #[test]
    fn file_round_trips_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-5.0..0.0)).collect()).collect();
        let labels: Vec<i32> = (0..40).map(|i| i % 2).collect();
        let m = EnergyMatrix::from_rows(&rows).unwrap().with_class_labels(labels).unwrap();
        let vae_cfg = VaeConfig { epochs: 2, ..VaeConfig::default() };
        let dets = vec![
            Detector::ebo_logits(3),
            Detector::layer_energy(1, 3, Orientation::LOW_IS_ID).unwrap(),
            Detector::msp(),
            fit_md(&m).unwrap(),
            fit_knn(&m, 4).unwrap(),
            fit_vae(&m, &vae_cfg).unwrap(),
        ];
        for d in &dets {
            let back = Detector::from_bytes(&d.to_bytes()).unwrap();
            assert_eq!(&back, d);
            if d.kind() != DetectorKind::Msp {
                for r in m.rows() {
                    assert_eq!(back.score(r).unwrap().to_bits(), d.score(r).unwrap().to_bits());
                }
                assert!(matches!(back.score(&[0.0; 4]), Err(DetectorError::Dim { .. })));
            }
        }
        let mut bad = dets[3].to_bytes();
        bad[0] = b'Z';
        assert!(matches!(Detector::from_bytes(&bad), Err(DetectorError::Format(FormatError::BadMagic { .. }))));
        let good = dets[4].to_bytes();
        assert!(matches!(
            Detector::from_bytes(&good[..good.len() - 1]),
            Err(DetectorError::Format(FormatError::Truncated { .. }))
        ));
        let mut kind = good.clone();
        kind[6] = 9;
        assert!(Detector::from_bytes(&kind).is_err());
    }

    #[test]
    fn vae_constant_data_reconstructs() {
        let rows = vec![vec![-3.0, -2.0, -1.5]; 256];
        let m = EnergyMatrix::from_rows(&rows).unwrap();
        let cfg = VaeConfig {
            epochs: 1000,
            ..VaeConfig::default()
        };
        let d = fit_vae(&m, &cfg).unwrap();
        let s = d.score(&rows[0]).unwrap();
        assert!(s < 1e-2, "score {s}");
        assert_eq!(s.to_bits(), d.score(&rows[0]).unwrap().to_bits());
        assert!(fit_vae(&EnergyMatrix::from_rows(&rows[..10]).unwrap(), &VaeConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn knn_full_k_is_mean_distance(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..30),
            q in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let m = EnergyMatrix::from_rows(&pts).unwrap();
            let d = fit_knn(&m, pts.len()).unwrap();
            let mut dists: Vec<f64> = pts.iter().map(|p| sq_dist(p, &q).sqrt()).collect();
            dists.sort_by(f64::total_cmp);
            let mean = dists.iter().sum::<f64>() / pts.len() as f64;
            let s = d.score(&q).unwrap();
            prop_assert!((s - mean).abs() <= 1e-12 * mean.max(1.0));
        }

        #[test]
        fn md_identity_is_euclidean(
            means in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..5),
            q in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let d = identity_md(means.clone());
            let want = means.iter().map(|m| sq_dist(m, &q).sqrt()).fold(f64::INFINITY, f64::min);
            prop_assert!((d.score(&q).unwrap() - want).abs() <= 1e-9);
        }

        #[test]
        fn bhl_dominates_every_layer(
            id in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 1..20),
            ood in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 1..20),
        ) {
            let conv = |v: &Vec<Vec<i32>>| EnergyMatrix::from_rows(
                &v.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect::<Vec<_>>()).unwrap();
            let (id, ood) = (conv(&id), conv(&ood));
            let r = bhl(&id, &ood, true).unwrap();
            for j in 0..3 {
                let split = ScoredSplit::new(id.column(j), ood.column(j)).unwrap();
                prop_assert!(r.oriented_auroc >= metrics::auroc(&split));
                prop_assert!(r.oriented_auroc >= metrics::auroc(&split.negated()));
            }
            let ebo = Detector::ebo_logits(3);
            let ebo_auc = metrics::auroc(&ebo.split(&id, &ood).unwrap());
            prop_assert!(r.oriented_auroc >= ebo_auc);
        }
    }
}
