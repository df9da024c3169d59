//! Cross-entropy training with an optional energy hinge on every selected
//! tap, using seen outliers as negatives.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::SyntheticTask;
use crate::energy::{self, Temperature};
use crate::metrics;
use crate::nn::{self, Batch, EnergyHinge, ForwardTrace, LayeredNet, LossSpec, NnError, Sgd};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} energies are empty")]
    EmptyBatch(&'static str),
    #[error("layer set: {0}")]
    LayerSet(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("task has no seen outliers; energy regularisation needs them")]
    NoOutliers,
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: NnError },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `(max(0, e − m_in)², d/de)`.
#[inline]
pub fn hinge_id(e: f64, m_in: f64) -> (f64, f64) {
    let h = (e - m_in).max(0.0);
    (h * h, 2.0 * h)
}

/// `(max(0, m_out − e)², d/de)`.
#[inline]
pub fn hinge_ood(e: f64, m_out: f64) -> (f64, f64) {
    let h = (m_out - e).max(0.0);
    (h * h, -2.0 * h)
}

/// Energy hinge of one layer: `mean_id max(0, E − m_in)² + mean_ood max(0, m_out − E)²`.
pub fn energy_loss_layer(
    id_energies: &[f64],
    ood_energies: &[f64],
    m_in: f64,
    m_out: f64,
) -> Result<f64, TrainError> {
    if id_energies.is_empty() {
        return Err(TrainError::EmptyBatch("id"));
    }
    if ood_energies.is_empty() {
        return Err(TrainError::EmptyBatch("ood"));
    }
    let id = id_energies.iter().map(|&e| hinge_id(e, m_in).0).sum::<f64>() / id_energies.len() as f64;
    let ood =
        ood_energies.iter().map(|&e| hinge_ood(e, m_out).0).sum::<f64>() / ood_energies.len() as f64;
    Ok(id + ood)
}

/// A set of tap indices (hidden layers `0..H`, logits `H`), stored sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(mut layers: Vec<usize>) -> Result<Self, TrainError> {
        if layers.is_empty() {
            return Err(TrainError::LayerSet("empty".into()));
        }
        layers.sort_unstable();
        if let Some(w) = layers.windows(2).find(|w| w[0] == w[1]) {
            return Err(TrainError::LayerSet(format!("layer {} repeated", w[0])));
        }
        Ok(LayerSet(layers))
    }

    /// Taps `0..n`.
    pub fn all(n: usize) -> Self {
        LayerSet((0..n).collect())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

fn tap_energies<T: Scalar>(traces: &[ForwardTrace<T>], l: usize) -> Result<Vec<f64>, TrainError> {
    traces
        .iter()
        .map(|t| {
            let act = t.tap(l).ok_or(NnError::Layer {
                layer: l,
                taps: t.tap_count(),
            })?;
            Ok(energy::free_energy(act, Temperature::ONE).map_err(NnError::from)?)
        })
        .collect()
}

/// `Σ_{l ∈ layers} energy_loss_layer(l)` over forward traces of an ID and
/// an outlier batch.
pub fn rebo_loss<T: Scalar>(
    id_traces: &[ForwardTrace<T>],
    ood_traces: &[ForwardTrace<T>],
    layers: &LayerSet,
    m_in: f64,
    m_out: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for &l in layers.iter() {
        total += energy_loss_layer(
            &tap_energies(id_traces, l)?,
            &tap_energies(ood_traces, l)?,
            m_in,
            m_out,
        )?;
    }
    Ok(total)
}

/// Optimiser and batching settings shared by both training modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Hidden layer widths; input and output sizes come from the task.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            hidden: vec![16, 16],
            epochs: 100,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Margins {
    Fixed { m_in: f64, m_out: f64 },
    /// 10th / 90th percentile of the penalised energies of the untrained
    /// net, pooled over train-ID and seen outliers.
    Calibrated,
}

impl Margins {
    /// The large-network margins `m_in = −25`, `m_out = −7`.
    pub const REFERENCE: Margins = Margins::Fixed {
        m_in: -25.0,
        m_out: -7.0,
    };
}

/// Energy regularisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct REboConfig {
    pub margins: Margins,
    /// Weight of the hinge sum relative to cross entropy.
    pub lambda: f64,
    /// Penalised taps; `None` means every hidden layer and the logits.
    pub layers: Option<LayerSet>,
    pub schedule: Schedule,
}

impl REboConfig {
    pub fn new(schedule: Schedule) -> Self {
        REboConfig {
            margins: Margins::REFERENCE,
            lambda: 0.1,
            layers: None,
            schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainSpec {
    CrossEntropy(Schedule),
    Rebo(REboConfig),
}

impl TrainSpec {
    pub fn schedule(&self) -> &Schedule {
        match self {
            TrainSpec::CrossEntropy(s) => s,
            TrainSpec::Rebo(c) => &c.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch cross entropy over the epoch.
    pub ce_loss: f64,
    /// Per-tap hinge over the full train-ID / seen-outlier sets at the end of
    /// the epoch; empty for cross-entropy training.
    pub energy_loss: Vec<f64>,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Resolved margins, when regularised.
    pub margins: Option<(f64, f64)>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// `epoch,ce_loss,energy_loss_layer_0..,train_acc`.
    pub fn to_csv(&self) -> String {
        let taps = self.epochs.first().map_or(0, |e| e.energy_loss.len());
        let mut out = String::from("epoch,ce_loss");
        for l in 0..taps {
            let _ = write!(out, ",energy_loss_layer_{l}");
        }
        out.push_str(",train_acc\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{}", e.epoch, e.ce_loss);
            for v in &e.energy_loss {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", e.train_acc);
        }
        out
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn forward_all<T: Scalar>(net: &LayeredNet<T>, xs: &[Vec<T>]) -> Result<Vec<ForwardTrace<T>>, NnError> {
    xs.iter().map(|x| net.forward(x)).collect()
}

fn cast_rows<T: Scalar>(rows: &[Vec<f64>]) -> Vec<Vec<T>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| T::from_f64_lossy(v)).collect())
        .collect()
}

/// Train a classifier `d_0 → hidden… → C` on the task's train-ID split.
///
/// The ID batch order depends only on the seed, so cross-entropy and
/// regularised runs with the same seed see identical ID batches; outlier
/// batches come from a separate stream.
pub fn train<T: Scalar>(
    task: &SyntheticTask,
    spec: &TrainSpec,
) -> Result<(LayeredNet<T>, TrainLog), TrainError> {
    let sched = spec.schedule();
    if sched.epochs == 0 || sched.batch_size == 0 {
        return Err(TrainError::Config("epochs and batch_size must be positive".into()));
    }
    if !(sched.lr.is_finite() && sched.lr >= 0.0 && sched.momentum.is_finite()) {
        return Err(TrainError::Config("lr and momentum must be finite, lr ≥ 0".into()));
    }
    let mut dims = vec![task.spec.dim];
    dims.extend_from_slice(&sched.hidden);
    dims.push(task.spec.classes);

    let mut init_rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut id_rng = ChaCha8Rng::seed_from_u64(sched.seed);
    id_rng.set_stream(1);
    let mut ood_rng = ChaCha8Rng::seed_from_u64(sched.seed);
    ood_rng.set_stream(2);

    let mut net = LayeredNet::<T>::new_random(&dims, &mut init_rng)?;
    let train_x: Vec<Vec<T>> = cast_rows(&task.train_id.x);
    let train_y = &task.train_id.y;
    let ood_x: Vec<Vec<T>> = cast_rows(&task.seen_ood);

    let (loss_spec, margins) = match spec {
        TrainSpec::CrossEntropy(_) => (LossSpec::cross_entropy(), None),
        TrainSpec::Rebo(cfg) => {
            if ood_x.is_empty() {
                return Err(TrainError::NoOutliers);
            }
            if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
                return Err(TrainError::Config(format!("lambda must be ≥ 0, got {}", cfg.lambda)));
            }
            let layers = cfg.layers.clone().unwrap_or_else(|| LayerSet::all(net.tap_count()));
            if let Some(&bad) = layers.iter().find(|&&l| l >= net.tap_count()) {
                return Err(TrainError::LayerSet(format!(
                    "layer {bad} out of range for {} taps",
                    net.tap_count()
                )));
            }
            let (m_in, m_out) = match cfg.margins {
                Margins::Fixed { m_in, m_out } => (m_in, m_out),
                Margins::Calibrated => {
                    let mut pooled = Vec::new();
                    let id_tr = forward_all(&net, &train_x)?;
                    let ood_tr = forward_all(&net, &ood_x)?;
                    for &l in layers.iter() {
                        pooled.extend(tap_energies(&id_tr, l)?);
                        pooled.extend(tap_energies(&ood_tr, l)?);
                    }
                    pooled.sort_by(f64::total_cmp);
                    (percentile(&pooled, 0.1), percentile(&pooled, 0.9))
                }
            };
            if !(m_in.is_finite() && m_out.is_finite()) {
                return Err(TrainError::Config("margins must be finite".into()));
            }
            let hinge = EnergyHinge {
                lambda: cfg.lambda,
                m_in,
                m_out,
                layers,
            };
            (LossSpec::with_hinge(1.0, hinge), Some((m_in, m_out)))
        }
    };

    let mut opt = Sgd::new(&net, sched.lr, sched.momentum);
    let mut log = TrainLog {
        margins,
        epochs: Vec::with_capacity(sched.epochs),
    };
    let mut id_order: Vec<usize> = (0..train_x.len()).collect();
    let mut ood_order: Vec<usize> = (0..ood_x.len()).collect();
    let mut ood_cursor = ood_order.len();

    for epoch in 1..=sched.epochs {
        id_order.shuffle(&mut id_rng);
        let mut ce_sum = 0.0;
        for chunk in id_order.chunks(sched.batch_size) {
            let mut batch = Batch {
                id: chunk.iter().map(|&i| train_x[i].as_slice()).collect(),
                labels: chunk.iter().map(|&i| train_y[i]).collect(),
                ood: Vec::new(),
            };
            if loss_spec.hinge.is_some() {
                for _ in 0..sched.batch_size.min(ood_x.len()) {
                    if ood_cursor == ood_order.len() {
                        ood_order.shuffle(&mut ood_rng);
                        ood_cursor = 0;
                    }
                    batch.ood.push(ood_x[ood_order[ood_cursor]].as_slice());
                    ood_cursor += 1;
                }
            }
            let (parts, grads) = nn::grad(&net, &batch, &loss_spec)
                .map_err(|source| TrainError::Diverged { epoch, source })?;
            ce_sum += parts.ce * chunk.len() as f64;
            opt.step(&mut net, &grads);
        }

        let id_tr = forward_all(&net, &train_x).map_err(|source| TrainError::Diverged { epoch, source })?;
        let logits: Vec<Vec<T>> = id_tr.iter().map(|t| t.logits.clone()).collect();
        let train_acc = metrics::accuracy(&logits, train_y).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut energy_loss = Vec::new();
        if let Some((m_in, m_out)) = margins {
            let ood_tr = forward_all(&net, &ood_x).map_err(|source| TrainError::Diverged { epoch, source })?;
            for l in 0..net.tap_count() {
                energy_loss.push(energy_loss_layer(
                    &tap_energies(&id_tr, l)?,
                    &tap_energies(&ood_tr, l)?,
                    m_in,
                    m_out,
                )?);
            }
        }
        let ce_loss = ce_sum / train_x.len() as f64;
        if !ce_loss.is_finite() || energy_loss.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                source: NnError::NonFinite,
            });
        }
        log::debug!("epoch {epoch}: ce {ce_loss:.5} acc {train_acc:.4} energy {energy_loss:?}");
        log.epochs.push(EpochLog {
            epoch,
            ce_loss,
            energy_loss,
            train_acc,
        });
    }
    Ok((net, log))
}
