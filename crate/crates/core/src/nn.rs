//! Small fully connected networks with exact reverse-mode gradients.
//!
//! [`LayeredNet`] is a ReLU multilayer perceptron whose forward pass keeps
//! every post-activation hidden vector, so that per-layer energies can be
//! read off and penalised. [`Vae`] pairs two such nets as encoder and decoder.

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::energy::{self, ActivationVector, EnergyError, LayerTap, Temperature};
use crate::training::{hinge_id, hinge_ood, LayerSet};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid layer dims {0:?}: need at least two positive sizes")]
    BadDims(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("parameter vector has {actual} entries, net has {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("layer {layer} is not tapped by this net ({taps} taps)")]
    Layer { layer: usize, taps: usize },
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feedforward net `d_0 → d_1 → … → d_K` with ReLU after every layer
/// except the last.
///
/// Weights are stored row-major as `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNet<T> {
    dims: Vec<usize>,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

/// Gradients with the same shapes as the net they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

/// Output of [`LayeredNet::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// Post-ReLU activations of the hidden layers, in depth order.
    pub hidden: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<(), NnError> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NnError::BadDims(dims.to_vec()));
    }
    Ok(())
}

impl<T: Scalar> LayeredNet<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        check_dims(dims)?;
        let weights = dims.windows(2).map(|w| vec![T::zero(); w[0] * w[1]]).collect();
        let biases = dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
        Ok(LayeredNet {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Weights uniform in `(−s, s)` with `s = sqrt(6 / (d_in + d_out))`, biases zero.
    pub fn new_random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims)?;
        for (k, w) in net.weights.iter_mut().enumerate() {
            let s = (6.0 / (dims[k] + dims[k + 1]) as f64).sqrt();
            for v in w.iter_mut() {
                *v = T::from_f64_lossy(rng.random_range(-s..s));
            }
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn hidden_count(&self) -> usize {
        self.depth() - 1
    }

    /// Hidden layers plus the logits.
    pub fn tap_count(&self) -> usize {
        self.depth()
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[T] {
        &self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [T] {
        &mut self.biases[layer]
    }

    /// Parameters in declaration order: per layer, weights then biases.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<(), NnError> {
        if p.len() != self.param_count() {
            return Err(NnError::ParamCount {
                expected: self.param_count(),
                actual: p.len(),
            });
        }
        let mut it = p.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    /// Same net with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> LayeredNet<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossless())).collect();
        LayeredNet {
            dims: self.dims.clone(),
            weights: self.weights.iter().map(conv).collect(),
            biases: self.biases.iter().map(conv).collect(),
        }
    }

    fn affine(&self, k: usize, input: &[T]) -> Vec<T> {
        let n_in = self.dims[k];
        self.weights[k]
            .chunks_exact(n_in)
            .zip(&self.biases[k])
            .map(|(row, &b)| row.iter().zip(input).fold(b, |acc, (&w, &x)| acc + w * x))
            .collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardTrace<T>, NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::Dim {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut hidden = Vec::with_capacity(self.hidden_count());
        let mut current = x.to_vec();
        for k in 0..self.depth() {
            let mut z = self.affine(k, &current);
            if k + 1 == self.depth() {
                return Ok(ForwardTrace { hidden, logits: z });
            }
            z.iter_mut().for_each(|v| *v = v.max(T::zero()));
            hidden.push(z.clone());
            current = z;
        }
        unreachable!("depth >= 1")
    }

    /// Logits only.
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        Ok(self.forward(x)?.logits)
    }

    /// Accumulates parameter gradients for one sample into `grads` and
    /// returns the gradient with respect to the input.
    ///
    /// `out_grad` is the loss gradient at the logits; `hidden_grad`, if
    /// given, adds direct loss gradients at each post-ReLU hidden output.
    pub fn backward(
        &self,
        x: &[T],
        trace: &ForwardTrace<T>,
        out_grad: &[T],
        hidden_grad: Option<&[Vec<T>]>,
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        let mut g = out_grad.to_vec();
        for k in (0..self.depth()).rev() {
            if k + 1 < self.depth() {
                // ReLU: post-activation is positive exactly where the pre-activation is.
                for (gi, &a) in g.iter_mut().zip(&trace.hidden[k]) {
                    if a <= T::zero() {
                        *gi = T::zero();
                    }
                }
            }
            let input: &[T] = if k == 0 { x } else { &trace.hidden[k - 1] };
            let n_in = self.dims[k];
            let mut g_prev = vec![T::zero(); n_in];
            for (o, &go) in g.iter().enumerate() {
                grads.biases[k][o] += go;
                let row = &self.weights[k][o * n_in..(o + 1) * n_in];
                let grow = &mut grads.weights[k][o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += go * input[i];
                    g_prev[i] += row[i] * go;
                }
            }
            if k > 0 {
                if let Some(hg) = hidden_grad {
                    for (gp, &h) in g_prev.iter_mut().zip(&hg[k - 1]) {
                        *gp += h;
                    }
                }
            }
            g = g_prev;
        }
        g
    }

    const MAGIC: [u8; 4] = *b"LIRN";
    const VERSION: u16 = 1;

    /// Checkpoint layout: magic `LIRN`, version u16, dims count u32, dims
    /// as u32, then every parameter as f64 in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&Self::MAGIC);
        w.u16(Self::VERSION);
        w.u32(self.dims.len() as u32);
        for &d in &self.dims {
            w.u32(d as u32);
        }
        w.f64s(self.params().into_iter().map(|x| x.to_f64_lossless()));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader::new(bytes);
        let net = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(net)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self, NnError> {
        r.magic(Self::MAGIC)?;
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(FormatError::Version(version).into());
        }
        let count = r.u32()? as usize;
        r.require(count.saturating_mul(4))?;
        let dims = (0..count)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let mut net = Self::zeros(&dims)?;
        let p = r.f64s(net.param_count())?;
        let p: Vec<T> = p.into_iter().map(T::from_f64_lossy).collect();
        net.set_params(&p)?;
        Ok(net)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &LayeredNet<T>) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    /// Flattened in the same order as [`LayeredNet::params`].
    pub fn flat(&self) -> Vec<T> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }
}

impl<T: Scalar> ForwardTrace<T> {
    /// Activations of tap `l`: hidden layers first, then the logits.
    pub fn tap(&self, l: usize) -> Option<&[T]> {
        if l < self.hidden.len() {
            Some(&self.hidden[l])
        } else if l == self.hidden.len() {
            Some(&self.logits)
        } else {
            None
        }
    }

    pub fn tap_count(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn activation_vectors(&self) -> Result<Vec<ActivationVector<T>>, EnergyError> {
        self.hidden
            .iter()
            .enumerate()
            .map(|(l, a)| ActivationVector::new(a.clone(), LayerTap::Hidden(l)))
            .chain(std::iter::once(ActivationVector::new(
                self.logits.clone(),
                LayerTap::Logits,
            )))
            .collect()
    }

    /// Free energy (t = 1) of every tap.
    pub fn energies(&self) -> Result<Vec<f64>, EnergyError> {
        energy::energy_vector(&self.activation_vectors()?, Temperature::ONE)
    }
}

/// Energy hinge applied at a set of taps.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyHinge {
    pub lambda: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub layers: LayerSet,
}

/// Classifier objective: `ce_weight · L_CE + λ · Σ_l L_energy,l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub ce_weight: f64,
    pub hinge: Option<EnergyHinge>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            ce_weight: 1.0,
            hinge: None,
        }
    }

    pub fn with_hinge(ce_weight: f64, hinge: EnergyHinge) -> Self {
        LossSpec {
            ce_weight,
            hinge: Some(hinge),
        }
    }
}

/// One optimisation step's worth of data.
#[derive(Debug, Clone)]
pub struct Batch<'a, T> {
    pub id: Vec<&'a [T]>,
    pub labels: Vec<usize>,
    /// Seen outliers; only read when the objective has an energy hinge.
    pub ood: Vec<&'a [T]>,
}

/// Loss value of a batch, split by term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    /// Mean cross entropy (unweighted).
    pub ce: f64,
    /// Unweighted hinge sum over the penalised taps.
    pub energy: f64,
}

fn to_t<T: Scalar>(v: impl IntoIterator<Item = f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64_lossy).collect()
}

/// Mean batch loss and its exact gradient.
pub fn grad<T: Scalar>(
    net: &LayeredNet<T>,
    batch: &Batch<'_, T>,
    spec: &LossSpec,
) -> Result<(LossParts, Gradients<T>), NnError> {
    if batch.id.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if batch.labels.len() != batch.id.len() {
        return Err(NnError::Dim {
            expected: batch.id.len(),
            actual: batch.labels.len(),
        });
    }
    let classes = net.output_dim();
    if let Some(h) = &spec.hinge {
        if batch.ood.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if let Some(&bad) = h.layers.iter().find(|&&l| l >= net.tap_count()) {
            return Err(NnError::Layer {
                layer: bad,
                taps: net.tap_count(),
            });
        }
    }

    let mut grads = Gradients::zeros_like(net);
    let mut parts = LossParts::default();
    let n_id = batch.id.len() as f64;

    for (x, &y) in batch.id.iter().zip(&batch.labels) {
        if y >= classes {
            return Err(NnError::Label { label: y, classes });
        }
        let trace = net.forward(x)?;
        let p = energy::softmax(&trace.logits, Temperature::ONE)?;
        let lse = -energy::free_energy(&trace.logits, Temperature::ONE)?;
        parts.ce += (lse - trace.logits[y].to_f64_lossless()) / n_id;
        let mut out: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| spec.ce_weight * (pc - if c == y { 1.0 } else { 0.0 }) / n_id)
            .collect();
        let mut hidden: Option<Vec<Vec<T>>> = None;
        if let Some(h) = &spec.hinge {
            let (loss, hg) = hinge_taps(&trace, h, &mut out, true, n_id)?;
            parts.energy += loss;
            hidden = Some(hg);
        }
        net.backward(x, &trace, &to_t(out), hidden.as_deref(), &mut grads);
    }

    if let Some(h) = &spec.hinge {
        let n_ood = batch.ood.len() as f64;
        for x in &batch.ood {
            let trace = net.forward(x)?;
            let mut out = vec![0.0; classes];
            let (loss, hg) = hinge_taps(&trace, h, &mut out, false, n_ood)?;
            parts.energy += loss;
            net.backward(x, &trace, &to_t(out), Some(&hg), &mut grads);
        }
    }

    let lambda = spec.hinge.as_ref().map_or(0.0, |h| h.lambda);
    parts.total = spec.ce_weight * parts.ce + lambda * parts.energy;
    if !parts.total.is_finite() {
        return Err(NnError::NonFinite);
    }
    Ok((parts, grads))
}

/// Hinge loss of one sample over the penalised taps (already divided by
/// the batch size `n`, unweighted by λ). Writes λ-weighted gradients into
/// `out` for the logits tap and returns them for hidden taps.
fn hinge_taps<T: Scalar>(
    trace: &ForwardTrace<T>,
    h: &EnergyHinge,
    out: &mut [f64],
    is_id: bool,
    n: f64,
) -> Result<(f64, Vec<Vec<T>>), NnError> {
    let mut hidden: Vec<Vec<T>> = trace.hidden.iter().map(|a| vec![T::zero(); a.len()]).collect();
    let mut loss = 0.0;
    for &l in h.layers.iter() {
        let act = trace.tap(l).expect("layer set validated against net");
        let e = energy::free_energy(act, Temperature::ONE)?;
        let (value, slope) = if is_id {
            hinge_id(e, h.m_in)
        } else {
            hinge_ood(e, h.m_out)
        };
        loss += value / n;
        // dE/da = −softmax(a)
        let de = h.lambda * slope / n;
        let p = energy::softmax(act, Temperature::ONE)?;
        if l == trace.hidden.len() {
            out.iter_mut().zip(&p).for_each(|(o, pi)| *o -= de * pi);
        } else {
            hidden[l] = to_t(p.iter().map(|pi| -de * pi));
        }
    }
    Ok((loss, hidden))
}

/// Momentum SGD: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Gradients<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &LayeredNet<T>, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut LayeredNet<T>, grads: &Gradients<T>) {
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let params = net
            .weights
            .iter_mut()
            .zip(net.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()));
        let g = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| w.iter().chain(b));
        for ((p, v), &g) in params.zip(self.velocity.iter_mut()).zip(g) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    m: Gradients<T>,
    v: Gradients<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(net: &LayeredNet<T>, lr: f64) -> Self {
        Adam {
            lr,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut LayeredNet<T>, grads: &Gradients<T>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let params = net
            .weights
            .iter_mut()
            .zip(net.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()));
        let g = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| w.iter().chain(b));
        for (((p, m), v), &g) in params.zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(g) {
            let g = g.to_f64_lossless();
            let mf = Self::B1 * m.to_f64_lossless() + (1.0 - Self::B1) * g;
            let vf = Self::B2 * v.to_f64_lossless() + (1.0 - Self::B2) * g * g;
            *m = T::from_f64_lossy(mf);
            *v = T::from_f64_lossy(vf);
            let step = self.lr * (mf / c1) / ((vf / c2).sqrt() + Self::EPS);
            *p -= T::from_f64_lossy(step);
        }
    }
}

/// Variational autoencoder: encoder `L → h → 2·z` emitting `(μ, log σ²)`,
/// decoder `z → h → L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T> {
    pub encoder: LayeredNet<T>,
    pub decoder: LayeredNet<T>,
}

/// Gradients for both halves of a [`Vae`].
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradients<T> {
    pub encoder: Gradients<T>,
    pub decoder: Gradients<T>,
}

impl<T: Scalar> Vae<T> {
    pub fn new_random<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        latent: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Vae {
            encoder: LayeredNet::new_random(&[input, hidden, 2 * latent], rng)?,
            decoder: LayeredNet::new_random(&[latent, hidden, input], rng)?,
        })
    }

    pub fn from_parts(encoder: LayeredNet<T>, decoder: LayeredNet<T>) -> Result<Self, NnError> {
        let latent = decoder.input_dim();
        if encoder.output_dim() != 2 * latent {
            return Err(NnError::Dim {
                expected: 2 * latent,
                actual: encoder.output_dim(),
            });
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(NnError::Dim {
                expected: encoder.input_dim(),
                actual: decoder.output_dim(),
            });
        }
        Ok(Vae { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    /// Posterior mean and log-variance.
    pub fn encode(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>), NnError> {
        let mut out = self.encoder.predict(x)?;
        let logvar = out.split_off(self.latent_dim());
        Ok((out, logvar))
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        let (mu, _) = self.encode(x)?;
        self.decoder.predict(&mu)
    }

    /// Mean over the batch of `‖x − x̂‖² + kl_weight · KL(q(z|x) ‖ N(0, I))`
    /// with `z = μ + σ·ε`, and its gradient. `eps` supplies one noise row
    /// per sample.
    pub fn loss_grad(
        &self,
        batch: &[&[T]],
        eps: &[Vec<T>],
        kl_weight: f64,
    ) -> Result<(f64, VaeGradients<T>), NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if eps.len() != batch.len() {
            return Err(NnError::Dim {
                expected: batch.len(),
                actual: eps.len(),
            });
        }
        let k = self.latent_dim();
        let n = batch.len() as f64;
        let mut grads = VaeGradients {
            encoder: Gradients::zeros_like(&self.encoder),
            decoder: Gradients::zeros_like(&self.decoder),
        };
        let mut loss = 0.0;
        for (x, e) in batch.iter().zip(eps) {
            if e.len() != k {
                return Err(NnError::Dim {
                    expected: k,
                    actual: e.len(),
                });
            }
            let enc = self.encoder.forward(x)?;
            let (mu, lv) = enc.logits.split_at(k);
            let z: Vec<T> = (0..k)
                .map(|j| mu[j] + (lv[j] * T::from_f64_lossy(0.5)).exp() * e[j])
                .collect();
            let dec = self.decoder.forward(&z)?;

            let mut out_grad = Vec::with_capacity(x.len());
            for (xh, xi) in dec.logits.iter().zip(x.iter()) {
                let d = (*xh - *xi).to_f64_lossless();
                loss += d * d / n;
                out_grad.push(T::from_f64_lossy(2.0 * d / n));
            }
            let dz = self.decoder.backward(&z, &dec, &out_grad, None, &mut grads.decoder);

            let mut enc_grad = vec![T::zero(); 2 * k];
            for j in 0..k {
                let (m, l) = (mu[j].to_f64_lossless(), lv[j].to_f64_lossless());
                loss += kl_weight * 0.5 * (m * m + l.exp() - l - 1.0) / n;
                let dzj = dz[j].to_f64_lossless();
                let sigma = (0.5 * l).exp();
                enc_grad[j] = T::from_f64_lossy(dzj + kl_weight * m / n);
                enc_grad[k + j] = T::from_f64_lossy(
                    dzj * 0.5 * sigma * e[j].to_f64_lossless()
                        + kl_weight * 0.5 * (l.exp() - 1.0) / n,
                );
            }
            self.encoder.backward(x, &enc, &enc_grad, None, &mut grads.encoder);
        }
        if !loss.is_finite() {
            return Err(NnError::NonFinite);
        }
        Ok((loss, grads))
    }
}
