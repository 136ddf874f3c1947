//! Feed-forward encoder mapping feature vectors to unit-norm embeddings,
//! plus the trainable proxy table (row 0 is the none-class proxy c_0, rows
//! 1..K the class proxies). Proxies are stored raw and normalized on read,
//! keeping the optimizer unconstrained while every consumer sees unit
//! vectors. The same network exists in two forms: a plain `f64` forward
//! pass for inference, and [`NetGraph`], which lays the identical
//! computation onto a [`Tape`] for training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// A unit-norm real vector: an embedding f(x), a normalized proxy, or a
/// renormalized mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that must already have unit norm (within 1e-9).
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = l2(&v);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!(
                "embedding norm {norm} deviates from 1 by more than 1e-9"
            )));
        }
        Ok(Embedding(v))
    }

    /// Scales a raw vector onto the unit sphere.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let norm = l2(&v);
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Domain(format!(
                "cannot normalize a vector of norm {norm}"
            )));
        }
        Ok(Embedding(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Shape of the flat parameter vector: per layer a row-major weight matrix
/// then a bias, followed by the (K+1) x d_emb proxy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    /// Layer sizes from input to embedding, e.g. `[32, 64, 64, 32]`.
    pub dims: Vec<usize>,
    /// K: number of predefined classes (the proxy table has K+1 rows).
    pub num_classes: usize,
}

impl ParamLayout {
    pub fn new(dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Usage(format!(
                "encoder needs input and embedding dims, got {} entries",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Usage("every layer dim must be >= 1".into()));
        }
        if num_classes == 0 {
            return Err(Error::Usage("class count K must be >= 1".into()));
        }
        Ok(ParamLayout { dims, num_classes })
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_emb(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Sizes of the hidden activations (dropout applies to these only).
    pub fn hidden_dims(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_base(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.dims[l + 1] * self.dims[l] + self.dims[l + 1])
            .sum()
    }

    fn weight_row(&self, layer: usize, row: usize) -> usize {
        self.layer_base(layer) + row * self.dims[layer]
    }

    fn bias(&self, layer: usize) -> usize {
        self.layer_base(layer) + self.dims[layer + 1] * self.dims[layer]
    }

    fn proxy_base(&self) -> usize {
        self.layer_base(self.n_layers())
    }

    pub(crate) fn proxy_row(&self, i: usize) -> usize {
        self.proxy_base() + i * self.d_emb()
    }

    pub fn total_params(&self) -> usize {
        self.proxy_base() + (self.num_classes + 1) * self.d_emb()
    }
}

/// Encoder weights, biases, and the raw proxy table in one flat vector,
/// shaped by [`ParamLayout`]. Gradients align with `values` element for
/// element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

/// Inverted-dropout masks for the hidden activations: entries are 0
/// (dropped) or 1/(1-rate) (kept), so the masked activation is unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

/// Fan-in-scaled uniform weights, zero biases, unit-sphere proxies.
/// Deterministic given the seed.
pub fn init_params(rng_seed: u64, dims: &[usize], num_classes: usize) -> Result<ModelParams> {
    let layout = ParamLayout::new(dims.to_vec(), num_classes)?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(rng_seed);
    let mut values = vec![0.0; layout.total_params()];
    for layer in 0..layout.n_layers() {
        let (d_in, d_out) = (layout.dims[layer], layout.dims[layer + 1]);
        let bound = 1.0 / (d_in as f64).sqrt();
        let base = layout.layer_base(layer);
        for w in &mut values[base..base + d_out * d_in] {
            *w = rng.gen_range(-bound..bound);
        }
        // Biases stay zero.
    }
    let d_emb = layout.d_emb();
    for i in 0..=num_classes {
        let row: Vec<f64> = (0..d_emb).map(|_| rng.sample(StandardNormal)).collect();
        let unit = Embedding::normalize(row)?;
        let base = layout.proxy_row(i);
        values[base..base + d_emb].copy_from_slice(unit.values());
    }
    Ok(ModelParams { layout, values })
}

/// Normalized row `i` of the proxy table; row 0 is c_0.
pub fn proxy(params: &ModelParams, i: usize) -> Result<Embedding> {
    if i > params.layout.num_classes {
        return Err(Error::Usage(format!(
            "proxy index {i} out of range 0..={}",
            params.layout.num_classes
        )));
    }
    let base = params.layout.proxy_row(i);
    let row = params.values[base..base + params.layout.d_emb()].to_vec();
    Embedding::normalize(row)
}

/// Samples one inverted-dropout mask per hidden layer. A rate of 0 returns
/// all-ones without consuming randomness, so dropout-free runs share RNG
/// streams with mask-free ones.
pub fn sample_mask<R: Rng>(rng: &mut R, rate: f64, hidden_dims: &[usize]) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Usage(format!(
            "dropout rate must lie in [0,1), got {rate}"
        )));
    }
    let layers = hidden_dims
        .iter()
        .map(|&d| {
            if rate == 0.0 {
                vec![1.0; d]
            } else {
                let keep = 1.0 / (1.0 - rate);
                (0..d)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect()
            }
        })
        .collect();
    Ok(DropoutMask { layers })
}

fn check_forward_shapes(
    features: &[f64],
    params: &ModelParams,
    mask: Option<&DropoutMask>,
) -> Result<()> {
    if features.len() != params.layout.d_in() {
        return Err(Error::Usage(format!(
            "feature length {} does not match d_in {}",
            features.len(),
            params.layout.d_in()
        )));
    }
    if let Some(m) = mask {
        let hidden = params.layout.hidden_dims();
        if m.layers.len() != hidden.len()
            || m.layers.iter().zip(hidden).any(|(l, &d)| l.len() != d)
        {
            return Err(Error::Usage("dropout mask does not match hidden dims".into()));
        }
    }
    Ok(())
}

/// One forward pass: affine layers with tanh on hidden activations (masked
/// when a dropout mask is given), linear final layer, then L2
/// normalization. `mask = None` is inference mode.
pub fn encode_pair(
    features: &[f64],
    params: &ModelParams,
    mask: Option<&DropoutMask>,
) -> Result<Embedding> {
    check_forward_shapes(features, params, mask)?;
    let layout = &params.layout;
    let mut h = features.to_vec();
    for layer in 0..layout.n_layers() {
        let (d_in, d_out) = (layout.dims[layer], layout.dims[layer + 1]);
        let bias = layout.bias(layer);
        let mut z = vec![0.0; d_out];
        for (r, zr) in z.iter_mut().enumerate() {
            let row = layout.weight_row(layer, r);
            let mut acc = 0.0;
            for k in 0..d_in {
                acc += params.values[row + k] * h[k];
            }
            *zr = acc + params.values[bias + r];
        }
        if layer + 1 < layout.n_layers() {
            for zr in &mut z {
                *zr = zr.tanh();
            }
            if let Some(m) = mask {
                for (zr, &mk) in z.iter_mut().zip(&m.layers[layer]) {
                    *zr *= mk;
                }
            }
        }
        h = z;
    }
    Embedding::normalize(h)
}

/// Inference-time decision rule on an existing embedding: class i is
/// predicted iff c_i . f > c_0 . f, strictly (ties excluded).
pub fn predict_embedding(f: &Embedding, params: &ModelParams) -> Result<Vec<usize>> {
    let c0 = proxy(params, 0)?;
    let base = c0.dot(f);
    let mut out = Vec::new();
    for i in 1..=params.layout.num_classes {
        if proxy(params, i)?.dot(f) > base {
            out.push(i);
        }
    }
    Ok(out)
}

/// Predicted class set for a raw feature vector (no dropout).
pub fn predict(features: &[f64], params: &ModelParams) -> Result<Vec<usize>> {
    let f = encode_pair(features, params, None)?;
    predict_embedding(&f, params)
}

/// The encoder and proxy table bound onto a tape as parameter nodes, with
/// the constants (basis vectors for assembling affine outputs, tanh
/// coefficients) cached so repeated forward passes share them.
pub struct NetGraph {
    layout: ParamLayout,
    /// Per layer: one parameter node per weight row, plus the bias node.
    rows: Vec<Vec<NodeId>>,
    biases: Vec<NodeId>,
    /// Normalized proxy nodes, index 0..=K.
    proxies: Vec<NodeId>,
    /// Basis constants e_1..e_D per distinct output dim D.
    basis: Vec<(usize, Vec<NodeId>)>,
    ones: Vec<(usize, NodeId)>,
    c_two: NodeId,
    c_neg_two: NodeId,
    c_neg_one: NodeId,
}

impl NetGraph {
    /// Registers every parameter slice on the tape. The tape must have been
    /// created with `Tape::new(params.layout.total_params())`.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> NetGraph {
        let layout = params.layout.clone();
        let mut rows = Vec::with_capacity(layout.n_layers());
        let mut biases = Vec::with_capacity(layout.n_layers());
        for layer in 0..layout.n_layers() {
            let (d_in, d_out) = (layout.dims[layer], layout.dims[layer + 1]);
            rows.push(
                (0..d_out)
                    .map(|r| {
                        let off = layout.weight_row(layer, r);
                        tape.param(off, &params.values[off..off + d_in])
                    })
                    .collect(),
            );
            let boff = layout.bias(layer);
            biases.push(tape.param(boff, &params.values[boff..boff + d_out]));
        }
        let d_emb = layout.d_emb();
        let proxies = (0..=layout.num_classes)
            .map(|i| {
                let off = layout.proxy_row(i);
                let raw = tape.param(off, &params.values[off..off + d_emb]);
                tape.l2norm(raw)
            })
            .collect();

        let mut out_dims: Vec<usize> = layout.dims[1..].to_vec();
        out_dims.sort_unstable();
        out_dims.dedup();
        let basis = out_dims
            .iter()
            .map(|&d| {
                let vecs = (0..d)
                    .map(|k| {
                        let mut e = vec![0.0; d];
                        e[k] = 1.0;
                        tape.constant(&e)
                    })
                    .collect();
                (d, vecs)
            })
            .collect();
        let ones = out_dims.iter().map(|&d| (d, tape.constant(&vec![1.0; d]))).collect();

        NetGraph {
            layout,
            rows,
            biases,
            proxies,
            basis,
            ones,
            c_two: tape.constant_scalar(2.0),
            c_neg_two: tape.constant_scalar(-2.0),
            c_neg_one: tape.constant_scalar(-1.0),
        }
    }

    /// Normalized proxy node for class index 0..=K.
    pub fn proxy(&self, i: usize) -> NodeId {
        self.proxies[i]
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    fn basis_for(&self, d: usize) -> &[NodeId] {
        &self.basis.iter().find(|(dim, _)| *dim == d).unwrap().1
    }

    fn ones_for(&self, d: usize) -> NodeId {
        self.ones.iter().find(|(dim, _)| *dim == d).unwrap().1
    }

    /// Assembles scalar nodes into one vector node: sum of z_k * e_k.
    fn stack(&self, tape: &mut Tape, zs: &[NodeId]) -> NodeId {
        let basis = self.basis_for(zs.len());
        let mut acc = tape.scale(zs[0], basis[0]);
        for (k, &z) in zs.iter().enumerate().skip(1) {
            let term = tape.scale(z, basis[k]);
            acc = tape.add(acc, term);
        }
        acc
    }

    /// tanh(z) = 2 exp(-softplus(-2z)) - 1, elementwise; composed from the
    /// tape's op set without overflow for any z.
    fn tanh_vec(&self, tape: &mut Tape, z: NodeId, d: usize) -> NodeId {
        let m2 = tape.scale(self.c_neg_two, z);
        let sp = tape.softplus(m2);
        let nsp = tape.scale(self.c_neg_one, sp);
        let e = tape.exp(nsp);
        let te = tape.scale(self.c_two, e);
        let ones = self.ones_for(d);
        tape.sub(te, ones)
    }

    /// Forward pass on the tape; mirrors [`encode_pair`] exactly.
    pub fn encode(&self, tape: &mut Tape, features: &[f64], mask: Option<&DropoutMask>) -> NodeId {
        assert_eq!(features.len(), self.layout.d_in(), "feature length mismatch");
        let mut h = tape.constant(features);
        for layer in 0..self.layout.n_layers() {
            let d_out = self.layout.dims[layer + 1];
            let zs: Vec<NodeId> = self.rows[layer].iter().map(|&r| tape.dot(r, h)).collect();
            let z = self.stack(tape, &zs);
            let mut a = tape.add(z, self.biases[layer]);
            if layer + 1 < self.layout.n_layers() {
                a = self.tanh_vec(tape, a, d_out);
                if let Some(m) = mask {
                    let mnode = tape.constant(&m.layers[layer]);
                    a = tape.mul(a, mnode);
                }
            }
            h = a;
        }
        tape.l2norm(h)
    }
}
