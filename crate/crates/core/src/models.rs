//! The embedding model and the sampler energy networks.
//!
//! The model is a two-layer MLP backbone (`input -> hidden -> embed`, ReLU in
//! between) followed by a linear identity classifier. The sampler holds two
//! energy networks: one scoring single embeddings, one scoring a candidate
//! embedding concatenated with an anchor embedding (candidate first).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_identities: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 || self.num_identities == 0 {
            return Err(invalid(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn randn(rng: &mut crate::rng::Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Weights `w` of the embedding backbone and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    tensors: [Tensor; 6],
}

/// Graph handles for a [`ModelParams`] attached to a graph.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    vars: [Var; 6],
}

pub const MODEL_KEYS: [&str; 6] = [
    "backbone.0.weight",
    "backbone.0.bias",
    "backbone.1.weight",
    "backbone.1.bias",
    "classifier.weight",
    "classifier.bias",
];

impl ModelParams {
    fn shapes(d: &ModelDims) -> [Vec<usize>; 6] {
        [
            vec![d.input_dim, d.hidden_dim],
            vec![d.hidden_dim],
            vec![d.hidden_dim, d.embed_dim],
            vec![d.embed_dim],
            vec![d.embed_dim, d.num_identities],
            vec![d.num_identities],
        ]
    }

    pub fn zeros(dims: ModelDims) -> Self {
        let tensors = Self::shapes(&dims).map(|s| Tensor::zeros(&s));
        Self { dims, tensors }
    }

    /// He-style Gaussian initialization; biases start at zero.
    pub fn init(dims: ModelDims, rng: &mut crate::rng::Rng) -> Self {
        let w1 = randn(rng, dims.input_dim, dims.hidden_dim, (2.0 / dims.input_dim as f64).sqrt());
        let w2 = randn(rng, dims.hidden_dim, dims.embed_dim, (1.0 / dims.hidden_dim as f64).sqrt());
        let wc = randn(rng, dims.embed_dim, dims.num_identities, (1.0 / dims.embed_dim as f64).sqrt());
        Self {
            dims,
            tensors: [
                w1,
                Tensor::zeros(&[dims.hidden_dim]),
                w2,
                Tensor::zeros(&[dims.embed_dim]),
                wc,
                Tensor::zeros(&[dims.num_identities]),
            ],
        }
    }

    /// Builds parameters from explicit tensors in [`MODEL_KEYS`] order.
    pub fn from_tensors(dims: ModelDims, tensors: [Tensor; 6]) -> Result<Self> {
        for (t, s) in tensors.iter().zip(Self::shapes(&dims)) {
            if t.shape() != s.as_slice() {
                return Err(invalid(format!("parameter shape {:?}, expected {s:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numerical("non-finite model parameter".into()));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tensors(&self) -> &[Tensor; 6] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        let shapes = Self::shapes(&dims);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(invalid(format!("flat model vector has {} values, expected {total}", flat.len())));
        }
        let mut off = 0;
        let tensors = shapes.map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[off..off + n].to_vec()).expect("shape");
            off += n;
            t
        });
        Ok(Self { dims, tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Adds the parameters to `g`, trainable or constant.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars = std::array::from_fn(|i| {
            let t = self.tensors[i].clone();
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        });
        ModelVars { vars }
    }

    /// `h(x, w)` for one feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.input_dim {
            return Err(Error::ShapeMismatch {
                op: "embed",
                node: 0,
                lhs: vec![x.len()],
                rhs: vec![self.dims.input_dim],
            });
        }
        let rows = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.embed_rows(&rows)?.into_data())
    }

    /// Embeddings of every row of `x` (`[n, input_dim] -> [n, embed_dim]`).
    pub fn embed_rows(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.attach(&mut g, false);
        let xv = g.constant(x.clone());
        let e = vars.embed(&mut g, xv)?;
        Ok(g.value(e).clone())
    }

    /// Identity logits for one embedding.
    pub fn classify(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.dims.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                node: 0,
                lhs: vec![embedding.len()],
                rhs: vec![self.dims.embed_dim],
            });
        }
        let mut g = Graph::new();
        let vars = self.attach(&mut g, false);
        let e = g.constant(Tensor::matrix(1, embedding.len(), embedding.to_vec())?);
        let z = vars.classify(&mut g, e)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        MODEL_KEYS.iter().zip(&self.tensors).map(|(k, t)| (k.to_string(), t.clone())).collect()
    }

    pub fn from_entries(entries: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| entries.get(k).cloned().ok_or_else(|| invalid(format!("checkpoint lacks `{k}`")));
        let tensors = [
            get(MODEL_KEYS[0])?,
            get(MODEL_KEYS[1])?,
            get(MODEL_KEYS[2])?,
            get(MODEL_KEYS[3])?,
            get(MODEL_KEYS[4])?,
            get(MODEL_KEYS[5])?,
        ];
        if tensors[0].rank() != 2 || tensors[2].rank() != 2 || tensors[4].rank() != 2 {
            return Err(invalid("checkpoint weights must be matrices"));
        }
        let dims = ModelDims {
            input_dim: tensors[0].shape()[0],
            hidden_dim: tensors[0].shape()[1],
            embed_dim: tensors[2].shape()[1],
            num_identities: tensors[4].shape()[1],
        };
        Self::from_tensors(dims, tensors)
    }
}

impl ModelVars {
    /// Handles in [`MODEL_KEYS`] order, e.g. leaves made by
    /// [`crate::autodiff::per_sample_gradients`].
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        let vars: [Var; 6] = vars
            .try_into()
            .map_err(|_| invalid(format!("expected 6 model handles, got {}", vars.len())))?;
        Ok(Self { vars })
    }

    pub fn all(&self) -> &[Var; 6] {
        &self.vars
    }

    /// Backbone forward: `[n, input] -> [n, embed]`.
    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.vars[0])?;
        let h = g.add(h, self.vars[1])?;
        let h = g.relu(h)?;
        let e = g.matmul(h, self.vars[2])?;
        g.add(e, self.vars[3])
    }

    /// Classifier head: `[n, embed] -> [n, identities]`.
    pub fn classify(&self, g: &mut Graph, embedding: Var) -> Result<Var> {
        let z = g.matmul(embedding, self.vars[4])?;
        g.add(z, self.vars[5])
    }
}

/// One fully connected layer, `[n, in] -> [n, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Scalar energy function: affine layers with ReLU between them, ending in a
/// single output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyNet {
    layers: Vec<Affine>,
}

impl EnergyNet {
    /// Zero-initialized single affine layer, giving a uniform policy.
    pub fn affine(input_dim: usize) -> Self {
        Self {
            layers: vec![Affine {
                weight: Tensor::zeros(&[input_dim, 1]),
                bias: Tensor::zeros(&[1]),
            }],
        }
    }

    /// One hidden ReLU layer. The output layer starts at zero so the initial
    /// policy is still uniform, while the hidden layer is random so it
    /// receives gradient.
    pub fn with_hidden(input_dim: usize, hidden: usize, rng: &mut crate::rng::Rng) -> Self {
        Self {
            layers: vec![
                Affine {
                    weight: randn(rng, input_dim, hidden, (1.0 / input_dim as f64).sqrt()),
                    bias: Tensor::zeros(&[hidden]),
                },
                Affine {
                    weight: Tensor::zeros(&[hidden, 1]),
                    bias: Tensor::zeros(&[1]),
                },
            ],
        }
    }

    pub fn from_layers(layers: Vec<Affine>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("energy layers"))?;
        let mut width = first.weight.shape().first().copied().unwrap_or(0);
        for l in &layers {
            let s = l.weight.shape();
            if s.len() != 2 || s[0] != width || l.bias.shape() != [s[1]] {
                return Err(invalid(format!("inconsistent energy layer {s:?}")));
            }
            width = s[1];
        }
        if width != 1 {
            return Err(invalid("energy network must end in one output"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn attach(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Energies of the rows of `input` under layers attached as `vars`
/// (weight, bias pairs): `[n, in] -> [n]`.
pub fn energy_rows(g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
    let mut h = input;
    let layers = vars.len() / 2;
    for (i, wb) in vars.chunks(2).enumerate() {
        h = g.matmul(h, wb[0])?;
        h = g.add(h, wb[1])?;
        if i + 1 < layers {
            h = g.relu(h)?;
        }
    }
    let n = g.value(h).rows();
    g.reshape(h, &[n])
}

/// Sampler parameters `theta`: single-image and pairwise energy networks.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    embed_dim: usize,
    single: EnergyNet,
    pair: EnergyNet,
}

/// Graph handles for attached [`SamplerParams`].
#[derive(Debug, Clone)]
pub struct SamplerVars {
    pub single: Vec<Var>,
    pub pair: Vec<Var>,
}

impl SamplerVars {
    /// All handles in flat-parameter order.
    pub fn all(&self) -> Vec<Var> {
        self.single.iter().chain(&self.pair).copied().collect()
    }
}

impl SamplerParams {
    /// Zero-initialized affine energies when `hidden` is `None`.
    pub fn new(embed_dim: usize, hidden: Option<usize>, rng: &mut crate::rng::Rng) -> Self {
        match hidden {
            None => Self::zeros(embed_dim),
            Some(h) => Self {
                embed_dim,
                single: EnergyNet::with_hidden(embed_dim, h, rng),
                pair: EnergyNet::with_hidden(2 * embed_dim, h, rng),
            },
        }
    }

    pub fn zeros(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            single: EnergyNet::affine(embed_dim),
            pair: EnergyNet::affine(2 * embed_dim),
        }
    }

    pub fn from_nets(single: EnergyNet, pair: EnergyNet) -> Result<Self> {
        let embed_dim = single.input_dim();
        if pair.input_dim() != 2 * embed_dim {
            return Err(invalid(format!(
                "pairwise energy input is {}, expected twice {embed_dim}",
                pair.input_dim()
            )));
        }
        Ok(Self { embed_dim, single, pair })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn single(&self) -> &EnergyNet {
        &self.single
    }

    pub fn pair(&self) -> &EnergyNet {
        &self.pair
    }

    pub fn num_params(&self) -> usize {
        self.single.tensors().chain(self.pair.tensors()).map(Tensor::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.single
            .tensors()
            .chain(self.pair.tensors())
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Same architecture with values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(invalid(format!(
                "flat sampler vector has {} values, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        let mut take = |t: &Tensor| {
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec()).expect("shape");
            off += t.len();
            out
        };
        let mut rebuild = |net: &EnergyNet| EnergyNet {
            layers: net
                .layers
                .iter()
                .map(|l| Affine {
                    weight: take(&l.weight),
                    bias: take(&l.bias),
                })
                .collect(),
        };
        let single = rebuild(&self.single);
        let pair = rebuild(&self.pair);
        Ok(Self {
            embed_dim: self.embed_dim,
            single,
            pair,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.single.tensors().chain(self.pair.tensors()).all(Tensor::is_finite)
    }

    pub fn attach(&self, g: &mut Graph, trainable: bool) -> SamplerVars {
        SamplerVars {
            single: self.single.attach(g, trainable),
            pair: self.pair.attach(g, trainable),
        }
    }

    /// Single-image energy of one embedding.
    pub fn energy_single(&self, embedding: &[f64]) -> Result<f64> {
        let rows = Tensor::matrix(1, embedding.len(), embedding.to_vec())?;
        Ok(self.energies_single(&rows)?[0])
    }

    /// Pairwise energy of `embedding` given `anchor` (input `[embedding, anchor]`).
    pub fn energy_pair(&self, embedding: &[f64], anchor: &[f64]) -> Result<f64> {
        let rows = Tensor::matrix(1, embedding.len(), embedding.to_vec())?;
        Ok(self.energies_pair(&rows, anchor)?[0])
    }

    /// Single-image energies of every row of `embeddings`.
    pub fn energies_single(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.single.attach(&mut g, false);
        let e = g.constant(embeddings.clone());
        let out = energy_rows(&mut g, &vars, e)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Pairwise energies of every row of `candidates` against one anchor.
    pub fn energies_pair(&self, candidates: &Tensor, anchor: &[f64]) -> Result<Vec<f64>> {
        let input = pair_input(candidates, anchor)?;
        let mut g = Graph::new();
        let vars = self.pair.attach(&mut g, false);
        let e = g.constant(input);
        let out = energy_rows(&mut g, &vars, e)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, net) in [("single", &self.single), ("pair", &self.pair)] {
            for (i, l) in net.layers.iter().enumerate() {
                out.push((format!("sampler.{name}.{i}.weight"), l.weight.clone()));
                out.push((format!("sampler.{name}.{i}.bias"), l.bias.clone()));
            }
        }
        out
    }

    pub fn from_entries(entries: &BTreeMap<String, Tensor>) -> Result<Self> {
        let net = |name: &str| -> Result<EnergyNet> {
            let mut layers = Vec::new();
            while let Some(w) = entries.get(&format!("sampler.{name}.{}.weight", layers.len())) {
                let b = entries
                    .get(&format!("sampler.{name}.{}.bias", layers.len()))
                    .ok_or_else(|| invalid(format!("checkpoint lacks bias of sampler.{name}.{}", layers.len())))?;
                layers.push(Affine {
                    weight: w.clone(),
                    bias: b.clone(),
                });
            }
            EnergyNet::from_layers(layers)
        };
        Self::from_nets(net("single")?, net("pair")?)
    }
}

/// Rows `[candidate_i, anchor]` for the pairwise energy.
pub fn pair_input(candidates: &Tensor, anchor: &[f64]) -> Result<Tensor> {
    if candidates.rank() != 2 || candidates.cols() != anchor.len() {
        return Err(Error::ShapeMismatch {
            op: "pair_input",
            node: 0,
            lhs: candidates.shape().to_vec(),
            rhs: vec![anchor.len()],
        });
    }
    let c = anchor.len();
    let mut data = Vec::with_capacity(candidates.rows() * 2 * c);
    for r in 0..candidates.rows() {
        data.extend_from_slice(candidates.row(r));
        data.extend_from_slice(anchor);
    }
    Tensor::matrix(candidates.rows(), 2 * c, data)
}
