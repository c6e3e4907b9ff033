//! Minimal dense numeric layer: named parameter sets, affine+nonlinearity
//! stacks with manual backprop, softmax cross-entropy, a bias-corrected
//! adaptive-moment optimizer, and finite-difference gradient checking.
//!
//! Everything here is pure given (inputs, params) apart from the cache a
//! forward pass hands to its matching backward pass.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{dot, Tensor};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Accumulate `g` into `grads[name]`, allocating a zero tensor on first use.
pub fn accumulate(grads: &mut GradMap, name: &str, g: &Tensor) {
    let entry = grads
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(g.shape()));
    for (dst, src) in entry.data_mut().iter_mut().zip(g.data()) {
        *dst += src;
    }
}

/// Scale every gradient in place (used to average over a batch).
pub fn scale_grads(grads: &mut GradMap, factor: f32) {
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

/// Named parameter map. BTreeMap keeps iteration order deterministic, which
/// checkpointing and gradient checking rely on.
#[derive(Debug, Clone)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
            rng_seed: seed,
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::fault(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::fault(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Add an affine layer's weight `{prefix}.w{idx}` (fan_out x fan_in,
    /// uniform in +-1/sqrt(fan_in)) and zero bias `{prefix}.b{idx}`.
    pub fn init_affine(
        &mut self,
        prefix: &str,
        idx: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<()> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::fault(format!(
                "zero-size layer {prefix}.{idx}: {fan_in}x{fan_out}"
            )));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        self.insert(
            &format!("{prefix}.w{idx}"),
            Tensor::from_vec(&[fan_out, fan_in], data)?,
        );
        self.insert(&format!("{prefix}.b{idx}"), Tensor::zeros(&[fan_out]));
        Ok(())
    }
}

/// Initialize a plain MLP parameter set from a layer-size list, e.g. [4, 3]
/// gives one affine layer with weight (3, 4) and bias (3). Weights are drawn
/// from a seeded SplitMix64 substream, biases are zero.
pub fn init_params(layer_sizes: &[usize], seed: u64) -> Result<ParamSet> {
    if layer_sizes.len() < 2 {
        return Err(Error::fault("layer spec needs at least input and output sizes"));
    }
    let mut params = ParamSet::new(seed);
    let mut rng = SplitMix64::substream(seed, "init");
    for (idx, pair) in layer_sizes.windows(2).enumerate() {
        params.init_affine("mlp", idx, pair[0], pair[1], &mut rng)?;
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn deriv_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Architecture of an affine/activation stack. `dims` lists layer widths
/// including input and output; `activations` has one entry per affine layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::fault(format!(
                "inconsistent mlp spec: dims {:?}, {} activations",
                dims,
                activations.len()
            )));
        }
        Ok(MlpSpec { dims, activations })
    }

    /// Two-layer head: in -> hidden (tanh) -> out (linear).
    pub fn head(input: usize, hidden: usize, output: usize) -> Self {
        MlpSpec {
            dims: vec![input, hidden, output],
            activations: vec![Activation::Tanh, Activation::Linear],
        }
    }

    pub fn init(&self, prefix: &str, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<()> {
        for (idx, pair) in self.dims.windows(2).enumerate() {
            params.init_affine(prefix, idx, pair[0], pair[1], rng)?;
        }
        Ok(())
    }
}

/// Intermediates needed by the backward pass: the input to each affine layer
/// and each layer's post-activation output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    layer_inputs: Vec<Tensor>,
    layer_outputs: Vec<Tensor>,
}

/// Forward pass over a batch `x` of shape (n, dims[0]).
pub fn mlp_forward(
    x: &Tensor,
    params: &ParamSet,
    prefix: &str,
    spec: &MlpSpec,
) -> Result<(Tensor, MlpCache)> {
    if x.shape().len() != 2 || x.cols() != spec.dims[0] {
        return Err(Error::Shape(format!(
            "{prefix}: input shape {:?}, expected (_, {})",
            x.shape(),
            spec.dims[0]
        )));
    }
    let mut cache = MlpCache {
        layer_inputs: Vec::with_capacity(spec.activations.len()),
        layer_outputs: Vec::with_capacity(spec.activations.len()),
    };
    let mut current = x.clone();
    for (idx, act) in spec.activations.iter().enumerate() {
        let w = params.get(&format!("{prefix}.w{idx}"))?;
        let b = params.get(&format!("{prefix}.b{idx}"))?;
        let (out_dim, in_dim) = (w.rows(), w.cols());
        if current.cols() != in_dim {
            return Err(Error::Shape(format!(
                "{prefix}.w{idx}: input width {} vs fan_in {in_dim}",
                current.cols()
            )));
        }
        let n = current.rows();
        let mut out = Tensor::zeros(&[n, out_dim]);
        for r in 0..n {
            let xin = current.row(r);
            for o in 0..out_dim {
                let z = dot(w.row(o), xin) + b.data()[o] as f64;
                out.set2(r, o, act.apply(z as f32));
            }
        }
        cache.layer_inputs.push(current);
        cache.layer_outputs.push(out.clone());
        current = out;
    }
    Ok((current, cache))
}

/// Backward pass. `dy` is the loss gradient at the stack output. Parameter
/// gradients accumulate into `grads`; the return value is the gradient at
/// the stack input.
pub fn mlp_backward(
    dy: &Tensor,
    cache: &MlpCache,
    params: &ParamSet,
    prefix: &str,
    spec: &MlpSpec,
    grads: &mut GradMap,
) -> Result<Tensor> {
    let n_layers = spec.activations.len();
    if cache.layer_outputs.len() != n_layers {
        return Err(Error::fault(format!("{prefix}: stale cache")));
    }
    let mut upstream = dy.clone();
    for idx in (0..n_layers).rev() {
        let act = spec.activations[idx];
        let w = params.get(&format!("{prefix}.w{idx}"))?;
        let x = &cache.layer_inputs[idx];
        let y = &cache.layer_outputs[idx];
        let n = x.rows();
        let (out_dim, in_dim) = (w.rows(), w.cols());

        // dz = dy * act'(y)
        let mut dz = Tensor::zeros(&[n, out_dim]);
        for r in 0..n {
            for o in 0..out_dim {
                dz.set2(r, o, upstream.at2(r, o) * act.deriv_from_output(y.at2(r, o)));
            }
        }

        let mut dw = Tensor::zeros(&[out_dim, in_dim]);
        let mut db = Tensor::zeros(&[out_dim]);
        let mut dx = Tensor::zeros(&[n, in_dim]);
        for r in 0..n {
            let xin = x.row(r);
            for o in 0..out_dim {
                let g = dz.at2(r, o);
                db.data_mut()[o] += g;
                let wrow = w.row(o);
                let dwrow = dw.row_mut(o);
                for i in 0..in_dim {
                    dwrow[i] += g * xin[i];
                    dx.data_mut()[r * in_dim + i] += g * wrow[i];
                }
            }
        }
        accumulate(grads, &format!("{prefix}.w{idx}"), &dw);
        accumulate(grads, &format!("{prefix}.b{idx}"), &db);
        upstream = dx;
    }
    Ok(upstream)
}

/// Softmax cross-entropy over a batch of logit rows. Returns the mean loss
/// and the gradient w.r.t. the logits (already divided by batch size).
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    if n != targets.len() {
        return Err(Error::Shape("logits/targets length mismatch".into()));
    }
    let c = logits.cols();
    let mut dlogits = Tensor::zeros(&[n, c]);
    let mut total = 0.0f64;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&z| ((z as f64) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let t = targets[r];
        if t >= c {
            return Err(Error::fault(format!("target {t} out of range {c}")));
        }
        total += -(exps[t] / z).ln();
        for k in 0..c {
            let p = exps[k] / z;
            let grad = (p - if k == t { 1.0 } else { 0.0 }) / n as f64;
            dlogits.set2(r, k, grad as f32);
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, dlogits))
}

/// Softmax probabilities for one logit row.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// L1 subgradient with the convention sign(0) = 0.
pub fn l1_subgrad(w: f32) -> f32 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment state for the adaptive-moment update.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step over every gradient in `grads`.
pub fn adam_step(params: &mut ParamSet, grads: &GradMap, state: &mut OptimizerState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c = &state.config;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let param = params.get_mut(name)?;
        if param.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.len() {
            let gi = g.data()[i] as f64;
            let mi = c.beta1 * m.data()[i] as f64 + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v.data()[i] as f64 + (1.0 - c.beta2) * gi * gi;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let w = param.data()[i] as f64;
            let update = c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w);
            param.data_mut()[i] = (w - update) as f32;
        }
    }
    Ok(())
}

/// Central-difference gradient check. Samples at most `max_coords`
/// coordinates across all parameters, perturbs each by +-`h` (1e-3 suits
/// f32 storage), and returns the max relative error against `analytic`
/// with denominator max(|a|, |n|, 1e-8).
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParamSet,
    analytic: &GradMap,
    seed: u64,
    max_coords: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    // Flatten the coordinate space in deterministic name order.
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            coords.push((name.clone(), i));
        }
    }
    let mut rng = SplitMix64::substream(seed, "gradcheck");
    let picked = if coords.len() > max_coords {
        rng.sample_indices(coords.len(), max_coords)
    } else {
        (0..coords.len()).collect()
    };

    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    for ci in picked {
        let (name, i) = &coords[ci];
        let orig = work.get(name)?.data()[*i];
        work.get_mut(name)?.data_mut()[*i] = orig + h as f32;
        let plus = loss_fn(&work)?;
        work.get_mut(name)?.data_mut()[*i] = orig - h as f32;
        let minus = loss_fn(&work)?;
        work.get_mut(name)?.data_mut()[*i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic
            .get(name.as_str())
            .map(|t| t.data()[*i] as f64)
            .unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// f64 view of an affine/activation stack extracted from a ParamSet.
/// Models that need tight gradient-check margins run their math here and
/// cast gradients back to f32 storage at the end.
#[derive(Debug, Clone)]
pub struct DenseNetF64 {
    pub spec: MlpSpec,
    weights: Vec<Vec<f64>>, // per layer, row-major (out x in)
    biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DenseCacheF64 {
    layer_inputs: Vec<Vec<Vec<f64>>>,
    layer_outputs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct DenseGradsF64 {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
}

impl DenseNetF64 {
    pub fn from_params(params: &ParamSet, prefix: &str, spec: &MlpSpec) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for idx in 0..spec.activations.len() {
            let w = params.get(&format!("{prefix}.w{idx}"))?;
            let b = params.get(&format!("{prefix}.b{idx}"))?;
            weights.push(w.data().iter().map(|&v| v as f64).collect());
            biases.push(b.data().iter().map(|&v| v as f64).collect());
        }
        Ok(DenseNetF64 {
            spec: spec.clone(),
            weights,
            biases,
        })
    }

    pub fn zero_grads(&self) -> DenseGradsF64 {
        DenseGradsF64 {
            dw: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            db: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn forward(&self, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, DenseCacheF64) {
        let mut cache = DenseCacheF64 {
            layer_inputs: Vec::new(),
            layer_outputs: Vec::new(),
        };
        let mut current = x.to_vec();
        for (idx, act) in self.spec.activations.iter().enumerate() {
            let in_dim = self.spec.dims[idx];
            let out_dim = self.spec.dims[idx + 1];
            let w = &self.weights[idx];
            let b = &self.biases[idx];
            let out: Vec<Vec<f64>> = current
                .iter()
                .map(|row| {
                    (0..out_dim)
                        .map(|o| {
                            let mut z = b[o];
                            for i in 0..in_dim {
                                z += w[o * in_dim + i] * row[i];
                            }
                            match act {
                                Activation::Linear => z,
                                Activation::Tanh => z.tanh(),
                                Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                            }
                        })
                        .collect()
                })
                .collect();
            cache.layer_inputs.push(current);
            cache.layer_outputs.push(out.clone());
            current = out;
        }
        (current, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(
        &self,
        dy: &[Vec<f64>],
        cache: &DenseCacheF64,
        grads: &mut DenseGradsF64,
    ) -> Vec<Vec<f64>> {
        let mut upstream = dy.to_vec();
        for idx in (0..self.spec.activations.len()).rev() {
            let act = self.spec.activations[idx];
            let in_dim = self.spec.dims[idx];
            let out_dim = self.spec.dims[idx + 1];
            let w = &self.weights[idx];
            let x = &cache.layer_inputs[idx];
            let y = &cache.layer_outputs[idx];
            let mut dx = vec![vec![0.0f64; in_dim]; x.len()];
            for r in 0..x.len() {
                for o in 0..out_dim {
                    let deriv = match act {
                        Activation::Linear => 1.0,
                        Activation::Tanh => 1.0 - y[r][o] * y[r][o],
                        Activation::Sigmoid => y[r][o] * (1.0 - y[r][o]),
                    };
                    let g = upstream[r][o] * deriv;
                    grads.db[idx][o] += g;
                    for i in 0..in_dim {
                        grads.dw[idx][o * in_dim + i] += g * x[r][i];
                        dx[r][i] += g * w[o * in_dim + i];
                    }
                }
            }
            upstream = dx;
        }
        upstream
    }
}

impl DenseGradsF64 {
    /// Cast into the shared f32 gradient map under `prefix`.
    pub fn accumulate_into(&self, grads: &mut GradMap, prefix: &str, spec: &MlpSpec) {
        for idx in 0..spec.activations.len() {
            let in_dim = spec.dims[idx];
            let out_dim = spec.dims[idx + 1];
            let dw: Vec<f32> = self.dw[idx].iter().map(|&v| v as f32).collect();
            let db: Vec<f32> = self.db[idx].iter().map(|&v| v as f32).collect();
            accumulate(
                grads,
                &format!("{prefix}.w{idx}"),
                &Tensor::from_vec(&[out_dim, in_dim], dw).expect("grad shape"),
            );
            accumulate(
                grads,
                &format!("{prefix}.b{idx}"),
                &Tensor::from_vec(&[out_dim], db).expect("grad shape"),
            );
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: String,
    seed: u64,
    step: u64,
    params: Vec<CheckpointEntry>,
}

/// Write `manifest.json` + `weights.bin` (little-endian f32 concatenated in
/// manifest order) into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, step: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        dtype: "f32".into(),
        seed: params.rng_seed,
        step,
        params: params
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    crate::io::write_json(&dir.join("manifest.json"), &manifest)?;
    let mut file = fs::File::create(dir.join("weights.bin"))?;
    for (_, t) in params.iter() {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`]. Returns the parameters
/// and the recorded optimizer step.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, u64)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.dtype != "f32" {
        return Err(Error::Protocol(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut file = fs::File::open(dir.join("weights.bin"))?;
    let mut params = ParamSet::new(manifest.seed);
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        file.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?);
    }
    Ok((params, manifest.step))
}
