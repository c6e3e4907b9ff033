//! Stage I pair classifiers: cross-attention extraction and ratio-constrained
//! rationale extraction. Both share an embedding table and a two-logit
//! classifier head; training is manual backprop over f64 copies of the f32
//! parameters so finite-difference checks stay tight.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, AdamConfig, DenseGradsF64, DenseNetF64, GradMap, MlpSpec, OptimizerState, ParamSet,
};
use crate::pairs::{CategorizedItem, PairExample};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::text::tokenize;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const END: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<end>"];

/// Token table with dense indices. `<pad>`, `<unk>`, `<end>` occupy the first
/// three slots; remaining tokens appear in first-seen corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in SPECIALS {
            vocab.push(s);
        }
        for text in texts {
            for tok in tokenize(text) {
                if !vocab.index.contains_key(&tok) {
                    vocab.push(&tok);
                }
            }
        }
        vocab
    }

    fn push(&mut self, tok: &str) {
        self.index.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.lookup(t)).collect()
    }

    /// One token per line; the line number is the index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS.map(String::from) {
            return Err(Error::fault(format!(
                "vocab file {} missing special tokens",
                path.display()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CrossAttn,
    Rationale,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub selection_ratio: f64,
    pub lasso_weight: f64,
    /// Drops the extra 1/(l_i*l_j) factor in the pooled embedding. The
    /// default keeps the verbatim formula.
    pub drop_pool_scaling: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            kind: ModelKind::CrossAttn,
            embed_dim: 512,
            hidden: 128,
            selection_ratio: 0.3,
            lasso_weight: 0.01,
            drop_pool_scaling: false,
            lr: 2e-4,
            epochs: 20,
            batch_size: 5,
            seed: 0,
        }
    }
}

/// Trained (or freshly initialized) Stage I model. Parameter names:
/// `embed` (|V| x d), `scorer.*` (pair scorer or rationale gate), `clf.*`.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub embed_dim: usize,
    pub hidden: usize,
    pub selection_ratio: f64,
    pub lasso_weight: f64,
    pub drop_pool_scaling: bool,
}

impl Stage1Model {
    pub fn init(config: &Stage1Config, vocab: Vocabulary) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::config("embed_dim and hidden must be positive"));
        }
        if !(0.0 < config.selection_ratio && config.selection_ratio <= 1.0) {
            return Err(Error::config("selection_ratio must be in (0, 1]"));
        }
        let mut params = ParamSet::new(config.seed);
        let mut rng = SplitMix64::substream(config.seed, "init");
        let v = vocab.len();
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let data: Vec<f32> = (0..v * d)
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        params.insert("embed", Tensor::from_vec(&[v, d], data)?);
        let scorer_spec = MlpSpec::head(2 * d, config.hidden, 1);
        let clf_input = match config.kind {
            ModelKind::CrossAttn => 2 * d,
            ModelKind::Rationale => d,
        };
        let clf_spec = MlpSpec::head(clf_input, config.hidden, 2);
        scorer_spec.init("scorer", &mut params, &mut rng)?;
        clf_spec.init("clf", &mut params, &mut rng)?;
        Ok(Stage1Model {
            kind: config.kind,
            vocab,
            params,
            embed_dim: d,
            hidden: config.hidden,
            selection_ratio: config.selection_ratio,
            lasso_weight: config.lasso_weight,
            drop_pool_scaling: config.drop_pool_scaling,
        })
    }

    pub fn scorer_spec(&self) -> MlpSpec {
        // Both the pair scorer and the rationale gate see a 2d input:
        // Cat(e_i, e_j) and [token || sequence mean] respectively.
        MlpSpec::head(2 * self.embed_dim, self.hidden, 1)
    }

    pub fn clf_spec(&self) -> MlpSpec {
        let input = match self.kind {
            ModelKind::CrossAttn => 2 * self.embed_dim,
            ModelKind::Rationale => self.embed_dim,
        };
        MlpSpec::head(input, self.hidden, 2)
    }

    pub fn encode_pair(&self, pair: &PairExample) -> Result<EncodedPair> {
        let a = self.vocab.encode(&pair.t_a);
        let b = self.vocab.encode(&pair.t_b);
        if a.is_empty() || b.is_empty() {
            return Err(Error::Precondition(format!(
                "pair ({}, {}) has an empty side after tokenization",
                pair.id_a, pair.id_b
            )));
        }
        Ok(EncodedPair {
            a,
            b,
            label: pair.label as usize,
        })
    }

    /// Embedding rows for a token id sequence, as an l x d matrix.
    pub fn embed_matrix(&self, ids: &[usize]) -> Result<Tensor> {
        let embed = self.params.get("embed")?;
        let mut data = Vec::with_capacity(ids.len() * self.embed_dim);
        for &id in ids {
            data.extend_from_slice(embed.row(id));
        }
        Tensor::from_vec(&[ids.len(), self.embed_dim], data)
    }

    /// Match probability for one pair of texts.
    pub fn score_texts(&self, t_a: &str, t_b: &str) -> Result<f64> {
        let enc = EncodedPair {
            a: self.vocab.encode(t_a),
            b: self.vocab.encode(t_b),
            label: 0,
        };
        if enc.a.is_empty() || enc.b.is_empty() {
            return Err(Error::Precondition("empty side after tokenization".into()));
        }
        let nets = Nets::build(self, &self.params)?;
        forward_pair(&nets, self, &enc).map(|f| f.prob1)
    }

    /// Scores many encoded pairs; builds the f64 nets once and fans out.
    pub fn score_many(&self, encs: &[EncodedPair]) -> Result<Vec<f64>> {
        let nets = Nets::build(self, &self.params)?;
        let scored = crate::par::map_items(encs, |enc| forward_pair(&nets, self, enc));
        scored.into_iter().map(|r| r.map(|f| f.prob1)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        nn::save_checkpoint(dir, &self.params, 0)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let meta = ModelMeta {
            kind: self.kind,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            selection_ratio: self.selection_ratio,
            lasso_weight: self.lasso_weight,
            drop_pool_scaling: self.drop_pool_scaling,
        };
        crate::io::write_json(&dir.join("model.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let (params, _) = nn::load_checkpoint(dir)?;
        Ok(Stage1Model {
            kind: meta.kind,
            vocab,
            params,
            embed_dim: meta.embed_dim,
            hidden: meta.hidden,
            selection_ratio: meta.selection_ratio,
            lasso_weight: meta.lasso_weight,
            drop_pool_scaling: meta.drop_pool_scaling,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: ModelKind,
    embed_dim: usize,
    hidden: usize,
    selection_ratio: f64,
    lasso_weight: f64,
    drop_pool_scaling: bool,
}

/// Token-id form of a PairExample; both sides are non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub label: usize,
}

// ---------------------------------------------------------------------------
// Forward-only ops
// ---------------------------------------------------------------------------

/// A[k_i][k_j] = Sigmoid(scorer(Cat(e_i[k_i], e_j[k_j]))).
pub fn cross_attention_scores(model: &Stage1Model, e_i: &Tensor, e_j: &Tensor) -> Result<Tensor> {
    if e_i.rows() == 0 || e_j.rows() == 0 {
        return Err(Error::Precondition("empty sequence in attention".into()));
    }
    if e_i.cols() != model.embed_dim || e_j.cols() != model.embed_dim {
        return Err(Error::Shape("embedding width mismatch".into()));
    }
    let nets = Nets::build(model, &model.params)?;
    let (li, lj) = (e_i.rows(), e_j.rows());
    let mut x = Vec::with_capacity(li * lj);
    for ki in 0..li {
        for kj in 0..lj {
            let mut row: Vec<f64> = e_i.row(ki).iter().map(|&v| v as f64).collect();
            row.extend(e_j.row(kj).iter().map(|&v| v as f64));
            x.push(row);
        }
    }
    let (z, _) = nets.scorer.forward(&x);
    let data: Vec<f32> = z.iter().map(|r| sigmoid_f64(r[0]) as f32).collect();
    Tensor::from_vec(&[li, lj], data)
}

/// Divides by the grand total so all entries sum to 1.
pub fn normalize_attention(a: &Tensor) -> Result<Tensor> {
    let total = a.sum();
    if !(total > 0.0) {
        return Err(Error::Precondition("attention sum must be positive".into()));
    }
    let data: Vec<f32> = a.data().iter().map(|&v| (v as f64 / total) as f32).collect();
    Tensor::from_vec(a.shape(), data)
}

/// e_avg = factor * sum over (k_i, k_j) of abar * Cat(e_i[k_i], e_j[k_j]),
/// with factor = 1/(l_i*l_j) unless `drop_scaling`.
pub fn pooled_pair_embedding(
    abar: &Tensor,
    e_i: &Tensor,
    e_j: &Tensor,
    drop_scaling: bool,
) -> Result<Vec<f32>> {
    let (li, lj, d) = (e_i.rows(), e_j.rows(), e_i.cols());
    if abar.shape() != [li, lj] || e_j.cols() != d {
        return Err(Error::Shape("attention/embedding shape mismatch".into()));
    }
    let factor = if drop_scaling {
        1.0
    } else {
        1.0 / (li * lj) as f64
    };
    let mut out = vec![0.0f64; 2 * d];
    for ki in 0..li {
        for kj in 0..lj {
            let w = abar.at2(ki, kj) as f64;
            for c in 0..d {
                out[c] += w * e_i.at2(ki, c) as f64;
                out[d + c] += w * e_j.at2(kj, c) as f64;
            }
        }
    }
    Ok(out.iter().map(|&v| (v * factor) as f32).collect())
}

/// Probability of label 1 from the two-logit classifier head.
pub fn classify_pair(model: &Stage1Model, e_avg: &[f32]) -> Result<f64> {
    let spec = model.clf_spec();
    if e_avg.len() != spec.dims[0] {
        return Err(Error::Shape(format!(
            "classifier expects width {}, got {}",
            spec.dims[0],
            e_avg.len()
        )));
    }
    let clf = DenseNetF64::from_params(&model.params, "clf", &spec)?;
    let x: Vec<f64> = e_avg.iter().map(|&v| v as f64).collect();
    let (logits, _) = clf.forward(&[x]);
    Ok(prob1_from_logits(&logits[0]))
}

/// Deterministic top-k by score; ties break toward the lower index. Returned
/// indices are ascending.
pub fn top_k_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone)]
pub struct RationaleSelection {
    /// Over the l_a + l_b real tokens (the separator is never selectable).
    pub mask: Vec<bool>,
    pub gate_scores: Vec<f64>,
    pub selected_a: Vec<String>,
    pub selected_b: Vec<String>,
    pub k: usize,
}

/// Gates the concatenation t_i ++ `<end>` ++ t_j and keeps the top
/// ceil(ratio * L) tokens, L counting real tokens only.
pub fn rationale_select(model: &Stage1Model, t_i: &str, t_j: &str) -> Result<RationaleSelection> {
    let toks_a = tokenize(t_i);
    let toks_b = tokenize(t_j);
    if toks_a.is_empty() || toks_b.is_empty() {
        return Err(Error::Precondition("empty side after tokenization".into()));
    }
    let enc = EncodedPair {
        a: toks_a.iter().map(|t| model.vocab.lookup(t)).collect(),
        b: toks_b.iter().map(|t| model.vocab.lookup(t)).collect(),
        label: 0,
    };
    let nets = Nets::build(model, &model.params)?;
    let fwd = rationale_forward(&nets, model, &enc)?;
    let la = toks_a.len();
    let mut mask = vec![false; la + toks_b.len()];
    for &q in &fwd.selected {
        mask[q] = true;
    }
    let pick = |side: &[String], offset: usize| -> Vec<String> {
        side.iter()
            .enumerate()
            .filter(|(i, _)| mask[offset + i])
            .map(|(_, t)| t.clone())
            .collect()
    };
    Ok(RationaleSelection {
        selected_a: pick(&toks_a, 0),
        selected_b: pick(&toks_b, la),
        gate_scores: fwd.p.clone(),
        k: fwd.selected.len(),
        mask,
    })
}

// ---------------------------------------------------------------------------
// Shared forward/backward machinery
// ---------------------------------------------------------------------------

struct Nets<'a> {
    embed: &'a Tensor,
    d: usize,
    scorer: DenseNetF64,
    clf: DenseNetF64,
}

impl<'a> Nets<'a> {
    fn build(model: &Stage1Model, params: &'a ParamSet) -> Result<Self> {
        Ok(Nets {
            embed: params.get("embed")?,
            d: model.embed_dim,
            scorer: DenseNetF64::from_params(params, "scorer", &model.scorer_spec())?,
            clf: DenseNetF64::from_params(params, "clf", &model.clf_spec())?,
        })
    }

    fn row(&self, id: usize) -> Vec<f64> {
        self.embed.row(id).iter().map(|&v| v as f64).collect()
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn ce_f64(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + m - logits[target];
    let mut d: Vec<f64> = exps.iter().map(|e| e / total).collect();
    d[target] -= 1.0;
    (loss, d)
}

fn prob1_from_logits(logits: &[f64]) -> f64 {
    sigmoid_f64(logits[1] - logits[0])
}

struct PairForward {
    loss: f64,
    prob1: f64,
    kind: ForwardDetail,
}

enum ForwardDetail {
    Cross(CrossForward),
    Rationale(RationaleForward),
}

struct CrossForward {
    x: Vec<Vec<f64>>,
    scorer_cache: nn::DenseCacheF64,
    a: Vec<f64>,
    total: f64,
    abar: Vec<f64>,
    factor: f64,
    clf_cache: nn::DenseCacheF64,
    dlogits: Vec<f64>,
}

struct RationaleForward {
    ids: Vec<usize>,
    e: Vec<Vec<f64>>,
    gate_cache: nn::DenseCacheF64,
    p: Vec<f64>,
    seq_pos: Vec<usize>,
    selected: Vec<usize>,
    k: usize,
    clf_cache: nn::DenseCacheF64,
    dlogits: Vec<f64>,
}

fn forward_pair(nets: &Nets, model: &Stage1Model, enc: &EncodedPair) -> Result<PairForward> {
    match model.kind {
        ModelKind::CrossAttn => {
            let f = cross_forward(nets, model, enc)?;
            let mean_a = f.total / f.a.len() as f64;
            Ok(PairForward {
                loss: f.loss_ce + model.lasso_weight * mean_a,
                prob1: f.prob1,
                kind: ForwardDetail::Cross(f.fwd),
            })
        }
        ModelKind::Rationale => {
            let f = rationale_forward(nets, model, enc)?;
            let (ce, dlogits) = ce_f64(&f.logits, enc.label);
            let prob1 = prob1_from_logits(&f.logits);
            Ok(PairForward {
                loss: ce,
                prob1,
                kind: ForwardDetail::Rationale(RationaleForward {
                    ids: f.ids,
                    e: f.e,
                    gate_cache: f.gate_cache,
                    p: f.p,
                    seq_pos: f.seq_pos,
                    selected: f.selected,
                    k: f.k,
                    clf_cache: f.clf_cache,
                    dlogits,
                }),
            })
        }
    }
}

struct CrossOut {
    fwd: CrossForward,
    a: Vec<f64>,
    total: f64,
    loss_ce: f64,
    prob1: f64,
}

fn cross_forward(nets: &Nets, model: &Stage1Model, enc: &EncodedPair) -> Result<CrossOut> {
    let (la, lb, d) = (enc.a.len(), enc.b.len(), nets.d);
    if la == 0 || lb == 0 {
        return Err(Error::Precondition("empty side in pair forward".into()));
    }
    let ea: Vec<Vec<f64>> = enc.a.iter().map(|&id| nets.row(id)).collect();
    let eb: Vec<Vec<f64>> = enc.b.iter().map(|&id| nets.row(id)).collect();
    let mut x = Vec::with_capacity(la * lb);
    for ei in &ea {
        for ej in &eb {
            let mut row = ei.clone();
            row.extend_from_slice(ej);
            x.push(row);
        }
    }
    let (zrows, scorer_cache) = nets.scorer.forward(&x);
    let a: Vec<f64> = zrows.iter().map(|r| sigmoid_f64(r[0])).collect();
    let total: f64 = a.iter().sum();
    let abar: Vec<f64> = a.iter().map(|&v| v / total).collect();
    let factor = if model.drop_pool_scaling {
        1.0
    } else {
        1.0 / (la * lb) as f64
    };
    let mut e_avg = vec![0.0f64; 2 * d];
    for (m, row) in x.iter().enumerate() {
        for c in 0..2 * d {
            e_avg[c] += abar[m] * row[c];
        }
    }
    for v in &mut e_avg {
        *v *= factor;
    }
    let (logits, clf_cache) = nets.clf.forward(&[e_avg]);
    let (loss_ce, dlogits) = ce_f64(&logits[0], enc.label);
    let prob1 = prob1_from_logits(&logits[0]);
    Ok(CrossOut {
        fwd: CrossForward {
            x,
            scorer_cache,
            a: a.clone(),
            total,
            abar,
            factor,
            clf_cache,
            dlogits,
        },
        a,
        total,
        loss_ce,
        prob1,
    })
}

struct RatOut {
    ids: Vec<usize>,
    e: Vec<Vec<f64>>,
    gate_cache: nn::DenseCacheF64,
    p: Vec<f64>,
    seq_pos: Vec<usize>,
    selected: Vec<usize>,
    k: usize,
    clf_cache: nn::DenseCacheF64,
    logits: Vec<f64>,
}

fn rationale_forward(nets: &Nets, model: &Stage1Model, enc: &EncodedPair) -> Result<RatOut> {
    let (la, lb, d) = (enc.a.len(), enc.b.len(), nets.d);
    if la == 0 || lb == 0 {
        return Err(Error::Precondition("empty side in pair forward".into()));
    }
    let mut ids: Vec<usize> = enc.a.clone();
    ids.push(END);
    ids.extend_from_slice(&enc.b);
    let e: Vec<Vec<f64>> = ids.iter().map(|&id| nets.row(id)).collect();
    let n_all = e.len();
    let mut mean = vec![0.0f64; d];
    for row in &e {
        for c in 0..d {
            mean[c] += row[c];
        }
    }
    for v in &mut mean {
        *v /= n_all as f64;
    }
    // Selectable positions skip the separator.
    let seq_pos: Vec<usize> = (0..la).chain(la + 1..n_all).collect();
    let l = seq_pos.len();
    let g: Vec<Vec<f64>> = seq_pos
        .iter()
        .map(|&pos| {
            let mut row = e[pos].clone();
            row.extend_from_slice(&mean);
            row
        })
        .collect();
    let (srows, gate_cache) = nets.scorer.forward(&g);
    let p: Vec<f64> = srows.iter().map(|r| sigmoid_f64(r[0])).collect();
    let k = ((model.selection_ratio * l as f64).ceil() as usize).clamp(1, l);
    let selected = top_k_by_score(&p, k);
    let mut x = vec![0.0f64; d];
    for &q in &selected {
        let row = &e[seq_pos[q]];
        for c in 0..d {
            x[c] += row[c] / k as f64;
        }
    }
    let (logits, clf_cache) = nets.clf.forward(&[x]);
    let logits = logits.into_iter().next().unwrap();
    Ok(RatOut {
        ids,
        e,
        gate_cache,
        p,
        seq_pos,
        selected,
        k,
        clf_cache,
        logits,
    })
}

struct Grads {
    scorer: DenseGradsF64,
    clf: DenseGradsF64,
    dembed: Vec<f64>,
}

fn backward_pair(nets: &Nets, model: &Stage1Model, enc: &EncodedPair, fwd: &PairForward, scale: f64, grads: &mut Grads) {
    match &fwd.kind {
        ForwardDetail::Cross(f) => cross_backward(nets, model, enc, f, scale, grads),
        ForwardDetail::Rationale(f) => rationale_backward(nets, f, scale, grads),
    }
}

fn cross_backward(
    nets: &Nets,
    model: &Stage1Model,
    enc: &EncodedPair,
    f: &CrossForward,
    scale: f64,
    grads: &mut Grads,
) {
    let (la, lb, d) = (enc.a.len(), enc.b.len(), nets.d);
    let m_count = la * lb;
    let dy = vec![f.dlogits.iter().map(|&v| v * scale).collect::<Vec<f64>>()];
    let de_avg = nets
        .clf
        .backward(&dy, &f.clf_cache, &mut grads.clf)
        .into_iter()
        .next()
        .unwrap();
    // Pooling: e_avg = factor * sum_m abar_m * x_m.
    let mut dabar = vec![0.0f64; m_count];
    let mut dx = vec![vec![0.0f64; 2 * d]; m_count];
    for m in 0..m_count {
        let mut dot = 0.0;
        for c in 0..2 * d {
            dot += de_avg[c] * f.x[m][c];
            dx[m][c] = f.factor * f.abar[m] * de_avg[c];
        }
        dabar[m] = f.factor * dot;
    }
    // Normalization abar = a / total.
    let inner: f64 = dabar.iter().zip(&f.abar).map(|(g, ab)| g * ab).sum();
    let lasso_term = scale * model.lasso_weight / m_count as f64;
    let dz: Vec<Vec<f64>> = (0..m_count)
        .map(|m| {
            let da = (dabar[m] - inner) / f.total + lasso_term;
            vec![da * f.a[m] * (1.0 - f.a[m])]
        })
        .collect();
    let dxs = nets.scorer.backward(&dz, &f.scorer_cache, &mut grads.scorer);
    for m in 0..m_count {
        let (ki, kj) = (m / lb, m % lb);
        let ra = enc.a[ki] * d;
        let rb = enc.b[kj] * d;
        for c in 0..d {
            grads.dembed[ra + c] += dx[m][c] + dxs[m][c];
            grads.dembed[rb + c] += dx[m][d + c] + dxs[m][d + c];
        }
    }
}

fn rationale_backward(nets: &Nets, f: &RationaleForward, scale: f64, grads: &mut Grads) {
    let d = nets.d;
    let n_all = f.e.len();
    let l = f.seq_pos.len();
    let dy = vec![f.dlogits.iter().map(|&v| v * scale).collect::<Vec<f64>>()];
    let dx = nets
        .clf
        .backward(&dy, &f.clf_cache, &mut grads.clf)
        .into_iter()
        .next()
        .unwrap();
    let mut de = vec![vec![0.0f64; d]; n_all];
    // Hard path: x is the mean of the selected embeddings.
    for &q in &f.selected {
        let pos = f.seq_pos[q];
        for c in 0..d {
            de[pos][c] += dx[c] / f.k as f64;
        }
    }
    // Straight-through: gate probabilities get the gradient of the soft
    // surrogate x = (1/K) sum_q p_q e_q.
    let ds: Vec<Vec<f64>> = (0..l)
        .map(|q| {
            let pos = f.seq_pos[q];
            let mut dot = 0.0;
            for c in 0..d {
                dot += dx[c] * f.e[pos][c];
            }
            let dp = dot / f.k as f64;
            vec![dp * f.p[q] * (1.0 - f.p[q])]
        })
        .collect();
    let dg = nets.scorer.backward(&ds, &f.gate_cache, &mut grads.scorer);
    let mut dmean = vec![0.0f64; d];
    for q in 0..l {
        let pos = f.seq_pos[q];
        for c in 0..d {
            de[pos][c] += dg[q][c];
            dmean[c] += dg[q][d + c];
        }
    }
    for row in de.iter_mut() {
        for c in 0..d {
            row[c] += dmean[c] / n_all as f64;
        }
    }
    for (r, row) in de.iter().enumerate() {
        let base = f.ids[r] * d;
        for c in 0..d {
            grads.dembed[base + c] += row[c];
        }
    }
}

/// Mean loss over a batch plus analytic gradients, all computed against
/// `params` (which may differ from `model.params` during finite-difference
/// checks).
pub fn batch_loss_and_grads(
    model: &Stage1Model,
    params: &ParamSet,
    batch: &[EncodedPair],
) -> Result<(f64, usize, GradMap)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let nets = Nets::build(model, params)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Grads {
        scorer: nets.scorer.zero_grads(),
        clf: nets.clf.zero_grads(),
        dembed: vec![0.0f64; nets.embed.len()],
    };
    let mut loss = 0.0;
    let mut correct = 0;
    for enc in batch {
        let fwd = forward_pair(&nets, model, enc)?;
        loss += fwd.loss * scale;
        if (fwd.prob1 >= 0.5) == (enc.label == 1) {
            correct += 1;
        }
        backward_pair(&nets, model, enc, &fwd, scale, &mut grads);
    }
    let mut map = GradMap::new();
    grads
        .scorer
        .accumulate_into(&mut map, "scorer", &model.scorer_spec());
    grads.clf.accumulate_into(&mut map, "clf", &model.clf_spec());
    let dembed: Vec<f32> = grads.dembed.iter().map(|&v| v as f32).collect();
    nn::accumulate(
        &mut map,
        "embed",
        &Tensor::from_vec(nets.embed.shape(), dembed)?,
    );
    Ok((loss, correct, map))
}

/// Forward-only mean batch loss, for gradient checks.
pub fn batch_loss(model: &Stage1Model, params: &ParamSet, batch: &[EncodedPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let nets = Nets::build(model, params)?;
    let mut loss = 0.0;
    for enc in batch {
        loss += forward_pair(&nets, model, enc)?.loss;
    }
    Ok(loss / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
}

pub type TrainHistory = Vec<EpochStats>;

/// Trains on shuffled minibatches and keeps the best-validation-loss
/// parameters. With zero epochs the returned model equals the init.
pub fn train_stage1(
    train: &[PairExample],
    valid: &[PairExample],
    config: &Stage1Config,
) -> Result<(Stage1Model, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let texts = train
        .iter()
        .flat_map(|p| [p.t_a.as_str(), p.t_b.as_str()]);
    let vocab = Vocabulary::build(texts);
    let mut model = Stage1Model::init(config, vocab)?;
    let enc_train: Vec<EncodedPair> = train
        .iter()
        .map(|p| model.encode_pair(p))
        .collect::<Result<_>>()?;
    let enc_valid: Vec<EncodedPair> = valid
        .iter()
        .map(|p| model.encode_pair(p))
        .collect::<Result<_>>()?;

    let mut opt = OptimizerState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut rng = SplitMix64::substream(config.seed, "train");
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ParamSet)> = None;
    let batch_size = config.batch_size.max(1);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..enc_train.len()).collect();
        rng.shuffle(&mut order);
        let mut train_loss = 0.0;
        let mut train_correct = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<EncodedPair> =
                chunk.iter().map(|&i| enc_train[i].clone()).collect();
            let (loss, correct, grads) = batch_loss_and_grads(&model, &model.params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch} (lr {})",
                    config.lr
                )));
            }
            train_loss += loss * batch.len() as f64;
            train_correct += correct;
            nn::adam_step(&mut model.params, &grads, &mut opt)?;
        }
        let n = enc_train.len() as f64;
        let (valid_loss, valid_acc) = if enc_valid.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            eval_loss_acc(&model, &enc_valid)?
        };
        history.push(EpochStats {
            epoch,
            train_loss: train_loss / n,
            train_acc: train_correct as f64 / n,
            valid_loss,
            valid_acc,
        });
        if valid_loss.is_finite() && best.as_ref().map_or(true, |(b, _)| valid_loss < *b) {
            best = Some((valid_loss, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

fn eval_loss_acc(model: &Stage1Model, encs: &[EncodedPair]) -> Result<(f64, f64)> {
    let nets = Nets::build(model, &model.params)?;
    let results = crate::par::map_items(encs, |enc| forward_pair(&nets, model, enc));
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (enc, r) in encs.iter().zip(results) {
        let f = r?;
        loss += f.loss;
        if (f.prob1 >= 0.5) == (enc.label == 1) {
            correct += 1;
        }
    }
    let n = encs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Per-pair extraction output: the attention map (cross-attention) or gate
/// mask (rationale) plus the match probability.
#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
    /// Pre-normalization attention, l_a x l_b (cross-attention only).
    pub attention: Option<Tensor>,
    /// Selection mask over the l_a + l_b real tokens (rationale only).
    pub mask: Option<Vec<bool>>,
    pub gate_scores: Option<Vec<f64>>,
    pub score: f64,
}

pub fn extract(model: &Stage1Model, t_a: &str, t_b: &str) -> Result<ExtractionResult> {
    let tokens_a = tokenize(t_a);
    let tokens_b = tokenize(t_b);
    if tokens_a.is_empty() || tokens_b.is_empty() {
        return Err(Error::Precondition("empty side after tokenization".into()));
    }
    match model.kind {
        ModelKind::CrossAttn => {
            let ids_a: Vec<usize> = tokens_a.iter().map(|t| model.vocab.lookup(t)).collect();
            let ids_b: Vec<usize> = tokens_b.iter().map(|t| model.vocab.lookup(t)).collect();
            let e_a = model.embed_matrix(&ids_a)?;
            let e_b = model.embed_matrix(&ids_b)?;
            let a = cross_attention_scores(model, &e_a, &e_b)?;
            let abar = normalize_attention(&a)?;
            let e_avg = pooled_pair_embedding(&abar, &e_a, &e_b, model.drop_pool_scaling)?;
            let score = classify_pair(model, &e_avg)?;
            Ok(ExtractionResult {
                tokens_a,
                tokens_b,
                attention: Some(a),
                mask: None,
                gate_scores: None,
                score,
            })
        }
        ModelKind::Rationale => {
            let sel = rationale_select(model, t_a, t_b)?;
            let score = model.score_texts(t_a, t_b)?;
            Ok(ExtractionResult {
                tokens_a,
                tokens_b,
                attention: None,
                mask: Some(sel.mask),
                gate_scores: Some(sel.gate_scores),
                score,
            })
        }
    }
}

/// Top-k salient words per side. Cross-attention ranks rows/columns by their
/// mean attention; rationale returns the masked tokens ranked by gate score.
/// k clamps to the side length.
pub fn extract_top_words(result: &ExtractionResult, k: usize) -> (Vec<String>, Vec<String>) {
    let la = result.tokens_a.len();
    let lb = result.tokens_b.len();
    if let Some(a) = &result.attention {
        let row_means: Vec<f64> = (0..la)
            .map(|r| a.row(r).iter().map(|&v| v as f64).sum::<f64>() / lb as f64)
            .collect();
        let col_means: Vec<f64> = (0..lb)
            .map(|c| (0..la).map(|r| a.at2(r, c) as f64).sum::<f64>() / la as f64)
            .collect();
        let w_a = top_k_by_score(&row_means, k.min(la))
            .into_iter()
            .map(|i| result.tokens_a[i].clone())
            .collect();
        let w_b = top_k_by_score(&col_means, k.min(lb))
            .into_iter()
            .map(|i| result.tokens_b[i].clone())
            .collect();
        (w_a, w_b)
    } else {
        let mask = result.mask.as_ref().expect("rationale mask");
        let scores = result.gate_scores.as_ref().expect("gate scores");
        let side = |offset: usize, tokens: &[String]| -> Vec<String> {
            let mut picked: Vec<usize> = (0..tokens.len())
                .filter(|i| mask[offset + i])
                .collect();
            picked.sort_by(|&a, &b| {
                scores[offset + b]
                    .partial_cmp(&scores[offset + a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            picked.truncate(k);
            picked.sort_unstable();
            picked.into_iter().map(|i| tokens[i].clone()).collect()
        };
        (side(0, &result.tokens_a), side(la, &result.tokens_b))
    }
}

/// One extraction line of the JSONL output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub id_a: String,
    pub id_b: String,
    pub w_a: Vec<String>,
    pub w_b: Vec<String>,
    pub score: f64,
}

pub fn extract_pairs(
    model: &Stage1Model,
    pairs: &[PairExample],
    k: usize,
) -> Result<Vec<ExtractionRecord>> {
    let results = crate::par::map_items(pairs, |p| {
        extract(model, &p.t_a, &p.t_b).map(|r| {
            let (w_a, w_b) = extract_top_words(&r, k);
            ExtractionRecord {
                id_a: p.id_a.clone(),
                id_b: p.id_b.clone(),
                w_a,
                w_b,
                score: r.score,
            }
        })
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_test: usize,
    pub n_positive: usize,
    pub recall_at: BTreeMap<usize, f64>,
    /// Anchors whose eligible distractor pool fell short of the request.
    pub short_pools: usize,
}

/// Accuracy at threshold 0.5 plus ranked retrieval: each positive pair's true
/// partner competes against seeded distractors drawn from `pool` with a
/// different category than the anchor and no known positive edge to it.
pub fn evaluate_stage1(
    model: &Stage1Model,
    test: &[PairExample],
    pool: &[CategorizedItem],
    positive_keys: &BTreeSet<(String, String)>,
    negatives_per_anchor: usize,
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let enc_test: Vec<EncodedPair> = test
        .iter()
        .map(|p| model.encode_pair(p))
        .collect::<Result<_>>()?;
    let scores = model.score_many(&enc_test)?;
    let correct = test
        .iter()
        .zip(&scores)
        .filter(|(p, &s)| (s >= 0.5) == (p.label == 1))
        .count();

    let positives: Vec<&PairExample> = test.iter().filter(|p| p.label == 1).collect();
    let mut rng = SplitMix64::substream(seed, "eval");
    let mut short_pools = 0usize;
    // Distractor draws happen sequentially so the result is seed-stable;
    // scoring fans out afterwards.
    let mut tasks: Vec<EncodedPair> = Vec::new();
    let mut anchor_sizes = Vec::with_capacity(positives.len());
    for p in &positives {
        let candidates: Vec<&CategorizedItem> = pool
            .iter()
            .filter(|item| {
                item.item_id != p.id_a
                    && item.item_id != p.id_b
                    && item.category != p.c_a
                    && !positive_keys.contains(&crate::pairs::unordered_key(&p.id_a, &item.item_id))
            })
            .collect();
        let chosen: Vec<&CategorizedItem> = if candidates.len() > negatives_per_anchor {
            rng.sample_indices(candidates.len(), negatives_per_anchor)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        } else {
            if candidates.len() < negatives_per_anchor {
                short_pools += 1;
            }
            candidates
        };
        let a = model.vocab.encode(&p.t_a);
        let truth = EncodedPair {
            a: a.clone(),
            b: model.vocab.encode(&p.t_b),
            label: 1,
        };
        tasks.push(truth);
        let mut n = 1;
        for item in chosen {
            let b = model.vocab.encode(&item.features);
            if b.is_empty() {
                continue;
            }
            tasks.push(EncodedPair {
                a: a.clone(),
                b,
                label: 0,
            });
            n += 1;
        }
        anchor_sizes.push(n);
    }
    let task_scores = model.score_many(&tasks)?;

    let mut recall_at: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut offset = 0usize;
    for &n in &anchor_sizes {
        let truth_score = task_scores[offset];
        let ahead = task_scores[offset + 1..offset + n]
            .iter()
            .filter(|&&s| s > truth_score)
            .count();
        let rank = ahead + 1;
        for (&k, v) in recall_at.iter_mut() {
            if rank <= k {
                *v += 1.0;
            }
        }
        offset += n;
    }
    if !positives.is_empty() {
        for v in recall_at.values_mut() {
            *v /= positives.len() as f64;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / test.len().max(1) as f64,
        n_test: test.len(),
        n_positive: positives.len(),
        recall_at,
        short_pools,
    })
}

// ---------------------------------------------------------------------------
// Synthetic fixture
// ---------------------------------------------------------------------------

/// Rule dataset for learnability checks: a pair is positive exactly when both
/// sides share a planted signal token. Noise tokens never repeat within a
/// pair, so the intersection of the two sides recovers the signal.
pub fn synthetic_signal_pairs(n_pairs: usize, tokens_per_side: usize, seed: u64) -> Vec<PairExample> {
    assert!(tokens_per_side >= 2);
    let signals: Vec<String> = (0..8).map(|i| format!("sig{i}")).collect();
    let noise: Vec<String> = (0..40).map(|i| format!("noise{i:02}")).collect();
    let mut rng = SplitMix64::substream(seed, "synthetic");
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let positive = i % 2 == 0;
        let (sig_a, sig_b) = if positive {
            let s = rng.next_below(signals.len());
            (s, s)
        } else {
            let s1 = rng.next_below(signals.len());
            let mut s2 = rng.next_below(signals.len() - 1);
            if s2 >= s1 {
                s2 += 1;
            }
            (s1, s2)
        };
        let per_side = tokens_per_side - 1;
        let picked = rng.sample_indices(noise.len(), 2 * per_side);
        let mut side = |sig: usize, noise_ids: &[usize]| -> String {
            let mut toks: Vec<String> = noise_ids.iter().map(|&j| noise[j].clone()).collect();
            toks.push(signals[sig].clone());
            rng.shuffle(&mut toks);
            toks.join(" ")
        };
        let t_a = side(sig_a, &picked[..per_side]);
        let t_b = side(sig_b, &picked[per_side..]);
        pairs.push(PairExample {
            id_a: format!("p{i}a"),
            id_b: format!("p{i}b"),
            t_a,
            t_b,
            c_a: "top".into(),
            c_b: "bottom".into(),
            label: u8::from(positive),
        });
    }
    pairs
}

/// The token shared by both sides, if any. Positives have exactly one.
pub fn planted_signal(pair: &PairExample) -> Option<String> {
    let a: BTreeSet<String> = tokenize(&pair.t_a).into_iter().collect();
    let b: BTreeSet<String> = tokenize(&pair.t_b).into_iter().collect();
    a.intersection(&b).next().cloned()
}
