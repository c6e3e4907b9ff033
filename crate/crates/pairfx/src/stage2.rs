//! Stage II explanation generation: prompt templating, a tiny trainable LM
//! exercising the teacher-forced fine-tuning objective, and pluggable
//! generation backends (stub, tiny LM, remote chat completion).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{DecodeParams, LlmClient};
use crate::nn::{self, AdamConfig, DenseNetF64, GradMap, MlpSpec, OptimizerState, ParamSet};
use crate::pairs::PairExample;
use crate::rng::SplitMix64;
use crate::stage1::{self, Stage1Model, Vocabulary, END, PAD, UNK};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    CausalSuffix,
    Instruct,
    CustomerQuery,
}

impl PromptStyle {
    pub fn template(self) -> &'static str {
        match self {
            PromptStyle::CausalSuffix => "{f_i} {c_i} and {f_j} {c_j} match because",
            PromptStyle::Instruct => {
                "Generate the reason why {f_i} {c_i} and {f_j} {c_j} match:"
            }
            PromptStyle::CustomerQuery => {
                "What is the reason why {f_i} {c_i} and {f_j} {c_j} match, and could you please provide a concise response (with one or two sentences) that can be directly shown to customers?"
            }
        }
    }
}

/// Substitutes the four fields into the style's template. Fields are trimmed;
/// empty fields violate the precondition.
pub fn render_prompt(
    style: PromptStyle,
    f_i: &str,
    c_i: &str,
    f_j: &str,
    c_j: &str,
) -> Result<String> {
    let fields = [("f_i", f_i), ("c_i", c_i), ("f_j", f_j), ("c_j", c_j)];
    let mut out = style.template().to_string();
    for (name, value) in fields {
        let value = value.trim();
        if value.is_empty() {
            return Err(Error::Precondition(format!("empty prompt field {name}")));
        }
        out = out.replace(&format!("{{{name}}}"), value);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decode {
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub f_i: String,
    pub c_i: String,
    pub f_j: String,
    pub c_j: String,
    pub max_new_tokens: usize,
    pub decode: Decode,
}

impl GenerationRequest {
    pub fn new(style: PromptStyle, f_i: &str, c_i: &str, f_j: &str, c_j: &str) -> Result<Self> {
        Ok(GenerationRequest {
            prompt: render_prompt(style, f_i, c_i, f_j, c_j)?,
            f_i: f_i.trim().to_string(),
            c_i: c_i.trim().to_string(),
            f_j: f_j.trim().to_string(),
            c_j: c_j.trim().to_string(),
            max_new_tokens: 100,
            decode: Decode::Greedy,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
}

pub trait GenerationBackend: Sync {
    fn id(&self) -> String;
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutput>;
}

pub fn generate_explanation(
    backend: &dyn GenerationBackend,
    req: &GenerationRequest,
) -> Result<GenerationOutput> {
    if req.max_new_tokens == 0 {
        return Err(Error::Precondition("max_new_tokens must be >= 1".into()));
    }
    backend.generate(req)
}

/// Deterministic offline backend for tests and dry runs.
pub struct StubBackend;

impl GenerationBackend for StubBackend {
    fn id(&self) -> String {
        "stub".into()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutput> {
        Ok(GenerationOutput {
            text: format!(
                "The {} and {} match because {} complements {}.",
                req.c_i, req.c_j, req.f_i, req.f_j
            ),
            backend_id: self.id(),
            cached: false,
        })
    }
}

/// Chat-completion backend delegating to the HTTP client.
pub struct RemoteBackend {
    pub client: LlmClient,
}

impl GenerationBackend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.client.config.model_name)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutput> {
        let decode = DecodeParams {
            max_tokens: req.max_new_tokens,
            ..DecodeParams::default()
        };
        let result = self.client.complete_with(&req.prompt, &decode)?;
        Ok(GenerationOutput {
            text: result.text,
            backend_id: self.id(),
            cached: result.cached,
        })
    }
}

// ---------------------------------------------------------------------------
// Tiny LM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub context_window: usize,
    /// Fault if the corpus vocabulary exceeds this cap.
    pub max_vocab: usize,
    pub prompt_style: PromptStyle,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            embed_dim: 32,
            hidden: 64,
            context_window: 32,
            max_vocab: 50_000,
            prompt_style: PromptStyle::CausalSuffix,
            lr: 2e-4,
            epochs: 20,
            batch_size: 5,
            seed: 0,
        }
    }
}

/// Feed-forward next-token model over a fixed context window: the last
/// `context_window` token embeddings are concatenated and fed to a tanh
/// hidden layer with a linear vocabulary head. The head starts at zero so
/// the untrained distribution is uniform (perplexity = |V|).
#[derive(Debug, Clone)]
pub struct TinyLM {
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub embed_dim: usize,
    pub hidden: usize,
    pub context_window: usize,
    pub prompt_style: PromptStyle,
}

#[derive(Debug, Serialize, Deserialize)]
struct TinyLmMeta {
    embed_dim: usize,
    hidden: usize,
    context_window: usize,
    prompt_style: PromptStyle,
}

impl TinyLM {
    fn head_spec(&self) -> MlpSpec {
        MlpSpec::head(
            self.context_window * self.embed_dim,
            self.hidden,
            self.vocab.len(),
        )
    }

    pub fn init(config: &TinyLmConfig, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() > config.max_vocab {
            return Err(Error::fault(format!(
                "vocabulary of {} tokens exceeds the configured cap of {}",
                vocab.len(),
                config.max_vocab
            )));
        }
        let mut params = ParamSet::new(config.seed);
        let mut rng = SplitMix64::substream(config.seed, "init");
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let data: Vec<f32> = (0..vocab.len() * d)
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        let head_spec = MlpSpec::head(config.context_window * d, config.hidden, vocab.len());
        params.insert("embed", Tensor::from_vec(&[vocab.len(), d], data)?);
        head_spec.init("head", &mut params, &mut rng)?;
        // Zero vocabulary head: the untrained model is exactly uniform.
        for name in ["head.w1", "head.b1"] {
            for v in params.get_mut(name)?.data_mut() {
                *v = 0.0;
            }
        }
        Ok(TinyLM {
            vocab,
            params,
            embed_dim: d,
            hidden: config.hidden,
            context_window: config.context_window,
            prompt_style: config.prompt_style,
        })
    }

    /// The context ids feeding the prediction at sequence position `pos`:
    /// the last `context_window` tokens, left-padded with `<pad>`.
    fn context_at(&self, ids: &[usize], pos: usize) -> Vec<usize> {
        let cw = self.context_window;
        let start = pos.saturating_sub(cw);
        let mut ctx = vec![PAD; cw - (pos - start)];
        ctx.extend_from_slice(&ids[start..pos]);
        ctx
    }

    fn context_row(&self, embed: &Tensor, ctx: &[usize]) -> Vec<f64> {
        let d = self.embed_dim;
        let mut row = Vec::with_capacity(ctx.len() * d);
        for &id in ctx {
            row.extend(embed.row(id).iter().map(|&v| v as f64));
        }
        row
    }

    /// Next-token distribution given a context; sums to 1.
    pub fn next_distribution(&self, context: &[usize]) -> Result<Vec<f64>> {
        let head = DenseNetF64::from_params(&self.params, "head", &self.head_spec())?;
        let embed = self.params.get("embed")?;
        let ctx = if context.len() >= self.context_window {
            context[context.len() - self.context_window..].to_vec()
        } else {
            let mut c = vec![PAD; self.context_window - context.len()];
            c.extend_from_slice(context);
            c
        };
        let (logits, _) = head.forward(&[self.context_row(embed, &ctx)]);
        Ok(softmax_f64(&logits[0]))
    }

    /// Autoregressive decode from a prompt. Specials are never emitted except
    /// `<end>`, which stops generation (but not as the very first step, so
    /// the output is non-empty).
    pub fn generate(&self, prompt: &str, max_new_tokens: usize, decode: &Decode) -> Result<String> {
        if max_new_tokens == 0 {
            return Err(Error::Precondition("max_new_tokens must be >= 1".into()));
        }
        let head = DenseNetF64::from_params(&self.params, "head", &self.head_spec())?;
        let embed = self.params.get("embed")?;
        let mut ids = self.vocab.encode(prompt);
        let mut out = Vec::new();
        let mut rng = match decode {
            Decode::Greedy => None,
            Decode::TopK { seed, .. } => Some(SplitMix64::substream(*seed, "decode")),
        };
        for step in 0..max_new_tokens {
            let ctx = self.context_at(&ids, ids.len());
            let (logits, _) = head.forward(&[self.context_row(embed, &ctx)]);
            let mut scores = logits.into_iter().next().unwrap();
            scores[PAD] = f64::NEG_INFINITY;
            scores[UNK] = f64::NEG_INFINITY;
            if step == 0 {
                scores[END] = f64::NEG_INFINITY;
            }
            let next = match (decode, rng.as_mut()) {
                (Decode::Greedy, _) => argmax(&scores),
                (Decode::TopK { k, temperature, .. }, Some(rng)) => {
                    sample_top_k(&scores, *k, *temperature, rng)
                }
                _ => unreachable!(),
            };
            if next == END {
                break;
            }
            out.push(self.vocab.token(next).to_string());
            ids.push(next);
        }
        Ok(out.join(" "))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        nn::save_checkpoint(dir, &self.params, 0)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let meta = TinyLmMeta {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            context_window: self.context_window,
            prompt_style: self.prompt_style,
        };
        crate::io::write_json(&dir.join("model.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: TinyLmMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let (params, _) = nn::load_checkpoint(dir)?;
        Ok(TinyLM {
            vocab,
            params,
            embed_dim: meta.embed_dim,
            hidden: meta.hidden,
            context_window: meta.context_window,
            prompt_style: meta.prompt_style,
        })
    }
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(scores: &[f64], k: usize, temperature: f64, rng: &mut SplitMix64) -> usize {
    let k = k.max(1);
    let idx = stage1::top_k_by_score(scores, k.min(scores.len()));
    let t = temperature.max(1e-6);
    let logits: Vec<f64> = idx.iter().map(|&i| scores[i] / t).collect();
    let probs = softmax_f64(&logits);
    let mut u = rng.next_f64();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return idx[i];
        }
        u -= p;
    }
    *idx.last().unwrap()
}

/// One teacher-forcing step: context ids plus the token to predict. Only
/// explanation positions (and the closing `<end>`) become examples; prompt
/// positions are conditioned on, never scored.
#[derive(Debug, Clone)]
pub struct LmExample {
    pub context: Vec<usize>,
    pub target: usize,
}

pub fn training_examples(
    lm: &TinyLM,
    records: &[crate::corpus::PFERecord],
) -> Result<Vec<LmExample>> {
    let mut examples = Vec::new();
    for rec in records {
        let prompt = render_prompt(
            lm.prompt_style,
            &rec.features.0,
            &rec.categories.0,
            &rec.features.1,
            &rec.categories.1,
        )?;
        let mut ids = lm.vocab.encode(&prompt);
        let prompt_len = ids.len();
        ids.extend(lm.vocab.encode(&rec.explanation));
        ids.push(END);
        for pos in prompt_len..ids.len() {
            examples.push(LmExample {
                context: lm.context_at(&ids, pos),
                target: ids[pos],
            });
        }
    }
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub perplexity: f64,
}

/// Mean cross-entropy over examples, forward only.
pub fn lm_loss(lm: &TinyLM, examples: &[LmExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Precondition("no teacher-forcing examples".into()));
    }
    let head = DenseNetF64::from_params(&lm.params, "head", &lm.head_spec())?;
    let embed = lm.params.get("embed")?;
    let losses = crate::par::map_items(examples, |ex| {
        let (logits, _) = head.forward(&[lm.context_row(embed, &ex.context)]);
        ce_loss(&logits[0], ex.target)
    });
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

fn ce_loss(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    total.ln() + m - logits[target]
}

/// Teacher-forced fine-tuning on PFE records (maximizes the explanation
/// log-likelihood given the templated prompt). Reports per-epoch perplexity.
pub fn finetune_tiny_lm(
    records: &[crate::corpus::PFERecord],
    config: &TinyLmConfig,
) -> Result<(TinyLM, Vec<LmEpochStats>)> {
    if records.is_empty() {
        return Err(Error::Precondition("no training records".into()));
    }
    let mut texts: Vec<String> = Vec::new();
    for rec in records {
        texts.push(render_prompt(
            config.prompt_style,
            &rec.features.0,
            &rec.categories.0,
            &rec.features.1,
            &rec.categories.1,
        )?);
        texts.push(rec.explanation.clone());
    }
    let vocab = Vocabulary::build(texts.iter().map(|s| s.as_str()));
    let mut lm = TinyLM::init(config, vocab)?;
    let examples = training_examples(&lm, records)?;

    let mut opt = OptimizerState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut rng = SplitMix64::substream(config.seed, "train");
    let mut history = Vec::with_capacity(config.epochs);
    let batch_size = config.batch_size.max(1);
    let spec = lm.head_spec();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let head = DenseNetF64::from_params(&lm.params, "head", &spec)?;
            let embed = lm.params.get("embed")?;
            let d = lm.embed_dim;
            let mut head_grads = head.zero_grads();
            let mut dembed = vec![0.0f64; embed.len()];
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &examples[i];
                let x = lm.context_row(embed, &ex.context);
                let (logits, cache) = head.forward(&[x]);
                batch_loss += ce_loss(&logits[0], ex.target);
                let mut dlogits = softmax_f64(&logits[0]);
                dlogits[ex.target] -= 1.0;
                for v in &mut dlogits {
                    *v *= scale;
                }
                let dx = head
                    .backward(&[dlogits], &cache, &mut head_grads)
                    .into_iter()
                    .next()
                    .unwrap();
                for (slot, &id) in ex.context.iter().enumerate() {
                    for c in 0..d {
                        dembed[id * d + c] += dx[slot * d + c];
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("tiny-lm loss at epoch {epoch}")));
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            let mut grads = GradMap::new();
            head_grads.accumulate_into(&mut grads, "head", &spec);
            let dembed32: Vec<f32> = dembed.iter().map(|&v| v as f32).collect();
            nn::accumulate(
                &mut grads,
                "embed",
                &Tensor::from_vec(embed.shape(), dembed32)?,
            );
            nn::adam_step(&mut lm.params, &grads, &mut opt)?;
        }
        let loss = epoch_loss / examples.len() as f64;
        history.push(LmEpochStats {
            epoch,
            loss,
            perplexity: loss.exp(),
        });
    }
    Ok((lm, history))
}

/// Tiny-LM generation backend.
pub struct TinyLmBackend {
    pub lm: TinyLM,
}

impl GenerationBackend for TinyLmBackend {
    fn id(&self) -> String {
        "tiny_lm".into()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutput> {
        let text = self.lm.generate(&req.prompt, req.max_new_tokens, &req.decode)?;
        Ok(GenerationOutput {
            text,
            backend_id: self.id(),
            cached: false,
        })
    }
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainOutcome {
    pub score: f64,
    /// None when the pair fell below the match threshold.
    pub prompt: Option<String>,
    pub explanation: Option<GenerationOutput>,
}

/// One generation line of the JSONL output. Below-threshold pairs carry an
/// empty prompt and explanation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id_a: String,
    pub id_b: String,
    pub prompt: String,
    pub explanation: String,
    pub backend: String,
    pub score: f64,
}

pub struct PipelineConfig {
    pub style: PromptStyle,
    pub top_k_words: usize,
    pub max_new_tokens: usize,
    pub decode: Decode,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            style: PromptStyle::CausalSuffix,
            top_k_words: 3,
            max_new_tokens: 100,
            decode: Decode::Greedy,
            threshold: 0.5,
        }
    }
}

/// Extraction, classification, and (for matches) prompt rendering plus
/// generation. Below-threshold pairs never touch the backend.
pub fn explain_pipeline(
    pair: &PairExample,
    model: &Stage1Model,
    backend: &dyn GenerationBackend,
    config: &PipelineConfig,
) -> Result<ExplainOutcome> {
    let extraction = stage1::extract(model, &pair.t_a, &pair.t_b)?;
    if extraction.score < config.threshold {
        return Ok(ExplainOutcome {
            score: extraction.score,
            prompt: None,
            explanation: None,
        });
    }
    let (w_a, w_b) = stage1::extract_top_words(&extraction, config.top_k_words);
    let mut req = GenerationRequest::new(
        config.style,
        &w_a.join(" "),
        &pair.c_a,
        &w_b.join(" "),
        &pair.c_b,
    )?;
    req.max_new_tokens = config.max_new_tokens;
    req.decode = config.decode.clone();
    let output = generate_explanation(backend, &req)?;
    Ok(ExplainOutcome {
        score: extraction.score,
        prompt: Some(req.prompt),
        explanation: Some(output),
    })
}
