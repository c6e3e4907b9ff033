//! Batch CLI over the library: dataset construction, Stage I training and
//! evaluation, tiny-LM fine-tuning, end-to-end explanation, and metric
//! scoring. Every subcommand writes its artifacts plus a manifest recording
//! the seed and the effective config hash.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use pairfx::config::{load_config, BackendKind, RunConfig};
use pairfx::corpus::{self, PFERecord, RawSentence};
use pairfx::error::{Error, Result};
use pairfx::io::{self, Manifest};
use pairfx::llm::LlmClient;
use pairfx::metrics::{score_corpus, HashEmbedder, MetricsConfig};
use pairfx::pairs::{self, CatalogItem, CategorizedItem, PairExample};
use pairfx::stage1::{self, Stage1Model};
use pairfx::stage2::{
    self, explain_pipeline, GenerationBackend, GenerationRecord, PipelineConfig, RemoteBackend,
    StubBackend, TinyLmBackend,
};

#[derive(Parser)]
#[command(name = "pairfx", version, about = "Outfit-pair explanation pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Serve LLM calls from cache only; a miss is an error.
    #[arg(long, global = true)]
    offline: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sentence funnel and write PFE records plus train/test splits.
    BuildPfe,
    /// Derive labeled item pairs from the catalog and split them.
    BuildPairs,
    /// Train the Stage I pair classifier.
    TrainStage1,
    /// Evaluate the Stage I model: accuracy and R@K retrieval.
    EvalStage1,
    /// Extract salient words per pair with a trained Stage I model.
    Extract {
        /// Pair JSONL to extract from; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fine-tune the tiny explanation LM on PFE training records.
    TrainTinylm,
    /// Classify pairs and generate explanations for the matches.
    Explain {
        /// Pair JSONL to explain; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score generated explanations against references.
    Evaluate {
        /// Generation JSONL; defaults to the explain output.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// PFE record JSONL with reference explanations; defaults to the
        /// PFE test split.
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Category percentage statistics over PFE records.
    Stats,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

struct Ctx {
    config: RunConfig,
    config_digest: String,
    seed: u64,
    offline: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.config.paths.output_dir.join(name)
    }

    fn manifest(&self, command: &str, inputs: &[&Path]) -> Result<Manifest> {
        let mut manifest = Manifest::new(command, self.seed, self.config_digest.as_bytes());
        for path in inputs {
            manifest.add_input(path)?;
        }
        Ok(manifest)
    }

    fn client(&self) -> Result<LlmClient> {
        if self.config.llm.base_url.is_empty() && !self.offline && !self.config.llm.offline {
            return Err(Error::config(
                "llm.base_url is empty; set it or run with --offline",
            ));
        }
        LlmClient::new(
            self.config
                .llm
                .to_client_config(&self.config.paths.cache_dir, self.offline),
        )
    }

    fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            style: self.config.stage2.prompt_style,
            top_k_words: self.config.stage1.top_k_words,
            max_new_tokens: self.config.stage2.max_new_tokens,
            decode: self.config.stage2.decode.clone(),
            threshold: self.config.stage2.threshold,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(config.seed),
        offline: cli.offline,
        config_digest: config.digest()?,
        config,
    };
    match cli.command {
        Command::BuildPfe => build_pfe(&ctx),
        Command::BuildPairs => build_pairs(&ctx),
        Command::TrainStage1 => train_stage1(&ctx),
        Command::EvalStage1 => eval_stage1(&ctx),
        Command::Extract { input } => extract(&ctx, input),
        Command::TrainTinylm => train_tinylm(&ctx),
        Command::Explain { input } => explain(&ctx, input),
        Command::Evaluate {
            candidates,
            references,
        } => evaluate(&ctx, candidates, references),
        Command::Stats => stats(&ctx),
    }
}

fn build_pfe(ctx: &Ctx) -> Result<()> {
    let paths = &ctx.config.paths;
    let sentences: Vec<RawSentence> = io::read_jsonl(&paths.corpus)?;
    let dict = corpus::load_entity_dictionary(&paths.dictionary)?;
    let client = ctx.client()?;
    let output = corpus::run_funnel(
        &sentences,
        &dict,
        &client,
        ctx.config.funnel.min_distinct_entities,
    )?;
    let splits = pairs::split_dataset(&output.records, &ctx.config.splits.pfe, ctx.seed)?;

    let dir = ctx.out("pfe");
    io::write_jsonl(&dir.join("pfe_records.jsonl"), &output.records)?;
    io::write_jsonl(&dir.join("pfe_train.jsonl"), &splits[0])?;
    io::write_jsonl(&dir.join("pfe_test.jsonl"), &splits[1])?;
    io::write_json(&dir.join("funnel_log.json"), &output.log)?;
    ctx.manifest("build-pfe", &[&paths.corpus, &paths.dictionary])?
        .write(&dir)?;
    for stage in &output.log.stages {
        println!("{}: {}", stage.name, stage.count);
    }
    println!(
        "wrote {} records ({} train / {} test) to {}",
        output.records.len(),
        splits[0].len(),
        splits[1].len(),
        dir.display()
    );
    Ok(())
}

fn build_pairs(ctx: &Ctx) -> Result<()> {
    let paths = &ctx.config.paths;
    let catalog: Vec<CatalogItem> = io::read_jsonl(&paths.catalog)?;
    let dict = corpus::load_entity_dictionary(&paths.dictionary)?;
    let items = pairs::categorize_catalog(&catalog, &dict, ctx.config.funnel.category_position);
    let (positives, stats) = pairs::derive_positive_pairs(&items);
    let (negatives, sampling) = pairs::sample_negatives(
        &positives,
        &items,
        ctx.seed,
        ctx.config.negatives.max_retries,
    )?;
    let mut all = positives;
    all.extend(negatives);
    let splits = pairs::split_dataset(&all, &ctx.config.splits.stage1, ctx.seed)?;

    let dir = ctx.out("pairs");
    io::write_jsonl(&dir.join("items.jsonl"), &items)?;
    io::write_jsonl(&dir.join("pairs_train.jsonl"), &splits[0])?;
    io::write_jsonl(&dir.join("pairs_valid.jsonl"), &splits[1])?;
    io::write_jsonl(&dir.join("pairs_test.jsonl"), &splits[2])?;
    io::write_json(
        &dir.join("stats.json"),
        &serde_json::json!({ "positives": stats, "negatives": sampling }),
    )?;
    ctx.manifest("build-pairs", &[&paths.catalog, &paths.dictionary])?
        .write(&dir)?;
    println!(
        "{} items, {} pairs ({} train / {} valid / {} test)",
        items.len(),
        all.len(),
        splits[0].len(),
        splits[1].len(),
        splits[2].len()
    );
    Ok(())
}

fn train_stage1(ctx: &Ctx) -> Result<()> {
    let pairs_dir = ctx.out("pairs");
    let train_path = pairs_dir.join("pairs_train.jsonl");
    let valid_path = pairs_dir.join("pairs_valid.jsonl");
    let train: Vec<PairExample> = io::read_jsonl(&train_path)?;
    let valid: Vec<PairExample> = io::read_jsonl(&valid_path)?;
    let config = ctx.config.stage1.to_config(ctx.seed);
    let (model, history) = stage1::train_stage1(&train, &valid, &config)?;

    let dir = ctx.out("stage1_model");
    // The checkpoint has its own manifest.json, so it lives one level down
    // from the run manifest.
    model.save(&dir.join("model"))?;
    io::write_json(&dir.join("history.json"), &history)?;
    ctx.manifest("train-stage1", &[&train_path, &valid_path])?
        .write(&dir)?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: train loss {:.4} acc {:.3}, valid loss {:.4} acc {:.3}",
            last.epoch, last.train_loss, last.train_acc, last.valid_loss, last.valid_acc
        );
    }
    println!("saved model to {}", dir.display());
    Ok(())
}

fn eval_stage1(ctx: &Ctx) -> Result<()> {
    let pairs_dir = ctx.out("pairs");
    let model = Stage1Model::load(&ctx.out("stage1_model").join("model"))?;
    let test_path = pairs_dir.join("pairs_test.jsonl");
    let test: Vec<PairExample> = io::read_jsonl(&test_path)?;
    let items_path = pairs_dir.join("items.jsonl");
    let pool: Vec<CategorizedItem> = io::read_jsonl(&items_path)?;
    let mut positive_keys: BTreeSet<(String, String)> = BTreeSet::new();
    for name in ["pairs_train.jsonl", "pairs_valid.jsonl", "pairs_test.jsonl"] {
        let split: Vec<PairExample> = io::read_jsonl(&pairs_dir.join(name))?;
        positive_keys.extend(
            split
                .iter()
                .filter(|p| p.label == 1)
                .map(|p| pairs::unordered_key(&p.id_a, &p.id_b)),
        );
    }
    let report = stage1::evaluate_stage1(
        &model,
        &test,
        &pool,
        &positive_keys,
        ctx.config.eval.negatives_per_anchor,
        &ctx.config.eval.ks,
        ctx.seed,
    )?;
    if report.short_pools > 0 {
        eprintln!(
            "warning: {} anchors had fewer than {} eligible distractors",
            report.short_pools, ctx.config.eval.negatives_per_anchor
        );
    }

    let dir = ctx.out("stage1_eval");
    io::write_json(&dir.join("eval.json"), &report)?;
    ctx.manifest("eval-stage1", &[&test_path, &items_path])?
        .write(&dir)?;
    println!("accuracy: {:.4} over {} pairs", report.accuracy, report.n_test);
    for (k, r) in &report.recall_at {
        println!("R@{k}: {r:.4}");
    }
    Ok(())
}

fn extract(ctx: &Ctx, input: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| ctx.out("pairs").join("pairs_test.jsonl"));
    let model = Stage1Model::load(&ctx.out("stage1_model").join("model"))?;
    let pairs: Vec<PairExample> = io::read_jsonl(&input)?;
    let records = stage1::extract_pairs(&model, &pairs, ctx.config.stage1.top_k_words)?;

    let dir = ctx.out("extractions");
    io::write_jsonl(&dir.join("extractions.jsonl"), &records)?;
    ctx.manifest("extract", &[&input])?.write(&dir)?;
    println!("extracted {} pairs to {}", records.len(), dir.display());
    Ok(())
}

fn train_tinylm(ctx: &Ctx) -> Result<()> {
    let train_path = ctx.out("pfe").join("pfe_train.jsonl");
    let records: Vec<PFERecord> = io::read_jsonl(&train_path)?;
    let config = ctx
        .config
        .tiny_lm
        .to_config(ctx.seed, ctx.config.stage2.prompt_style);
    let (lm, history) = stage2::finetune_tiny_lm(&records, &config)?;

    let dir = ctx.out("tinylm");
    lm.save(&dir.join("model"))?;
    io::write_json(&dir.join("history.json"), &history)?;
    ctx.manifest("train-tinylm", &[&train_path])?.write(&dir)?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: loss {:.4}, perplexity {:.2}",
            last.epoch, last.loss, last.perplexity
        );
    }
    println!("saved tiny LM to {}", dir.display());
    Ok(())
}

fn explain(ctx: &Ctx, input: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| ctx.out("pairs").join("pairs_test.jsonl"));
    let model = Stage1Model::load(&ctx.out("stage1_model").join("model"))?;
    let pairs: Vec<PairExample> = io::read_jsonl(&input)?;
    let backend: Box<dyn GenerationBackend> = match ctx.config.stage2.backend {
        BackendKind::Stub => Box::new(StubBackend),
        BackendKind::TinyLm => Box::new(TinyLmBackend {
            lm: stage2::TinyLM::load(&ctx.out("tinylm").join("model"))?,
        }),
        BackendKind::Remote => Box::new(RemoteBackend {
            client: ctx.client()?,
        }),
    };
    let pipeline = ctx.pipeline_config();
    let mut records = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let outcome = explain_pipeline(pair, &model, backend.as_ref(), &pipeline)?;
        let (prompt, explanation, backend_id) = match outcome.explanation {
            Some(generated) => (
                outcome.prompt.unwrap_or_default(),
                generated.text,
                generated.backend_id,
            ),
            None => (String::new(), String::new(), "none".to_string()),
        };
        records.push(GenerationRecord {
            id_a: pair.id_a.clone(),
            id_b: pair.id_b.clone(),
            prompt,
            explanation,
            backend: backend_id,
            score: outcome.score,
        });
    }

    let dir = ctx.out("generations");
    io::write_jsonl(&dir.join("generations.jsonl"), &records)?;
    ctx.manifest("explain", &[&input])?.write(&dir)?;
    let matches = records.iter().filter(|r| !r.explanation.is_empty()).count();
    println!(
        "explained {matches} of {} pairs to {}",
        records.len(),
        dir.display()
    );
    Ok(())
}

fn evaluate(ctx: &Ctx, candidates: Option<PathBuf>, references: Option<PathBuf>) -> Result<()> {
    let cand_path =
        candidates.unwrap_or_else(|| ctx.out("generations").join("generations.jsonl"));
    let ref_path = references.unwrap_or_else(|| ctx.out("pfe").join("pfe_test.jsonl"));
    let generated: Vec<GenerationRecord> = io::read_jsonl(&cand_path)?;
    let refs: Vec<PFERecord> = io::read_jsonl(&ref_path)?;
    let cand_texts: Vec<String> = generated
        .iter()
        .filter(|r| !r.explanation.is_empty())
        .map(|r| r.explanation.clone())
        .collect();
    let ref_texts: Vec<String> = refs.iter().map(|r| r.explanation.clone()).collect();
    if cand_texts.len() != ref_texts.len() {
        return Err(Error::Precondition(format!(
            "{} generated explanations vs {} references; metrics need aligned corpora",
            cand_texts.len(),
            ref_texts.len()
        )));
    }
    let embedder = HashEmbedder {
        dim: 64,
        seed: ctx.seed,
    };
    let report = score_corpus(
        &cand_texts,
        &ref_texts,
        &embedder,
        MetricsConfig {
            embedder: "hash".into(),
            embed_dim: 64,
            embed_seed: ctx.seed,
        },
    )?;

    let dir = ctx.out("metrics");
    io::write_json(&dir.join("metrics.json"), &report)?;
    ctx.manifest("evaluate", &[&cand_path, &ref_path])?
        .write(&dir)?;
    println!(
        "BLEU-1 {:.4} BLEU-4 {:.4} ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4} FID {:.4} ({} pairs)",
        report.bleu_1,
        report.bleu_4,
        report.rouge_1,
        report.rouge_2,
        report.rouge_l,
        report.fid,
        report.n_pairs
    );
    Ok(())
}

fn stats(ctx: &Ctx) -> Result<()> {
    let records_path = ctx.out("pfe").join("pfe_records.jsonl");
    let records: Vec<PFERecord> = io::read_jsonl(&records_path)?;
    let table = corpus::category_stats(&records);

    let dir = ctx.out("stats");
    io::write_json(&dir.join("stats.json"), &table)?;
    ctx.manifest("stats", &[&records_path])?.write(&dir)?;
    for (category, pct) in &table {
        println!("{category}: {pct:.2}%");
    }
    Ok(())
}
