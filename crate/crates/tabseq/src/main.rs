//! Command-line entry point: train, evaluate, predict, probe, attention
//! export, corpus stats, synthetic data generation, and the schedule
//! benchmark. Diagnostics go to stderr, machine-readable output to stdout
//! or files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tabseq::codec::{EntitySpan, Relation, Sentence};
use tabseq::data::{self, Corpus, FeatureSet};
use tabseq::embed::{load_glove, Vocabulary};
use tabseq::error::{Error, Result};
use tabseq::model::params::ParamStore;
use tabseq::model::{Model, ModelConfig};
use tabseq::synth;
use tabseq::table::{run_direction, DimUse, GruCell, Schedule, DIR_A};
use tabseq::tensor::Tensor;
use tabseq::train::{
    self, evaluate, load_checkpoint, save_checkpoint, FeatureSources, TrainConfig,
};

#[derive(Parser)]
#[command(name = "tabseq", version, about = "Table-sequence encoders for joint NER and RE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus a JSONL log.
    Train(TrainArgs),
    /// Score a checkpoint against a gold corpus.
    Eval(EvalArgs),
    /// Decode entities and relations for raw token JSONL.
    Predict(PredictArgs),
    /// Apply the prediction heads to every intermediate layer.
    Probe(ProbeArgs),
    /// Dump per-layer, per-head attention weights as JSON.
    ExportAttention(ProbeArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Generate a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Time the naive vs wavefront schedules and emit CSV.
    Bench(BenchArgs),
}

/// Configuration file: `{"model": {...}, "train": {...}}`, both sections
/// optional, unknown keys rejected.
#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args)]
struct ModelOverrides {
    /// Execution schedule for inference passes.
    #[arg(long, default_value = "naive")]
    schedule: String,
    /// Table-encoder direction set: uni, bi-ac, bi-bd, quad.
    #[arg(long)]
    directions: Option<String>,
    /// NER head source: sequence or diagonal.
    #[arg(long)]
    ner_head: Option<String>,
    /// Drop the entity term from the joint loss.
    #[arg(long)]
    no_entity_loss: bool,
    /// Drop the relation term from the joint loss.
    #[arg(long)]
    no_relation_loss: bool,
    /// Sever the encoder interaction: dot-product attention and table
    /// input frozen at the initial sequence representation.
    #[arg(long)]
    no_interaction: bool,
    /// Share encoder-layer parameters across depth.
    #[arg(long)]
    shared_layers: bool,
}

impl ModelOverrides {
    fn apply(&self, config: &mut ModelConfig) -> Result<()> {
        if let Some(d) = &self.directions {
            config.direction_set = d.parse()?;
        }
        if let Some(h) = &self.ner_head {
            config.ner_head = h.parse()?;
        }
        if self.no_entity_loss {
            config.entity_loss = false;
        }
        if self.no_relation_loss {
            config.relation_loss = false;
        }
        if self.no_interaction {
            config.bi_interaction = false;
        }
        if self.shared_layers {
            config.shared_layers = true;
        }
        Ok(())
    }

    fn schedule(&self) -> Result<Schedule> {
        self.schedule.parse()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file ({"model": ..., "train": ...}).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Development corpus for model selection (JSONL).
    #[arg(long)]
    dev: Option<PathBuf>,
    /// GloVe text file to initialize word embeddings.
    #[arg(long)]
    glove: Option<PathBuf>,
    /// Precomputed contextual-embedding feature file.
    #[arg(long)]
    features_emb: Option<PathBuf>,
    /// Precomputed attention-weight feature file.
    #[arg(long)]
    features_attn: Option<PathBuf>,
    /// Output directory for checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    overrides: ModelOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Gold corpus to score against (JSONL).
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    features_emb: Option<PathBuf>,
    #[arg(long)]
    features_attn: Option<PathBuf>,
    #[arg(long, default_value = "naive")]
    schedule: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw token JSONL: {"tokens": [...]} per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    features_emb: Option<PathBuf>,
    #[arg(long)]
    features_attn: Option<PathBuf>,
    #[arg(long, default_value = "naive")]
    schedule: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus holding the sentence (JSONL).
    #[arg(long)]
    test: PathBuf,
    /// Sentence id to inspect.
    #[arg(long)]
    sentence_id: usize,
    #[arg(long)]
    features_emb: Option<PathBuf>,
    #[arg(long)]
    features_attn: Option<PathBuf>,
    #[arg(long, default_value = "naive")]
    schedule: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus to summarize (JSONL).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of sentences.
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sentence lengths.
    #[arg(long, default_value = "16,32,64,128")]
    sizes: String,
    /// Hidden width of the benchmarked recurrence.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Repetitions per measurement (best is kept).
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output CSV file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Probe(args) => cmd_probe(args, false),
        Command::ExportAttention(args) => cmd_probe(args, true),
        Command::Stats(args) => cmd_stats(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let cfg: FileConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?;
            Ok(cfg)
        }
    }
}

fn load_feature_file(path: Option<&Path>) -> Result<Option<FeatureSet>> {
    match path {
        None => Ok(None),
        Some(p) => Ok(Some(data::load_features(p)?)),
    }
}

fn build_vocabs(corpus: &Corpus) -> (Vocabulary, Vocabulary) {
    let words: Vec<&str> = corpus
        .sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| t.as_str()))
        .collect();
    let word_vocab = Vocabulary::build(words.iter().copied(), true);
    let chars: Vec<String> = words
        .iter()
        .flat_map(|w| w.chars())
        .map(|c| c.to_string())
        .collect();
    let char_vocab = Vocabulary::build(chars.iter().map(|s| s.as_str()), false);
    (word_vocab, char_vocab)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg.model)?;
    let train_corpus = data::load_corpus(&args.train)?;
    if train_corpus.dropped_overlapping > 0 {
        eprintln!(
            "dropped {} sentences with overlapping entities",
            train_corpus.dropped_overlapping
        );
    }
    let dev_corpus = args.dev.as_deref().map(data::load_corpus).transpose()?;

    let emb = load_feature_file(args.features_emb.as_deref())?;
    let attn = load_feature_file(args.features_attn.as_deref())?;
    if let Some(f) = &emb {
        f.check_coverage(&train_corpus)?;
        cfg.model.use_ctx_embeddings = true;
        cfg.model.ctx_dim = f.width;
    }
    if let Some(f) = &attn {
        f.check_coverage(&train_corpus)?;
        cfg.model.use_attn_features = true;
        cfg.model.attn_feat_width = f.width;
    }
    let features = FeatureSources { emb: emb.as_ref(), attn: attn.as_ref() };

    let (word_vocab, char_vocab) = build_vocabs(&train_corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let word_init = match &args.glove {
        Some(p) => Some(load_glove(p, &word_vocab, cfg.model.word_dim, &mut rng)?),
        None => None,
    };
    let mut model = Model::new(
        cfg.model.clone(),
        word_vocab,
        char_vocab,
        train_corpus.vocab.clone(),
        word_init,
        &mut rng,
    )?;
    eprintln!("trainable parameters: {}", model.parameter_count());

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = train::train(
        &mut model,
        &train_corpus,
        dev_corpus.as_ref(),
        features,
        &cfg.train,
        args.seed,
        Some(&mut log),
    )?;
    log.flush()?;

    let ckpt_path = args.out.join("model.ckpt");
    save_checkpoint(&model, &ckpt_path)?;
    eprintln!("checkpoint written to {}", ckpt_path.display());

    let mut summary = json!({
        "epochs_run": outcome.epochs_run,
        "steps": outcome.steps,
        "stopped_early": outcome.stopped_early,
        "checkpoint": ckpt_path,
        "log": log_path,
    });
    if let Some((epoch, sel)) = outcome.best_dev {
        summary["best_dev_epoch"] = json!(epoch);
        summary["best_dev_selection"] = json!(sel);
    }
    if let Some(dev) = dev_corpus.as_ref() {
        let eval = evaluate(&model, dev, features, args.overrides.schedule()?)?;
        summary["dev"] = serde_json::to_value(&eval.report)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn feature_sources<'a>(
    emb: &'a Option<FeatureSet>,
    attn: &'a Option<FeatureSet>,
) -> FeatureSources<'a> {
    FeatureSources { emb: emb.as_ref(), attn: attn.as_ref() }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let corpus = data::load_corpus(&args.test)?;
    if corpus.vocab != model.tag_vocab {
        eprintln!(
            "note: test label inventory differs from the checkpoint; scoring uses checkpoint tags"
        );
    }
    let emb = load_feature_file(args.features_emb.as_deref())?;
    let attn = load_feature_file(args.features_attn.as_deref())?;
    let eval = evaluate(&model, &corpus, feature_sources(&emb, &attn), args.schedule.parse()?)?;
    println!("{}", serde_json::to_string_pretty(&eval.report)?);
    Ok(())
}

#[derive(Deserialize)]
struct RawTokens {
    #[serde(default)]
    id: Option<usize>,
    tokens: Vec<String>,
}

fn relation_to_json(model: &Model, entities: &[EntitySpan], r: &Relation) -> serde_json::Value {
    let find = |span: &EntitySpan| entities.iter().position(|e| e == span);
    json!({
        "head": find(&r.head),
        "tail": find(&r.tail),
        "type": model.tag_vocab.relation_types[r.rtype],
    })
}

fn entities_to_json(model: &Model, entities: &[EntitySpan]) -> Vec<serde_json::Value> {
    entities
        .iter()
        .map(|e| {
            json!({
                "start": e.start,
                "end": e.end,
                "type": model.tag_vocab.entity_types[e.etype],
            })
        })
        .collect()
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let emb = load_feature_file(args.features_emb.as_deref())?;
    let attn = load_feature_file(args.features_attn.as_deref())?;
    let features = feature_sources(&emb, &attn);
    let schedule: Schedule = args.schedule.parse()?;

    let reader = BufReader::new(File::open(&args.input)?);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTokens = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {}", lineno + 1, e)))?;
        let id = raw.id.unwrap_or(lineno);
        let (entities, relations) =
            model.predict(&raw.tokens, features.for_sentence(id), schedule)?;
        let rec = json!({
            "id": id,
            "tokens": raw.tokens,
            "entities": entities_to_json(&model, &entities),
            "relations": relations
                .iter()
                .map(|r| relation_to_json(&model, &entities, r))
                .collect::<Vec<_>>(),
        });
        writeln!(out, "{}", rec)?;
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs, attention: bool) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let corpus = data::load_corpus(&args.test)?;
    let sentence: &Sentence = corpus
        .sentences
        .iter()
        .find(|s| s.id == args.sentence_id)
        .ok_or_else(|| {
            Error::Input(format!("no sentence with id {} in corpus", args.sentence_id))
        })?;
    let emb = load_feature_file(args.features_emb.as_deref())?;
    let attn = load_feature_file(args.features_attn.as_deref())?;
    let features = feature_sources(&emb, &attn);
    let schedule: Schedule = args.schedule.parse()?;
    let sf = features.for_sentence(sentence.id);

    if attention {
        let export = model.export_attention(&sentence.tokens, sf, schedule)?;
        let doc = json!({
            "sentence_id": sentence.id,
            "tokens": sentence.tokens,
            "layers": export
                .layers
                .iter()
                .map(|l| json!({ "heads": l.heads }))
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        let per_layer = model.probe(&sentence.tokens, sf, schedule)?;
        let layers: Vec<serde_json::Value> = per_layer
            .iter()
            .enumerate()
            .map(|(l, (ents, rels))| {
                json!({
                    "layer": l + 1,
                    "entities": entities_to_json(&model, ents),
                    "relations": rels
                        .iter()
                        .map(|r| relation_to_json(&model, ents, r))
                        .collect::<Vec<_>>(),
                })
            })
            .collect();
        let doc = json!({
            "sentence_id": sentence.id,
            "tokens": sentence.tokens,
            "layers": layers,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let corpus = data::load_corpus(&args.data)?;
    let stats = data::stats(&corpus);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let text = synth::generate(args.n, args.seed);
    match args.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{}", text),
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad size '{}'", s)))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("n,schedule,seconds\n");
    for &n in &sizes {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let cell = GruCell::new(&mut store, "bench", args.hidden, args.hidden, &mut rng);
        let numel = n * n * args.hidden;
        let x_data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![n, n, args.hidden], x_data)?;
        let weights = cell.weights(&store);

        for schedule in [Schedule::Naive, Schedule::Wavefront] {
            // warm-up run, then keep the best of `reps`
            run_direction(&weights, &x, None, DIR_A, schedule, DimUse::default())?;
            let mut best = f64::INFINITY;
            for _ in 0..args.reps.max(1) {
                let t0 = Instant::now();
                run_direction(&weights, &x, None, DIR_A, schedule, DimUse::default())?;
                best = best.min(t0.elapsed().as_secs_f64());
            }
            let name = match schedule {
                Schedule::Naive => "naive",
                Schedule::Wavefront => "wavefront",
            };
            csv.push_str(&format!("{},{},{:.6}\n", n, name, best));
            eprintln!("N={:4} {:9} {:.6}s", n, name, best);
        }
    }
    match args.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{}", csv),
    }
    Ok(())
}
