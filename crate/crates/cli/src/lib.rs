//! `bvv`: build vocabularies and visual embedding matrices, train the
//! small transformer with frozen or trainable embeddings, and export
//! analysis tables as CSV.

pub mod config;
pub mod error;
pub mod experiment;

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use bvv_core::embedmat::{
    build_random_embeddings, build_visual_embeddings, density_length_correlation, pearson, visual_raw_vectors,
    EmbeddingBuild, EmbeddingMatrix,
};
use bvv_core::fontstore::GlyphStore;
use bvv_core::glyphrender::{token_image, write_pgm, DEFAULT_THRESHOLD};
use bvv_core::nanoformer::{generate, history_csv, perplexity, split_tokens, Checkpoint, EmbeddingMode, Trainer};
use bvv_core::pca::PcaModel;
use bvv_core::univoc::{mine_ngrams, read_ngram_list, write_ngram_list, Profile, TokenKind, Vocab};
use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;
use experiment::{frozen_matrix, run_ablation, summarize, train_mode, Inputs};

#[derive(Debug, Parser)]
#[command(name = "bvv", version, about = "Frozen visual token embeddings: build, train, ablate, analyse")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record zero wall time so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub outdir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a JSON Lines vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Render, project and normalize token images into a BVVE file.
    BuildEmb(BuildEmbArgs),
    /// Train one embedding mode; writes a loss CSV and a checkpoint.
    Train(TrainArgs),
    /// Train all three embedding modes and compare them.
    Ablate(AblateArgs),
    /// Validation perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Sample text from a checkpoint.
    Generate(GenerateArgs),
    /// 2-D PCA projection of an embedding matrix as CSV.
    Project2d(Project2dArgs),
    /// Tokenizer statistics and round-trip check.
    Stats(StatsArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Built-in layout size: 65536 (BMP) or 131072 (extended).
    #[arg(long)]
    pub profile: Option<usize>,
    /// N-gram list, one per line, in priority order.
    #[arg(long, conflicts_with_all = ["mine", "import", "compact"])]
    pub ngrams: Option<PathBuf>,
    /// Mine the most frequent n-grams from this corpus.
    #[arg(long, conflicts_with_all = ["import", "compact"])]
    pub mine: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub top: usize,
    /// Wrap an external token list (one token per line, id order).
    #[arg(long, conflicts_with = "compact")]
    pub import: Option<PathBuf>,
    /// Compact vocabulary: corpus characters plus mined n-grams.
    #[arg(long)]
    pub compact: Option<PathBuf>,
    /// Size of the compact vocabulary (defaults to profile.vocab_size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Also write the n-gram list used.
    #[arg(long)]
    pub write_ngrams: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildEmbArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub font: Option<PathBuf>,
    /// Image side H.
    #[arg(long = "H", alias = "side")]
    pub side: Option<usize>,
    /// Embedding width d (≤ H²).
    #[arg(long = "d", alias = "d-model")]
    pub d_model: Option<usize>,
    /// Random black-and-white bitmaps instead of glyph images.
    #[arg(long)]
    pub random: bool,
    /// Write PGM images of the first tokens of each length here.
    #[arg(long)]
    pub dump_pgm: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub font: Option<PathBuf>,
    /// Precomputed BVVE matrix for the frozen modes.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub accum: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// frozen_visual, frozen_random or trainable.
    #[arg(long)]
    pub mode: Option<EmbeddingMode>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Loss level for steps-to-threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Score the whole corpus instead of its validation split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, short = 'n', default_value_t = 64)]
    pub tokens: usize,
    /// 0 means greedy decoding.
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct Project2dArgs {
    #[arg(long)]
    pub emb: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub font: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Corpus files; the bundled toy corpus when none are given.
    pub files: Vec<PathBuf>,
}

/// Parse arguments and run; returns the text to print on stdout.
pub fn run_from_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.train.seed = seed;
    }
    if cli.global.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(dir) = &cli.global.outdir {
        cfg.paths.outdir = dir.clone();
    }
    match cli.command {
        Command::BuildVocab(a) => build_vocab(&cfg, a),
        Command::BuildEmb(a) => build_emb(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Ablate(a) => ablate(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Generate(a) => generate_cmd(cfg, a),
        Command::Project2d(a) => project2d(cfg, a),
        Command::Stats(a) => stats(cfg, a),
        Command::ShowConfig => {
            cfg.validate()?;
            cfg.to_toml_string()
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn out_path(cfg: &ExperimentConfig, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.paths.outdir.join(name))
}

fn load_store(path: Option<&Path>) -> Result<GlyphStore, CliError> {
    match path {
        None => Ok(GlyphStore::bundled()),
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
            let (store, report) = GlyphStore::load(BufReader::new(f))?;
            log::info!("{}: {} glyphs from {} lines", p.display(), report.glyphs, report.lines);
            Ok(store)
        }
    }
}

fn load_vocab(path: Option<&Path>) -> Result<Vocab, CliError> {
    match path {
        None => Ok(bvv_core::fixtures::compact_vocab()),
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
            Ok(Vocab::read_jsonl(BufReader::new(f))?)
        }
    }
}

fn load_corpus(path: Option<&Path>) -> Result<String, CliError> {
    match path {
        None => Ok(bvv_core::fixtures::TOY_CORPUS.to_string()),
        Some(p) => read_text(p),
    }
}

fn load_matrix(path: &Path) -> Result<EmbeddingMatrix, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(EmbeddingMatrix::load(BufReader::new(f))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(Checkpoint::load(BufReader::new(f))?)
}

fn build_vocab(cfg: &ExperimentConfig, a: BuildVocabArgs) -> Result<String, CliError> {
    let profile = Profile::from_vocab_size(a.profile.unwrap_or(65536))?;
    let mut corpus = None;
    let mut ngrams: Vec<String> = Vec::new();
    let vocab = if let Some(p) = &a.ngrams {
        ngrams = read_ngram_list(&read_text(p)?);
        Vocab::build(&ngrams, profile)?
    } else if let Some(p) = &a.mine {
        let text = read_text(p)?;
        ngrams = mine_ngrams(&text, a.top.min(profile.ngram_capacity()));
        corpus = Some(text);
        Vocab::build(&ngrams, profile)?
    } else if let Some(p) = &a.import {
        Vocab::import_external(&read_ngram_list(&read_text(p)?))?
    } else if let Some(p) = &a.compact {
        let text = read_text(p)?;
        let v = Vocab::compact_from_corpus(&text, a.size.unwrap_or(cfg.profile.vocab_size))?;
        corpus = Some(text);
        v
    } else {
        return Err(CliError::Usage(
            "build-vocab needs one of --ngrams, --mine, --import or --compact".into(),
        ));
    };
    let out = out_path(cfg, a.out, "vocab.jsonl");
    write_file(&out, vocab.to_jsonl_string().as_bytes())?;
    if let Some(p) = &a.write_ngrams {
        if ngrams.is_empty() {
            ngrams = vocab
                .entries()
                .iter()
                .filter(|e| e.kind == TokenKind::Ngram)
                .map(|e| e.text.clone())
                .collect();
        }
        write_file(p, write_ngram_list(&ngrams).as_bytes())?;
    }

    let mut s = String::new();
    writeln!(s, "wrote {}", out.display()).unwrap();
    writeln!(s, "V = {}", vocab.len()).unwrap();
    writeln!(s, "n-grams = {}", vocab.ngram_count()).unwrap();
    if let Some(text) = corpus {
        let ids = vocab.encode(&text)?;
        writeln!(s, "corpus tokens = {}", ids.len()).unwrap();
        writeln!(s, "avg chars/token = {:.4}", vocab.avg_chars_per_token(&text)?).unwrap();
        let used = ids.iter().collect::<std::collections::HashSet<_>>().len();
        writeln!(s, "distinct ids used = {used}").unwrap();
    }
    Ok(s)
}

fn build_emb(mut cfg: ExperimentConfig, a: BuildEmbArgs) -> Result<String, CliError> {
    if let Some(h) = a.side {
        cfg.profile.side = h;
    }
    if let Some(d) = a.d_model {
        cfg.profile.d_model = d;
    }
    let (side, d) = (cfg.profile.side, cfg.profile.d_model);
    let vocab = load_vocab(a.vocab.as_deref().or(cfg.paths.vocab.as_deref()))?;
    let store = load_store(a.font.as_deref().or(cfg.paths.font.as_deref()))?;
    let EmbeddingBuild { matrix, pca, raw } = if a.random {
        build_random_embeddings(&vocab, cfg.train.seed, side, d)?
    } else {
        build_visual_embeddings(&vocab, &store, side, d)?
    };
    let out = out_path(&cfg, a.out, "embeddings.bvve");
    write_file(&out, &matrix.to_bytes())?;

    let norms = matrix.norm_stats();
    let mut s = String::new();
    writeln!(s, "wrote {} ({} bytes)", out.display(), matrix.encoded_len()).unwrap();
    writeln!(
        s,
        "provenance = {}, V = {}, H = {side}, d = {d}",
        matrix.provenance.name(),
        matrix.vocab_size
    )
    .unwrap();
    writeln!(
        s,
        "row norms: min {:.6} max {:.6}, zero rows {}",
        norms.min, norms.max, norms.zero_rows
    )
    .unwrap();
    writeln!(s, "duplicate rows = {:.3}%", 100.0 * matrix.duplicate_row_fraction()).unwrap();
    let corr = if a.random {
        // Random bitmaps carry no text; report the glyph images' statistic.
        let visual = visual_raw_vectors(&vocab, &store, side, DEFAULT_THRESHOLD)?;
        density_length_correlation(&vocab, &visual)
    } else {
        density_length_correlation(&vocab, &raw)
    };
    match corr {
        Some(c) => writeln!(s, "density-length correlation (multi-char tokens) = {c:.4}").unwrap(),
        None => writeln!(s, "density-length correlation: undefined").unwrap(),
    }
    let ratios = pca.explained_variance_ratio();
    let top: Vec<String> = ratios.iter().take(10).map(|r| format!("{r:.4}")).collect();
    writeln!(s, "PCA variance ratios (top 10): {}", top.join(" ")).unwrap();
    writeln!(s, "PCA variance retained = {:.4}", ratios.iter().sum::<f64>()).unwrap();

    if let Some(dir) = &a.dump_pgm {
        let n = dump_pgms(&vocab, &store, side, dir)?;
        writeln!(s, "dumped {n} PGM images to {}", dir.display()).unwrap();
    }
    Ok(s)
}

/// First four tokens of each character length, upscaled 4x for viewing.
fn dump_pgms(vocab: &Vocab, store: &GlyphStore, side: usize, dir: &Path) -> Result<usize, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut per_len = std::collections::HashMap::<usize, usize>::new();
    let mut written = 0;
    for e in vocab.entries() {
        let n = e.text.chars().count();
        if n == 0 || e.text.chars().any(char::is_control) {
            continue;
        }
        let seen = per_len.entry(n).or_default();
        if *seen >= 4 {
            continue;
        }
        *seen += 1;
        let img = token_image(&e.text, store, side, DEFAULT_THRESHOLD)?;
        let path = dir.join(format!("token_{:06}_len{n}.pgm", e.id));
        let mut bytes = Vec::new();
        write_pgm(&img.gray, &mut bytes).map_err(|err| CliError::io(&path, err))?;
        write_file(&path, &bytes)?;
        written += 1;
    }
    Ok(written)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides) {
    if let Some(p) = &o.vocab {
        cfg.paths.vocab = Some(p.clone());
    }
    if let Some(p) = &o.corpus {
        cfg.paths.corpus = Some(p.clone());
    }
    if let Some(p) = &o.font {
        cfg.paths.font = Some(p.clone());
    }
    if let Some(p) = &o.emb {
        cfg.paths.embeddings = Some(p.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = o.steps {
        t.steps = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.batch {
        t.batch = v;
    }
    if let Some(v) = o.accum {
        t.accum = v;
    }
    if let Some(v) = o.eval_every {
        t.eval_every = v;
    }
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs, CliError> {
    let store = load_store(cfg.paths.font.as_deref())?;
    let vocab = load_vocab(cfg.paths.vocab.as_deref())?;
    let corpus = load_corpus(cfg.paths.corpus.as_deref())?;
    let tokens = vocab.encode(&corpus)?;
    Ok(Inputs { store, vocab, tokens })
}

fn checkpoint_path(cfg: &ExperimentConfig, mode: EmbeddingMode) -> PathBuf {
    cfg.paths.outdir.join(format!("{}.bvvc", mode.name()))
}

fn loss_csv_path(cfg: &ExperimentConfig, mode: EmbeddingMode) -> PathBuf {
    cfg.paths.outdir.join(format!("loss_{}.csv", mode.name()))
}

fn save_trainer(cfg: &ExperimentConfig, mode: EmbeddingMode, trainer: &Trainer) -> Result<(), CliError> {
    write_file(&checkpoint_path(cfg, mode), &trainer.checkpoint().to_bytes())?;
    write_file(&loss_csv_path(cfg, mode), history_csv(&trainer.history).as_bytes())
}

fn train(mut cfg: ExperimentConfig, a: TrainArgs) -> Result<String, CliError> {
    apply_overrides(&mut cfg, &a.overrides);
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let inputs = load_inputs(&cfg)?;
    let preloaded = cfg.paths.embeddings.as_deref().map(load_matrix).transpose()?;

    let (trainer, result) = if let Some(path) = &a.resume {
        let ckpt = load_checkpoint(path)?;
        cfg.mode = ckpt.model.config.embedding_mode;
        if ckpt.model.config.vocab_size != inputs.vocab.len() {
            return Err(CliError::Config(format!(
                "checkpoint expects {} tokens, vocabulary has {}",
                ckpt.model.config.vocab_size,
                inputs.vocab.len()
            )));
        }
        let initial = ckpt.model.token_embedding().data.clone();
        let mut trainer = Trainer::resume(ckpt, &inputs.tokens, a.overrides.steps)?;
        cfg.train = trainer.config;
        let mode = cfg.mode;
        let mut failed = None;
        trainer.run(|t| {
            if let Err(e) = save_trainer(&cfg, mode, t) {
                failed.get_or_insert(e);
            }
            Ok(())
        })?;
        if let Some(e) = failed {
            return Err(e);
        }
        let result = summarize(&cfg, &trainer, mode, &initial)?;
        (trainer, result)
    } else {
        let mode = cfg.mode;
        let mut failed = None;
        let out = train_mode(&cfg, &inputs, mode, preloaded.as_ref(), |t| {
            if let Err(e) = save_trainer(&cfg, mode, t) {
                failed.get_or_insert(e);
            }
            Ok(())
        })?;
        if let Some(e) = failed {
            return Err(e);
        }
        out
    };
    save_trainer(&cfg, cfg.mode, &trainer)?;
    if cfg.mode.is_frozen() && !result.embedding_unchanged {
        return Err(CliError::SelfCheck("frozen token embedding changed during training".into()));
    }

    let mut s = String::new();
    let lnv = (inputs.vocab.len() as f64).ln();
    writeln!(s, "mode = {}", cfg.mode).unwrap();
    writeln!(s, "steps = {}", trainer.step_count()).unwrap();
    writeln!(s, "final train loss = {:.4} (ln V = {lnv:.4})", result.final_train_loss).unwrap();
    writeln!(s, "validation perplexity = {:.3}", result.val_perplexity).unwrap();
    if !trainer.skipped.is_empty() {
        writeln!(s, "skipped non-finite steps = {:?}", trainer.skipped).unwrap();
    }
    writeln!(s, "wrote {}", loss_csv_path(&cfg, cfg.mode).display()).unwrap();
    writeln!(s, "wrote {}", checkpoint_path(&cfg, cfg.mode).display()).unwrap();
    Ok(s)
}

fn ablate(mut cfg: ExperimentConfig, a: AblateArgs) -> Result<String, CliError> {
    apply_overrides(&mut cfg, &a.overrides);
    if let Some(t) = a.threshold {
        cfg.ablation.threshold = t;
    }
    cfg.validate()?;
    let inputs = load_inputs(&cfg)?;
    let preloaded = cfg.paths.embeddings.as_deref().map(load_matrix).transpose()?;
    let report = run_ablation(&cfg, &inputs, preloaded.as_ref(), |trainer, result| {
        save_trainer(&cfg, result.mode, trainer)
    })?;
    let csv_path = cfg.paths.outdir.join("ablation.csv");
    write_file(&csv_path, report.to_csv()?.as_bytes())?;
    let mut s = report.table();
    writeln!(s, "wrote {}", csv_path.display()).unwrap();
    Ok(s)
}

fn eval(cfg: ExperimentConfig, a: EvalArgs) -> Result<String, CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(a.vocab.as_deref().or(cfg.paths.vocab.as_deref()))?;
    let corpus = load_corpus(a.corpus.as_deref().or(cfg.paths.corpus.as_deref()))?;
    let tokens = vocab.encode(&corpus)?;
    let scored = if a.all {
        &tokens[..]
    } else {
        split_tokens(&tokens, ckpt.train.val_fraction).1
    };
    let ppl = perplexity(&ckpt.model, scored)?;
    Ok(format!(
        "tokens scored = {}\nperplexity = {ppl:.4}\nloss = {:.6}\n",
        scored.len(),
        ppl.ln()
    ))
}

fn generate_cmd(cfg: ExperimentConfig, a: GenerateArgs) -> Result<String, CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(a.vocab.as_deref().or(cfg.paths.vocab.as_deref()))?;
    let prompt = vocab.encode(&a.prompt)?;
    let ids = generate(&ckpt.model, &prompt, a.tokens, a.temperature, cfg.train.seed)?;
    let text = vocab.decode(&ids)?;
    Ok(format!("{}{}\n", a.prompt, text))
}

fn project2d(cfg: ExperimentConfig, a: Project2dArgs) -> Result<String, CliError> {
    let vocab = load_vocab(a.vocab.as_deref().or(cfg.paths.vocab.as_deref()))?;
    let store = load_store(a.font.as_deref().or(cfg.paths.font.as_deref()))?;
    let matrix = match a.emb.as_deref().or(cfg.paths.embeddings.as_deref()) {
        Some(p) => {
            let m = load_matrix(p)?;
            if !m.matches_vocab(&vocab) {
                return Err(CliError::Config("embedding file was built for a different vocabulary".into()));
            }
            m
        }
        None => {
            let inputs = Inputs {
                store: store.clone(),
                vocab: vocab.clone(),
                tokens: Vec::new(),
            };
            frozen_matrix(&cfg, &inputs, EmbeddingMode::FrozenVisual, None)?.expect("frozen mode has a matrix")
        }
    };
    let points = project_rows(&matrix)?;
    let raw = visual_raw_vectors(&vocab, &store, matrix.side, DEFAULT_THRESHOLD)?;

    let out = out_path(&cfg, a.out, "project2d.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "token_text", "char_len", "x", "y", "ink_density"])?;
    for (e, (x, y)) in vocab.entries().iter().zip(&points) {
        w.write_record([
            e.id.to_string(),
            e.text.clone(),
            e.text.chars().count().to_string(),
            format!("{x:.6}"),
            format!("{y:.6}"),
            format!("{:.6}", raw.density(e.id as usize)),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&out, &bytes)?;

    let lens: Vec<f64> = vocab.entries().iter().map(|e| e.text.chars().count() as f64).collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let mut s = String::new();
    writeln!(s, "wrote {} ({} rows)", out.display(), points.len()).unwrap();
    match density_length_correlation(&vocab, &raw) {
        Some(c) => writeln!(
            s,
            "corr(char_len, ink_density) over multi-char tokens = {c:.4} (|corr| > 0.3: {})",
            if c.abs() > 0.3 { "yes" } else { "no" }
        )
        .unwrap(),
        None => writeln!(s, "corr(char_len, ink_density): undefined").unwrap(),
    }
    if let Some(c) = pearson(&lens, &xs) {
        writeln!(s, "corr(char_len, x) = {c:.4}").unwrap();
    }
    Ok(s)
}

/// First two principal coordinates of every embedding row.
pub fn project_rows(matrix: &EmbeddingMatrix) -> Result<Vec<(f64, f64)>, CliError> {
    let d = matrix.d_model;
    let data: Vec<f64> = matrix.rows.iter().map(|&x| x as f64).collect();
    let pca = PcaModel::fit(&data, matrix.vocab_size, d, 2.min(d))?;
    data.chunks_exact(d)
        .map(|row| {
            let p = pca.transform(row)?;
            Ok((p[0], p.get(1).copied().unwrap_or(0.0)))
        })
        .collect()
}

fn stats(cfg: ExperimentConfig, a: StatsArgs) -> Result<String, CliError> {
    let vocab = load_vocab(a.vocab.as_deref().or(cfg.paths.vocab.as_deref()))?;
    let mut inputs: Vec<(String, String)> = Vec::new();
    if a.files.is_empty() {
        let name = cfg
            .paths
            .corpus
            .as_ref()
            .map_or("<bundled toy corpus>".to_string(), |p| p.display().to_string());
        inputs.push((name, load_corpus(cfg.paths.corpus.as_deref())?));
    }
    for f in &a.files {
        inputs.push((f.display().to_string(), read_text(f)?));
    }
    let mut s = String::new();
    let mut all_ok = true;
    for (name, text) in &inputs {
        let ids = vocab.encode(text)?;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        let mut ok_lines = 0usize;
        for line in &lines {
            if vocab.decode(&vocab.encode(line)?)? == *line {
                ok_lines += 1;
            }
        }
        let whole_ok = vocab.decode(&ids)? == *text;
        let pct = if lines.is_empty() {
            100.0
        } else {
            100.0 * ok_lines as f64 / lines.len() as f64
        };
        let ok = whole_ok && ok_lines == lines.len();
        all_ok &= ok;
        writeln!(s, "{name}").unwrap();
        writeln!(s, "  characters = {}", text.chars().count()).unwrap();
        writeln!(s, "  tokens = {}", ids.len()).unwrap();
        writeln!(s, "  avg chars/token = {:.4}", vocab.avg_chars_per_token(text)?).unwrap();
        writeln!(s, "  round-trip: {} {:.0}%", if ok { "OK" } else { "FAIL" }, pct).unwrap();
    }
    if !all_ok {
        return Err(CliError::SelfCheck(format!("round-trip mismatch\n{s}")));
    }
    Ok(s)
}
