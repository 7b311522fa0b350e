use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use midillm_core::bench::run_bench;
use midillm_core::codec::{self, decode, validate, validate_packed, TokenSequence};
use midillm_core::dataset::{self, tokenize_text, ByteTokenizer, Manifest, MAX_TEXT_PREFIX};
use midillm_core::decoder::{
    generate, generated_midi, train_ngram, GenerateOptions, LogitsProvider, NGramModel, UniformProvider,
    DEFAULT_MAX_NEW, DEFAULT_TOP_P,
};
use midillm_core::midi::{self, DEFAULT_DIVISION, DEFAULT_VELOCITY};
use midillm_core::vocab::{expand_embeddings, init_midi_embeddings, EmbeddingTable, DEFAULT_TEXT_VOCAB_SIZE};
use midillm_core::VocabConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Text-to-MIDI toolkit: SMF parsing, arrival-time tokens, dataset
/// building, constrained sampling and benchmarking.
#[derive(Parser)]
#[command(name = "midillm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the notes of a MIDI file, one `onset duration instrument pitch` per line.
    Parse { input: PathBuf },
    /// Encode a MIDI file into a token file.
    Tokenize {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TEXT_VOCAB_SIZE)]
        text_vocab: u32,
        /// Which 100 s window of a longer piece to encode.
        #[arg(long, default_value_t = 0)]
        segment: usize,
    },
    /// Decode a token file back to MIDI.
    Detokenize {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Skip malformed triples instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long, default_value_t = DEFAULT_VELOCITY)]
        velocity: u8,
    },
    /// Check the token grammar of a token file.
    Validate {
        input: PathBuf,
        /// Treat the file as packed pretraining data with text ids between documents.
        #[arg(long)]
        packed: bool,
        #[arg(long)]
        json: bool,
    },
    /// Build fixed-length pretraining chunks from a manifest.
    Pack {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = dataset::DEFAULT_SEQLEN)]
        seqlen: usize,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CorpusArgs,
    },
    /// Build captioned finetuning examples with infilling variants.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CorpusArgs,
    },
    /// Count n-grams over token files.
    TrainNgram {
        #[arg(long)]
        order: usize,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Sample a piece from a caption.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the full token stream, prompt included.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Append MIDI embedding rows under a text embedding table.
    ExpandEmbeddings {
        e_llm: PathBuf,
        e_amt: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write freshly initialized MIDI embedding rows.
    InitEmbeddings {
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Time batched generation and report the real-time factor.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long, default_value_t = DEFAULT_TEXT_VOCAB_SIZE)]
    text_vocab: u32,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// N-gram model file; without it every token scores the same.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Text vocabulary size for the uniform model.
    #[arg(long, default_value_t = DEFAULT_TEXT_VOCAB_SIZE)]
    text_vocab: u32,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = DEFAULT_TOP_P)]
    top_p: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample from the full vocabulary without the token grammar.
    #[arg(long)]
    unconstrained: bool,
}

impl SamplingArgs {
    fn options(&self) -> Result<GenerateOptions> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            bail!("--top-p must be in (0, 1], got {}", self.top_p);
        }
        Ok(GenerateOptions { top_p: self.top_p, max_new: self.max_new, constrained: !self.unconstrained })
    }
}

fn load_provider(args: &ModelArgs) -> Result<Box<dyn LogitsProvider>> {
    Ok(match &args.model {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Box::new(
                NGramModel::read_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?,
            )
        }
        None => Box::new(UniformProvider { cfg: VocabConfig::with_text_vocab(args.text_vocab)? }),
    })
}

fn prompt_ids(text: &str, cfg: &VocabConfig) -> Vec<u32> {
    let mut ids = tokenize_text(text, &ByteTokenizer, MAX_TEXT_PREFIX);
    ids.push(cfg.separator_id);
    ids
}

fn read_tokens(path: &Path) -> Result<TokenSequence> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    TokenSequence::read_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_midi(notes: &midi::NoteSeq, velocity: u8, path: &Path) -> Result<()> {
    let out = midi::write_smf(notes, velocity, DEFAULT_DIVISION)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    fs::write(path, &out.bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    Ok(pool.install(f))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Parse { input } => {
            let notes = dataset::load_notes(&input)?;
            let stdout = std::io::stdout();
            stdout.lock().write_all(notes.to_text().as_bytes())?;
        }
        Command::Tokenize { input, output, text_vocab, segment } => {
            let cfg = VocabConfig::with_text_vocab(text_vocab)?;
            let notes = dataset::load_notes(&input)?;
            let segments = codec::segment(&notes, codec::MAX_ONSET_SECONDS);
            let count = segments.len().max(1);
            if segment >= count {
                bail!("--segment {segment} out of range, piece has {count} segment(s)");
            }
            if count > 1 {
                eprintln!("note: piece has {count} segments of 100 s, wrote segment {segment}");
            }
            let notes = segments.into_iter().nth(segment).unwrap_or_default();
            let tokens = codec::encode(&notes, &cfg)?;
            let mut w = create(&output)?;
            tokens.write_to(&mut w)?;
            w.flush()?;
        }
        Command::Detokenize { input, output, lenient, velocity } => {
            let decoded = decode(&read_tokens(&input)?, !lenient)?;
            for w in &decoded.warnings {
                eprintln!("warning: {w}");
            }
            write_midi(&decoded.notes, velocity, &output)?;
        }
        Command::Validate { input, packed, json } => {
            let tokens = read_tokens(&input)?;
            let report = if packed { validate_packed(tokens.ids(), tokens.cfg()) } else { validate(&tokens) };
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_key_value());
            }
            if let Some(v) = report.violations.first() {
                eprintln!("error: {:?} at token {}", v.kind, v.position);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Pack { manifest, seqlen, output, common } => {
            if seqlen == 0 {
                bail!("--seqlen must be positive");
            }
            let cfg = VocabConfig::with_text_vocab(common.text_vocab)?;
            let manifest = Manifest::load(&manifest)?;
            let docs = with_jobs(common.jobs, || dataset::pretrain_docs(&manifest, &cfg))??;
            let examples = dataset::pack_pretrain(&docs, seqlen, &cfg);
            let (tokens, index) = dataset::write_examples(&output, "pretrain", &examples, &cfg)?;
            println!(
                "documents={}\nexamples={}\ntokens={}\nindex={}",
                docs.len(),
                examples.len(),
                tokens.display(),
                index.display()
            );
        }
        Command::Augment { manifest, seed, output, common } => {
            let cfg = VocabConfig::with_text_vocab(common.text_vocab)?;
            let manifest = Manifest::load(&manifest)?;
            let examples =
                with_jobs(common.jobs, || dataset::finetune_examples(&manifest, seed, &cfg, &ByteTokenizer))??;
            let (tokens, index) = dataset::write_examples(&output, "finetune", &examples, &cfg)?;
            println!("examples={}\ntokens={}\nindex={}", examples.len(), tokens.display(), index.display());
        }
        Command::TrainNgram { order, files, output } => {
            let mut corpus = Vec::with_capacity(files.len());
            for path in &files {
                let seq = read_tokens(path)?;
                let cfg = *seq.cfg();
                // bare MIDI documents get the delimiters the model sees at generation time
                if seq.ids().iter().all(|&id| cfg.is_midi(id)) {
                    let mut ids = vec![cfg.separator_id];
                    ids.extend_from_slice(seq.ids());
                    ids.push(cfg.eos_id);
                    corpus.push(TokenSequence::new(ids, cfg)?);
                } else {
                    corpus.push(seq);
                }
            }
            let model = train_ngram(&corpus, order)?;
            let mut w = create(&output)?;
            model.write_to(&mut w)?;
            w.flush()?;
        }
        Command::Generate { model, prompt, sampling, output, tokens } => {
            let provider = load_provider(&model)?;
            let cfg = *provider.vocab();
            let prompt = prompt_ids(&prompt, &cfg);
            let opts = sampling.options()?;
            let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
            let out = generate(provider.as_ref(), &prompt, &opts, &mut rng)?;
            let decoded = codec::decode_ids(generated_midi(&out, prompt.len()), &cfg, false)?;
            if !decoded.warnings.is_empty() {
                eprintln!("warning: skipped {} malformed token run(s)", decoded.warnings.len());
            }
            write_midi(&decoded.notes, DEFAULT_VELOCITY, &output)?;
            if let Some(path) = tokens {
                let mut w = create(&path)?;
                out.write_to(&mut w)?;
                w.flush()?;
            }
            println!("generated_tokens={}\nnotes={}", out.len() - prompt.len(), decoded.notes.len());
        }
        Command::ExpandEmbeddings { e_llm, e_amt, output } => {
            let read = |path: &Path| -> Result<EmbeddingTable> {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                EmbeddingTable::read_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
            };
            let table = expand_embeddings(&read(&e_llm)?, &read(&e_amt)?)?;
            let mut w = create(&output)?;
            table.write_to(&mut w)?;
            w.flush()?;
            println!("rows={}\ndim={}", table.rows(), table.dim());
        }
        Command::InitEmbeddings { dim, seed, output } => {
            if dim == 0 {
                bail!("--dim must be positive");
            }
            let mut w = create(&output)?;
            init_midi_embeddings(dim, seed).write_to(&mut w)?;
            w.flush()?;
        }
        Command::Bench { model, prompt, batch, runs, sampling, json } => {
            if batch == 0 || runs == 0 {
                bail!("--batch and --runs must be positive");
            }
            let provider = load_provider(&model)?;
            let prompt = prompt_ids(&prompt, provider.vocab());
            let report = run_bench(provider.as_ref(), &prompt, &sampling.options()?, batch, runs, sampling.seed)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_key_value());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
