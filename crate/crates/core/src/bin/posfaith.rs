use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::TypedValueParser as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use posfaith::attention::{attention_profile, load_attention, load_spans, profile_csv, Orientation};
use posfaith::corpus::{corpus_to_jsonl, load_corpus, DecodingConfig, Document, Regime, SummaryRecord};
use posfaith::llmclient::stub::{StubConfig, StubServer};
use posfaith::llmclient::{chunked_summarize, ClientConfig, HttpChatClient, DEFAULT_CHUNK_TOKENS};
use posfaith::pipeline::{
    build_table, decompose_all, generate_all, profile_all, read_jsonl, run_pipeline, score_all,
    to_jsonl, write_file, PipelineConfig, ScorerChoice,
};
use posfaith::positional::{reports_to_csv, BinMode, BinOptions, BinReport, Coordinate};
use posfaith::report::{paired_labels, raw_agreement, render, Format, Pooling};
use posfaith::scorers::{load_labels, FactScore};
use posfaith::segment::{AtomicFact, Decomposer};
use posfaith::Error;

#[derive(Parser)]
#[command(name = "posfaith", version, about = "Positional faithfulness profiling for long summaries")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Number of positional bins.
    #[arg(long, global = true, default_value_t = 5, value_parser = clap::builder::PossibleValuesParser::new(["5", "10"]).map(|s| s.parse::<usize>().expect("listed value")))]
    bins: usize,
    #[arg(long, global = true, value_enum, default_value_t = CoordArg::Words)]
    coordinate: CoordArg,
    #[arg(long = "bin-mode", global = true, value_enum, default_value_t = ModeArg::Fixed)]
    bin_mode: ModeArg,
    #[arg(long, global = true, value_enum, default_value_t = ScorerArg::Rouge)]
    scorer: ScorerArg,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Md)]
    format: FormatArg,
    #[arg(long, global = true, value_enum, default_value_t = PoolingArg::FactPooled)]
    pooling: PoolingArg,
    /// OpenAI-compatible base URL.
    #[arg(long, global = true, env = "POSFAITH_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, global = true, env = "POSFAITH_MODEL", default_value = "default")]
    model: String,
    #[arg(long = "cache-dir", global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 4)]
    concurrency: usize,
    /// Fact-check service URL for `--scorer http`.
    #[arg(long = "factcheck-url", global = true)]
    factcheck_url: Option<String>,
    /// Label JSONL for `--scorer labels`.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    annotator: Option<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoordArg {
    Words,
    Facts,
    Sentences,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed,
    Observed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScorerArg {
    Rouge,
    Http,
    Labels,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Md,
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    FactPooled,
    SummaryMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Standard,
    Long,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Standard => Regime::Standard,
            RegimeArg::Long => Regime::Long,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print counts; optionally write it back normalized.
    Ingest {
        corpus: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate summaries for every document.
    Generate {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = RegimeArg::Long)]
        regime: RegimeArg,
        /// Run the full decoding grid instead of greedy only.
        #[arg(long)]
        sweep: bool,
        /// Summarize by chunk-and-merge.
        #[arg(long)]
        chunked: bool,
        #[arg(long = "chunk-tokens", default_value_t = DEFAULT_CHUNK_TOKENS)]
        chunk_tokens: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Decompose summaries into filtered atomic facts.
    Decompose {
        summaries: PathBuf,
        /// Use the offline rule splitter instead of the LLM.
        #[arg(long)]
        rule: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score kept facts against their source documents.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        facts: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Bin fact scores by position and compute sensitivity per summary.
    Profile {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Block-to-sentence attention profile of an attention bundle.
    Attention {
        bundle: PathBuf,
        /// Sentence spans; defaults to spans.json inside the bundle.
        #[arg(long)]
        spans: Option<PathBuf>,
        /// Read columns as the attending token.
        #[arg(long)]
        transposed: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Raw agreement between two annotators of a label file.
    Agree {
        labels_file: PathBuf,
        /// Two annotator names, comma separated.
        #[arg(long, value_delimiter = ',')]
        annotators: Option<Vec<String>>,
    },
    /// Aggregate bin reports into a table.
    Report {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        bins_file: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate, decompose, score, profile and report in one run.
    Pipeline {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RegimeArg::Long)]
        regime: RegimeArg,
        #[arg(long)]
        sweep: bool,
        /// Profile the summaries stored in the corpus instead of generating.
        #[arg(long = "use-corpus-summaries")]
        use_corpus_summaries: bool,
        #[arg(long = "rule-decompose")]
        rule_decompose: bool,
        #[arg(long = "keep-repetitive")]
        keep_repetitive: bool,
    },
    /// Serve the deterministic stub LLM until killed.
    StubServer {
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
    },
}

enum CliError {
    Usage(String),
    Lib(Error),
}

trait Lift<T> {
    fn lift(self) -> Result<T, CliError>;
}

impl<T, E: Into<Error>> Lift<T> for Result<T, E> {
    fn lift(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Lib(e.into()))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

impl Global {
    fn bin_options(&self) -> BinOptions {
        BinOptions {
            bin_count: self.bins,
            mode: match self.bin_mode {
                ModeArg::Fixed => BinMode::FixedDomain,
                ModeArg::Observed => BinMode::ObservedRange,
            },
            coordinate: match self.coordinate {
                CoordArg::Words => Coordinate::Words,
                CoordArg::Facts => Coordinate::Facts,
                CoordArg::Sentences => Coordinate::Sentences,
            },
        }
    }

    fn pooling(&self) -> Pooling {
        match self.pooling {
            PoolingArg::FactPooled => Pooling::FactPooled,
            PoolingArg::SummaryMean => Pooling::SummaryMean,
        }
    }

    fn format(&self) -> Format {
        match self.format {
            FormatArg::Md => Format::Markdown,
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
            FormatArg::Svg => Format::SvgLines,
        }
    }

    fn endpoint(&self) -> CliResult<&str> {
        self.endpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("--endpoint (or POSFAITH_ENDPOINT) is required".into()))
    }

    fn client(&self) -> CliResult<HttpChatClient> {
        let mut config = ClientConfig::new(self.endpoint()?, &self.model);
        config.cache_dir = self.cache_dir.clone();
        config.concurrency = self.concurrency;
        HttpChatClient::new(config).lift()
    }

    fn scorer(&self) -> CliResult<ScorerChoice> {
        match self.scorer {
            ScorerArg::Rouge => Ok(ScorerChoice::Rouge),
            ScorerArg::Http => match &self.factcheck_url {
                Some(endpoint) => Ok(ScorerChoice::Http {
                    endpoint: endpoint.clone(),
                }),
                None => Err(CliError::Usage("--scorer http needs --factcheck-url".into())),
            },
            ScorerArg::Labels => match &self.labels {
                Some(path) => Ok(ScorerChoice::Labels {
                    path: path.clone(),
                    annotator: self.annotator.clone(),
                }),
                None => Err(CliError::Usage("--scorer labels needs --labels".into())),
            },
        }
    }
}

fn emit(out: Option<&Path>, contents: impl AsRef<[u8]>) -> CliResult {
    match out {
        Some(path) => write_file(path, contents).lift(),
        None => std::io::stdout()
            .write_all(contents.as_ref())
            .map_err(|e| CliError::Lib(Error::io("<stdout>", e))),
    }
}

fn documents(corpus: &Path) -> CliResult<Vec<Document>> {
    Ok(load_corpus(corpus).lift()?.into_iter().map(|e| e.document).collect())
}

fn run(cli: Cli) -> CliResult {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { corpus, out } => {
            let entries = load_corpus(&corpus).lift()?;
            let summaries = entries.iter().filter(|e| e.summary.is_some()).count();
            let references = entries.iter().filter(|e| e.reference.is_some()).count();
            let tokens: u64 = entries.iter().map(|e| e.document.token_count).sum();
            println!(
                "documents: {}\nsummaries: {summaries}\nreference summaries: {references}\ncontext tokens: {tokens}",
                entries.len()
            );
            if let Some(out) = out {
                write_file(out, corpus_to_jsonl(&entries)).lift()?;
            }
        }
        Command::Generate {
            corpus,
            regime,
            sweep,
            chunked,
            chunk_tokens,
            out,
        } => {
            let docs = documents(&corpus)?;
            let client = g.client()?;
            let summaries: Vec<SummaryRecord> = if chunked {
                docs.iter()
                    .map(|d| chunked_summarize(d, chunk_tokens, &client, g.concurrency).map(|c| c.summary))
                    .collect::<Result<_, _>>()
                    .lift()?
            } else {
                let grid = if sweep { DecodingConfig::sweep_grid() } else { vec![DecodingConfig::Greedy] };
                generate_all(&docs, regime.into(), &grid, &client, g.concurrency).lift()?
            };
            tracing::info!(network_calls = client.network_calls(), cache_hits = client.cache_hits());
            emit(out.as_deref(), to_jsonl(&summaries))?;
        }
        Command::Decompose { summaries, rule, out } => {
            let summaries: Vec<SummaryRecord> = read_jsonl(&summaries).lift()?;
            let client;
            let decomposer = if rule {
                Decomposer::Rule
            } else {
                client = g.client()?;
                Decomposer::Llm {
                    client: &client,
                    concurrency: g.concurrency,
                }
            };
            let (facts, warnings) = decompose_all(&summaries, &decomposer).lift()?;
            for w in warnings {
                tracing::warn!("{w}");
            }
            emit(out.as_deref(), to_jsonl(&facts))?;
        }
        Command::Score {
            corpus,
            summaries,
            facts,
            out,
        } => {
            let choice = g.scorer()?;
            let docs = documents(&corpus)?;
            let summaries: Vec<SummaryRecord> = read_jsonl(&summaries).lift()?;
            let facts: Vec<AtomicFact> = read_jsonl(&facts).lift()?;
            let backend = choice.build().lift()?;
            let scored = score_all(&summaries, &docs, &facts, &backend, g.concurrency).lift()?;
            emit(out.as_deref(), to_jsonl(&scored))?;
        }
        Command::Profile { summaries, scores, out } => {
            let summaries: Vec<SummaryRecord> = read_jsonl(&summaries).lift()?;
            let scored: Vec<FactScore> = read_jsonl(&scores).lift()?;
            let (reports, skipped) = profile_all(&summaries, &scored, g.bin_options()).lift()?;
            for (id, reason) in skipped {
                tracing::warn!("{id}: {reason}");
            }
            match g.format {
                FormatArg::Csv => emit(out.as_deref(), reports_to_csv(&reports))?,
                _ => emit(out.as_deref(), to_jsonl(&reports))?,
            }
        }
        Command::Attention {
            bundle,
            spans,
            transposed,
            out,
        } => {
            let matrix = load_attention(&bundle).lift()?;
            let spans = load_spans(spans.unwrap_or_else(|| bundle.join("spans.json"))).lift()?;
            let orientation = if transposed { Orientation::Transposed } else { Orientation::RowAttends };
            let rows = attention_profile(&matrix, &spans, orientation).lift()?;
            emit(out.as_deref(), profile_csv(&rows))?;
        }
        Command::Agree { labels_file, annotators } => {
            let records = load_labels(&labels_file).lift()?;
            let pair = match annotators.as_deref() {
                None => None,
                Some([a, b]) => Some((a.as_str(), b.as_str())),
                Some(_) => return Err(CliError::Usage("--annotators takes exactly two names".into())),
            };
            let (a, b) = paired_labels(&records, pair).lift()?;
            let pct = raw_agreement(&a, &b).lift()?;
            let matches = a.iter().zip(&b).filter(|(x, y)| x == y).count();
            println!("raw agreement: {pct:.1}% ({matches}/{})", a.len());
        }
        Command::Report {
            summaries,
            bins_file,
            out,
        } => {
            let summaries: Vec<SummaryRecord> = read_jsonl(&summaries).lift()?;
            let reports: Vec<BinReport> = read_jsonl(&bins_file).lift()?;
            let table = build_table(&reports, &summaries, g.pooling()).lift()?;
            emit(out.as_deref(), render(&table, g.format()))?;
        }
        Command::Pipeline {
            corpus,
            out,
            regime,
            sweep,
            use_corpus_summaries,
            rule_decompose,
            keep_repetitive,
        } => {
            let mut config = PipelineConfig::new(corpus, &out, g.endpoint()?);
            config.model = g.model.clone();
            config.cache_dir = Some(g.cache_dir.clone().unwrap_or_else(|| out.join("cache")));
            config.concurrency = g.concurrency;
            config.regime = regime.into();
            if sweep {
                config.grid = DecodingConfig::sweep_grid();
            }
            config.generate = !use_corpus_summaries;
            config.llm_decompose = !rule_decompose;
            config.drop_repetitive = !keep_repetitive;
            config.scorer = g.scorer()?;
            config.bins = g.bin_options();
            config.pooling = g.pooling();
            let result = run_pipeline(&config).lift()?;
            for (id, reason) in &result.stats.skipped {
                tracing::warn!("skipped {id}: {reason}");
            }
            let s = &result.stats;
            eprintln!(
                "{} summaries, {} facts ({} kept); {} network calls, {} cache hits; wrote {}",
                s.summaries,
                s.facts,
                s.kept_facts,
                s.network_calls,
                s.cache_hits,
                out.display()
            );
            emit(None, render(&result.table, g.format()))?;
        }
        Command::StubServer { addr } => {
            let server = StubServer::bind(&addr, StubConfig::default()).map_err(|e| CliError::Lib(Error::io(&addr, e)))?;
            println!("{}", server.base_url());
            let _ = std::io::stdout().flush();
            server.wait();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_upstream() { 3 } else { 2 })
        }
    }
}
