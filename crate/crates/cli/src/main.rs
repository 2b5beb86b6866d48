use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ratree::adrap::IngestBatching;
use ratree::clustering::ClusteringMode;

mod commands;
mod settings;

use settings::{Layer, RetrieverKind, Settings};

/// Build, update and query recursive-abstractive tree indexes.
#[derive(Debug, Parser)]
#[command(name = "ratree", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON config file with the same keys as the long flags (snake_case).
    #[arg(long, global = true, env = "RATREE_CONFIG")]
    config: Option<PathBuf>,
    /// Use the offline mock embedder and language model.
    #[arg(long, global = true)]
    mock_llm: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    #[arg(long, global = true)]
    api_base: Option<String>,
    #[arg(long, global = true)]
    embed_model: Option<String>,
    #[arg(long, global = true)]
    chat_model: Option<String>,
    #[arg(long, global = true)]
    timeout_secs: Option<f64>,
    #[arg(long, global = true)]
    max_retries: Option<u32>,
}

#[derive(Debug, Args, Default)]
struct BuildArgs {
    #[arg(long, value_parser = parse_clustering)]
    clustering: Option<ClusteringMode>,
    /// Body tokens per chunk.
    #[arg(long)]
    chunk_tokens: Option<usize>,
    /// Tokens carried over from the previous chunk.
    #[arg(long)]
    overlap_tokens: Option<usize>,
    /// Token limit of each tree summary.
    #[arg(long)]
    summary_tokens: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct UpdateArgs {
    /// Assign new chunks to their most likely cluster without touching the mixtures.
    #[arg(long)]
    greedy: bool,
    /// Refit shrunken local mixtures after deletions.
    #[arg(long)]
    recluster_on_delete: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk, embed and index every .txt/.md file of a directory.
    Build {
        corpus: PathBuf,
        index: PathBuf,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Insert documents into an existing index.
    Add {
        index: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        update: UpdateArgs,
        /// How the new chunks are grouped into update calls.
        #[arg(long, value_parser = parse_batching)]
        batching: Option<IngestBatching>,
    },
    /// Remove a document (or, with --chunk, a single chunk) from an index.
    Remove {
        index: PathBuf,
        id: String,
        #[arg(long)]
        chunk: bool,
        #[command(flatten)]
        update: UpdateArgs,
    },
    /// Retrieve ranked contexts from the collapsed tree.
    Query {
        index: PathBuf,
        query: String,
        /// Maximum number of contexts; unlimited by default.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        token_limit: Option<usize>,
    },
    /// Retrieve, cluster and summarize the results for one question.
    Ask {
        index: PathBuf,
        query: String,
        #[arg(long, value_enum)]
        retriever: Option<RetrieverKind>,
        #[arg(long)]
        k0: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        /// Expand the query with keywords from the top retrieved documents.
        #[arg(long)]
        expand: bool,
        /// Also answer the question from the summarized context.
        #[arg(long)]
        answer: bool,
        #[arg(long, value_parser = parse_clustering)]
        clustering: Option<ClusteringMode>,
    },
    /// Print tree statistics of an index.
    Stats { index: PathBuf },
    /// Compare incremental ingestion against a full rebuild on a corpus.
    BenchSplit {
        corpus: PathBuf,
        /// Share of chunks in the initial build.
        #[arg(long)]
        fraction: Option<f64>,
        /// Run only this batching mode (default: all of them).
        #[arg(long, value_parser = parse_batching)]
        batching: Option<IngestBatching>,
        #[command(flatten)]
        build: BuildArgs,
        #[command(flatten)]
        update: UpdateArgs,
    },
    /// Print the resolved settings as JSON.
    Config,
    /// Write a synthetic corpus that chunks into at least `--chunks` chunks.
    GenCorpus {
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        chunks: usize,
    },
}

fn parse_clustering(s: &str) -> Result<ClusteringMode, String> {
    s.parse()
}

fn parse_batching(s: &str) -> Result<IngestBatching, String> {
    s.parse()
}

fn flag(b: bool) -> Option<bool> {
    b.then_some(true)
}

impl Cli {
    fn layer(&self) -> Layer {
        let g = &self.global;
        let mut l = Layer {
            mock_llm: flag(g.mock_llm),
            seed: g.seed,
            embed_dim: g.embed_dim,
            api_base: g.api_base.clone(),
            embed_model: g.embed_model.clone(),
            chat_model: g.chat_model.clone(),
            timeout_secs: g.timeout_secs,
            max_retries: g.max_retries,
            ..Layer::default()
        };
        let build = |l: &mut Layer, b: &BuildArgs| {
            l.clustering = b.clustering;
            l.chunk_tokens = b.chunk_tokens;
            l.overlap_tokens = b.overlap_tokens;
            l.summary_tokens = b.summary_tokens;
        };
        let update = |l: &mut Layer, u: &UpdateArgs| {
            l.greedy = flag(u.greedy);
            l.recluster_on_delete = flag(u.recluster_on_delete);
        };
        match &self.command {
            Command::Build { build: b, .. } => build(&mut l, b),
            Command::Add { update: u, batching, .. } => {
                update(&mut l, u);
                l.batching = *batching;
            }
            Command::Remove { update: u, .. } => update(&mut l, u),
            Command::Query { k, token_limit, .. } => {
                l.k = *k;
                l.token_limit = *token_limit;
            }
            Command::Ask { retriever, k0, budget, expand, answer, clustering, .. } => {
                l.retriever = *retriever;
                l.k0 = *k0;
                l.budget = *budget;
                l.expand = flag(*expand);
                l.answer = flag(*answer);
                l.clustering = *clustering;
            }
            Command::BenchSplit { fraction, batching, build: b, update: u, .. } => {
                l.fraction = *fraction;
                l.batching = *batching;
                build(&mut l, b);
                update(&mut l, u);
            }
            Command::Stats { .. } | Command::GenCorpus { .. } | Command::Config => {}
        }
        l
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let s = Settings::resolve(cli.layer(), cli.global.config.as_deref())?;
    let out = commands::Output { json: cli.global.json };
    match cli.command {
        Command::Build { corpus, index, .. } => commands::build(&s, &corpus, &index, out),
        Command::Add { index, files, .. } => commands::add(&s, &index, &files, out),
        Command::Remove { index, id, chunk, .. } => commands::remove(&s, &index, &id, chunk, out),
        Command::Query { index, query, .. } => commands::query(&s, &index, &query, out),
        Command::Ask { index, query, .. } => commands::ask(&s, &index, &query, out),
        Command::Stats { index } => commands::stats(&index, out),
        Command::BenchSplit { corpus, .. } => commands::bench_split(&s, &corpus, out),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
        Command::GenCorpus { out: dir, chunks } => commands::gen_corpus(&s, &dir, chunks),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
