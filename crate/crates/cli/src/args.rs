use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prodretrieve::harness::FailPolicy;

#[derive(Debug, Parser)]
#[command(
    name = "prodretrieve",
    version,
    about = "Product image retrieval pipeline over precomputed embeddings"
)]
pub struct Cli {
    /// Worker threads for parallel stages. Never changes output bytes.
    #[arg(long, global = true, env = "PRODRETRIEVE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// L2-normalize every row of an EMB1 file.
    Normalize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fuse aligned multi-scale embeddings into one descriptor per item.
    Fuse {
        /// EMB1 file per scale; the label is the path.
        #[arg(long, required_unless_present = "sidecar")]
        input: Vec<PathBuf>,
        /// Sidecar JSON per scale; checked against its sha256.
        #[arg(long, conflicts_with = "input")]
        sidecar: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Brute-force cosine top-k search.
    Search {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
        /// Also write the full distance matrix.
        #[arg(long)]
        matrix_output: Option<PathBuf>,
    },
    /// Collapse crop columns of a distance matrix onto their parent images.
    CropAgg {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        crop_map: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write top-k lists over the aggregated matrix.
        #[arg(long, requires = "k")]
        lists_output: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// In-process k-reciprocal re-ranking.
    Rerank {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[command(flatten)]
        params: RerankArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        matrix_output: Option<PathBuf>,
    },
    /// Plan a sharded re-ranking job and write its manifest.
    Shard {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[command(flatten)]
        params: RerankArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        n_shards: usize,
        #[arg(long)]
        job_dir: PathBuf,
        #[arg(long, default_value = "rerank")]
        job_id: String,
    },
    /// Merge whatever shard files a job holds.
    Merge {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        missing_output: Option<PathBuf>,
    },
    /// Re-rank one shard of a job.
    Worker {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        shard: usize,
        /// Leave a half-written temp file and exit nonzero.
        #[arg(long)]
        inject_fail: bool,
        #[arg(long, hide = true)]
        pause_before_commit_ms: Option<u64>,
    },
    /// Run every shard's worker as a separate process, then merge.
    Coordinate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long, value_enum, default_value = "tolerate")]
        fail_policy: Policy,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        missing_output: Option<PathBuf>,
        /// Shards whose workers get `--inject-fail`.
        #[arg(long, hide = true)]
        inject_fail_shard: Vec<usize>,
    },
    /// Elementwise max of row-normalized similarities.
    MaxEnsemble {
        /// Distance matrix JSON per model.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, requires = "k")]
        lists_output: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Borda vote over per-model ranking lists.
    VoteEnsemble {
        #[arg(long, conflicts_with = "input")]
        spec: Option<PathBuf>,
        /// Ranking-list file per model; the label is the path.
        #[arg(long, required_unless_present = "spec")]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = prodretrieve::ensemble::DEFAULT_DEPTH)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Threshold-graph connected components.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        /// Cosine similarity cutoff in (0, 1). There is no default.
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Keep clusters smaller than --max-size.
    FilterClusters {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = prodretrieve::pseudolabel::DEFAULT_MAX_CLUSTER_SIZE)]
        max_size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Turn kept clusters plus sampled singletons into class labels.
    AssignLabels {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = prodretrieve::pseudolabel::DEFAULT_TARGET_CLASSES)]
        target: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a seeded clustered benchmark: gallery.emb, queries.emb, gt.jsonl.
    GenSynth {
        #[arg(long, default_value_t = 200)]
        n_classes: usize,
        #[arg(long, default_value_t = 10)]
        gallery_per_class: usize,
        #[arg(long, default_value_t = 2)]
        queries_per_class: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.35)]
        noise_sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Add seeded Gaussian noise to every coordinate (no renormalization).
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// MAR@k of ranking lists against ground truth.
    Eval {
        #[arg(long)]
        lists: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        per_query: bool,
        /// Reject lists naming ids outside this EMB1 gallery.
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a JSON pipeline config step by step.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Directory for `@` artifacts. Defaults to the config's `workdir`.
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Skip steps whose recorded outputs are present and unchanged.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Debug, Clone, Copy, Args)]
pub struct RerankArgs {
    #[arg(long, default_value_t = 20)]
    pub k1: usize,
    #[arg(long, default_value_t = 6)]
    pub k2: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
}

impl From<RerankArgs> for prodretrieve::rerank::RerankParams {
    fn from(a: RerankArgs) -> Self {
        Self {
            k1: a.k1,
            k2: a.k2,
            lambda: a.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Policy {
    Tolerate,
    Strict,
}

impl From<Policy> for FailPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Tolerate => FailPolicy::Tolerate,
            Policy::Strict => FailPolicy::Strict,
        }
    }
}
