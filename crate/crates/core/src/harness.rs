//! Coordinator/worker execution of sharded re-ranking over a shared job directory.
//!
//! The coordinator writes nothing but the manifest; each worker process
//! re-ranks its shard of queries and commits `shard_<i>.jsonl` with an atomic
//! rename, so a dead worker leaves at most a temp file behind. Merging then
//! treats every shard without a valid final file as missing.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::embed_store::{self, EmbeddingSet};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rerank::{self, RerankContext, RerankParams, ShardManifest};
pub use crate::rerank::{MissingReason, MissingReport};
use crate::search::RankingList;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rerank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobInputs {
    pub queries: PathBuf,
    pub gallery: PathBuf,
}

/// A distributed re-ranking job, stored as `manifest.json` in its job directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub job_id: String,
    pub stage: Stage,
    pub inputs: JobInputs,
    pub params: RerankParams,
    /// Depth of each query's result list.
    pub k: usize,
    pub shards: ShardManifest,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl JobManifest {
    /// Plans a job over two EMB1 files and writes its manifest into `job_dir`.
    pub fn create(
        job_dir: &Path,
        job_id: &str,
        queries: &Path,
        gallery: &Path,
        params: RerankParams,
        k: usize,
        n_shards: usize,
    ) -> Result<(Self, PathBuf)> {
        params.validate()?;
        if k == 0 {
            return Err(Error::InvalidParams("k must be at least 1".into()));
        }
        let absolute = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
        let inputs = JobInputs {
            queries: absolute(queries)?,
            gallery: absolute(gallery)?,
        };
        let query_set = embed_store::load_embeddings(&inputs.queries)?;
        let shards = rerank::build_shard_manifest(query_set.len(), n_shards)?
            .with_query_ids(query_set.ids().to_vec())?;
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let manifest = Self {
            job_id: job_id.to_owned(),
            stage: Stage::Rerank,
            inputs,
            params,
            k,
            shards,
            created_at,
        };
        std::fs::create_dir_all(job_dir).map_err(|e| Error::io(job_dir, e))?;
        let path = job_dir.join(MANIFEST_FILE);
        fsutil::write_json(&path, &manifest)?;
        Ok((manifest, path))
    }

    /// Reads and validates a manifest. Relative input paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: JobManifest = fsutil::read_json(path, "job manifest").map_err(|e| match e {
            Error::IoFailure { .. } | Error::Malformed { .. } => {
                Error::ManifestInvalid(e.to_string())
            }
            other => other,
        })?;
        let dir = job_dir_of(path);
        for p in [&mut m.inputs.queries, &mut m.inputs.gallery] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.params
            .validate()
            .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        if self.k == 0 {
            return Err(Error::ManifestInvalid("k must be at least 1".into()));
        }
        self.shards.validate()?;
        for p in [&self.inputs.queries, &self.inputs.gallery] {
            if !p.is_file() {
                return Err(Error::ManifestInvalid(format!(
                    "input {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn load_inputs(&self) -> Result<(EmbeddingSet<f32>, EmbeddingSet<f32>)> {
        let queries = embed_store::load_embeddings(&self.inputs.queries)?;
        let gallery = embed_store::load_embeddings(&self.inputs.gallery)?;
        if queries.len() != self.shards.n_queries
            || self
                .shards
                .query_ids
                .as_deref()
                .is_some_and(|ids| ids != queries.ids())
        {
            return Err(Error::ManifestInvalid(
                "query file no longer matches the manifest".into(),
            ));
        }
        Ok((queries, gallery))
    }
}

fn job_dir_of(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// Test hooks for a worker run.
#[derive(Debug, Clone, Copy, Default)]
pub struct WorkerOptions {
    /// Write half of the result to the temp file, then fail without committing.
    pub inject_fail: bool,
    /// Sleep between syncing the temp file and renaming it.
    pub pause_before_commit: Option<Duration>,
}

/// Re-ranks one shard's queries and commits its result file.
///
/// Neighbor structures always span every query and gallery item, so each
/// shard computes exactly the rows a single-shard run would.
pub fn worker_run(manifest_path: &Path, shard: usize, opts: WorkerOptions) -> Result<PathBuf> {
    let manifest = JobManifest::load(manifest_path)?;
    if shard >= manifest.shards.n_shards {
        return Err(Error::InvalidParams(format!(
            "shard {shard} out of range for {} shards",
            manifest.shards.n_shards
        )));
    }
    let (queries, gallery) = manifest.load_inputs()?;
    let ctx = RerankContext::build(&queries, &gallery, manifest.params)?;
    let lists = ctx.rerank_topk(manifest.shards.shard_queries(shard), manifest.k)?;
    let bytes = rerank::encode_shard(&lists);
    let out = manifest
        .shards
        .result_path(&job_dir_of(manifest_path), shard);
    if opts.inject_fail {
        let tmp = fsutil::temp_path(&out);
        std::fs::write(&tmp, &bytes[..bytes.len() / 2]).map_err(|e| Error::io(&tmp, e))?;
        return Err(Error::InjectedFailure(shard));
    }
    fsutil::write_atomic_with(&out, &bytes, || {
        if let Some(pause) = opts.pause_before_commit {
            std::thread::sleep(pause);
        }
    })?;
    Ok(out)
}

/// Starts one worker process for a shard.
pub trait WorkerLauncher {
    fn spawn(&self, manifest_path: &Path, shard: usize) -> std::io::Result<Child>;
}

/// Launches `program [prefix_args..] worker --manifest <path> --shard <i>`.
#[derive(Debug, Clone)]
pub struct ProcessLauncher {
    pub program: PathBuf,
    pub prefix_args: Vec<String>,
    /// Shards whose workers are told to fail.
    pub inject_fail: BTreeSet<usize>,
}

impl ProcessLauncher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            prefix_args: Vec::new(),
            inject_fail: BTreeSet::new(),
        }
    }
}

impl WorkerLauncher for ProcessLauncher {
    fn spawn(&self, manifest_path: &Path, shard: usize) -> std::io::Result<Child> {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.prefix_args)
            .arg("worker")
            .arg("--manifest")
            .arg(manifest_path)
            .arg("--shard")
            .arg(shard.to_string());
        if self.inject_fail.contains(&shard) {
            cmd.arg("--inject-fail");
        }
        // a worker's status line would interleave with the coordinator's own
        cmd.stdout(Stdio::null()).spawn()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailPolicy {
    /// Return whatever merged, with a report of the missing queries.
    Tolerate,
    /// Any missing shard is an error.
    Strict,
}

#[derive(Debug)]
pub struct CoordinatorOutcome {
    pub results: Vec<RankingList<f32>>,
    pub missing: MissingReport,
    /// Exit status of each shard's worker, by shard index.
    pub worker_status: Vec<Option<ExitStatus>>,
}

/// Runs every shard's worker, at most `parallelism` at a time, then merges.
pub fn coordinator_run(
    manifest_path: &Path,
    parallelism: usize,
    policy: FailPolicy,
    launcher: &dyn WorkerLauncher,
) -> Result<CoordinatorOutcome> {
    if parallelism == 0 {
        return Err(Error::InvalidParams(
            "parallelism must be at least 1".into(),
        ));
    }
    let manifest = JobManifest::load(manifest_path)?;
    let job_dir = job_dir_of(manifest_path);
    let n = manifest.shards.n_shards;
    for shard in 0..n {
        let path = manifest.shards.result_path(&job_dir, shard);
        match std::fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(path, e)),
            _ => {}
        }
    }

    let mut status: Vec<Option<ExitStatus>> = vec![None; n];
    let mut pending = 0..n;
    let mut running: Vec<(usize, Child)> = Vec::new();
    loop {
        while running.len() < parallelism {
            let Some(shard) = pending.next() else { break };
            match launcher.spawn(manifest_path, shard) {
                Ok(child) => running.push((shard, child)),
                // the shard simply ends up missing
                Err(_) => continue,
            }
        }
        if running.is_empty() {
            break;
        }
        let mut i = 0;
        let mut reaped = false;
        while i < running.len() {
            match running[i].1.try_wait() {
                Ok(Some(exit)) => {
                    status[running[i].0] = Some(exit);
                    running.swap_remove(i);
                    reaped = true;
                }
                Ok(None) => i += 1,
                Err(_) => {
                    let (_, mut child) = running.swap_remove(i);
                    let _ = child.kill();
                    let _ = child.wait();
                    reaped = true;
                }
            }
        }
        if !reaped {
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    let (results, missing) = rerank::merge_shard_results(&manifest.shards, &job_dir)?;
    if policy == FailPolicy::Strict && !missing.is_empty() {
        return Err(Error::ShardsMissing {
            shards: missing.missing_shards(),
        });
    }
    Ok(CoordinatorOutcome {
        results,
        missing,
        worker_status: status,
    })
}

/// Merges whatever shard files a job directory holds.
pub fn merge_job(manifest_path: &Path) -> Result<(Vec<RankingList<f32>>, MissingReport)> {
    let manifest = JobManifest::load(manifest_path)?;
    rerank::merge_shard_results(&manifest.shards, &job_dir_of(manifest_path))
}
