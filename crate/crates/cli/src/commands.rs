use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use prodretrieve::embed_store::{self, ScaleGroup, Sidecar};
use prodretrieve::ensemble::{self, Ballots, EnsembleSpec};
use prodretrieve::evalbench::{self, GroundTruth, SynthParams};
use prodretrieve::harness::{self, JobManifest, MissingReport, ProcessLauncher, WorkerOptions};
use prodretrieve::pseudolabel::{self, ClusterResult};
use prodretrieve::rerank::{RerankContext, RerankParams};
use prodretrieve::search::{self, CropGroupMap, DistanceMatrix, RankingList};
use prodretrieve::{fsutil, Error};
use serde_json::{json, Map, Value};

use crate::args::Command;
use crate::pipeline;

#[derive(Debug)]
pub enum Failure {
    /// A module operation rejected its inputs.
    Data(Error),
    /// The invocation or pipeline config is unusable.
    Config(String),
    /// A pipeline step failed.
    Step { step: String, inner: Box<Failure> },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Data(e) => write!(f, "{}: {e}", e.name()),
            Failure::Config(msg) => write!(f, "ConfigInvalid: {msg}"),
            Failure::Step { step, inner } => write!(f, "step {step:?}: {inner}"),
        }
    }
}

/// What a successful subcommand reports on its status line.
#[derive(Debug, Default)]
pub struct Status {
    pub outputs: Vec<PathBuf>,
    pub extra: Map<String, Value>,
}

impl Status {
    fn wrote(outputs: impl IntoIterator<Item = PathBuf>) -> Self {
        Self {
            outputs: outputs.into_iter().collect(),
            extra: Map::new(),
        }
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("ok".into(), Value::Bool(true));
        obj.insert(
            "outputs".into(),
            self.outputs
                .iter()
                .map(|p| Value::String(p.display().to_string()))
                .collect(),
        );
        obj.extend(self.extra.clone());
        Value::Object(obj)
    }
}

pub fn run(command: Command) -> Result<Status, Failure> {
    match command {
        Command::Normalize { input, output } => {
            let set = embed_store::load_embeddings(&input)?;
            embed_store::save_embeddings(&embed_store::l2_normalize(&set)?, &output)?;
            Ok(Status::wrote([output]))
        }
        Command::Fuse {
            input,
            sidecar,
            output,
        } => {
            let scales = if sidecar.is_empty() {
                input
                    .iter()
                    .map(|p| Ok((p.display().to_string(), embed_store::load_embeddings(p)?)))
                    .collect::<Result<Vec<_>, Error>>()?
            } else {
                sidecar
                    .iter()
                    .map(|p| {
                        let s = Sidecar::load(p)?;
                        Ok((s.scale.clone(), s.load_embeddings()?))
                    })
                    .collect::<Result<Vec<_>, Error>>()?
            };
            let fused = embed_store::fuse_multiscale(&ScaleGroup::new(scales)?)?;
            embed_store::save_embeddings(&fused, &output)?;
            Ok(Status::wrote([output]))
        }
        Command::Search {
            queries,
            gallery,
            k,
            output,
            matrix_output,
        } => {
            let (q, g) = (
                embed_store::load_embeddings(&queries)?,
                embed_store::load_embeddings(&gallery)?,
            );
            let mut outputs = vec![output.clone()];
            let lists = match matrix_output {
                Some(m) => {
                    let matrix = search::pairwise_cosine_distance(&q, &g)?;
                    matrix.save(&m)?;
                    outputs.push(m);
                    search::topk(&matrix, k)?
                }
                None => search::knn_search(&q, &g, k)?,
            };
            search::save_rankings(&lists, &output)?;
            Ok(Status::wrote(outputs))
        }
        Command::CropAgg {
            matrix,
            crop_map,
            output,
            lists_output,
            k,
        } => {
            let agg = search::aggregate_crops(
                &DistanceMatrix::<f32>::load(&matrix)?,
                &CropGroupMap::load(&crop_map)?,
            )?;
            agg.save(&output)?;
            let mut outputs = vec![output];
            if let (Some(path), Some(k)) = (lists_output, k) {
                search::save_rankings(&search::topk(&agg, k)?, &path)?;
                outputs.push(path);
            }
            Ok(Status::wrote(outputs))
        }
        Command::Rerank {
            queries,
            gallery,
            params,
            k,
            output,
            matrix_output,
        } => {
            let (q, g) = (
                embed_store::load_embeddings(&queries)?,
                embed_store::load_embeddings(&gallery)?,
            );
            let ctx = RerankContext::build(&q, &g, RerankParams::from(params))?;
            let all: Vec<usize> = (0..q.len()).collect();
            search::save_rankings(&ctx.rerank_topk(&all, k)?, &output)?;
            let mut outputs = vec![output];
            if let Some(m) = matrix_output {
                ctx.rerank_matrix().save(&m)?;
                outputs.push(m);
            }
            Ok(Status::wrote(outputs))
        }
        Command::Shard {
            queries,
            gallery,
            params,
            k,
            n_shards,
            job_dir,
            job_id,
        } => {
            let (_, path) = JobManifest::create(
                &job_dir,
                &job_id,
                &queries,
                &gallery,
                params.into(),
                k,
                n_shards,
            )?;
            Ok(Status::wrote([path]))
        }
        Command::Merge {
            manifest,
            output,
            missing_output,
        } => {
            let (lists, missing) = harness::merge_job(&manifest)?;
            write_results(&lists, &missing, Some(output), missing_output)
        }
        Command::Worker {
            manifest,
            shard,
            inject_fail,
            pause_before_commit_ms,
        } => {
            let opts = WorkerOptions {
                inject_fail,
                pause_before_commit: pause_before_commit_ms.map(Duration::from_millis),
            };
            Ok(Status::wrote([harness::worker_run(
                &manifest, shard, opts,
            )?]))
        }
        Command::Coordinate {
            manifest,
            parallelism,
            fail_policy,
            output,
            missing_output,
            inject_fail_shard,
        } => {
            let exe = std::env::current_exe()
                .map_err(|e| Failure::Config(format!("cannot locate own binary: {e}")))?;
            let mut launcher = ProcessLauncher::new(exe);
            launcher.inject_fail = inject_fail_shard.into_iter().collect();
            let outcome =
                harness::coordinator_run(&manifest, parallelism, fail_policy.into(), &launcher)?;
            write_results(&outcome.results, &outcome.missing, output, missing_output)
        }
        Command::MaxEnsemble {
            input,
            output,
            lists_output,
            k,
        } => {
            let matrices = input
                .iter()
                .map(|p| DistanceMatrix::<f32>::load(p))
                .collect::<Result<Vec<_>, Error>>()?;
            let fused = ensemble::max_ensemble(&matrices)?;
            fused.save(&output)?;
            let mut outputs = vec![output];
            if let (Some(path), Some(k)) = (lists_output, k) {
                search::save_rankings(&search::topk(&fused, k)?, &path)?;
                outputs.push(path);
            }
            Ok(Status::wrote(outputs))
        }
        Command::VoteEnsemble {
            spec,
            input,
            k,
            output,
        } => {
            let lists = match spec {
                Some(path) => EnsembleSpec::load(&path).map_err(config_error)?.run()?,
                None => {
                    let ballots = input
                        .iter()
                        .map(|p| {
                            Ok(Ballots {
                                label: p.display().to_string(),
                                lists: search::load_rankings::<f32>(p)?,
                            })
                        })
                        .collect::<Result<Vec<_>, Error>>()?;
                    ensemble::vote_ensemble(&ballots, k)?
                }
            };
            search::save_rankings(&lists, &output)?;
            Ok(Status::wrote([output]))
        }
        Command::Cluster {
            input,
            threshold,
            output,
        } => {
            let set = embed_store::load_embeddings(&input)?;
            let result = pseudolabel::cluster_features(&set, threshold)?;
            fsutil::write_json(&output, &result)?;
            let mut status = Status::wrote([output]);
            status
                .extra
                .insert("clusters".into(), json!(result.clusters.len()));
            status.extra.insert("pool".into(), json!(result.pool.len()));
            Ok(status)
        }
        Command::FilterClusters {
            input,
            max_size,
            output,
        } => {
            let result = load_clusters(&input)?;
            let kept = pseudolabel::filter_confident(&result, max_size);
            fsutil::write_json(&output, &kept)?;
            let mut status = Status::wrote([output]);
            status
                .extra
                .insert("clusters".into(), json!(kept.clusters.len()));
            status
                .extra
                .insert("clustered_images".into(), json!(kept.clustered_images()));
            Ok(status)
        }
        Command::AssignLabels {
            input,
            target,
            seed,
            output,
        } => {
            let kept = load_clusters(&input)?;
            let labels = pseudolabel::assign_pseudo_labels(&kept, target, seed)?;
            fsutil::write_atomic(&output, &fsutil::to_jsonl(&labels.records()))?;
            let mut status = Status::wrote([output]);
            for (key, v) in [
                ("n_classes", labels.n_classes),
                ("n_cluster_classes", labels.n_cluster_classes),
                ("n_singleton_classes", labels.n_singleton_classes),
                ("n_images", labels.n_images),
            ] {
                status.extra.insert(key.into(), json!(v));
            }
            Ok(status)
        }
        Command::GenSynth {
            n_classes,
            gallery_per_class,
            queries_per_class,
            dim,
            noise_sigma,
            seed,
            out_dir,
        } => {
            let b = evalbench::gen_synthetic::<f32>(&SynthParams {
                n_classes,
                gallery_per_class,
                queries_per_class,
                dim,
                noise_sigma,
                seed,
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::IoFailure {
                path: out_dir.clone(),
                source: e,
            })?;
            let (g, q, gt) = (
                out_dir.join("gallery.emb"),
                out_dir.join("queries.emb"),
                out_dir.join("gt.jsonl"),
            );
            embed_store::save_embeddings(&b.gallery, &g)?;
            embed_store::save_embeddings(&b.queries, &q)?;
            b.gt.save(&gt)?;
            Ok(Status::wrote([g, q, gt]))
        }
        Command::Perturb {
            input,
            sigma,
            seed,
            output,
        } => {
            let set = embed_store::load_embeddings(&input)?;
            embed_store::save_embeddings(&evalbench::perturb(&set, sigma, seed)?, &output)?;
            Ok(Status::wrote([output]))
        }
        Command::Eval {
            lists,
            gt,
            k,
            per_query,
            gallery,
            output,
        } => {
            let ranked = search::load_rankings::<f32>(&lists)?;
            let truth = GroundTruth::load(&gt)?;
            let universe: Option<HashSet<String>> = match gallery {
                Some(p) => Some(
                    embed_store::load_embeddings(&p)?
                        .ids()
                        .iter()
                        .cloned()
                        .collect(),
                ),
                None => None,
            };
            let mut report = evalbench::mar_at_k(&ranked, &truth, k, universe.as_ref())?;
            if !per_query {
                report.per_query.clear();
            }
            emit(&report);
            let mut status = Status::default();
            if let Some(path) = output {
                fsutil::write_json(&path, &report)?;
                status.outputs.push(path);
            }
            status
                .extra
                .insert("mar_at_k".into(), json!(report.mar_at_k));
            Ok(status)
        }
        Command::Pipeline {
            config,
            workdir,
            resume,
        } => pipeline::run(&config, workdir.as_deref(), resume),
    }
}

/// Prints one JSON line to stdout. A closed pipe is not an error worth a panic.
pub fn emit<S: serde::Serialize>(value: &S) {
    use std::io::Write;
    let line = serde_json::to_string(value).expect("status serializes");
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn load_clusters(path: &Path) -> Result<ClusterResult, Error> {
    let result: ClusterResult = fsutil::read_json(path, "cluster result")?;
    result.validate()?;
    Ok(result)
}

fn config_error(e: Error) -> Failure {
    match e {
        Error::IoFailure { .. } | Error::Malformed { .. } | Error::ManifestInvalid(_) => {
            Failure::Config(e.to_string())
        }
        other => Failure::Data(other),
    }
}

fn write_results(
    lists: &[RankingList<f32>],
    missing: &MissingReport,
    output: Option<PathBuf>,
    missing_output: Option<PathBuf>,
) -> Result<Status, Failure> {
    let mut status = Status::default();
    if let Some(path) = output {
        search::save_rankings(lists, &path)?;
        status.outputs.push(path);
    }
    if let Some(path) = missing_output {
        fsutil::write_json(&path, missing)?;
        status.outputs.push(path);
    }
    status
        .extra
        .insert("missing_queries".into(), json!(missing.missing_queries));
    status
        .extra
        .insert("missing_shards".into(), json!(missing.missing_shards()));
    Ok(status)
}
