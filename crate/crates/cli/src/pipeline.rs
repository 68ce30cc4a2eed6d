//! JSON pipeline configs: an ordered list of subcommand invocations.
//!
//! Argument tokens starting with `@` name artifacts under the work directory,
//! tokens starting with `%` name external files relative to the config. Every
//! `@` token must be produced by this step or an earlier one.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use clap::Parser;
use prodretrieve::fsutil;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::Cli;
use crate::commands::{self, Failure, Status};

pub const STATE_FILE: &str = ".pipeline_state.json";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Work directory, relative to the config file.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub name: String,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// `@` artifacts this step writes.
    #[serde(default)]
    pub outputs: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    steps: BTreeMap<String, StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepRecord {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

fn artifact(token: &str) -> Option<&str> {
    token.strip_prefix('@')
}

/// `a` is `b` or a directory above it.
fn covers(a: &str, b: &str) -> bool {
    b == a || b.strip_prefix(a).is_some_and(|rest| rest.starts_with('/'))
}

pub fn validate(config: &PipelineConfig, config_dir: &Path) -> Result<(), Failure> {
    let mut producer: HashMap<&str, usize> = HashMap::new();
    for (i, step) in config.steps.iter().enumerate() {
        if step.name.is_empty() || config.steps[..i].iter().any(|s| s.name == step.name) {
            return Err(Failure::Config(format!(
                "step {i} has an empty or repeated name {:?}",
                step.name
            )));
        }
        if step.command == "pipeline" {
            return Err(Failure::Config(format!(
                "step {:?} nests a pipeline",
                step.name
            )));
        }
        for out in &step.outputs {
            let Some(name) = artifact(out).filter(|n| !n.is_empty()) else {
                return Err(Failure::Config(format!(
                    "step {:?} output {out:?} is not an @ artifact",
                    step.name
                )));
            };
            if let Some(prev) = producer.insert(name, i) {
                return Err(Failure::Config(format!(
                    "{out} is written by both {:?} and {:?}",
                    config.steps[prev].name, step.name
                )));
            }
        }
    }
    for (i, step) in config.steps.iter().enumerate() {
        for token in &step.args {
            if let Some(name) = artifact(token) {
                if step
                    .outputs
                    .iter()
                    .filter_map(|o| artifact(o))
                    .any(|o| covers(name, o))
                {
                    continue;
                }
                match producer.get(name) {
                    Some(&p) if p < i => {}
                    Some(&p) => {
                        return Err(Failure::Config(format!(
                            "step {:?} reads {token} before step {:?} produces it",
                            step.name, config.steps[p].name
                        )))
                    }
                    None => {
                        return Err(Failure::Config(format!(
                            "step {:?} references {token}, which no earlier step produces",
                            step.name
                        )))
                    }
                }
            } else if let Some(rel) = token.strip_prefix('%') {
                if !config_dir.join(rel).exists() {
                    return Err(Failure::Config(format!(
                        "step {:?} input {token} does not exist",
                        step.name
                    )));
                }
            }
        }
    }
    Ok(())
}

fn resolve(token: &str, workdir: &Path, config_dir: &Path) -> String {
    if let Some(name) = artifact(token) {
        workdir.join(name).display().to_string()
    } else if let Some(rel) = token.strip_prefix('%') {
        config_dir.join(rel).display().to_string()
    } else {
        token.to_owned()
    }
}

fn hash_file(path: &Path) -> Option<String> {
    path.is_file()
        .then(|| fsutil::sha256_file(path).ok())
        .flatten()
}

/// Hash of the command line plus the content of every file it reads.
fn fingerprint(step: &Step, argv: &[String]) -> String {
    let mut text = step.command.clone();
    for (token, arg) in step.args.iter().zip(argv) {
        text.push('\0');
        text.push_str(arg);
        let is_output = artifact(token).is_some_and(|n| {
            step.outputs
                .iter()
                .filter_map(|o| artifact(o))
                .any(|o| covers(n, o))
        });
        if (token.starts_with('@') || token.starts_with('%')) && !is_output {
            text.push('\0');
            text.push_str(&hash_file(Path::new(arg)).unwrap_or_default());
        }
    }
    fsutil::sha256_hex(text.as_bytes())
}

fn load_config(path: &Path) -> Result<PipelineConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn run(config_path: &Path, workdir: Option<&Path>, resume: bool) -> Result<Status, Failure> {
    let config = load_config(config_path)?;
    let config_dir = config_path.parent().unwrap_or(Path::new("")).to_path_buf();
    validate(&config, &config_dir)?;
    let workdir = match workdir {
        Some(w) => w.to_path_buf(),
        None => config_dir.join(config.workdir.clone().unwrap_or_else(|| "work".into())),
    };
    let mut status = Status::default();
    if config.steps.is_empty() {
        return Ok(status);
    }
    std::fs::create_dir_all(&workdir)
        .map_err(|e| Failure::Config(format!("{}: {e}", workdir.display())))?;
    let state_path = workdir.join(STATE_FILE);
    let mut state: State = if resume && state_path.exists() {
        fsutil::read_json(&state_path, "pipeline state").unwrap_or_default()
    } else {
        State::default()
    };

    let (mut ran, mut skipped) = (Vec::new(), Vec::new());
    for step in &config.steps {
        let argv: Vec<String> = step
            .args
            .iter()
            .map(|t| resolve(t, &workdir, &config_dir))
            .collect();
        let outputs: Vec<PathBuf> = step
            .outputs
            .iter()
            .map(|o| PathBuf::from(resolve(o, &workdir, &config_dir)))
            .collect();
        let print = fingerprint(step, &argv);
        let fail = |inner: Failure| Failure::Step {
            step: step.name.clone(),
            inner: Box::new(inner),
        };

        let up_to_date = resume
            && state.steps.get(&step.name).is_some_and(|rec| {
                rec.fingerprint == print
                    && outputs
                        .iter()
                        .all(|p| rec.outputs.get(&p.display().to_string()) == hash_file(p).as_ref())
            });
        if up_to_date {
            eprintln!("step {}: up to date, skipped", step.name);
            skipped.push(step.name.clone());
        } else {
            let cli = Cli::try_parse_from(
                std::iter::once("prodretrieve".to_owned())
                    .chain([step.command.clone()])
                    .chain(argv.clone()),
            )
            .map_err(|e| fail(Failure::Config(e.to_string().trim_end().to_owned())))?;
            for dir in outputs.iter().filter_map(|p| p.parent()) {
                std::fs::create_dir_all(dir)
                    .map_err(|e| fail(Failure::Config(format!("{}: {e}", dir.display()))))?;
            }
            let step_status = commands::run(cli.command).map_err(fail)?;
            if let Some(v) = step_status.extra.get("mar_at_k") {
                status.extra.insert("mar_at_k".into(), v.clone());
            }
            let mut hashes = BTreeMap::new();
            for p in &outputs {
                let h = hash_file(p).ok_or_else(|| {
                    fail(Failure::Config(format!(
                        "declared output {} was not written",
                        p.display()
                    )))
                })?;
                hashes.insert(p.display().to_string(), h);
            }
            state.steps.insert(
                step.name.clone(),
                StepRecord {
                    fingerprint: print,
                    outputs: hashes,
                },
            );
            fsutil::write_json(&state_path, &state).map_err(|e| fail(Failure::Data(e)))?;
            eprintln!("step {}: ok", step.name);
            ran.push(step.name.clone());
        }
        status.outputs.extend(outputs);
    }
    status.extra.insert("steps_run".into(), json!(ran));
    status.extra.insert("steps_skipped".into(), json!(skipped));
    Ok(status)
}
