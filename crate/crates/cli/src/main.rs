//! `flowcot` experiment runner.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use config::{Backend, RunConfig};
use flowcot::eval::{budget_sweep, compare_arms, pass_at_k};
use flowcot::flow::fit_label_posterior;
use flowcot::io::{read_jsonl, stable_hash, write_jsonl};
use flowcot::lm::{fit_mle, load_policy, save_policy, CondSeqModel, LinearSoftmaxPolicy, Policy, Trajectory};
use flowcot::rl::{sample_trajectory, train, CurveRecord};
use flowcot::tasks::{generate, synthesize_corpus, TaskFamilyConfig, TaskInstance};
use flowcot::verify::{check_normalization, run_identity_suite};

const EXIT_DIVERGED: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "flowcot", version, about = "Probabilistic flow progress for chain-of-thought: decoding, RL and checks")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// TOML run configuration; missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the subcommand's section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "FLOWCOT_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the evaluation dataset and the filler corpus.
    Gen,
    /// Fit the prior (and a label posterior) on the corpus.
    Fit,
    /// Compare decoding arms on the dataset.
    Decode,
    /// Train a policy with flow or outcome rewards.
    Train,
    /// Sampled pass@k of a checkpoint on the dataset.
    Eval,
    /// Run the identity suite.
    Verify {
        /// Also check normalisation of this checkpoint on the dataset's queries.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

struct Ctx {
    shared: Shared,
    config: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.shared.out_dir.join(p)
        }
    }

    fn claim(&self, names: &[&str]) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.shared.out_dir)
            .with_context(|| format!("cannot create {}", self.shared.out_dir.display()))?;
        let paths: Vec<PathBuf> = names.iter().map(|n| self.shared.out_dir.join(n)).collect();
        if !self.shared.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                bail!("{} exists; pass --force to overwrite", p.display());
            }
        }
        Ok(paths)
    }
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    run_id: String,
    timestamp: u64,
    subcommand: &'a str,
    seed: u64,
    config: &'a C,
    summary: Value,
}

fn run_id<C: Serialize>(config: &C, seed: u64) -> String {
    format!("{}-{seed}", stable_hash(config))
}

fn record<'a, C: Serialize>(subcommand: &'a str, config: &'a C, seed: u64, summary: Value) -> RunRecord<'a, C> {
    RunRecord {
        run_id: run_id(config, seed),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        subcommand,
        seed,
        config,
        summary,
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn write_records<C: Serialize, T: Serialize>(path: &Path, head: &RunRecord<'_, C>, rows: &[T]) -> Result<()> {
    let mut lines = vec![serde_json::to_string(head)?];
    for r in rows {
        lines.push(serde_json::to_string(r)?);
    }
    write_lines(path, &lines)
}

fn load_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    read_jsonl(path).with_context(|| format!("cannot read dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Policy> {
    load_policy(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn cmd_gen(ctx: &mut Ctx) -> Result<ExitCode> {
    if let Some(s) = ctx.shared.seed {
        ctx.config.gen.task.seed = s;
    }
    let g = &ctx.config.gen;
    let out = ctx.claim(&["dataset.jsonl", "corpus.jsonl"])?;
    let (_, corpus_instances) = generate(&g.task, g.corpus_size)?;
    let (tv, dataset) = generate(
        &TaskFamilyConfig {
            seed: g.dataset_seed,
            ..g.task.clone()
        },
        g.dataset_size,
    )?;
    let corpus = synthesize_corpus(&tv, &corpus_instances, g.filler_rate, g.corpus_seed)?;
    write_jsonl(&out[0], &dataset)?;
    write_jsonl(&out[1], &corpus)?;
    println!(
        "wrote {} instances to {} and {} trajectories to {} (run {})",
        dataset.len(),
        out[0].display(),
        corpus.len(),
        out[1].display(),
        run_id(g, g.task.seed)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit(ctx: &mut Ctx) -> Result<ExitCode> {
    if let (Some(s), Some(p)) = (ctx.shared.seed, ctx.config.fit.posterior.as_mut()) {
        p.seed = s;
    }
    let f = ctx.config.fit.clone();
    let corpus: Vec<Trajectory> =
        read_jsonl(&ctx.path(&f.corpus)).with_context(|| format!("cannot read corpus {}", ctx.path(&f.corpus).display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", ctx.path(&f.corpus).display());
    }
    // The corpus stores token ids only; the vocabulary comes from the task config.
    let vocab = flowcot::tasks::TaskVocab::new(&ctx.config.gen.task)?.vocab;
    let wants_posterior = f.posterior.is_some() && f.backend == Backend::Tabular;
    let names: &[&str] = if wants_posterior {
        &["prior.json", "posterior.json"]
    } else {
        &["prior.json"]
    };
    let out = ctx.claim(names)?;
    match f.backend {
        Backend::Tabular => {
            let prior = fit_mle(&vocab, f.view, &corpus, f.alpha)?;
            if let (true, Some(pc)) = (wants_posterior, &f.posterior) {
                let dataset = load_instances(&ctx.path(&f.dataset))?;
                let queries: Vec<_> = dataset.iter().map(|i| i.query.clone()).collect();
                let post = fit_label_posterior(&prior, &queries, pc)?;
                save_policy(&post.into(), &out[1])?;
            }
            save_policy(&prior.into(), &out[0])?;
        }
        Backend::Linear => {
            let mut p = LinearSoftmaxPolicy::zeros(vocab, f.features.clone());
            p.fit_mle(&corpus, &f.linear)?;
            save_policy(&p.into(), &out[0])?;
        }
    }
    for p in &out {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_decode(ctx: &mut Ctx) -> Result<ExitCode> {
    if let Some(s) = ctx.shared.seed {
        for a in &mut ctx.config.decode.arms {
            a.config.seed = s;
        }
    }
    let d = ctx.config.decode.clone();
    let seed = d.arms.first().map_or(0, |a| a.config.seed);
    let dataset = load_instances(&ctx.path(&d.dataset))?;
    let prior = load_checkpoint(&ctx.path(&d.prior))?;
    let posterior = match &d.posterior {
        Some(p) if ctx.path(p).exists() => Some(load_checkpoint(&ctx.path(p))?),
        Some(p) if d.arms.iter().any(|a| a.config.posterior_mode.is_label_mode()) => {
            bail!("posterior checkpoint {} is missing", ctx.path(p).display())
        }
        _ => None,
    };
    let mut names = vec!["records.jsonl", "summary.csv", "transitions.jsonl"];
    if !d.budgets.is_empty() {
        names.push("sweep.jsonl");
    }
    let out = ctx.claim(&names)?;
    let post_ref = posterior.as_ref().map(|p| p as &dyn CondSeqModel);
    let cmp = compare_arms(&prior, post_ref, &dataset, &d.arms)?;
    let id = run_id(&d, seed);
    let mut csv = vec![format!("# run_id={id} seed={seed}"), flowcot::eval::ArmSummary::CSV_HEADER.to_string()];
    csv.extend(cmp.summaries.iter().map(|s| s.csv_row()));
    write_lines(&out[1], &csv)?;
    let rows: Vec<Value> = d
        .arms
        .iter()
        .zip(&cmp.rollouts)
        .flat_map(|(a, rs)| {
            rs.iter().map(move |r| {
                json!({
                    "arm": a.name,
                    "id": r.instance_id,
                    "thought": r.trajectory.state.thought,
                    "answer": r.trajectory.answer,
                    "correct": r.correct,
                    "length": r.len(),
                    "terminated": r.trajectory.terminated,
                    "mean_pfp": r.profile.as_ref().map(|p| p.mean),
                })
            })
        })
        .collect();
    let head = record("decode", &d, seed, serde_json::to_value(&cmp.summaries)?);
    write_records(&out[0], &head, &rows)?;
    write_records(&out[2], &record("decode", &d, seed, Value::Null), &cmp.transitions)?;
    if !d.budgets.is_empty() {
        let table = budget_sweep(&prior, post_ref, &dataset, &d.budgets, &d.arms)?;
        let mut rows: Vec<Value> = table.rows.iter().map(serde_json::to_value).collect::<Result<_, _>>()?;
        rows.extend(table.saturation.iter().map(|s| json!({ "saturation": s })));
        write_records(&out[3], &record("decode", &d, seed, Value::Null), &rows)?;
    }
    println!("{:<20} {:>9} {:>7} {:>11} {:>13} {:>9}", "arm", "instances", "pass1", "mean_length", "median_length", "truncated");
    for s in &cmp.summaries {
        println!(
            "{:<20} {:>9} {:>7.3} {:>11.3} {:>13.1} {:>9}",
            s.name, s.instances, s.pass1, s.mean_length, s.median_length, s.truncated
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(ctx: &mut Ctx) -> Result<ExitCode> {
    if let Some(s) = ctx.shared.seed {
        ctx.config.train.rl.seed = s;
    }
    let t = ctx.config.train.clone();
    let setup = t.setup();
    let out = ctx.claim(&["curve.csv", "policy.json", "train.jsonl"])?;
    let assets = setup.build()?;
    let mut policy = match &t.init {
        Some(p) => match load_checkpoint(&ctx.path(p))? {
            Policy::Linear(l) => l,
            Policy::Tabular(_) => bail!("training needs a linear checkpoint"),
        },
        None => assets.policy,
    };
    let id = run_id(&t, t.rl.seed);
    let mut curve: Vec<CurveRecord> = Vec::new();
    let mut divergence = None;
    let chunk = t.checkpoint_every.filter(|&c| c > 0).unwrap_or(t.rl.steps.max(1));
    let mut done = 0;
    while done < t.rl.steps && divergence.is_none() {
        let n = chunk.min(t.rl.steps - done);
        let cfg = flowcot::rl::TrainConfig {
            steps: n,
            seed: t.rl.seed ^ done as u64,
            ..t.rl.clone()
        };
        let rep = train(&mut policy, &assets.train, &assets.heldout, &cfg)?;
        for mut r in rep.curve {
            r.step += done;
            curve.push(r);
        }
        divergence = rep.divergence.map(|d| (d.step + done, d.magnitude));
        done += n;
        if t.checkpoint_every.is_some() && divergence.is_none() && done < t.rl.steps {
            save_policy(&policy.clone().into(), &ctx.shared.out_dir.join(format!("checkpoint_{done}.json")))?;
        }
    }
    let mut csv = vec![format!("# run_id={id} seed={}", t.rl.seed), CurveRecord::CSV_HEADER.to_string()];
    csv.extend(curve.iter().map(|r| r.csv_row()));
    write_lines(&out[0], &csv)?;
    save_policy(&policy.into(), &out[1])?;
    let summary = json!({
        "steps_completed": curve.len(),
        "final": curve.iter().rev().find(|r| !r.pass1.is_nan()).map(|r| json!({"pass1": r.pass1, "length_mean": r.length_mean})),
        "diverged_at": divergence.map(|d| d.0),
    });
    write_records(&out[2], &record("train", &t, t.rl.seed, summary), &Vec::<Value>::new())?;
    println!("wrote {} ({} steps) and {}", out[0].display(), curve.len(), out[1].display());
    if let Some((step, magnitude)) = divergence {
        eprintln!(
            "error: {}",
            flowcot::FlowError::Divergence {
                step,
                magnitude,
                limit: t.rl.divergence_limit
            }
        );
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ctx: &mut Ctx) -> Result<ExitCode> {
    if let Some(s) = ctx.shared.seed {
        ctx.config.eval.seed = s;
    }
    let e = ctx.config.eval.clone();
    if let Some(&k) = e.ks.iter().find(|&&k| k == 0 || k > e.samples) {
        bail!("k = {k} must lie in 1..={}", e.samples);
    }
    let dataset = load_instances(&ctx.path(&e.dataset))?;
    let policy = load_checkpoint(&ctx.path(&e.checkpoint))?;
    let out = ctx.claim(&["passk.csv", "eval.jsonl"])?;
    let counts: Vec<(String, usize, f64)> = {
        use rayon::prelude::*;
        dataset
            .par_iter()
            .map(|inst| {
                let mut r = flowcot::rng::stream(e.seed, &[flowcot::rng::label("eval"), flowcot::rng::label(&inst.id)]);
                let mut c = 0;
                let mut len = 0.0;
                for _ in 0..e.samples {
                    let t = sample_trajectory(&policy, &inst.query, e.horizon, e.temperature, &mut r)?;
                    c += usize::from(t.answer == inst.gold_answer);
                    len += t.len() as f64;
                }
                Ok((inst.id.clone(), c, len / e.samples as f64))
            })
            .collect::<flowcot::Result<_>>()?
    };
    let id = run_id(&e, e.seed);
    let mut csv = vec![format!("# run_id={id} seed={}", e.seed), "k,pass_at_k".to_string()];
    let mut summary = serde_json::Map::new();
    for &k in &e.ks {
        let mut total = 0.0;
        for (_, c, _) in &counts {
            total += pass_at_k(e.samples, *c, k)?;
        }
        let v = total / counts.len().max(1) as f64;
        csv.push(format!("{k},{v}"));
        summary.insert(format!("pass@{k}"), json!(v));
        println!("pass@{k:<3} {v:.4}");
    }
    write_lines(&out[0], &csv)?;
    let rows: Vec<Value> = counts
        .iter()
        .map(|(id, c, l)| json!({ "id": id, "n": e.samples, "c": c, "mean_length": l }))
        .collect();
    write_records(&out[1], &record("eval", &e, e.seed, Value::Object(summary)), &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(ctx: &Ctx, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<ExitCode> {
    let mut rep = run_identity_suite()?;
    if let Some(cp) = checkpoint {
        let check = match load_policy(cp) {
            Ok(policy) => {
                let ds = dataset
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| ctx.shared.out_dir.join("dataset.jsonl"));
                let queries: Vec<_> = load_instances(&ds)?.into_iter().map(|i| i.query).collect();
                check_normalization(&cp.display().to_string(), &policy, &queries, ctx.config.eval.horizon)
            }
            Err(err) => flowcot::verify::CheckResult {
                name: format!("normalization[{}]", cp.display()),
                measured: f64::INFINITY,
                tolerance: 1e-9,
                passed: false,
                detail: format!("error: {err}"),
                seconds: 0.0,
            },
        };
        rep.checks.push(check);
    }
    for c in &rep.checks {
        println!("{}", c.line());
    }
    let failed = rep.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", rep.checks.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY_FAILED)
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(j) = cli.shared.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("cannot configure worker threads")?;
    }
    let config = match &cli.shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ctx = Ctx {
        shared: cli.shared,
        config,
    };
    match &cli.command {
        Command::Gen => cmd_gen(&mut ctx),
        Command::Fit => cmd_fit(&mut ctx),
        Command::Decode => cmd_decode(&mut ctx),
        Command::Train => cmd_train(&mut ctx),
        Command::Eval => cmd_eval(&mut ctx),
        Command::Verify { checkpoint, dataset } => cmd_verify(&ctx, checkpoint.as_deref(), dataset.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
