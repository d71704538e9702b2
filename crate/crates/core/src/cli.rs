//! Command-line layer: run configuration files, checkpoints, metrics CSVs,
//! the train/eval/ablate/gradcheck/plot commands and SVG learning curves.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sac::{actor_loss_grad, critic_loss_grad, temperature_loss_grad, InputNormalizer, SacAgent, SacConfig};
use crate::scoopenv::{write_trace, ContainerPreset, EnvConfig, ACTION_DIM, OBS_DIM};
use crate::tinynn::{finite_diff_check, layer_blocks, AdamState, GaussianPolicyHead, GradBlock, GradCheckReport, Mlp};
use crate::trainer::{
    eval_episode_setup, evaluate, mean_se, rollout_episode, run_training, EpisodeSummary, EvalReport, MetricsRow,
    RunConfig, TrainingObserver, TrainingOutcome, Variant, MULTI_AMOUNTS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Overrides the output directory of `train` and `ablate` when `--out` is absent.
pub const OUT_DIR_ENV: &str = "GOATS_OUT_DIR";

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "episode,env_steps,k,variant,seed,train_reward,eval_reward_mean,eval_reward_se,amount_error_mean,pos_success_rate,actor_loss,critic_loss,alpha,wall_time_s";

pub const SUMMARY_HEADER: &str = "variant,n_seeds,n_failed,best_eval_reward_mean,best_eval_reward_se,amount_error_mean,amount_error_se,final_amount_error_mean,final_amount_error_se,pos_success_rate_mean,status";

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

// ---------------------------------------------------------------- config

fn merge_tables(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            // A changed enum tag replaces the whole section.
            (Some(toml::Value::Table(b)), toml::Value::Table(u))
                if !["mode", "kind"].iter().any(|t| u.contains_key(*t) && u.get(*t) != b.get(*t)) =>
            {
                merge_tables(b, u)
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses a run configuration. Missing keys take the defaults of the chosen
/// `env.container_preset`; unknown keys are rejected.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let user: toml::Table = toml::from_str(text)?;
    let preset = match user.get("env").and_then(|e| e.get("container_preset")) {
        None => ContainerPreset::Bowl,
        Some(toml::Value::String(s)) => s.parse()?,
        Some(other) => return Err(Error::InvalidConfig(format!("container_preset must be a string, got {other}"))),
    };
    let defaults = RunConfig::preset(preset, &MULTI_AMOUNTS);
    let mut base = match toml::Value::try_from(&defaults) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("RunConfig serializes to a table"),
    };
    merge_tables(&mut base, user);
    let cfg: RunConfig = toml::Value::Table(base).try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&fs::read_to_string(path)?)
}

pub fn run_config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::InvalidConfig(e.to_string()))
}

// ------------------------------------------------------------ checkpoint

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub sizes: Vec<usize>,
    /// `[out, in]` per layer; weights are row-major and followed by the bias.
    pub shapes: Vec<[usize; 2]>,
    pub params: Vec<f64>,
    pub adam: Option<AdamState>,
}

impl NetworkRecord {
    fn new(net: &Mlp, adam: Option<&AdamState>) -> Self {
        Self {
            sizes: net.sizes().to_vec(),
            shapes: net.sizes().windows(2).map(|w| [w[1], w[0]]).collect(),
            params: net.params().to_vec(),
            adam: adam.cloned(),
        }
    }

    fn to_mlp(&self) -> Result<Mlp> {
        let expected: Vec<[usize; 2]> = self.sizes.windows(2).map(|w| [w[1], w[0]]).collect();
        if expected != self.shapes {
            return Err(Error::Checkpoint(format!("shape header {:?} disagrees with sizes {:?}", self.shapes, self.sizes)));
        }
        let net = Mlp::from_params(&self.sizes, self.params.clone())?;
        if let Some(a) = &self.adam {
            if a.m.len() != net.n_params() || a.v.len() != net.n_params() {
                return Err(Error::Checkpoint("optimizer moments do not match parameter count".into()));
            }
        }
        Ok(net)
    }

    fn adam(&self) -> Result<AdamState> {
        self.adam.clone().ok_or_else(|| Error::Checkpoint("missing optimizer state".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub episode: usize,
    /// Run seed; every random stream of the run is derived from it.
    pub seed: u64,
    pub rng: String,
    pub sac: SacConfig,
    pub normalizer: InputNormalizer,
    pub actor: NetworkRecord,
    pub q1: NetworkRecord,
    pub q2: NetworkRecord,
    pub q1_target: NetworkRecord,
    pub q2_target: NetworkRecord,
    pub log_alpha: f64,
    pub alpha_opt: AdamState,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, episode: usize, seed: u64, agent: &SacAgent) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            episode,
            seed,
            rng: "chacha8 streams derived from seed".into(),
            sac: agent.config.clone(),
            normalizer: agent.normalizer.clone(),
            actor: NetworkRecord::new(&agent.actor.net, Some(&agent.actor_opt)),
            q1: NetworkRecord::new(&agent.q1, Some(&agent.q1_opt)),
            q2: NetworkRecord::new(&agent.q2, Some(&agent.q2_opt)),
            q1_target: NetworkRecord::new(&agent.q1_target, None),
            q2_target: NetworkRecord::new(&agent.q2_target, None),
            log_alpha: agent.log_alpha,
            alpha_opt: agent.alpha_opt.clone(),
        }
    }

    pub fn agent(&self) -> Result<SacAgent> {
        Ok(SacAgent {
            config: self.sac.clone(),
            normalizer: self.normalizer.clone(),
            actor: GaussianPolicyHead::new(self.actor.to_mlp()?)?,
            q1: self.q1.to_mlp()?,
            q2: self.q2.to_mlp()?,
            q1_target: self.q1_target.to_mlp()?,
            q2_target: self.q2_target.to_mlp()?,
            log_alpha: self.log_alpha,
            actor_opt: self.actor.adam()?,
            q1_opt: self.q1.adam()?,
            q2_opt: self.q2.adam()?,
            alpha_opt: self.alpha_opt.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if found != CHECKPOINT_FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch { found: found as u32, expected: CHECKPOINT_FORMAT_VERSION });
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        ck.agent()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// --------------------------------------------------------------- metrics

pub fn format_metrics_row(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.episode,
        r.env_steps,
        r.k,
        r.variant,
        r.seed,
        r.train_reward,
        r.eval_reward_mean,
        r.eval_reward_se,
        r.amount_error_mean,
        r.pos_success_rate,
        r.actor_loss,
        r.critic_loss,
        r.alpha,
        r.wall_time_s
    )
}

pub fn parse_metrics_row(line: &str) -> Result<MetricsRow> {
    let f: Vec<&str> = line.trim_end().split(',').collect();
    if f.len() != 14 {
        return Err(Error::InvalidConfig(format!("metrics row has {} fields, expected 14", f.len())));
    }
    let num = |i: usize| -> Result<f64> {
        f[i].parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::InvalidConfig(format!("metrics field `{}` is not a finite number", f[i])))
    };
    let int = |i: usize| -> Result<u64> {
        f[i].parse::<u64>().map_err(|_| Error::InvalidConfig(format!("metrics field `{}` is not an integer", f[i])))
    };
    Ok(MetricsRow {
        episode: int(0)? as usize,
        env_steps: int(1)? as usize,
        k: num(2)?,
        variant: f[3].parse()?,
        seed: int(4)?,
        train_reward: num(5)?,
        eval_reward_mean: num(6)?,
        eval_reward_se: num(7)?,
        amount_error_mean: num(8)?,
        pos_success_rate: num(9)?,
        actor_loss: num(10)?,
        critic_loss: num(11)?,
        alpha: num(12)?,
        wall_time_s: num(13)?,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidConfig(format!("{} does not start with the metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(parse_metrics_row).collect()
}

/// Append-only metrics file.
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", format_metrics_row(row))?;
        self.file.flush()?;
        Ok(())
    }
}

// ------------------------------------------------------------------ runs

/// Output layout of one `(variant, seed)` run.
pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.name()).join(format!("seed{seed}"))
}

struct FileObserver<'a> {
    config: &'a RunConfig,
    seed: u64,
    dir: PathBuf,
    metrics: MetricsWriter,
    abort_path: Option<PathBuf>,
}

impl TrainingObserver for FileObserver<'_> {
    fn on_episode(&mut self, _summary: &EpisodeSummary<'_>) {}

    fn on_eval(&mut self, row: &MetricsRow, _report: &EvalReport, agent: &SacAgent, is_best: bool) -> Result<()> {
        self.metrics.append(row)?;
        if is_best {
            Checkpoint::new(self.config, row.episode, self.seed, agent).save(&self.dir.join("best.json"))?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, episode: usize, agent: &SacAgent) -> Result<()> {
        Checkpoint::new(self.config, episode, self.seed, agent).save(&self.dir.join(format!("checkpoint_ep{episode}.json")))
    }

    fn on_abort(&mut self, episode: usize, agent: &SacAgent, _what: &str) {
        let path = self.dir.join("abort_snapshot.json");
        let ck = Checkpoint::new(self.config, episode, self.seed, agent);
        if let Ok(json) = serde_json::to_string_pretty(&ck) {
            if fs::write(&path, json).is_ok() {
                self.abort_path = Some(path);
            }
        }
    }
}

/// Result of a run written to disk.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub outcome: TrainingOutcome,
}

/// Error of a run plus the diagnostic snapshot, if one was written.
pub struct RunFailure {
    pub error: Error,
    pub snapshot: Option<PathBuf>,
}

/// Trains one `(variant, seed)` run and writes its metrics, the best and
/// final checkpoints and a config echo under `run_dir(out, ..)`.
pub fn train_to_dir(config: &RunConfig, seed: u64, out: &Path) -> std::result::Result<RunArtifacts, RunFailure> {
    let fail = |error: Error| RunFailure { error, snapshot: None };
    config.validate().map_err(fail)?;
    let dir = run_dir(out, config.variant, seed);
    fs::create_dir_all(&dir).map_err(|e| fail(e.into()))?;
    fs::write(dir.join("config.toml"), run_config_to_toml(config).map_err(fail)?).map_err(|e| fail(e.into()))?;
    let metrics = MetricsWriter::create(&dir.join("metrics.csv")).map_err(fail)?;
    let mut obs = FileObserver { config, seed, dir: dir.clone(), metrics, abort_path: None };
    match run_training(config, seed, &mut obs) {
        Ok(outcome) => {
            Checkpoint::new(config, config.total_episodes, seed, &outcome.agent)
                .save(&dir.join("final.json"))
                .map_err(fail)?;
            Ok(RunArtifacts { dir, outcome })
        }
        Err(error) => Err(RunFailure { error, snapshot: obs.abort_path }),
    }
}

fn resolve_out(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&config.out_dir))
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub best_eval_reward_mean: f64,
    pub best_eval_reward_se: f64,
    /// Amount error at each seed's best evaluation.
    pub amount_error_mean: f64,
    pub amount_error_se: f64,
    /// Amount error at each seed's last evaluation.
    pub final_amount_error_mean: f64,
    pub final_amount_error_se: f64,
    pub pos_success_rate_mean: f64,
}

impl SummaryRow {
    pub fn status(&self) -> &'static str {
        match (self.n_failed, self.n_seeds) {
            (0, _) => "ok",
            (_, 0) => "failed",
            _ => "partial",
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.n_seeds,
            self.n_failed,
            self.best_eval_reward_mean,
            self.best_eval_reward_se,
            self.amount_error_mean,
            self.amount_error_se,
            self.final_amount_error_mean,
            self.final_amount_error_se,
            self.pos_success_rate_mean,
            self.status()
        )
    }
}

type RunResult = std::result::Result<Vec<MetricsRow>, String>;

fn summarize_variant(variant: Variant, runs: &[&RunResult]) -> SummaryRow {
    let ok: Vec<&Vec<MetricsRow>> = runs.iter().filter_map(|r| r.as_ref().ok()).filter(|m| !m.is_empty()).collect();
    let n_failed = runs.len() - ok.len();
    let best: Vec<&MetricsRow> = ok
        .iter()
        .map(|m| m.iter().max_by(|a, b| a.eval_reward_mean.total_cmp(&b.eval_reward_mean)).expect("nonempty"))
        .collect();
    let last: Vec<&MetricsRow> = ok.iter().map(|m| m.last().expect("nonempty")).collect();
    let col = |rows: &[&MetricsRow], f: fn(&MetricsRow) -> f64| mean_se(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    let (best_eval_reward_mean, best_eval_reward_se) = col(&best, |r| r.eval_reward_mean);
    let (amount_error_mean, amount_error_se) = col(&best, |r| r.amount_error_mean);
    let (final_amount_error_mean, final_amount_error_se) = col(&last, |r| r.amount_error_mean);
    let (pos_success_rate_mean, _) = col(&best, |r| r.pos_success_rate);
    SummaryRow {
        variant,
        n_seeds: ok.len(),
        n_failed,
        best_eval_reward_mean,
        best_eval_reward_se,
        amount_error_mean,
        amount_error_se,
        final_amount_error_mean,
        final_amount_error_se,
        pos_success_rate_mean,
    }
}

/// Runs every `(variant, seed)` pair on up to `jobs` threads, writes
/// `summary.csv` in variant input order and returns its rows.
pub fn ablate(config: &RunConfig, variants: &[Variant], seeds: &[u64], out: &Path, jobs: usize) -> Result<Vec<SummaryRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("ablate needs at least one variant and one seed".into()));
    }
    config.validate()?;
    fs::create_dir_all(out)?;
    let tasks: Vec<(Variant, u64)> = variants.iter().flat_map(|v| seeds.iter().map(move |s| (*v, *s))).collect();
    let results: Mutex<Vec<Option<RunResult>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = tasks.get(i) else { break };
                let cfg = RunConfig { variant, ..config.clone() };
                let r = train_to_dir(&cfg, seed, out)
                    .map(|a| a.outcome.metrics)
                    .map_err(|f| format!("{variant} seed {seed}: {}", f.error));
                results.lock().expect("no poisoning")[i] = Some(r);
            });
        }
    });
    let results: Vec<_> = results.into_inner().expect("no poisoning").into_iter().map(|r| r.expect("every task ran")).collect();
    let rows: Vec<SummaryRow> = variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let runs: Vec<_> = results[vi * seeds.len()..(vi + 1) * seeds.len()].iter().collect();
            summarize_variant(*v, &runs)
        })
        .collect();
    let mut text = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(out.join("summary.csv"), text)?;
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        return Err(Error::InvalidConfig(format!("ablation run failed ({e}); summary flagged as partial")));
    }
    Ok(rows)
}

// ------------------------------------------------------------- gradcheck

/// Random agent, minibatch and noise for gradient checking.
struct GradProblem {
    agent: SacAgent,
    states: Array2<f64>,
    state_actions: Array2<f64>,
    targets: Array1<f64>,
    noise: Array2<f64>,
}

const GRADCHECK_ROWS: usize = 16;

fn grad_problem(seed: u64, batch: usize) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(batch as u64));
    let env = EnvConfig::preset(ContainerPreset::Bowl);
    let mut agent = SacAgent::new(SacConfig::default(), InputNormalizer::for_env(&env, false), &mut rng)?;
    // Give the critics non-trivial output layers so the actor's Q term matters.
    for q in [&mut agent.q1, &mut agent.q2] {
        let (w, b) = q.layer_ranges(q.n_layers() - 1);
        for i in w.chain(b) {
            q.params_mut()[i] = rng.random_range(-0.5..0.5);
        }
    }
    agent.log_alpha = rng.random_range(-3.0..0.0);
    let n = GRADCHECK_ROWS;
    let mut obs = Array2::zeros((n, OBS_DIM));
    let mut goals = Array2::zeros((n, 3));
    let mut actions = Array2::zeros((n, ACTION_DIM));
    let mut noise = Array2::zeros((n, ACTION_DIM));
    // Redraw rows until no ReLU sits close enough to its kink for a central
    // difference to straddle it.
    for r in 0..n {
        loop {
            obs.row_mut(r).mapv_inplace(|_| rng.random_range(0.0..0.45));
            goals.row_mut(r).mapv_inplace(|_| rng.random_range(0.0..0.8));
            actions.row_mut(r).mapv_inplace(|_| rng.random_range(-0.99..0.99));
            noise.row_mut(r).mapv_inplace(|_| rng.sample(StandardNormal));
            if row_margin(&agent, &obs, &goals, &actions, &noise, r)? >= KINK_MARGIN {
                break;
            }
        }
    }
    let states = agent.batch_states(obs.view(), goals.view());
    let state_actions = concatenate![Axis(1), states, actions];
    let targets = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..0.0));
    Ok(GradProblem { agent, states, state_actions, targets, noise })
}

const KINK_MARGIN: f64 = 1e-3;

fn row_margin(
    agent: &SacAgent,
    obs: &Array2<f64>,
    goals: &Array2<f64>,
    actions: &Array2<f64>,
    noise: &Array2<f64>,
    r: usize,
) -> Result<f64> {
    let rows = r..r + 1;
    let states = agent.batch_states(obs.slice(ndarray::s![rows.clone(), ..]), goals.slice(ndarray::s![rows.clone(), ..]));
    let policy = agent.actor.sample_with_noise(states.view(), noise.slice(ndarray::s![rows.clone(), ..]).to_owned())?;
    let stored = concatenate![Axis(1), states, actions.slice(ndarray::s![rows, ..])];
    let sampled = concatenate![Axis(1), states, policy.actions];
    let mut m = agent.actor.net.min_abs_preactivation(states.view())?;
    for q in [&agent.q1, &agent.q2] {
        m = m.min(q.min_abs_preactivation(stored.view())?).min(q.min_abs_preactivation(sampled.view())?);
    }
    Ok(m)
}

const FD_STEP: f64 = 1e-5;

/// Central-difference check of the actor, both critic and the temperature
/// losses over `batches` random problems. `corrupt` may alter the analytic
/// gradient of a named loss ("actor", "critic1", "critic2", "temperature")
/// before comparison.
pub fn gradcheck(seed: u64, batches: usize, corrupt: &mut dyn FnMut(&str, &mut [f64])) -> Result<GradCheckReport> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut merge = |rep: GradCheckReport| {
        for (name, e) in rep.blocks {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = slot.1.max(e),
                None => worst.push((name, e)),
            }
        }
    };
    for b in 0..batches {
        let p = grad_problem(seed, b)?;
        let a = &p.agent;
        for (name, q) in [("critic1", &a.q1), ("critic2", &a.q2)] {
            let (_, mut g) = critic_loss_grad(q, p.state_actions.view(), p.targets.view())?;
            corrupt(name, &mut g);
            let sizes = q.sizes().to_vec();
            let loss = |w: &[f64]| {
                let net = Mlp::from_params(&sizes, w.to_vec()).expect("same shape");
                critic_loss_grad(&net, p.state_actions.view(), p.targets.view()).expect("same shape").0
            };
            merge(finite_diff_check(loss, q.params(), &g, &layer_blocks(q, name, 0), FD_STEP));
        }
        let alpha = a.alpha();
        let mut out = actor_loss_grad(&a.actor, &a.q1, &a.q2, p.states.view(), p.noise.clone(), alpha)?;
        corrupt("actor", &mut out.grads);
        let sizes = a.actor.net.sizes().to_vec();
        let loss = |w: &[f64]| {
            let head = GaussianPolicyHead::new(Mlp::from_params(&sizes, w.to_vec()).expect("same shape")).expect("head");
            actor_loss_grad(&head, &a.q1, &a.q2, p.states.view(), p.noise.clone(), alpha).expect("same shape").loss
        };
        merge(finite_diff_check(loss, a.actor.net.params(), &out.grads, &layer_blocks(&a.actor.net, "actor", 0), FD_STEP));

        let target = a.config.target_entropy;
        let (_, g) = temperature_loss_grad(a.log_alpha, out.log_probs.view(), target);
        let mut g = [g];
        corrupt("temperature", &mut g);
        let loss = |w: &[f64]| temperature_loss_grad(w[0], out.log_probs.view(), target).0;
        merge(finite_diff_check(
            loss,
            &[a.log_alpha],
            &g,
            &[GradBlock { name: "temperature.log_alpha".into(), range: 0..1 }],
            FD_STEP,
        ));
    }
    Ok(GradCheckReport { blocks: worst })
}

/// Prints the per-block report; exit 0 iff every block is within tolerance.
pub fn gradcheck_command(
    seed: u64,
    batches: usize,
    corrupt: &mut dyn FnMut(&str, &mut [f64]),
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let rep = match gradcheck(seed, batches, corrupt) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    for (name, e) in &rep.blocks {
        let _ = writeln!(out, "{name:<28} max_rel_error {e:.3e}");
    }
    let _ = writeln!(out, "overall max_rel_error {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})", rep.max_rel_error());
    if rep.passes(GRADCHECK_TOLERANCE) {
        EXIT_OK
    } else {
        let (name, e) = rep.worst().expect("nonempty report");
        let _ = writeln!(err, "gradcheck failed: block {name} has relative error {e:.3e}");
        EXIT_CHECK_FAILED
    }
}

// ------------------------------------------------------------------ plot

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

/// One plotted series: `(episode, mean, se)` with `se == 0` for a single seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub variant: Variant,
    pub n_seeds: usize,
    pub points: Vec<(f64, f64, f64)>,
}

fn find_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_metrics(&p, found)?;
        } else if p.extension().is_some_and(|x| x == "csv")
            && fs::read_to_string(&p).map(|t| t.starts_with(METRICS_HEADER)).unwrap_or(false)
        {
            found.push(p);
        }
    }
    Ok(())
}

/// Learning-curve series of every metrics CSV under `dir`, grouped by variant.
pub fn collect_series(dir: &Path) -> Result<Vec<Series>> {
    let mut files = Vec::new();
    find_metrics(dir, &mut files)?;
    let mut by_variant: BTreeMap<usize, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    for f in files {
        let rows = read_metrics(&f)?;
        if let Some(first) = rows.first() {
            let idx = Variant::ALL.iter().position(|v| *v == first.variant).expect("known");
            by_variant.entry(idx).or_default().push(rows);
        }
    }
    Ok(by_variant
        .into_iter()
        .map(|(idx, runs)| {
            let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for run in &runs {
                for r in run {
                    at.entry(r.episode).or_default().push(r.eval_reward_mean);
                }
            }
            let points = at
                .into_iter()
                .map(|(ep, vals)| {
                    let (m, se) = mean_se(&vals);
                    (ep as f64, m, se)
                })
                .collect();
            Series { variant: Variant::ALL[idx], n_seeds: runs.len(), points }
        })
        .collect())
}

pub fn render_svg(series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (800.0, 500.0, 70.0, 160.0, 30.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, se) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - se);
        y1 = y1.max(m + se);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| mt + (y1 - y) / (y1 - y0) * (h - mt - mb);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let (bx0, bx1, by0, by1) = (ml, w - mr, mt, h - mb);
    svg += &format!("<path d=\"M{bx0} {by0} L{bx0} {by1} L{bx1} {by1}\" stroke=\"black\" fill=\"none\"/>\n");
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{xv:.0}</text>\n",
            sx(xv),
            by1 + 16.0
        );
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{yv:.1}</text>\n",
            bx0 - 6.0,
            sy(yv) + 4.0
        );
    }
    svg += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">episode</text>\n",
        (bx0 + bx1) / 2.0,
        h - 10.0
    );
    svg += &format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">eval reward</text>\n",
        (by0 + by1) / 2.0,
        (by0 + by1) / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.n_seeds > 1 {
            let upper = s.points.iter().map(|&(x, m, se)| format!("{:.2},{:.2}", sx(x), sy(m + se)));
            let lower = s.points.iter().rev().map(|&(x, m, se)| format!("{:.2},{:.2}", sx(x), sy(m - se)));
            let poly: Vec<String> = upper.chain(lower).collect();
            svg += &format!(
                "<polygon class=\"band\" points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n",
                poly.join(" ")
            );
        }
        let line: Vec<String> = s.points.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m))).collect();
        svg += &format!(
            "<polyline class=\"series\" data-variant=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            s.variant,
            line.join(" ")
        );
        let ly = mt + 10.0 + 20.0 * i as f64;
        svg += &format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            bx1 + 12.0,
            bx1 + 32.0
        );
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{} (n={})</text>\n",
            bx1 + 38.0,
            ly + 4.0,
            s.variant,
            s.n_seeds
        );
    }
    svg += "</svg>\n";
    svg
}

// ------------------------------------------------------------------- CLI

#[derive(Debug, Parser)]
#[command(name = "goats", version, about = "Goal-sampling curriculum RL on a water-scooping surrogate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant with one seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write a per-step CSV trace of the first episode.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a grid of variants and seeds and summarize it.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every SAC gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Learning curves of all metrics CSVs under a directory as SVG.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration.
    Defaults {
        #[arg(long, default_value = "bowl")]
        preset: String,
    },
}

fn parse_variant(name: &str) -> Result<Variant> {
    name.parse()
}

fn load_config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match cli.command {
        Command::Train { config, variant, seed, out: out_dir } => cmd_train(config, variant, seed, out_dir, out, err),
        Command::Eval { checkpoint, episodes, seed, trace } => cmd_eval(&checkpoint, episodes, seed, trace, out, err),
        Command::Ablate { config, variants, seeds, out: out_dir, jobs } => {
            cmd_ablate(config, variants, seeds, out_dir, jobs, out, err)
        }
        Command::Gradcheck { seed, batches } => gradcheck_command(seed, batches, &mut |_, _| {}, out, err),
        Command::Plot { runs, out: file } => cmd_plot(&runs, &file, out, err),
        Command::Defaults { preset } => match preset.parse::<ContainerPreset>().and_then(|p| {
            run_config_to_toml(&RunConfig::preset(p, &MULTI_AMOUNTS))
        }) {
            Ok(text) => {
                let _ = write!(out, "{text}");
                EXIT_OK
            }
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                EXIT_USAGE
            }
        },
    }
}

fn usage(err: &mut dyn Write, e: impl std::fmt::Display) -> i32 {
    let _ = writeln!(err, "error: {e}");
    EXIT_USAGE
}

fn cmd_train(
    config: Option<PathBuf>,
    variant: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let mut cfg = match load_config_or_default(config.as_deref()) {
        Ok(c) => c,
        Err(e) => return usage(err, e),
    };
    if let Some(name) = variant {
        match parse_variant(&name) {
            Ok(v) => cfg.variant = v,
            Err(e) => return usage(err, e),
        }
    }
    let seed = seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    let dir = resolve_out(out_dir, &cfg);
    match train_to_dir(&cfg, seed, &dir) {
        Ok(a) => {
            let best = a.outcome.best.as_ref();
            let _ = writeln!(
                out,
                "trained {} seed {seed}: {} episodes, {} env steps, best eval reward {}",
                cfg.variant,
                cfg.total_episodes,
                a.outcome.env_steps,
                best.map_or("n/a".to_string(), |b| format!("{:.3} at episode {}", b.eval_reward_mean, b.episode)),
            );
            let _ = writeln!(out, "outputs in {}", a.dir.display());
            EXIT_OK
        }
        Err(RunFailure { error: Error::NumericalAbort { episode, what }, snapshot }) => {
            let _ = writeln!(
                err,
                "numerical abort at episode {episode}: {what}; diagnostic snapshot: {}",
                snapshot.map_or("(not written)".to_string(), |p| p.display().to_string())
            );
            EXIT_NUMERICAL
        }
        Err(f) => usage(err, f.error),
    }
}

#[derive(Serialize)]
struct ResultLine {
    episodes: usize,
    seed: u64,
    mean_reward: f64,
    reward_se: f64,
    amount_error_mean: f64,
    amount_error_se: f64,
    position_success_rate: f64,
    first_reach_amount_error_mean: Option<f64>,
}

fn cmd_eval(
    checkpoint: &Path,
    episodes: usize,
    seed: u64,
    trace: Option<PathBuf>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    if episodes == 0 {
        return usage(err, "--episodes must be at least 1");
    }
    let ck = match Checkpoint::load(checkpoint) {
        Ok(c) => c,
        Err(e) => return usage(err, format!("cannot load checkpoint {}: {e}", checkpoint.display())),
    };
    let agent = ck.agent().expect("validated on load");
    let c = &ck.config;
    let report = match evaluate(&agent, &c.env, &c.goals, &c.reward, episodes, seed) {
        Ok(r) => r,
        Err(e) => return usage(err, e),
    };
    if let Some(path) = trace {
        let (desired, env_seed) = eval_episode_setup(&c.goals, seed, 0);
        let mut records = Vec::new();
        let written = rollout_episode(&agent, &c.env, &desired, &c.reward, env_seed, Some(&mut records))
            .and_then(|_| Ok(write_trace(fs::File::create(&path)?, &records)?));
        if let Err(e) = written {
            return usage(err, format!("cannot write trace: {e}"));
        }
    }
    let _ = writeln!(out, "checkpoint {} (variant {}, episode {})", checkpoint.display(), c.variant, ck.episode);
    let _ = writeln!(out, "episodes            {episodes}");
    let _ = writeln!(out, "mean reward         {:.4} +/- {:.4}", report.mean_reward, report.reward_se);
    let _ = writeln!(out, "amount error        {:.4} +/- {:.4}", report.amount_error_mean, report.amount_error_se);
    let _ = writeln!(out, "position success    {:.3}", report.position_success_rate);
    let line = ResultLine {
        episodes,
        seed,
        mean_reward: report.mean_reward,
        reward_se: report.reward_se,
        amount_error_mean: report.amount_error_mean,
        amount_error_se: report.amount_error_se,
        position_success_rate: report.position_success_rate,
        first_reach_amount_error_mean: report.first_reach_amount_error_mean,
    };
    let _ = writeln!(out, "RESULT {}", serde_json::to_string(&line).expect("plain struct"));
    EXIT_OK
}

fn cmd_ablate(
    config: Option<PathBuf>,
    variants: Vec<String>,
    seeds: Vec<u64>,
    out_dir: Option<PathBuf>,
    jobs: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cfg = match load_config_or_default(config.as_deref()) {
        Ok(c) => c,
        Err(e) => return usage(err, e),
    };
    let variants = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        match variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>() {
            Ok(v) => v,
            Err(e) => return usage(err, e),
        }
    };
    let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
    let dir = resolve_out(out_dir, &cfg);
    match ablate(&cfg, &variants, &seeds, &dir, jobs) {
        Ok(rows) => {
            let _ = writeln!(out, "{SUMMARY_HEADER}");
            for r in rows {
                let _ = writeln!(out, "{}", r.to_csv());
            }
            let _ = writeln!(out, "summary written to {}", dir.join("summary.csv").display());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CHECK_FAILED
        }
    }
}

fn cmd_plot(runs: &Path, file: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let series = match collect_series(runs) {
        Ok(s) => s,
        Err(e) => return usage(err, e),
    };
    if series.is_empty() {
        return usage(err, format!("no metrics CSVs found under {}", runs.display()));
    }
    if let Err(e) = fs::write(file, render_svg(&series)) {
        return usage(err, e);
    }
    let _ = writeln!(out, "plotted {} series to {}", series.len(), file.display());
    EXIT_OK
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = run_config_to_toml(&cfg).unwrap();
        assert_eq!(parse_run_config(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_config_is_default() {
        assert_eq!(parse_run_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn bucket_preset_fills_its_own_defaults() {
        let cfg = parse_run_config("[env]\ncontainer_preset = \"bucket\"\n").unwrap();
        assert_eq!(cfg.env, EnvConfig::preset(ContainerPreset::Bucket));
        assert_eq!(cfg.goals.desired_positions.lower()[1], 0.37);
    }

    #[test]
    fn partial_override() {
        let cfg = parse_run_config("total_episodes = 10\n[sac]\nbatch_size = 32\n").unwrap();
        assert_eq!(cfg.total_episodes, 10);
        assert_eq!(cfg.sac.batch_size, 32);
        assert_eq!(cfg.sac.gamma, SacConfig::default().gamma);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_run_config("bogus = 1\n").is_err());
        assert!(parse_run_config("[sac]\nlearning_rate = 1.0\n").is_err());
        assert!(parse_run_config("[curriculum]\nmode = \"linear\"\nramp_fraction = 0.5\nextra = 1\n").is_err());
    }

    #[test]
    fn switching_schedule_mode() {
        let cfg =
            parse_run_config("[curriculum]\nmode = \"gated\"\ndelta_k = 0.1\nsuccess_threshold = 0.6\nwindow = 20\n").unwrap();
        assert_eq!(
            cfg.curriculum,
            crate::trainer::CurriculumSchedule::Gated { delta_k: 0.1, success_threshold: 0.6, window: 20 }
        );
    }

    #[test]
    fn metrics_row_round_trip() {
        let row = MetricsRow {
            episode: 50,
            env_steps: 3750,
            k: 0.1,
            variant: Variant::SacHerPags,
            seed: 2,
            train_reward: -71.25,
            eval_reward_mean: -60.123456789,
            eval_reward_se: 0.5,
            amount_error_mean: 0.7,
            pos_success_rate: 0.25,
            actor_loss: 1.0 / 3.0,
            critic_loss: 1e-7,
            alpha: 0.2,
            wall_time_s: 0.0,
        };
        assert_eq!(parse_metrics_row(&format_metrics_row(&row)).unwrap(), row);
        assert_eq!(METRICS_HEADER.split(',').count(), 14);
    }

    #[test]
    fn svg_band_only_with_several_seeds() {
        let one = Series { variant: Variant::Sac, n_seeds: 1, points: vec![(10.0, -70.0, 0.0), (20.0, -60.0, 0.0)] };
        assert!(!render_svg(std::slice::from_ref(&one)).contains("class=\"band\""));
        let three = Series { n_seeds: 3, ..one };
        assert!(render_svg(&[three]).contains("class=\"band\""));
    }
}
