//! The `midpo` command line: `gen`, `verify` and `train`.
//!
//! Every numeric flag may also come from a JSON object given with `--config`
//! whose keys are the flag names in snake case; explicit flags win.
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{validate_dataset, AlignmentConfig, PreferenceDataset, Vocabulary};
use crate::datagen::{AnnotationMode, World, WorldSpec};
use crate::error::{Error, Result};
use crate::infotheory::{i_g, mutual_information, optimal_variational, DiscreteChannel};
use crate::losses::{equivalence_row, LossContext};
use crate::optimal::{
    bt_sigmoid_identity_check, dual_value, optimal_policy_closed_form, projected_gradient_ascent,
    regularized_objective, reward_from_policy, AscentConfig,
};
use crate::policy::TabularPolicy;
use crate::priors::{PriorKind, PriorSpec, PriorTable};
use crate::train::{
    curve_csv, dice_iterate, finite_difference_gradient, joint_report_csv, joint_vs_fixed_rows, loss_gradient,
    max_relative_error, minimize_fixed_zeta, minimize_joint, DiceRound, JointRow, TrainConfig, TrainResult,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Exit status and the files a command wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub report_paths: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "midpo",
    version,
    about = "MI-DPO losses, priors and exact tabular verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic world and a preference dataset.
    Gen(GenArgs),
    /// Run property suites and write a report.
    Verify(VerifyArgs),
    /// Train a tabular policy.
    Train(TrainArgs),
}

macro_rules! fill_from {
    ($dst:expr, $src:expr; $($field:ident),+ $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field.take(); } )+
    };
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::config("config", format!("{}: {e}", p.display()))),
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct AlignmentArgs {
    /// KL temperature β; α = 1/β.
    #[arg(long)]
    pub beta: Option<f64>,
    /// SimPO target margin γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Entropy exponent η of the cEntropy prior.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Length coefficient of the R-DPO prior.
    #[arg(long)]
    pub len_coeff: Option<f64>,
}

impl AlignmentArgs {
    fn merge(&mut self, mut file: AlignmentArgs) {
        fill_from!(self, file; beta, gamma, eta, len_coeff);
    }

    fn build(&self) -> Result<AlignmentConfig> {
        let mut cfg = AlignmentConfig::with_beta(self.beta.unwrap_or(1.0));
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(e) = self.eta {
            cfg.eta_exp = e;
        }
        if let Some(l) = self.len_coeff {
            cfg.len_coeff = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct GenArgs {
    /// Regular vocabulary size V.
    #[arg(long)]
    pub vocab: Option<u32>,
    /// Maximum response length L.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Number of single-token prompts (at most V).
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub triples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reward_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub annotations: Option<AnnotationMode>,
    /// Dataset path; the world is written next to it as `<stem>.world.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Equivalence,
    Optimal,
    Mi,
    Gradients,
    Joint,
    All,
}

/// Dataset source shared by `verify` and `train`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct DataArgs {
    /// Preference dataset in JSON Lines.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// World file giving the vocabulary and the reference policy; defaults to
    /// the dataset's `<stem>.world.json` when present.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Vocabulary size, when no world file is used.
    #[arg(long)]
    pub vocab: Option<u32>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Reference policy JSON; overrides the world's generator.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

impl DataArgs {
    fn merge(&mut self, mut file: DataArgs) {
        fill_from!(self, file; data, world, vocab, max_len, reference);
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Option<Suite>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Trials per suite (defaults: equivalence 100, optimal 50, mi 20, gradients 20, joint 10).
    #[arg(long)]
    pub trials: Option<usize>,
    /// Tolerance overriding every check of the selected suites.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; `.csv` writes the check rows, anything else JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Gradient steps per run in the joint suite.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub zeta_floor: Option<f64>,
    /// Worker threads for per-trial work.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub alignment: AlignmentArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fixed,
    Joint,
    Dice,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Option<TrainMode>,
    /// Prior kind for `--mode fixed`.
    #[arg(long)]
    pub prior: Option<PriorKind>,
    /// JSON prior spec (any kind, including `table`) for `--mode fixed`.
    #[arg(long)]
    pub prior_file: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub zeta_floor: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// DICE rounds; the dataset is split into this many contiguous chunks.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Fixed priors compared against the joint run.
    #[arg(long, value_delimiter = ',')]
    pub fixed_specs: Option<Vec<PriorKind>>,
    /// Training result JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Joint-versus-fixed CSV; defaults to `<out stem>.joint.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    pub emit_curves: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub alignment: AlignmentArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return CommandOutcome {
                exit_code: code,
                report_paths: Vec::new(),
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        CommandOutcome {
            exit_code: if matches!(e, Error::NonFinite(_)) {
                EXIT_CHECK_FAILED
            } else {
                EXIT_USAGE
            },
            report_paths: Vec::new(),
        }
    })
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::config("usage", format!("missing required --{flag}")))
}

/// `data.jsonl` → `data.world.json`.
pub fn world_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("world.json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_file(path: &Path, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(path, contents)?;
    written.push(path.to_path_buf());
    Ok(())
}

pub fn cmd_gen(mut args: GenArgs) -> Result<CommandOutcome> {
    let mut file: GenArgs = read_config(args.config.as_deref())?;
    fill_from!(args, file; vocab, max_len, prompts, triples, seed, reward_scale, annotations, out);
    let out = required(args.out, "out")?;
    let vocab = Vocabulary::new(required(args.vocab, "vocab")?, required(args.max_len, "max-len")?)?;
    let spec = WorldSpec {
        vocab,
        n_prompts: args.prompts.unwrap_or(1),
        reward_scale: args.reward_scale.unwrap_or(1.0),
        n_triples: args.triples.unwrap_or(100),
        seed: args.seed.unwrap_or(0),
        annotation_mode: args.annotations.unwrap_or_default(),
    };
    let world = World::build(spec)?;
    let data = world.sample()?;
    let mut written = Vec::new();
    write_file(&out, &data.to_jsonl()?, &mut written)?;
    let sidecar = world_path(&out);
    world.write_json(&sidecar)?;
    written.push(sidecar.clone());
    let report = validate_dataset(&data);
    println!(
        "wrote {} triples to {} (world: {}); absolute labels: {}",
        data.len(),
        out.display(),
        sidecar.display(),
        report.absolute_labels_ok
    );
    Ok(CommandOutcome {
        exit_code: EXIT_OK,
        report_paths: written,
    })
}

/// The dataset, its vocabulary and the reference policy named by `args`.
pub struct LoadedData {
    pub data: PreferenceDataset,
    pub reference: TabularPolicy,
    pub reference_source: String,
}

fn load_world(args: &DataArgs) -> Result<Option<World>> {
    let path = match (&args.world, &args.data) {
        (Some(w), _) => Some(w.clone()),
        (None, Some(d)) if world_path(d).exists() => Some(world_path(d)),
        _ => None,
    };
    path.map(|p| World::read_json(&p)).transpose()
}

fn resolve_vocab(args: &DataArgs, world: Option<&World>) -> Result<Vocabulary> {
    match (args.vocab, args.max_len, world) {
        (Some(v), Some(l), _) => Vocabulary::new(v, l),
        (None, None, Some(w)) => Ok(w.spec.vocab),
        (None, None, None) => Err(Error::config(
            "usage",
            "no vocabulary: pass --vocab and --max-len or a world file",
        )),
        _ => Err(Error::config("usage", "--vocab and --max-len go together")),
    }
}

fn load_data(args: &DataArgs) -> Result<LoadedData> {
    let path = required(args.data.clone(), "data")?;
    let world = load_world(args)?;
    let vocab = resolve_vocab(args, world.as_ref())?;
    let data = PreferenceDataset::read_jsonl(&path, vocab)?;
    let (reference, reference_source) = match (&args.reference, world) {
        (Some(p), _) => (TabularPolicy::read_json(p)?, p.display().to_string()),
        (None, Some(w)) if w.spec.vocab == vocab => (w.generator, "world generator".to_string()),
        _ => (TabularPolicy::uniform(vocab), "uniform".to_string()),
    };
    if reference.vocab() != &vocab {
        return Err(Error::config(
            "reference",
            "reference policy vocabulary differs from the dataset",
        ));
    }
    Ok(LoadedData {
        data,
        reference,
        reference_source,
    })
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let jobs = jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Error::config("usage", "--jobs must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64)
}

/// One measured quantity compared against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub suite: String,
    pub check: String,
    pub trial: usize,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(suite: &str, check: impl Into<String>, trial: usize, value: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.to_string(),
            check: check.into(),
            trial,
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

fn rows_csv(rows: &[CheckRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("suite,check,trial,value,tolerance,pass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{}",
            r.suite, r.check, r.trial, r.value, r.tolerance, r.pass
        );
    }
    out
}

#[derive(Serialize)]
struct SuiteSummary {
    suite: Suite,
    checks: usize,
    failures: usize,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    passed: bool,
    suites: Vec<SuiteSummary>,
    rows: &'a [CheckRow],
}

struct SuiteRun {
    rows: Vec<CheckRow>,
    notes: Vec<String>,
}

struct VerifyContext {
    trials: Option<usize>,
    tol: Option<f64>,
    seed: u64,
    config: AlignmentConfig,
    pool: rayon::ThreadPool,
    steps: usize,
    restarts: usize,
    zeta_floor: f64,
}

impl VerifyContext {
    fn trials(&self, default: usize) -> usize {
        self.trials.unwrap_or(default)
    }

    fn tol(&self, default: f64) -> f64 {
        self.tol.unwrap_or(default)
    }

    fn per_trial<T: Send>(&self, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}

fn suite_equivalence(vc: &VerifyContext, loaded: &LoadedData) -> Result<SuiteRun> {
    let data = &loaded.data;
    let validation = validate_dataset(data);
    let absolute = data.absolute_subset();
    let annotated = data
        .triples()
        .iter()
        .all(|t| t.chosen_annotations.is_some() && t.rejected_annotations.is_some());
    let mut notes = Vec::new();
    if !validation.absolute_labels_ok {
        notes.push(format!(
            "labels are not absolute; simpo and tisdpo use the {} of {} triples that keep every response on one side",
            absolute.len(),
            data.len()
        ));
    }
    if !annotated {
        notes.push("dataset carries no token annotations; tisdpo and sparsepo are not evaluated".into());
    }
    let kinds: Vec<PriorKind> = PriorKind::VARIANTS
        .iter()
        .copied()
        .filter(|k| annotated || !k.needs_annotations())
        .collect();
    let vocab = *data.vocabulary();
    let prompts = data.prompts();
    let tol = vc.tol(1e-9);
    let per_trial = vc.per_trial(vc.trials(100), |trial| {
        let s = trial_seed(vc.seed, trial);
        let llm = TabularPolicy::random(vocab, &prompts, s);
        let prev = TabularPolicy::random(vocab, &prompts, s ^ 1);
        let ctx = LossContext::new(&loaded.reference, &vc.config).with_prev(&prev);
        kinds
            .iter()
            .map(|&kind| {
                let d = if kind.needs_role() { &absolute } else { data };
                let row = equivalence_row(kind, &llm, &ctx, d)?;
                Ok(CheckRow::new("equivalence", kind.name(), trial, row.abs_gap, tol))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SuiteRun {
        rows: per_trial.into_iter().flatten().collect(),
        notes,
    })
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let n = rng.random_range(2..=14);
    let raw: Vec<f64> = (0..n).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
    let total: f64 = raw.iter().sum();
    let zeta = raw.iter().map(|v| v / total).collect();
    let rewards = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    (zeta, rewards, rng.random_range(0.3..3.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn suite_optimal(vc: &VerifyContext) -> Result<SuiteRun> {
    let per_trial = vc.per_trial(vc.trials(50), |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(vc.seed, trial));
        let (zeta, rewards, beta) = random_instance(&mut rng);
        let res = optimal_policy_closed_form(&zeta, &rewards, beta)?;
        let ascent = projected_gradient_ascent(
            &rewards,
            &zeta,
            beta,
            &AscentConfig {
                seed: trial as u64,
                ..AscentConfig::default()
            },
        );
        let h = 1e-6;
        let slope = (dual_value(res.lambda_star + h, &zeta, &rewards, beta)?
            - dual_value(res.lambda_star - h, &zeta, &rewards, beta)?)
            / (2.0 * h);
        let recovered = reward_from_policy(&res.probs, &zeta, beta, res.z_hat)?;
        let again = optimal_policy_closed_form(&zeta, &recovered, beta)?;
        let (i1, i2) = (rng.random_range(0..zeta.len()), rng.random_range(0..zeta.len()));
        let bt = bt_sigmoid_identity_check(&res.probs, &zeta, beta, res.z_hat, i1, i2)?;
        let objective = regularized_objective(&res.probs, &rewards, &zeta, beta);
        Ok(vec![
            CheckRow::new(
                "optimal",
                "normalisation",
                trial,
                (res.probs.iter().sum::<f64>() - 1.0).abs(),
                vc.tol(1e-12),
            ),
            CheckRow::new(
                "optimal",
                "ascent_oracle",
                trial,
                max_abs_diff(&res.probs, &ascent),
                vc.tol(1e-6),
            ),
            CheckRow::new(
                "optimal",
                "objective_value",
                trial,
                (objective - res.log_z_hat / beta).abs(),
                vc.tol(1e-10),
            ),
            CheckRow::new("optimal", "dual_stationarity", trial, slope.abs(), vc.tol(1e-8)),
            CheckRow::new(
                "optimal",
                "reward_round_trip",
                trial,
                max_abs_diff(&res.probs, &again.probs),
                vc.tol(1e-10),
            ),
            CheckRow::new("optimal", "bt_identity", trial, bt, vc.tol(1e-12)),
        ])
    })?;
    Ok(SuiteRun {
        rows: per_trial.into_iter().flatten().collect(),
        notes: Vec::new(),
    })
}

fn simplex_draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn suite_mi(vc: &VerifyContext) -> Result<SuiteRun> {
    let mut rows = vc
        .per_trial(vc.trials(20), |trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(vc.seed, trial));
            let nx = rng.random_range(1..=4);
            let ny = rng.random_range(2..=8);
            let p_x = simplex_draw(&mut rng, nx);
            let table = (0..nx).map(|_| simplex_draw(&mut rng, ny)).collect();
            let ch = DiscreteChannel::new(p_x, table)?;
            let q_star = optimal_variational(&ch);
            let mi = mutual_information(&ch);
            let joint_form: f64 = ch
                .p_x()
                .iter()
                .zip(ch.rows())
                .flat_map(|(px, row)| {
                    let q = &q_star;
                    row.iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(move |(y, &p)| px * p * (p / q[y]).ln())
                })
                .sum();
            let at_star = i_g(&ch, &q_star);
            let worst_excess = (0..1000)
                .map(|_| at_star - i_g(&ch, &simplex_draw(&mut rng, ny)))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(vec![
                CheckRow::new(
                    "mi",
                    "marginal_equals_mi",
                    trial,
                    (at_star - mi).abs().max((mi - joint_form).abs()),
                    vc.tol(1e-12),
                ),
                CheckRow::new("mi", "marginal_dominates", trial, worst_excess.max(0.0), vc.tol(0.0)),
            ])
        })?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let indep = DiscreteChannel::new(vec![0.4, 0.6], vec![vec![0.3, 0.7]; 2])?;
    let perfect = DiscreteChannel::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    rows.push(CheckRow::new(
        "mi",
        "independence_zero",
        0,
        mutual_information(&indep).abs(),
        vc.tol(1e-12),
    ));
    rows.push(CheckRow::new(
        "mi",
        "perfect_channel_ln2",
        0,
        (mutual_information(&perfect) - 2f64.ln()).abs(),
        vc.tol(1e-12),
    ));
    Ok(SuiteRun {
        rows,
        notes: Vec::new(),
    })
}

fn suite_gradients(vc: &VerifyContext, loaded: &LoadedData) -> Result<SuiteRun> {
    let data = &loaded.data;
    let vocab = *data.vocabulary();
    let prompts = data.prompts();
    let annotated = data
        .triples()
        .iter()
        .all(|t| t.chosen_annotations.is_some() && t.rejected_annotations.is_some());
    let mut notes = Vec::new();
    if !annotated {
        notes.push("dataset carries no token annotations; tisdpo and sparsepo are not evaluated".into());
    }
    let size = vocab.response_space_size() as usize;
    let tol = vc.tol(1e-4);
    let per_trial = vc.per_trial(vc.trials(20), |trial| {
        let s = trial_seed(vc.seed, trial);
        let llm = TabularPolicy::random(vocab, &prompts, s);
        let prev = TabularPolicy::random(vocab, &prompts, s ^ 1);
        let ctx = LossContext::new(&loaded.reference, &vc.config).with_prev(&prev);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 2);
        let table = PriorTable::shared((0..size).map(|_| StandardNormal.sample(&mut rng)).collect());
        let mut specs: Vec<PriorSpec> = PriorKind::VARIANTS
            .iter()
            .filter(|k| annotated || !k.needs_annotations())
            .map(|&k| PriorSpec::from_kind(k))
            .collect::<Result<_>>()?;
        specs.push(PriorSpec::Table(table));
        specs
            .iter()
            .map(|spec| {
                let analytic = loss_gradient(&llm, spec, &ctx, data)?;
                let fd = finite_difference_gradient(&llm, spec, &ctx, data, 1e-6)?;
                Ok(CheckRow::new(
                    "gradients",
                    spec.kind().name(),
                    trial,
                    max_relative_error(&analytic, &fd),
                    tol,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SuiteRun {
        rows: per_trial.into_iter().flatten().collect(),
        notes,
    })
}

fn suite_joint(vc: &VerifyContext, loaded: &LoadedData) -> Result<SuiteRun> {
    let cfg = TrainConfig {
        steps: vc.steps,
        restarts: vc.restarts,
        zeta_floor: vc.zeta_floor,
        ..TrainConfig::default()
    };
    let ctx = LossContext::new(&loaded.reference, &vc.config);
    let fixed = [PriorSpec::Dpo, PriorSpec::Rdpo, PriorSpec::Tdpo];
    let tol = vc.tol(crate::train::INEQUALITY_TOL);
    let per_seed = vc.per_trial(vc.trials(10), |trial| {
        let seed = vc.seed.wrapping_add(trial as u64);
        let rows = joint_vs_fixed_rows(&loaded.data, &ctx, &cfg, &fixed, seed)?;
        Ok(rows
            .into_iter()
            .map(|r| CheckRow::new("joint", r.spec, trial, r.joint_final - r.fixed_final, tol))
            .collect::<Vec<_>>())
    })?;
    Ok(SuiteRun {
        rows: per_seed.into_iter().flatten().collect(),
        notes: vec![format!(
            "joint minus fixed final loss; {} steps, {} restarts, zeta_floor {}",
            cfg.steps, cfg.restarts, cfg.zeta_floor
        )],
    })
}

pub fn cmd_verify(mut args: VerifyArgs) -> Result<CommandOutcome> {
    let mut file: VerifyArgs = read_config(args.config.as_deref())?;
    fill_from!(args, file; suite, trials, tol, seed, report, steps, restarts, zeta_floor, jobs);
    args.data.merge(std::mem::take(&mut file.data));
    args.alignment.merge(std::mem::take(&mut file.alignment));
    if let Some(t) = args.tol {
        if !(t >= 0.0) {
            return Err(Error::config("usage", "--tol must be non-negative"));
        }
    }
    let suite = args.suite.unwrap_or(Suite::All);
    let suites: Vec<Suite> = match suite {
        Suite::All => vec![
            Suite::Equivalence,
            Suite::Optimal,
            Suite::Mi,
            Suite::Gradients,
            Suite::Joint,
        ],
        s => vec![s],
    };
    let needs_data = suites
        .iter()
        .any(|s| matches!(s, Suite::Equivalence | Suite::Gradients | Suite::Joint));
    let loaded = if needs_data { Some(load_data(&args.data)?) } else { None };
    let vc = VerifyContext {
        trials: args.trials,
        tol: args.tol,
        seed: args.seed.unwrap_or(0),
        config: args.alignment.build()?,
        pool: pool(args.jobs)?,
        steps: args.steps.unwrap_or(100),
        restarts: args.restarts.unwrap_or(5),
        zeta_floor: args.zeta_floor.unwrap_or(1e-3),
    };
    if let Some(l) = &loaded {
        println!(
            "dataset: {} triples, V={}, L={}, reference: {}",
            l.data.len(),
            l.data.vocabulary().regular_size(),
            l.data.vocabulary().max_len(),
            l.reference_source
        );
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for s in suites {
        let run = match s {
            Suite::Equivalence => suite_equivalence(&vc, loaded.as_ref().expect("loaded"))?,
            Suite::Optimal => suite_optimal(&vc)?,
            Suite::Mi => suite_mi(&vc)?,
            Suite::Gradients => suite_gradients(&vc, loaded.as_ref().expect("loaded"))?,
            Suite::Joint => suite_joint(&vc, loaded.as_ref().expect("loaded"))?,
            Suite::All => unreachable!("expanded above"),
        };
        let failures = run.rows.iter().filter(|r| !r.pass).count();
        let worst = run
            .rows
            .iter()
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .map(|r| format!("{} trial {} = {:.3e}", r.check, r.trial, r.value))
            .unwrap_or_default();
        println!(
            "suite {:?}: {} checks, {} failures, largest {worst}",
            s,
            run.rows.len(),
            failures
        );
        for n in &run.notes {
            println!("  note: {n}");
        }
        if let Some(bad) = run
            .rows
            .iter()
            .filter(|r| !r.pass)
            .max_by(|a, b| (a.value - a.tolerance).total_cmp(&(b.value - b.tolerance)))
        {
            println!(
                "  worst failing row: check {} trial {} value {:e} tolerance {:e}",
                bad.check, bad.trial, bad.value, bad.tolerance
            );
        }
        summaries.push(SuiteSummary {
            suite: s,
            checks: run.rows.len(),
            failures,
            notes: run.notes,
        });
        rows.extend(run.rows);
    }
    let passed = rows.iter().all(|r| r.pass);
    let mut written = Vec::new();
    if let Some(path) = &args.report {
        let body = if path.extension().is_some_and(|e| e == "csv") {
            rows_csv(&rows)
        } else {
            serde_json::to_string_pretty(&VerifyReport {
                passed,
                suites: summaries,
                rows: &rows,
            })?
        };
        write_file(path, &body, &mut written)?;
    }
    println!(
        "{}",
        if passed {
            "all checks passed"
        } else {
            "verification FAILED"
        }
    );
    Ok(CommandOutcome {
        exit_code: if passed { EXIT_OK } else { EXIT_CHECK_FAILED },
        report_paths: written,
    })
}

#[derive(Serialize)]
struct FixedOutput<'a> {
    mode: TrainMode,
    prior: &'a PriorSpec,
    results: &'a [TrainResult],
}

#[derive(Serialize)]
struct JointOutput<'a> {
    mode: TrainMode,
    results: &'a [TrainResult],
    comparison: &'a [JointRow],
}

#[derive(Serialize)]
struct DiceOutput<'a> {
    mode: TrainMode,
    seeds: &'a [u64],
    rounds: &'a [Vec<DiceRound>],
}

fn curves_csv(curves: &[(u64, usize, &[f64])]) -> String {
    let mut out = String::from("seed,round,step,loss\n");
    for (seed, round, curve) in curves {
        for line in curve_csv(curve).lines().skip(1) {
            out.push_str(&format!("{seed},{round},{line}\n"));
        }
    }
    out
}

pub fn cmd_train(mut args: TrainArgs) -> Result<CommandOutcome> {
    let mut file: TrainArgs = read_config(args.config.as_deref())?;
    fill_from!(
        args, file; mode, prior, prior_file, steps, lr, seeds, zeta_floor, restarts, rounds, fixed_specs, out, report,
        emit_curves, jobs
    );
    args.data.merge(std::mem::take(&mut file.data));
    args.alignment.merge(std::mem::take(&mut file.alignment));
    let mode = required(args.mode, "mode")?;
    let out = required(args.out.clone(), "out")?;
    let has_prior = args.prior.is_some() || args.prior_file.is_some();
    match mode {
        TrainMode::Joint if has_prior => {
            return Err(Error::config(
                "usage",
                "--prior and --prior-file do not apply to --mode joint",
            ));
        }
        TrainMode::Dice if args.prior_file.is_some() || args.prior.is_some_and(|k| k != PriorKind::Dice) => {
            return Err(Error::config("usage", "--mode dice always trains with the dice prior"));
        }
        TrainMode::Fixed if args.prior.is_some() && args.prior_file.is_some() => {
            return Err(Error::config("usage", "give either --prior or --prior-file"));
        }
        TrainMode::Fixed if !has_prior => {
            return Err(Error::config("usage", "--mode fixed needs --prior or --prior-file"));
        }
        _ => {}
    }
    if args.fixed_specs.is_some() && mode != TrainMode::Joint {
        return Err(Error::config("usage", "--fixed-specs only applies to --mode joint"));
    }
    if args.rounds.is_some() && mode != TrainMode::Dice {
        return Err(Error::config("usage", "--rounds only applies to --mode dice"));
    }
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        steps: args.steps.unwrap_or(defaults.steps),
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        seeds: args.seeds.clone().unwrap_or(defaults.seeds),
        zeta_floor: args.zeta_floor.unwrap_or(defaults.zeta_floor),
        restarts: args.restarts.unwrap_or(defaults.restarts),
        fd_step: defaults.fd_step,
    };
    cfg.validate()?;
    let config = args.alignment.build()?;
    let loaded = load_data(&args.data)?;
    let data = &loaded.data;
    let ctx = LossContext::new(&loaded.reference, &config);
    let workers = pool(args.jobs)?;
    println!(
        "dataset: {} triples, reference: {}",
        data.len(),
        loaded.reference_source
    );
    let mut written = Vec::new();
    let mut exit_code = EXIT_OK;
    let curves_path = args.emit_curves.clone();
    match mode {
        TrainMode::Fixed => {
            let spec = match (&args.prior, &args.prior_file) {
                (Some(kind), None) => PriorSpec::from_kind(*kind)?,
                (None, Some(p)) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                _ => unreachable!("checked above"),
            };
            let reference_prev = loaded.reference.snapshot();
            let ctx = if spec.kind() == PriorKind::Dice {
                ctx.with_prev(&reference_prev)
            } else {
                ctx
            };
            let results: Vec<TrainResult> = workers.install(|| {
                cfg.seeds
                    .par_iter()
                    .map(|&seed| minimize_fixed_zeta(&spec, data, &ctx, &cfg, seed))
                    .collect::<Result<_>>()
            })?;
            for r in &results {
                println!(
                    "seed {}: loss {:.6} -> {:.6} (best restart {})",
                    r.seed,
                    r.initial_loss(),
                    r.final_loss,
                    r.restart
                );
            }
            let body = serde_json::to_string_pretty(&FixedOutput {
                mode,
                prior: &spec,
                results: &results,
            })?;
            write_file(&out, &body, &mut written)?;
            if let Some(p) = &curves_path {
                let curves: Vec<_> = results.iter().map(|r| (r.seed, 0, r.loss_curve.as_slice())).collect();
                write_file(p, &curves_csv(&curves), &mut written)?;
            }
        }
        TrainMode::Joint => {
            let fixed: Vec<PriorSpec> = args
                .fixed_specs
                .clone()
                .unwrap_or_else(|| vec![PriorKind::Dpo, PriorKind::Rdpo, PriorKind::Tdpo])
                .into_iter()
                .map(PriorSpec::from_kind)
                .collect::<Result<_>>()?;
            let per_seed: Vec<(TrainResult, Vec<JointRow>)> = workers.install(|| {
                cfg.seeds
                    .par_iter()
                    .map(|&seed| {
                        let joint = minimize_joint(data, &ctx, &cfg, seed)?;
                        let rows = joint_vs_fixed_rows(data, &ctx, &cfg, &fixed, seed)?;
                        Ok((joint, rows))
                    })
                    .collect::<Result<_>>()
            })?;
            let (results, rows): (Vec<_>, Vec<_>) = per_seed.into_iter().unzip();
            let rows: Vec<JointRow> = rows.into_iter().flatten().collect();
            for r in &rows {
                println!(
                    "seed {} {}: fixed {:.6e} (unprojected {:.6e}) joint {:.6e} {}",
                    r.seed,
                    r.spec,
                    r.fixed_final,
                    r.fixed_unprojected_final,
                    r.joint_final,
                    if r.holds { "holds" } else { "VIOLATED" }
                );
            }
            if rows.iter().any(|r| !r.holds) {
                exit_code = EXIT_CHECK_FAILED;
            }
            let body = serde_json::to_string_pretty(&JointOutput {
                mode,
                results: &results,
                comparison: &rows,
            })?;
            write_file(&out, &body, &mut written)?;
            let report = args.report.clone().unwrap_or_else(|| with_suffix(&out, ".joint.csv"));
            write_file(&report, &joint_report_csv(&rows), &mut written)?;
            if let Some(p) = &curves_path {
                let curves: Vec<_> = results.iter().map(|r| (r.seed, 0, r.loss_curve.as_slice())).collect();
                write_file(p, &curves_csv(&curves), &mut written)?;
            }
        }
        TrainMode::Dice => {
            let rounds = data.split_rounds(args.rounds.unwrap_or(3))?;
            let per_seed: Vec<Vec<DiceRound>> = workers.install(|| {
                cfg.seeds
                    .par_iter()
                    .map(|&seed| dice_iterate(&rounds, &ctx, &cfg, seed))
                    .collect::<Result<_>>()
            })?;
            for (seed, seed_rounds) in cfg.seeds.iter().zip(&per_seed) {
                for (t, r) in seed_rounds.iter().enumerate() {
                    let ok = r.equivalence_gap <= 1e-9;
                    if !ok {
                        exit_code = EXIT_CHECK_FAILED;
                    }
                    println!(
                        "seed {seed} round {}: loss {:.6} -> {:.6}, dice equivalence gap {:.2e}{}",
                        t + 1,
                        r.result.initial_loss(),
                        r.result.final_loss,
                        r.equivalence_gap,
                        if ok { "" } else { " FAILED" }
                    );
                }
            }
            let body = serde_json::to_string_pretty(&DiceOutput {
                mode,
                seeds: &cfg.seeds,
                rounds: &per_seed,
            })?;
            write_file(&out, &body, &mut written)?;
            if let Some(p) = &curves_path {
                let curves: Vec<_> = cfg
                    .seeds
                    .iter()
                    .zip(&per_seed)
                    .flat_map(|(&seed, rs)| {
                        rs.iter()
                            .enumerate()
                            .map(move |(t, r)| (seed, t + 1, r.result.loss_curve.as_slice()))
                    })
                    .collect();
                write_file(p, &curves_csv(&curves), &mut written)?;
            }
        }
    }
    Ok(CommandOutcome {
        exit_code,
        report_paths: written,
    })
}
