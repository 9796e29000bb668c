//! Gradient descent on tabular logits, joint `(π, ζ)` minimisation over a
//! floored simplex of table priors, and DICE rounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferenceTriple, Token, TokenAnnotations, TERMINATOR};
use crate::error::{Error, Result};
use crate::losses::{equivalence_row, mi_dpo_loss, mi_margin, LossContext};
use crate::numerics::{kl_divergence, log_sigmoid, project_floored_simplex, sigmoid};
use crate::policy::{ContextKey, TabularPolicy};
use crate::priors::{normalize_prior, PriorContext, PriorKind, PriorSpec, PriorTable};

/// Per-context gradient of the loss with respect to the stored logits.
pub type Gradient = BTreeMap<ContextKey, Vec<f64>>;

const MAX_HALVINGS: usize = 30;
const ZETA_INNER_STEPS: usize = 200;
const ZETA_GRAD_TOL: f64 = 1e-10;
/// Slack allowed when comparing joint and fixed final losses.
pub const INEQUALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub zeta_floor: f64,
    pub restarts: usize,
    pub fd_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
            seeds: vec![0],
            zeta_floor: 1e-3,
            restarts: 5,
            fd_step: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train", "learning_rate must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("train", "at least one seed is required"));
        }
        if self.restarts == 0 {
            return Err(Error::config("train", "restarts must be positive"));
        }
        if !(self.zeta_floor > 0.0 && self.zeta_floor < 1.0) {
            return Err(Error::config("train", "zeta_floor must lie in (0, 1)"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::config("train", "fd_step must be positive"));
        }
        Ok(())
    }

    /// `zeta_floor · |Y| ≤ 1`; equality leaves only the uniform prior.
    pub fn check_floor(&self, response_space: usize) -> Result<()> {
        if self.zeta_floor * response_space as f64 > 1.0 + 1e-12 {
            return Err(Error::config(
                "train",
                format!("zeta_floor {} times |Y| = {response_space} exceeds 1", self.zeta_floor),
            ));
        }
        Ok(())
    }
}

/// Trained parameters: the policy and, for joint runs, the learned table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    pub policy: TabularPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub seed: u64,
    pub restart: usize,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub params_snapshot: ParamsSnapshot,
}

impl TrainResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }
}

/// Seed of the initial policy for one restart of one training seed.
pub fn init_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(restart as u64)
}

/// Standard-normal initial logits over every context reachable from the data prompts.
pub fn initial_policy(data: &PreferenceDataset, seed: u64, restart: usize) -> TabularPolicy {
    TabularPolicy::random(*data.vocabulary(), &data.prompts(), init_seed(seed, restart))
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    /// `log π(sym | x, y^{<t})`.
    Step { t: usize, sym: Token },
    /// `KL(π_ref ‖ π)` at prefix `y^{<t}`.
    KlRefLlm { t: usize },
    /// `KL(π ‖ π_ref)` at prefix `y^{<t}`.
    KlLlmRef { t: usize },
}

fn annotation_values<'a>(
    ann: Option<&'a TokenAnnotations>,
    kind: PriorKind,
    pick: impl Fn(&'a TokenAnnotations) -> Option<&'a Vec<f64>>,
    len: usize,
) -> Result<&'a [f64]> {
    match ann.and_then(pick) {
        Some(v) if v.len() == len => Ok(v),
        _ => Err(Error::config(kind.name(), "annotations missing or misaligned")),
    }
}

/// `log π(y) - log ζ(y)` as a linear combination of primitives, dropping
/// everything that does not depend on `π`.
fn policy_dependent_terms(
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    response: &[Token],
    ann: Option<&TokenAnnotations>,
    max_len: usize,
) -> Result<Vec<(f64, Primitive)>> {
    let n = response.len();
    let step_count = if n < max_len { n + 1 } else { n };
    let step = |s: usize| Primitive::Step {
        t: s,
        sym: response.get(s).copied().unwrap_or(TERMINATOR),
    };
    let all_steps = |c: f64| (0..step_count).map(|s| (c, step(s))).collect::<Vec<_>>();
    let cfg = ctx.config;
    Ok(match spec {
        PriorSpec::Dpo | PriorSpec::Dice | PriorSpec::Rdpo | PriorSpec::Table(_) => all_steps(1.0),
        PriorSpec::Centropy => all_steps(cfg.eta_exp),
        PriorSpec::Simpo => all_steps(1.0 / n as f64),
        PriorSpec::Tdpo => {
            let mut terms = all_steps(1.0);
            terms.extend((0..n).map(|t| (1.0, Primitive::KlRefLlm { t })));
            terms
        }
        PriorSpec::Tisdpo => {
            let w = annotation_values(ann, PriorKind::Tisdpo, |a| a.weights.as_ref(), n)?;
            let mut terms: Vec<_> = (0..n).map(|s| (w[s], step(s))).collect();
            terms.extend((0..n).map(|t| (-w[t], Primitive::KlLlmRef { t })));
            terms
        }
        PriorSpec::Sparsepo => {
            let mu1 = annotation_values(ann, PriorKind::Sparsepo, |a| a.mu1.as_ref(), n)?;
            let mu2 = annotation_values(ann, PriorKind::Sparsepo, |a| a.mu2.as_ref(), n)?;
            let mut terms: Vec<_> = (0..step_count).map(|s| (mu1[s.min(n - 1)], step(s))).collect();
            terms.extend((0..n).map(|t| (mu2[t], Primitive::KlRefLlm { t })));
            terms
        }
    })
}

fn accumulate(
    grad: &mut Gradient,
    llm: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &[Token],
    response: &[Token],
    coef: f64,
    prim: Primitive,
) -> Result<()> {
    let t = match prim {
        Primitive::Step { t, .. } | Primitive::KlRefLlm { t } | Primitive::KlLlmRef { t } => t,
    };
    let prefix = &response[..t];
    let p = llm.next_token_dist(prompt, prefix)?;
    let g = grad
        .entry((prompt.to_vec(), prefix.to_vec()))
        .or_insert_with(|| vec![0.0; p.len()]);
    match prim {
        Primitive::Step { sym, .. } => {
            for (j, gj) in g.iter_mut().enumerate() {
                let indicator = if j == sym as usize { 1.0 } else { 0.0 };
                *gj += coef * (indicator - p[j]);
            }
        }
        Primitive::KlRefLlm { .. } => {
            let r = reference.next_token_dist(prompt, prefix)?;
            for j in 0..g.len() {
                g[j] += coef * (p[j] - r[j]);
            }
        }
        Primitive::KlLlmRef { .. } => {
            let r = reference.next_token_dist(prompt, prefix)?;
            let kl = kl_divergence(&p, &r);
            for j in 0..g.len() {
                if p[j] > 0.0 {
                    g[j] += coef * p[j] * (p[j].ln() - r[j].ln() - kl);
                }
            }
        }
    }
    Ok(())
}

/// Every context whose logits influence the loss on `data`, with zero entries.
fn touched_contexts(data: &PreferenceDataset) -> Gradient {
    let vocab = data.vocabulary();
    let width = vocab.symbol_count();
    let mut out = Gradient::new();
    for tr in data.triples() {
        for y in [&tr.chosen, &tr.rejected] {
            for t in 0..=y.len().min(vocab.max_len() - 1) {
                out.insert((tr.prompt.clone(), y[..t].to_vec()), vec![0.0; width]);
            }
        }
    }
    out
}

/// Exact gradient of [`mi_dpo_loss`] with respect to every logit the data touches.
pub fn loss_gradient(
    llm: &TabularPolicy,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<Gradient> {
    let mut grad = touched_contexts(data);
    let n = data.len() as f64;
    let max_len = data.vocabulary().max_len();
    let alpha = ctx.config.alpha;
    for tr in data.triples() {
        let m = mi_margin(llm, spec, ctx, tr)?;
        let dloss_dm = -sigmoid(-m) / n;
        let sides: [(f64, &Vec<Token>, Option<&TokenAnnotations>); 2] = [
            (1.0, &tr.chosen, tr.chosen_annotations.as_ref()),
            (-1.0, &tr.rejected, tr.rejected_annotations.as_ref()),
        ];
        for (sign, y, ann) in sides {
            for (c, prim) in policy_dependent_terms(spec, ctx, y, ann, max_len)? {
                accumulate(
                    &mut grad,
                    llm,
                    ctx.reference,
                    &tr.prompt,
                    y,
                    dloss_dm * alpha * sign * c,
                    prim,
                )?;
            }
        }
    }
    Ok(grad)
}

/// Central differences of [`mi_dpo_loss`] at the same entries as [`loss_gradient`].
pub fn finite_difference_gradient(
    llm: &TabularPolicy,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
    h: f64,
) -> Result<Gradient> {
    let mut grad = touched_contexts(data);
    let mut probe = llm.clone();
    for ((x, prefix), g) in grad.iter_mut() {
        for (j, gj) in g.iter_mut().enumerate() {
            let base = probe.logits_mut(x, prefix)?[j];
            probe.logits_mut(x, prefix)?[j] = base + h;
            let up = mi_dpo_loss(&probe, spec, ctx, data)?;
            probe.logits_mut(x, prefix)?[j] = base - h;
            let down = mi_dpo_loss(&probe, spec, ctx, data)?;
            probe.logits_mut(x, prefix)?[j] = base;
            *gj = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// `max |a - b| / max(1, |b|)` over aligned gradient entries.
pub fn max_relative_error(analytic: &Gradient, reference: &Gradient) -> f64 {
    analytic
        .iter()
        .flat_map(|(k, a)| {
            let b = &reference[k];
            a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        })
        .fold(0.0, f64::max)
}

fn apply_step(llm: &TabularPolicy, grad: &Gradient, lr: f64) -> Result<TabularPolicy> {
    let mut next = llm.clone();
    for ((x, prefix), g) in grad {
        for (z, gj) in next.logits_mut(x, prefix)?.iter_mut().zip(g) {
            *z -= lr * gj;
        }
    }
    Ok(next)
}

fn finite_loss(value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("loss became {value} at step {step}")))
    }
}

/// One gradient step with up to 30 halvings; keeps `llm` when none decreases the loss.
fn descent_step(
    llm: &mut TabularPolicy,
    loss: &mut f64,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
    lr: f64,
) -> Result<()> {
    let grad = loss_gradient(llm, spec, ctx, data)?;
    let mut rate = lr;
    for _ in 0..=MAX_HALVINGS {
        let candidate = apply_step(llm, &grad, rate)?;
        let value = mi_dpo_loss(&candidate, spec, ctx, data)?;
        if value <= *loss {
            *llm = candidate;
            *loss = value;
            return Ok(());
        }
        rate *= 0.5;
    }
    Ok(())
}

fn run_fixed(
    init: TabularPolicy,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
    cfg: &TrainConfig,
) -> Result<(TabularPolicy, Vec<f64>)> {
    let mut llm = init;
    let mut loss = finite_loss(mi_dpo_loss(&llm, spec, ctx, data)?, 0)?;
    let mut curve = vec![loss];
    for step in 1..=cfg.steps {
        descent_step(&mut llm, &mut loss, spec, ctx, data, cfg.learning_rate)?;
        curve.push(finite_loss(loss, step)?);
    }
    Ok((llm, curve))
}

fn keep_best(best: &mut Option<TrainResult>, candidate: TrainResult) {
    if best.as_ref().is_none_or(|b| candidate.final_loss < b.final_loss) {
        *best = Some(candidate);
    }
}

/// Gradient descent on the logits with `ζ` given by `spec`; best of
/// `cfg.restarts` random initialisations for `seed`.
pub fn minimize_fixed_zeta(
    spec: &PriorSpec,
    data: &PreferenceDataset,
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut best = None;
    for restart in 0..cfg.restarts {
        let (llm, curve) = run_fixed(initial_policy(data, seed, restart), spec, ctx, data, cfg)?;
        keep_best(
            &mut best,
            TrainResult {
                seed,
                restart,
                final_loss: *curve.last().unwrap(),
                loss_curve: curve,
                params_snapshot: ParamsSnapshot {
                    policy: llm,
                    prior: None,
                },
            },
        );
    }
    Ok(best.expect("at least one restart"))
}

/// Gradient descent from a given policy, without restarts.
pub fn minimize_fixed_zeta_from(
    init: TabularPolicy,
    spec: &PriorSpec,
    data: &PreferenceDataset,
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    let (llm, curve) = run_fixed(init, spec, ctx, data, cfg)?;
    Ok(TrainResult {
        seed,
        restart: 0,
        final_loss: *curve.last().unwrap(),
        loss_curve: curve,
        params_snapshot: ParamsSnapshot {
            policy: llm,
            prior: None,
        },
    })
}

/// Floored-simplex priors, one row per data prompt, indexed by response.
struct ZetaTables {
    prompts: Vec<Vec<Token>>,
    rows: Vec<Vec<f64>>,
}

impl ZetaTables {
    fn uniform(prompts: Vec<Vec<Token>>, size: usize) -> Self {
        let rows = vec![vec![1.0 / size as f64; size]; prompts.len()];
        Self { prompts, rows }
    }

    fn to_spec(&self) -> PriorSpec {
        let mut table = PriorTable::default();
        for (x, row) in self.prompts.iter().zip(&self.rows) {
            table.insert_prompt(x, row.iter().map(|z| z.ln()).collect());
        }
        PriorSpec::Table(table)
    }
}

/// Policy part `α log π(y_w)/π(y_l)` of each margin plus the table coordinates it pairs with.
struct ZetaProblem {
    alpha: f64,
    items: Vec<(f64, usize, usize, usize)>,
}

impl ZetaProblem {
    fn new(llm: &TabularPolicy, data: &PreferenceDataset, alpha: f64, prompts: &[Vec<Token>]) -> Result<Self> {
        let vocab = data.vocabulary();
        let items = data
            .triples()
            .iter()
            .map(|tr: &PreferenceTriple| {
                let a =
                    alpha * (llm.seq_log_prob(&tr.prompt, &tr.chosen)? - llm.seq_log_prob(&tr.prompt, &tr.rejected)?);
                let xi = prompts.iter().position(|p| *p == tr.prompt).expect("prompt listed");
                Ok((
                    a,
                    xi,
                    vocab.response_index(&tr.chosen)?,
                    vocab.response_index(&tr.rejected)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { alpha, items })
    }

    fn margin(&self, rows: &[Vec<f64>], &(a, xi, w, l): &(f64, usize, usize, usize)) -> f64 {
        a - self.alpha * (rows[xi][w].ln() - rows[xi][l].ln())
    }

    fn loss(&self, rows: &[Vec<f64>]) -> f64 {
        let n = self.items.len() as f64;
        self.items
            .iter()
            .map(|it| -log_sigmoid(self.margin(rows, it)))
            .sum::<f64>()
            / n
    }

    fn gradient(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.items.len() as f64;
        let mut g: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
        for it in &self.items {
            let &(_, xi, w, l) = it;
            let dloss_dm = -sigmoid(-self.margin(rows, it)) / n;
            g[xi][w] -= dloss_dm * self.alpha / rows[xi][w];
            g[xi][l] += dloss_dm * self.alpha / rows[xi][l];
        }
        g
    }
}

fn project_rows(rows: &[Vec<f64>], grad: &[Vec<f64>], step: f64, floor: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .zip(grad)
        .map(|(r, g)| {
            let moved: Vec<f64> = r.iter().zip(g).map(|(z, gz)| z - step * gz).collect();
            project_floored_simplex(&moved, floor)
        })
        .collect()
}

/// Projected gradient descent on `ζ ∈ Ξ` for the current policy.
fn minimize_zeta(problem: &ZetaProblem, tables: &mut ZetaTables, floor: f64) {
    let mut value = problem.loss(&tables.rows);
    let mut step = 1e-3;
    for _ in 0..ZETA_INNER_STEPS {
        let grad = problem.gradient(&tables.rows);
        let unit = project_rows(&tables.rows, &grad, 1.0, floor);
        let mapping = tables
            .rows
            .iter()
            .flatten()
            .zip(unit.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if mapping <= ZETA_GRAD_TOL {
            break;
        }
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = project_rows(&tables.rows, &grad, step, floor);
            let v = problem.loss(&candidate);
            if v <= value {
                moved = candidate != tables.rows;
                tables.rows = candidate;
                value = v;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        step *= 2.0;
    }
}

/// Alternating minimisation of the loss over logits and a table prior in the
/// floored simplex; best of `cfg.restarts` initialisations for `seed`.
pub fn minimize_joint(
    data: &PreferenceDataset,
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    let vocab = data.vocabulary();
    let size = vocab.response_space_size() as usize;
    cfg.check_floor(size)?;
    let prompts = data.prompts();
    let alpha = ctx.config.alpha;
    let mut best = None;
    for restart in 0..cfg.restarts {
        let mut llm = initial_policy(data, seed, restart);
        let mut tables = ZetaTables::uniform(prompts.clone(), size);
        let mut spec = tables.to_spec();
        let mut loss = finite_loss(mi_dpo_loss(&llm, &spec, ctx, data)?, 0)?;
        let mut curve = vec![loss];
        for step in 1..=cfg.steps {
            descent_step(&mut llm, &mut loss, &spec, ctx, data, cfg.learning_rate)?;
            let problem = ZetaProblem::new(&llm, data, alpha, &prompts)?;
            let previous = tables.rows.clone();
            minimize_zeta(&problem, &mut tables, cfg.zeta_floor);
            let candidate = tables.to_spec();
            let value = mi_dpo_loss(&llm, &candidate, ctx, data)?;
            if value <= loss {
                spec = candidate;
                loss = value;
            } else {
                tables.rows = previous;
            }
            curve.push(finite_loss(loss, step)?);
        }
        keep_best(
            &mut best,
            TrainResult {
                seed,
                restart,
                final_loss: loss,
                loss_curve: curve,
                params_snapshot: ParamsSnapshot {
                    policy: llm,
                    prior: Some(spec),
                },
            },
        );
    }
    Ok(best.expect("at least one restart"))
}

/// Normalises `spec` at `llm` for every data prompt and projects each row
/// into the floored simplex, giving a table prior in `Ξ`.
pub fn freeze_prior(
    spec: &PriorSpec,
    llm: &TabularPolicy,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
    floor: f64,
) -> Result<PriorSpec> {
    let pctx = PriorContext::new(llm, ctx.reference, ctx.config).with_prev(ctx.prev);
    let mut table = PriorTable::default();
    for x in data.prompts() {
        let projected = project_floored_simplex(&normalize_prior(spec, &pctx, &x)?, floor);
        table.insert_prompt(&x, projected.iter().map(|z| z.ln()).collect());
    }
    Ok(PriorSpec::Table(table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub spec: String,
    pub seed: u64,
    /// Fixed-prior result with the prior projected into the floored simplex.
    pub fixed_final: f64,
    /// Fixed-prior result with the prior as specified.
    pub fixed_unprojected_final: f64,
    pub joint_final: f64,
    pub holds: bool,
}

/// For every seed: one joint run and, per fixed spec, a run with the spec
/// frozen at the seed's first initial policy and projected into `Ξ`.
pub fn joint_vs_fixed_report(
    data: &PreferenceDataset,
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
    fixed_specs: &[PriorSpec],
) -> Result<Vec<JointRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(joint_vs_fixed_rows(data, ctx, cfg, fixed_specs, seed)?);
    }
    Ok(rows)
}

/// The rows of [`joint_vs_fixed_report`] for a single seed.
pub fn joint_vs_fixed_rows(
    data: &PreferenceDataset,
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
    fixed_specs: &[PriorSpec],
    seed: u64,
) -> Result<Vec<JointRow>> {
    let joint = minimize_joint(data, ctx, cfg, seed)?;
    let anchor = initial_policy(data, seed, 0);
    fixed_specs
        .iter()
        .map(|spec| {
            let frozen = freeze_prior(spec, &anchor, ctx, data, cfg.zeta_floor)?;
            let fixed = minimize_fixed_zeta(&frozen, data, ctx, cfg, seed)?;
            let unprojected = minimize_fixed_zeta(spec, data, ctx, cfg, seed)?;
            Ok(JointRow {
                spec: spec.kind().name().to_string(),
                seed,
                fixed_final: fixed.final_loss,
                fixed_unprojected_final: unprojected.final_loss,
                joint_final: joint.final_loss,
                holds: joint.final_loss <= fixed.final_loss + INEQUALITY_TOL,
            })
        })
        .collect()
}

pub fn joint_report_csv(rows: &[JointRow]) -> String {
    let mut out = String::from("spec,seed,fixed_final,fixed_unprojected_final,joint_final,holds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{}",
            r.spec, r.seed, r.fixed_final, r.fixed_unprojected_final, r.joint_final, r.holds
        );
    }
    out
}

/// One DICE round's training result and its equivalence gap against the
/// directly transcribed DICE loss at the trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRound {
    pub result: TrainResult,
    pub equivalence_gap: f64,
}

/// Trains round `t` with the DICE prior whose previous policy is round
/// `t - 1`'s final policy; round 1 uses the reference and restarts from random
/// initialisations, later rounds continue from the previous policy.
pub fn dice_iterate(
    rounds: &[PreferenceDataset],
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<DiceRound>> {
    if rounds.is_empty() {
        return Err(Error::config("dice", "at least one round is required"));
    }
    let mut prev = ctx.reference.snapshot();
    let mut out = Vec::with_capacity(rounds.len());
    for (t, data) in rounds.iter().enumerate() {
        let round_ctx = LossContext::new(ctx.reference, ctx.config).with_prev(&prev);
        let result = if t == 0 {
            minimize_fixed_zeta(&PriorSpec::Dice, data, &round_ctx, cfg, seed)?
        } else {
            minimize_fixed_zeta_from(prev.snapshot(), &PriorSpec::Dice, data, &round_ctx, cfg, seed)?
        };
        let row = equivalence_row(PriorKind::Dice, &result.params_snapshot.policy, &round_ctx, data)?;
        let next = result.params_snapshot.policy.snapshot();
        out.push(DiceRound {
            result,
            equivalence_gap: row.abs_gap,
        });
        prev = next;
    }
    Ok(out)
}

/// `step,loss` rows of a loss curve.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{v:e}");
    }
    out
}
