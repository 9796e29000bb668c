//! The MI-DPO loss and the eight variant losses it reduces to.
//!
//! [`mi_dpo_loss`] evaluates `-E log σ(α log π(y_w)/ζ(y_w) - α log π(y_l)/ζ(y_l))`
//! with `ζ` supplied by the [`priors`](crate::priors) module. [`variant_loss`]
//! evaluates each published loss straight from its own formula and never calls
//! into `priors`, so [`equivalence_report`] compares two independent arithmetic
//! paths.

use std::fmt::Write as _;

use crate::data::{validate_dataset, AlignmentConfig, PreferenceDataset, PreferenceTriple, Token, TokenAnnotations};
use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, log_sigmoid};
use crate::policy::TabularPolicy;
use crate::priors::{log_zeta, PriorContext, PriorKind, PriorSpec, Role};

/// The fixed inputs of a loss evaluation besides the trained policy.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub reference: &'a TabularPolicy,
    /// Previous-round policy for DICE.
    pub prev: Option<&'a TabularPolicy>,
    pub config: &'a AlignmentConfig,
}

impl<'a> LossContext<'a> {
    pub fn new(reference: &'a TabularPolicy, config: &'a AlignmentConfig) -> Self {
        Self {
            reference,
            prev: None,
            config,
        }
    }

    pub fn with_prev(mut self, prev: &'a TabularPolicy) -> Self {
        self.prev = Some(prev);
        self
    }

    /// Prior context for one side of a triple.
    pub fn prior_context(&self, llm: &'a TabularPolicy, triple: &'a PreferenceTriple, role: Role) -> PriorContext<'a> {
        let annotations = match role {
            Role::Winner => triple.chosen_annotations.as_ref(),
            Role::Loser => triple.rejected_annotations.as_ref(),
            Role::Neutral => None,
        };
        PriorContext::new(llm, self.reference, self.config)
            .with_prev(self.prev)
            .with_role(role, annotations)
    }
}

/// `α [log π(y_w|x) - log ζ(y_w)] - α [log π(y_l|x) - log ζ(y_l)]` for an
/// arbitrary `log ζ(triple, role, response)`.
pub fn mi_margin_with<F>(llm: &TabularPolicy, triple: &PreferenceTriple, alpha: f64, log_zeta_fn: &mut F) -> Result<f64>
where
    F: FnMut(&PreferenceTriple, Role, &[Token]) -> Result<f64>,
{
    let x = &triple.prompt;
    let winner = llm.seq_log_prob(x, &triple.chosen)? - log_zeta_fn(triple, Role::Winner, &triple.chosen)?;
    let loser = llm.seq_log_prob(x, &triple.rejected)? - log_zeta_fn(triple, Role::Loser, &triple.rejected)?;
    Ok(alpha * winner - alpha * loser)
}

/// The MI-DPO margin of one triple under `spec`.
pub fn mi_margin(
    llm: &TabularPolicy,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    triple: &PreferenceTriple,
) -> Result<f64> {
    mi_margin_with(llm, triple, ctx.config.alpha, &mut |t, role, y| {
        log_zeta(spec, &ctx.prior_context(llm, t, role), &t.prompt, y)
    })
}

/// Mean of `-log σ(m)` over margins.
pub fn mean_sigmoid_loss(margins: &[f64]) -> f64 {
    margins.iter().map(|&m| -log_sigmoid(m)).sum::<f64>() / margins.len() as f64
}

/// Per-triple MI-DPO margins for an arbitrary prior.
pub fn mi_margins_with<F>(
    llm: &TabularPolicy,
    data: &PreferenceDataset,
    alpha: f64,
    mut log_zeta_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&PreferenceTriple, Role, &[Token]) -> Result<f64>,
{
    data.triples()
        .iter()
        .map(|t| mi_margin_with(llm, t, alpha, &mut log_zeta_fn))
        .collect()
}

pub fn mi_margins(
    llm: &TabularPolicy,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<Vec<f64>> {
    data.triples().iter().map(|t| mi_margin(llm, spec, ctx, t)).collect()
}

/// `J_MI-DPO(π, ζ)`: mean over triples of `-log σ(margin)`.
pub fn mi_dpo_loss(
    llm: &TabularPolicy,
    spec: &PriorSpec,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<f64> {
    Ok(mean_sigmoid_loss(&mi_margins(llm, spec, ctx, data)?))
}

/// `Δ(x, y_w, y_l)`: sequential `KL(π_ref || π_LLM)` along `y_l` minus along `y_w`.
pub fn sequential_kl_gap(llm: &TabularPolicy, reference: &TabularPolicy, triple: &PreferenceTriple) -> Result<f64> {
    let along = |y: &[Token]| -> Result<f64> {
        let mut total = 0.0;
        for t in 0..y.len() {
            let r = reference.next_token_dist(&triple.prompt, &y[..t])?;
            let p = llm.next_token_dist(&triple.prompt, &y[..t])?;
            total += kl_divergence(&r, &p);
        }
        Ok(total)
    };
    Ok(along(&triple.rejected)? - along(&triple.chosen)?)
}

/// `D_SeqL(x, y, w; p || q) = Σ_i w_i KL(p(·|x, y_{<i}) || q(·|x, y_{<i}))`.
pub fn weighted_seq_kl(
    p: &TabularPolicy,
    q: &TabularPolicy,
    prompt: &[Token],
    response: &[Token],
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != response.len() {
        return Err(Error::LengthMismatch {
            what: "token weights".into(),
            expected: response.len(),
            got: weights.len(),
        });
    }
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let pd = p.next_token_dist(prompt, &response[..i])?;
        let qd = q.next_token_dist(prompt, &response[..i])?;
        total += w * kl_divergence(&pd, &qd);
    }
    Ok(total)
}

fn side_annotations<'t>(kind: PriorKind, triple: &'t PreferenceTriple, winner: bool) -> Result<&'t TokenAnnotations> {
    let a = if winner {
        triple.chosen_annotations.as_ref()
    } else {
        triple.rejected_annotations.as_ref()
    };
    a.ok_or_else(|| Error::config(kind.name(), "triple lacks token annotations"))
}

fn field<'t>(kind: PriorKind, values: Option<&'t Vec<f64>>, name: &str, len: usize) -> Result<&'t [f64]> {
    let v = values.ok_or_else(|| Error::config(kind.name(), format!("missing `{name}` annotation")))?;
    if v.len() != len {
        return Err(Error::LengthMismatch {
            what: format!("{name} annotation"),
            expected: len,
            got: v.len(),
        });
    }
    Ok(v)
}

/// `α Σ_i w_i log π_LLM(y_i|…)/π_ref(y_i|…)`, response tokens only.
fn weighted_token_log_ratio(
    llm: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &[Token],
    y: &[Token],
    w: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..y.len() {
        let lp = llm.next_token_log_dist(prompt, &y[..i])?[y[i] as usize];
        let lr = reference.next_token_log_dist(prompt, &y[..i])?[y[i] as usize];
        total += w[i] * (lp - lr);
    }
    Ok(total)
}

/// `Σ_s μ1_s log π_LLM/π_ref` over generation steps; the terminator step (when
/// `|y| < L`) takes the last token's mask value.
fn masked_step_log_ratio(
    llm: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &[Token],
    y: &[Token],
    mu1: &[f64],
) -> Result<f64> {
    let mut total = weighted_token_log_ratio(llm, reference, prompt, y, mu1)?;
    if y.len() < llm.vocab().max_len() {
        let lp = llm.next_token_log_dist(prompt, y)?[0];
        let lr = reference.next_token_log_dist(prompt, y)?[0];
        total += mu1[y.len() - 1] * (lp - lr);
    }
    Ok(total)
}

/// The sigmoid argument of a variant loss, transcribed directly.
pub fn variant_margin(
    kind: PriorKind,
    llm: &TabularPolicy,
    ctx: &LossContext<'_>,
    triple: &PreferenceTriple,
) -> Result<f64> {
    let cfg = ctx.config;
    let a = cfg.alpha;
    let x = &triple.prompt;
    let (yw, yl) = (&triple.chosen, &triple.rejected);
    let rf = ctx.reference;
    let log_ratio = |p: &TabularPolicy, q: &TabularPolicy, y: &[Token]| -> Result<f64> {
        Ok(p.seq_log_prob(x, y)? - q.seq_log_prob(x, y)?)
    };
    let dpo = |q: &TabularPolicy| -> Result<f64> { Ok(a * log_ratio(llm, q, yw)? - a * log_ratio(llm, q, yl)?) };
    let m = match kind {
        PriorKind::Dpo => dpo(rf)?,
        PriorKind::Dice => {
            let prev = ctx
                .prev
                .ok_or_else(|| Error::config("dice", "missing previous-round policy"))?;
            dpo(prev)?
        }
        PriorKind::Centropy => {
            let eta = cfg.eta_exp;
            let w = eta * llm.seq_log_prob(x, yw)? - rf.seq_log_prob(x, yw)?;
            let l = eta * llm.seq_log_prob(x, yl)? - rf.seq_log_prob(x, yl)?;
            a * w - a * l
        }
        PriorKind::Rdpo => {
            let scaled = a * cfg.len_coeff;
            dpo(rf)? + (scaled * yw.len() as f64 - scaled * yl.len() as f64)
        }
        PriorKind::Simpo => {
            a / yw.len() as f64 * llm.seq_log_prob(x, yw)? - a / yl.len() as f64 * llm.seq_log_prob(x, yl)? - cfg.gamma
        }
        PriorKind::Tdpo => dpo(rf)? - a * sequential_kl_gap(llm, rf, triple)?,
        PriorKind::Tisdpo => {
            let ww = field(
                kind,
                side_annotations(kind, triple, true)?.weights.as_ref(),
                "weights",
                yw.len(),
            )?;
            let wl = field(
                kind,
                side_annotations(kind, triple, false)?.weights.as_ref(),
                "weights",
                yl.len(),
            )?;
            let u =
                a * weighted_token_log_ratio(llm, rf, x, yw, ww)? - a * weighted_token_log_ratio(llm, rf, x, yl, wl)?;
            let eta = a * weighted_seq_kl(llm, rf, x, yw, ww)? - a * weighted_seq_kl(llm, rf, x, yl, wl)?;
            u - eta
        }
        PriorKind::Sparsepo => {
            let aw = side_annotations(kind, triple, true)?;
            let al = side_annotations(kind, triple, false)?;
            let mu1w = field(kind, aw.mu1.as_ref(), "mu1", yw.len())?;
            let mu1l = field(kind, al.mu1.as_ref(), "mu1", yl.len())?;
            let mu2w = field(kind, aw.mu2.as_ref(), "mu2", yw.len())?;
            let mu2l = field(kind, al.mu2.as_ref(), "mu2", yl.len())?;
            let u = a * masked_step_log_ratio(llm, rf, x, yw, mu1w)? - a * masked_step_log_ratio(llm, rf, x, yl, mu1l)?;
            // μ2-weighted sequential KL(π_ref || π_LLM)
            let delta = a * weighted_seq_kl(rf, llm, x, yl, mu2l)? - a * weighted_seq_kl(rf, llm, x, yw, mu2w)?;
            u - delta
        }
        PriorKind::Table => {
            return Err(Error::config("table", "a table prior has no published variant loss"));
        }
    };
    Ok(m)
}

pub fn variant_margins(
    kind: PriorKind,
    llm: &TabularPolicy,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<Vec<f64>> {
    data.triples()
        .iter()
        .map(|t| variant_margin(kind, llm, ctx, t))
        .collect()
}

/// `J_X(π)` for variant `X`, computed without the prior machinery.
pub fn variant_loss(
    kind: PriorKind,
    llm: &TabularPolicy,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<f64> {
    Ok(mean_sigmoid_loss(&variant_margins(kind, llm, ctx, data)?))
}

/// One row of the equivalence report.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub variant: PriorKind,
    pub mi_dpo_value: f64,
    pub direct_value: f64,
    /// Largest of the per-triple margin gaps and the gap between the two means.
    pub abs_gap: f64,
    /// `|MI-DPO margin - direct margin|` per triple.
    pub per_sample_gaps: Vec<f64>,
    pub worst_triple_index: usize,
}

impl LossReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.abs_gap <= tol
    }
}

/// Compares MI-DPO under each variant's prior against the variant's own loss.
pub fn equivalence_row(
    kind: PriorKind,
    llm: &TabularPolicy,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<LossReport> {
    let spec = PriorSpec::from_kind(kind)?;
    let mi = mi_margins(llm, &spec, ctx, data)?;
    let direct = variant_margins(kind, llm, ctx, data)?;
    let per_sample_gaps: Vec<f64> = mi.iter().zip(&direct).map(|(a, b)| (a - b).abs()).collect();
    let (worst_triple_index, worst) = per_sample_gaps
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, g)| if g > best.1 { (i, g) } else { best });
    let mi_dpo_value = mean_sigmoid_loss(&mi);
    let direct_value = mean_sigmoid_loss(&direct);
    Ok(LossReport {
        variant: kind,
        mi_dpo_value,
        direct_value,
        abs_gap: worst.max((mi_dpo_value - direct_value).abs()),
        per_sample_gaps,
        worst_triple_index,
    })
}

/// One [`LossReport`] per variant, in [`PriorKind::VARIANTS`] order.
pub fn equivalence_report(
    llm: &TabularPolicy,
    ctx: &LossContext<'_>,
    data: &PreferenceDataset,
) -> Result<Vec<LossReport>> {
    ctx.config.validate()?;
    let validation = validate_dataset(data);
    if !validation.problems.is_empty() {
        return Err(Error::Domain(validation.problems.join("; ")));
    }
    PriorKind::VARIANTS
        .iter()
        .map(|&kind| {
            if kind.needs_role() && !validation.absolute_labels_ok {
                return Err(Error::config(
                    kind.name(),
                    format!("labels are not absolute: {:?}", validation.violations),
                ));
            }
            equivalence_row(kind, llm, ctx, data)
        })
        .collect()
}

/// CSV with header `variant,mi_dpo_value,direct_value,abs_gap,worst_triple_index`.
pub fn report_csv(rows: &[LossReport]) -> String {
    let mut out = String::from("variant,mi_dpo_value,direct_value,abs_gap,worst_triple_index\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.6e},{}",
            r.variant, r.mi_dpo_value, r.direct_value, r.abs_gap, r.worst_triple_index
        );
    }
    out
}
