//! Closed-form optimal policy under a general prior, the Lagrangian dual,
//! reward inversion and the Bradley–Terry identities.
//!
//! All tables are indexed by the enumerated response space of one prompt.
//! Priors may be given as unnormalised positive weights; the optimal policy
//! only depends on them up to scale, while `Ẑ` and `λ*` do not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Token, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{entropy, log_sum_exp, sigmoid};

/// One prompt's block of a [`RewardTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBlock {
    pub prompt: Vec<Token>,
    /// `r(x, y)` in `enumerate_responses` order.
    pub rewards: Vec<f64>,
}

/// Latent rewards `r(x, y)` for every prompt and every enumerated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardTable {
    blocks: Vec<RewardBlock>,
}

impl RewardTable {
    pub fn new(vocab: &Vocabulary, blocks: Vec<RewardBlock>) -> Result<Self> {
        let size = vocab.response_space_size() as usize;
        for b in &blocks {
            if b.rewards.len() != size {
                return Err(Error::LengthMismatch {
                    what: format!("reward block for prompt {:?}", b.prompt),
                    expected: size,
                    got: b.rewards.len(),
                });
            }
            if b.rewards.iter().any(|r| !r.is_finite()) {
                return Err(Error::NonFinite(format!("reward for prompt {:?}", b.prompt)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[RewardBlock] {
        &self.blocks
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Vec<Token>> {
        self.blocks.iter().map(|b| &b.prompt)
    }

    pub fn for_prompt(&self, prompt: &[Token]) -> Result<&[f64]> {
        self.blocks
            .iter()
            .find(|b| b.prompt == prompt)
            .map(|b| b.rewards.as_slice())
            .ok_or_else(|| Error::OutOfRange(format!("no rewards for prompt {prompt:?}")))
    }

    pub fn reward(&self, vocab: &Vocabulary, prompt: &[Token], response: &[Token]) -> Result<f64> {
        Ok(self.for_prompt(prompt)?[vocab.response_index(response)?])
    }
}

/// `π*`, `Ẑ` and `λ*` for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPolicyResult {
    pub probs: Vec<f64>,
    pub z_hat: f64,
    pub log_z_hat: f64,
    pub lambda_star: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("beta must be positive, got {beta}")))
    }
}

fn check_aligned(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: what.into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// `Σ_y π(y) [r(y) + (1/β) ln ζ(y)] + (1/β) H(π)`.
pub fn regularized_objective(pi: &[f64], rewards: &[f64], zeta: &[f64], beta: f64) -> f64 {
    let linear: f64 = pi
        .iter()
        .zip(rewards.iter().zip(zeta))
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, (&r, &z))| p * (r + z.ln() / beta))
        .sum();
    linear + entropy(pi) / beta
}

/// `π*(y) = ζ(y) e^{β r(y)} / Ẑ` with `Ẑ = Σ ζ e^{β r}` and
/// `λ* = -(1/β) ln Σ ζ e^{β r - 1}`.
pub fn optimal_policy_closed_form(zeta: &[f64], rewards: &[f64], beta: f64) -> Result<OptimalPolicyResult> {
    check_beta(beta)?;
    check_aligned(zeta, rewards, "rewards")?;
    if zeta.iter().any(|&z| !(z > 0.0 && z.is_finite())) {
        return Err(Error::Domain("prior weights must be positive and finite".into()));
    }
    let exponents: Vec<f64> = zeta.iter().zip(rewards).map(|(z, r)| z.ln() + beta * r).collect();
    let log_z_hat = log_sum_exp(&exponents);
    let probs = exponents.iter().map(|e| (e - log_z_hat).exp()).collect();
    let shifted: Vec<f64> = exponents.iter().map(|e| e - 1.0).collect();
    let lambda_star = -log_sum_exp(&shifted) / beta;
    Ok(OptimalPolicyResult {
        probs,
        z_hat: log_z_hat.exp(),
        log_z_hat,
        lambda_star,
    })
}

/// The unnormalised stationary form `ζ(y) e^{β r(y) - 1} e^{β λ}`.
pub fn stationary_policy(lambda: f64, zeta: &[f64], rewards: &[f64], beta: f64) -> Vec<f64> {
    zeta.iter()
        .zip(rewards)
        .map(|(z, r)| (z.ln() + beta * r - 1.0 + beta * lambda).exp())
        .collect()
}

/// `q(λ) = (1/β) Σ ζ e^{β r - 1} e^{β λ} - λ`.
pub fn dual_value(lambda: f64, zeta: &[f64], rewards: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    check_aligned(zeta, rewards, "rewards")?;
    let shifted: Vec<f64> = zeta.iter().zip(rewards).map(|(z, r)| z.ln() + beta * r - 1.0).collect();
    Ok((log_sum_exp(&shifted) + beta * lambda).exp() / beta - lambda)
}

/// `r(y) = (1/β) ln(π*(y) / ζ(y)) + (1/β) ln Ẑ`.
pub fn reward_from_policy(pi_star: &[f64], zeta: &[f64], beta: f64, z_hat: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_aligned(pi_star, zeta, "prior")?;
    if z_hat <= 0.0 || pi_star.iter().chain(zeta).any(|&v| v <= 0.0) {
        return Err(Error::Domain("reward inversion needs positive tables".into()));
    }
    Ok(pi_star
        .iter()
        .zip(zeta)
        .map(|(p, z)| (p / z).ln() / beta + z_hat.ln() / beta)
        .collect())
}

/// Bradley–Terry `Pr(y1 ≻ y2) = e^{r1} / (e^{r1} + e^{r2})`, as `σ(r1 - r2)`.
pub fn bt_from_rewards(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2)
}

pub fn bt_probability(
    rewards: &RewardTable,
    vocab: &Vocabulary,
    prompt: &[Token],
    y1: &[Token],
    y2: &[Token],
) -> Result<f64> {
    Ok(bt_from_rewards(
        rewards.reward(vocab, prompt, y1)?,
        rewards.reward(vocab, prompt, y2)?,
    ))
}

/// `|BT(r(y1), r(y2)) - σ(α ln π*(y1)/ζ(y1) - α ln π*(y2)/ζ(y2))|` with `α = 1/β`
/// and `r` obtained from [`reward_from_policy`] with normaliser `z_hat`.
pub fn bt_sigmoid_identity_check(
    pi_star: &[f64],
    zeta: &[f64],
    beta: f64,
    z_hat: f64,
    i1: usize,
    i2: usize,
) -> Result<f64> {
    let rewards = reward_from_policy(pi_star, zeta, beta, z_hat)?;
    let lhs = bt_from_rewards(rewards[i1], rewards[i2]);
    let alpha = 1.0 / beta;
    let rhs = sigmoid(alpha * (pi_star[i1] / zeta[i1]).ln() - alpha * (pi_star[i2] / zeta[i2]).ln());
    Ok((lhs - rhs).abs())
}

/// Settings for [`projected_gradient_ascent`].
#[derive(Debug, Clone, Copy)]
pub struct AscentConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.1,
            restarts: 5,
            seed: 0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `argmin_{x ∈ simplex} Σ (x_i - v_i)² / d_i` for positive `d`: `x_i = max(0, v_i - θ d_i)`.
fn project_simplex_scaled(v: &[f64], d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| (v[b] / d[b]).total_cmp(&(v[a] / d[a])));
    let (mut sum_v, mut sum_d, mut theta) = (0.0, 0.0, 0.0);
    for &i in &order {
        sum_v += v[i];
        sum_d += d[i];
        let candidate = (sum_v - 1.0) / sum_d;
        if v[i] / d[i] > candidate {
            theta = candidate;
        }
    }
    v.iter().zip(d).map(|(vi, di)| (vi - theta * di).max(0.0)).collect()
}

/// Maximises [`regularized_objective`] over the simplex by projected gradient
/// ascent in the metric `diag(π)⁻¹` at the current iterate; an oracle for the
/// closed form that only evaluates the objective and its gradient.
///
/// Each iteration projects `π + s·diag(π)·∇` back onto the simplex in the same
/// metric and backtracks along the resulting direction until the Armijo
/// condition holds with a strictly positive iterate. The step `s` starts at
/// `step_size`, doubles after an accepted iteration and halves on rejection.
/// Restart 0 starts at the uniform distribution, the rest at random interior
/// points.
pub fn projected_gradient_ascent(rewards: &[f64], zeta: &[f64], beta: f64, cfg: &AscentConfig) -> Vec<f64> {
    let n = rewards.len();
    let objective = |pi: &[f64]| regularized_objective(pi, rewards, zeta, beta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut pi = if restart == 0 {
            vec![1.0 / n as f64; n]
        } else {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let mut value = objective(&pi);
        let mut step = cfg.step_size;
        for _ in 0..cfg.steps {
            let grad: Vec<f64> = (0..n)
                .map(|i| rewards[i] + (zeta[i].ln() - pi[i].ln() - 1.0) / beta)
                .collect();
            // the constant component is invisible on the simplex
            let mean = dot(&pi, &grad);
            let grad: Vec<f64> = grad.iter().map(|g| g - mean).collect();
            let target: Vec<f64> = (0..n).map(|i| pi[i] + step * pi[i] * grad[i]).collect();
            let direction: Vec<f64> = project_simplex_scaled(&target, &pi)
                .iter()
                .zip(&pi)
                .map(|(q, p)| q - p)
                .collect();
            let slope = dot(&grad, &direction);
            if slope <= 0.0 || direction.iter().all(|d| d.abs() < 1e-18) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1e-12 {
                let candidate: Vec<f64> = pi.iter().zip(&direction).map(|(p, d)| p + t * d).collect();
                if candidate.iter().all(|&c| c > 0.0) {
                    let v = objective(&candidate);
                    if v >= value + 1e-4 * t * slope {
                        accepted = Some((candidate, v));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((candidate, v)) => {
                    pi = candidate;
                    value = v;
                    step = if t == 1.0 { step * 2.0 } else { step };
                }
                None if step > 1e-12 => step *= 0.5,
                None => break,
            }
        }
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, pi));
        }
    }
    best.map(|(_, pi)| pi).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_reward_returns_prior() {
        let zeta = [0.2, 0.5, 0.3];
        let res = optimal_policy_closed_form(&zeta, &[0.0; 3], 1.7).unwrap();
        for (p, z) in res.probs.iter().zip(&zeta) {
            assert!((p - z).abs() < 1e-15);
        }
        assert!((res.z_hat - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_response_example() {
        let res = optimal_policy_closed_form(&[0.5, 0.5], &[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((res.probs[0] - 0.75).abs() < 1e-15 && (res.probs[1] - 0.25).abs() < 1e-15);
        assert!((res.z_hat - 2.0).abs() < 1e-14);
        let obj = regularized_objective(&[0.75, 0.25], &[3f64.ln(), 0.0], &[0.5, 0.5], 1.0);
        assert!((obj - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn lambda_star_normalised_and_unit_weights() {
        // normalised uniform prior: Σ ζ e^{-1} = e^{-1}
        let res = optimal_policy_closed_form(&[0.25; 4], &[0.0; 4], 1.0).unwrap();
        assert!((res.lambda_star - 1.0).abs() < 1e-14);
        // unit weights: λ* = 1 - ln N
        let res = optimal_policy_closed_form(&[1.0; 4], &[0.0; 4], 1.0).unwrap();
        assert!((res.lambda_star - (1.0 - 4f64.ln())).abs() < 1e-14);
        assert!((res.lambda_star + 0.386294).abs() < 1e-6);
        for p in res.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_dual() {
        // q(λ) = e^{λ-1} - λ, minimised at λ = 1 with value 0
        let q = |l: f64| dual_value(l, &[1.0], &[0.0], 1.0).unwrap();
        assert!(q(1.0).abs() < 1e-15);
        assert!(q(0.5) > 0.0 && q(1.5) > 0.0);
        assert!(((q(0.3)) - ((0.3f64 - 1.0).exp() - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn bad_beta_is_domain_error() {
        assert!(matches!(
            optimal_policy_closed_form(&[1.0], &[0.0], 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(dual_value(0.0, &[1.0], &[0.0], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn reward_inversion_special_cases() {
        let zeta = [0.1, 0.6, 0.3];
        let r = reward_from_policy(&zeta, &zeta, 2.0, 3.0).unwrap();
        for v in r {
            assert!((v - 3f64.ln() / 2.0).abs() < 1e-15);
        }
        let base = optimal_policy_closed_form(&zeta, &[0.3, -0.2, 1.0], 2.0).unwrap();
        let shifted = optimal_policy_closed_form(&zeta, &[1.3, 0.8, 2.0], 2.0).unwrap();
        assert!((shifted.z_hat / base.z_hat - 2f64.exp()).abs() < 1e-12);
        for (a, b) in base.probs.iter().zip(&shifted.probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bt_values() {
        assert_eq!(bt_from_rewards(0.4, 0.4), 0.5);
        assert!((bt_from_rewards(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert!((bt_from_rewards(1.3, -0.2) + bt_from_rewards(-0.2, 1.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bt_identity_same_response() {
        let res = optimal_policy_closed_form(&[0.2, 0.8], &[1.0, -1.0], 0.5).unwrap();
        assert_eq!(
            bt_sigmoid_identity_check(&res.probs, &[0.2, 0.8], 0.5, res.z_hat, 1, 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn ascent_recovers_small_closed_form() {
        let zeta = [0.2, 0.5, 0.3];
        let rewards = [0.4, -0.3, 0.1];
        let res = optimal_policy_closed_form(&zeta, &rewards, 1.5).unwrap();
        let pga = projected_gradient_ascent(&rewards, &zeta, 1.5, &AscentConfig::default());
        for (a, b) in res.probs.iter().zip(&pga) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn reward_table_json_blocks() {
        let voc = Vocabulary::new(1, 2).unwrap();
        let t = RewardTable::new(
            &voc,
            vec![RewardBlock {
                prompt: vec![1],
                rewards: vec![0.5, -1.0],
            }],
        )
        .unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"[{"prompt":[1],"rewards":[0.5,-1.0]}]"#);
        assert_eq!(t.reward(&voc, &[1], &[1, 1]).unwrap(), -1.0);
        assert!(RewardTable::new(
            &voc,
            vec![RewardBlock {
                prompt: vec![1],
                rewards: vec![0.0]
            }]
        )
        .is_err());
    }
}
