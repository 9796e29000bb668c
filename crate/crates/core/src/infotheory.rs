//! Variational mutual information over finite channels and the
//! reward-minus-information objective.

use crate::data::Token;
use crate::error::{Error, Result};
use crate::numerics::kl_divergence;
use crate::optimal::RewardTable;
use crate::policy::TabularPolicy;

const STOCHASTIC_TOL: f64 = 1e-12;

/// A prompt distribution `p(x)` and a row-stochastic table `p(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChannel {
    p_x: Vec<f64>,
    p_y_given_x: Vec<Vec<f64>>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Domain(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

impl DiscreteChannel {
    pub fn new(p_x: Vec<f64>, p_y_given_x: Vec<Vec<f64>>) -> Result<Self> {
        check_distribution(&p_x, "p_x")?;
        if p_y_given_x.len() != p_x.len() {
            return Err(Error::LengthMismatch {
                what: "channel rows".into(),
                expected: p_x.len(),
                got: p_y_given_x.len(),
            });
        }
        let width = p_y_given_x.first().map_or(0, Vec::len);
        for (i, row) in p_y_given_x.iter().enumerate() {
            if row.len() != width {
                return Err(Error::LengthMismatch {
                    what: format!("channel row {i}"),
                    expected: width,
                    got: row.len(),
                });
            }
            check_distribution(row, &format!("channel row {i}"))?;
        }
        Ok(Self { p_x, p_y_given_x })
    }

    /// The channel induced by `π(y|x)` over the given prompts.
    pub fn from_policy(policy: &TabularPolicy, prompts: &[Vec<Token>], p_x: Vec<f64>) -> Result<Self> {
        let rows = prompts
            .iter()
            .map(|x| policy.sequence_distribution(x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(p_x, rows)
    }

    pub fn p_x(&self) -> &[f64] {
        &self.p_x
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.p_y_given_x
    }

    pub fn output_size(&self) -> usize {
        self.p_y_given_x.first().map_or(0, Vec::len)
    }
}

/// `Σ_x p(x) KL(p(·|x) ‖ q)`; `+∞` when `q` misses support of some row.
pub fn i_g(channel: &DiscreteChannel, q_y: &[f64]) -> f64 {
    channel
        .p_x
        .iter()
        .zip(&channel.p_y_given_x)
        .filter(|(&px, _)| px > 0.0)
        .map(|(&px, row)| px * kl_divergence(row, q_y))
        .sum()
}

/// The output marginal `q*(y) = Σ_x p(x) p(y|x)`, which minimises [`i_g`].
pub fn optimal_variational(channel: &DiscreteChannel) -> Vec<f64> {
    let mut q = vec![0.0; channel.output_size()];
    for (&px, row) in channel.p_x.iter().zip(&channel.p_y_given_x) {
        for (qy, &p) in q.iter_mut().zip(row) {
            *qy += px * p;
        }
    }
    q
}

pub fn mutual_information(channel: &DiscreteChannel) -> f64 {
    i_g(channel, &optimal_variational(channel)).max(0.0)
}

/// `Σ_{x,y} p(x) π(y|x) r(x,y) - (1/β) I[X;Y]` over the prompts of `rewards`.
pub fn rate_distortion_objective(llm: &TabularPolicy, rewards: &RewardTable, beta: f64, p_x: &[f64]) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let prompts: Vec<Vec<Token>> = rewards.prompts().cloned().collect();
    let channel = DiscreteChannel::from_policy(llm, &prompts, p_x.to_vec())?;
    let expected_reward: f64 = rewards
        .blocks()
        .iter()
        .zip(channel.rows())
        .zip(p_x)
        .map(|((block, row), px)| px * row.iter().zip(&block.rewards).map(|(p, r)| p * r).sum::<f64>())
        .sum();
    Ok(expected_reward - mutual_information(&channel) / beta)
}
