//! Group-relative policy optimization over multi-level token rollouts.
//!
//! Objectives are returned as values to maximize. The generation objective
//! weights per-level clipped ratios; the understanding objective applies two
//! sequence filters first (entropy outliers and sampler/actor divergence)
//! and scores the survivors with a single level.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{clipped_term, Graph, Var};
use crate::error::{config_err, input_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Guard added to the group standard deviation.
pub const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    /// `None` means uniform `1/L`.
    pub level_weights: Option<Vec<f64>>,
    /// Entropy filter drops `H > μ + n·σ`.
    pub entropy_n: f64,
    /// Divergence filter drops any token with `|p_sampler − p_actor| > δ`.
    pub delta: f64,
    pub group_size: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2, level_weights: None, entropy_n: 1.0, delta: 0.4, group_size: 4 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) || !self.clip_eps.is_finite() {
            return Err(config_err!("clip epsilon must be positive, got {}", self.clip_eps));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(config_err!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !self.entropy_n.is_finite() {
            return Err(config_err!("entropy multiplier must be finite"));
        }
        if let Some(w) = &self.level_weights {
            if w.is_empty() || w.iter().any(|x| !x.is_finite()) {
                return Err(config_err!("level weights must be finite and non-empty"));
            }
        }
        Ok(())
    }

    pub fn weights(&self, levels: usize) -> Result<Vec<f64>> {
        match &self.level_weights {
            Some(w) if w.len() == levels => Ok(w.clone()),
            Some(w) => Err(config_err!("{} level weights for {levels} levels", w.len())),
            None => Ok(vec![1.0 / levels as f64; levels]),
        }
    }
}

/// One sampled sequence. Per-token, per-level arrays are indexed `[t][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub group: u32,
    pub reward: f64,
    pub actions: Vec<Vec<u32>>,
    pub actor_logp: Vec<Vec<f64>>,
    pub old_logp: Vec<Vec<f64>>,
    /// Inference-engine probability of the level-0 action.
    pub sampler_prob: Vec<f64>,
    /// Training-engine probability of the same action.
    pub actor_prob: Vec<f64>,
    /// Mean per-token policy entropy.
    pub entropy: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.actions.first().map_or(0, |a| a.len())
    }
}

/// `(r − mean)/(std + 1e−8)` per group, with the population standard deviation.
pub fn group_advantages(rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rewards
        .iter()
        .enumerate()
        .map(|(g, rs)| {
            if rs.len() < 2 {
                return Err(config_err!("group {g} has {} rollouts, need at least 2", rs.len()));
            }
            let n = rs.len() as f64;
            let mean = rs.iter().sum::<f64>() / n;
            let std = math::sqrt(rs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n);
            Ok(rs.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
        })
        .collect()
}

/// Advantages aligned with `rollouts`, grouped by [`Rollout::group`].
pub fn rollout_advantages(rollouts: &[Rollout]) -> Result<Vec<f64>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in rollouts.iter().enumerate() {
        groups.entry(r.group).or_default().push(i);
    }
    if let Some((k, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(config_err!("group {k} has a single rollout"));
    }
    let rewards: Vec<Vec<f64>> = groups.values().map(|m| m.iter().map(|&i| rollouts[i].reward).collect()).collect();
    let mut out = vec![0.0; rollouts.len()];
    for (members, a) in groups.values().zip(group_advantages(&rewards)?) {
        for (&i, v) in members.iter().zip(a) {
            out[i] = v;
        }
    }
    Ok(out)
}

fn check_rollout(i: usize, r: &Rollout, levels: usize) -> Result<()> {
    let shape_ok = |x: &[Vec<f64>]| x.len() == r.len() && x.iter().all(|t| t.len() == levels);
    if r.actions.iter().any(|a| a.len() != levels) || !shape_ok(&r.actor_logp) || !shape_ok(&r.old_logp) {
        return Err(config_err!("rollout {i} does not carry {levels} levels for every token"));
    }
    for (t, lp) in r.old_logp.iter().enumerate() {
        if let Some(l) = lp.iter().position(|v| !v.is_finite()) {
            return Err(input_err!("rollout {i} token {t} level {l}: old probability is zero"));
        }
    }
    Ok(())
}

/// Mean over tokens of `Σ_l w_l·min(r·Â, clip(r)·Â)` with `r = exp(actor − old)`.
///
/// Only rollouts with `keep[i]` contribute; `None` keeps all.
pub fn grpo_gen_loss(rollouts: &[Rollout], adv: &[f64], cfg: &GrpoConfig, keep: Option<&[bool]>) -> Result<f64> {
    cfg.validate()?;
    if adv.len() != rollouts.len() {
        return Err(config_err!("{} advantages for {} rollouts", adv.len(), rollouts.len()));
    }
    let levels = rollouts.iter().map(Rollout::levels).max().unwrap_or(0);
    let w = cfg.weights(levels.max(1))?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (i, r) in rollouts.iter().enumerate() {
        check_rollout(i, r, levels)?;
        if keep.is_some_and(|k| !k[i]) {
            continue;
        }
        for t in 0..r.len() {
            for (l, &wl) in w.iter().enumerate() {
                let ratio = math::exp(r.actor_logp[t][l] - r.old_logp[t][l]);
                total += wl * clipped_term(ratio, adv[i], cfg.clip_eps).0;
            }
        }
        tokens += r.len();
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

/// Tape version of [`grpo_gen_loss`] with actor log-probs taken from
/// `logits[i][l]` (`T_i × K_l`). Returns `None` when nothing is kept.
pub fn gen_objective_graph(
    g: &mut Graph,
    logits: &[Vec<Var>],
    rollouts: &[Rollout],
    adv: &[f64],
    cfg: &GrpoConfig,
    keep: Option<&[bool]>,
) -> Result<Option<Var>> {
    cfg.validate()?;
    let levels = rollouts.iter().map(Rollout::levels).max().unwrap_or(0);
    let w = cfg.weights(levels.max(1))?;
    let kept: Vec<usize> = (0..rollouts.len()).filter(|&i| keep.is_none_or(|k| k[i])).collect();
    let tokens: usize = kept.iter().map(|&i| rollouts[i].len()).sum();
    if tokens == 0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for &i in &kept {
        let r = &rollouts[i];
        check_rollout(i, r, levels)?;
        for (l, &wl) in w.iter().enumerate() {
            let actions = r.actions.iter().map(|a| a[l] as usize).collect();
            let lp = g.pick_log_softmax(logits[i][l], actions);
            let old = g.constant(Tensor::from_vec(r.len(), 1, r.old_logp.iter().map(|x| x[l]).collect()));
            let diff = g.sub(lp, old);
            let ratio = g.exp(diff);
            let surr = g.clipped_surrogate(ratio, vec![adv[i]; r.len()], cfg.clip_eps);
            let term = g.weighted_sum(surr, vec![wl / tokens as f64; r.len()]);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropReason {
    Entropy { entropy: f64, threshold: f64 },
    Divergence { token: usize, diff: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub keep: Vec<bool>,
    pub reasons: Vec<Vec<DropReason>>,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub threshold: f64,
}

impl FilterReport {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Applies the entropy-outlier and divergence rules. Statistics use the
/// population standard deviation over the given batch.
pub fn filter_sequences(rollouts: &[Rollout], cfg: &GrpoConfig) -> Result<FilterReport> {
    cfg.validate()?;
    if rollouts.len() < 2 {
        return Err(config_err!("entropy statistics need at least 2 sequences"));
    }
    let n = rollouts.len() as f64;
    let mean = rollouts.iter().map(|r| r.entropy).sum::<f64>() / n;
    let std = math::sqrt(rollouts.iter().map(|r| (r.entropy - mean) * (r.entropy - mean)).sum::<f64>() / n);
    let threshold = mean + cfg.entropy_n * std;
    let mut keep = vec![true; rollouts.len()];
    let mut reasons = vec![Vec::new(); rollouts.len()];
    for (i, r) in rollouts.iter().enumerate() {
        if r.sampler_prob.len() != r.actor_prob.len() {
            return Err(config_err!("rollout {i} has mismatched sampler/actor probability lists"));
        }
        if r.entropy > threshold {
            reasons[i].push(DropReason::Entropy { entropy: r.entropy, threshold });
        }
        let worst = r
            .sampler_prob
            .iter()
            .zip(&r.actor_prob)
            .map(|(s, a)| math::abs(s - a))
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (t, d)| match best {
                Some((_, b)) if b >= d => best,
                _ => Some((t, d)),
            });
        if let Some((token, diff)) = worst {
            if diff > cfg.delta {
                reasons[i].push(DropReason::Divergence { token, diff });
            }
        }
        keep[i] = reasons[i].is_empty();
    }
    Ok(FilterReport { keep, reasons, entropy_mean: mean, entropy_std: std, threshold })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UndObjective {
    pub value: f64,
    pub skipped: bool,
    pub filter: FilterReport,
}

/// Filtered single-level objective for understanding rollouts.
pub fn grpo_und_loss(rollouts: &[Rollout], adv: &[f64], cfg: &GrpoConfig) -> Result<UndObjective> {
    let filter = filter_sequences(rollouts, cfg)?;
    let single = single_level(rollouts);
    let cfg1 = GrpoConfig { level_weights: Some(vec![1.0]), ..cfg.clone() };
    if filter.kept() == 0 {
        return Ok(UndObjective { value: 0.0, skipped: true, filter });
    }
    let value = grpo_gen_loss(&single, adv, &cfg1, Some(&filter.keep))?;
    Ok(UndObjective { value, skipped: false, filter })
}

/// Keeps only level 0 of every token.
pub fn single_level(rollouts: &[Rollout]) -> Vec<Rollout> {
    let first = |x: &Vec<Vec<f64>>| x.iter().map(|t| t[..1.min(t.len())].to_vec()).collect();
    rollouts
        .iter()
        .map(|r| Rollout {
            actions: r.actions.iter().map(|a| a[..1.min(a.len())].to_vec()).collect(),
            actor_logp: first(&r.actor_logp),
            old_logp: first(&r.old_logp),
            ..r.clone()
        })
        .collect()
}

/// Fraction of positions where `output` matches `pattern`, over the longer length.
pub fn synthetic_reward(output: &[u32], pattern: &[u32]) -> f64 {
    let denom = output.len().max(pattern.len());
    if output.is_empty() || denom == 0 {
        return 0.0;
    }
    let hits = output.iter().zip(pattern).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

pub fn synthetic_rewards(outputs: &[Vec<u32>], pattern: &[u32]) -> Vec<f64> {
    outputs.iter().map(|o| synthetic_reward(o, pattern)).collect()
}

/// `[t][l]` table of `log softmax(logits[l])[t][actions[t][l]]`.
pub fn log_prob_table(logits: &[Tensor], actions: &[Vec<u32>]) -> Vec<Vec<f64>> {
    actions
        .iter()
        .enumerate()
        .map(|(t, a)| {
            a.iter()
                .zip(logits)
                .map(|(&k, lg)| {
                    let row = lg.row(t);
                    row[k as usize] - math::log_sum_exp(row)
                })
                .collect()
        })
        .collect()
}

/// Mean policy entropy of softmax rows.
pub fn mean_entropy(logits: &Tensor) -> f64 {
    if logits.rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..logits.rows {
        let p = math::softmax(logits.row(r));
        total -= p.iter().filter(|&&x| x > 0.0).map(|&x| x * math::ln(x)).sum::<f64>();
    }
    total / logits.rows as f64
}

impl core::fmt::Display for DropReason {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DropReason::Entropy { entropy, threshold } => write!(f, "entropy {entropy:.4} > {threshold:.4}"),
            DropReason::Divergence { token, diff } => write!(f, "token {token} probability gap {diff:.4}"),
        }
    }
}

/// Joins drop reasons for logs.
pub fn describe(reasons: &[DropReason]) -> alloc::string::String {
    reasons.iter().map(|r| format!("{r}")).collect::<Vec<_>>().join("; ")
}

#[cfg(test)]
mod tests;
