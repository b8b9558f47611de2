//! Pre-training: masked language modeling, image-report matching with
//! label-aware negatives, and the training loop.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{RunConfig, SchemeSelector};
use crate::corpus::{label_mask, Dataset, Split, Study};
use crate::error::{Error, Result};
use crate::masks::{sample_scheme, MaskScheme, MixedSchedule};
use crate::model::{self, init_params, match_width_for, run_on_tape, Example};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ModelParams;
use crate::seed::rng_for;
use crate::tensor::{Tape, Var};
use crate::visual::sample_indices;
use crate::vocab::{is_reserved, report_ids, MASK, RESERVED, SEP};

/// Token corruption policy for masked language modeling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmPolicy {
    pub select_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    /// Whether the explicit SEP terminator may be selected.
    pub include_sep: bool,
}

impl Default for MlmPolicy {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            include_sep: true,
        }
    }
}

impl MlmPolicy {
    pub fn new(select_rate: f64, mask_prob: f64, random_prob: f64) -> Result<Self> {
        let p = Self {
            select_rate,
            mask_prob,
            random_prob,
            include_sep: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.mlm_rate, cfg.mlm_mask_prob, cfg.mlm_rand_prob)
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.mask_prob - self.random_prob
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.select_rate) {
            return Err(Error::Invalid(format!(
                "select rate must lie in [0,1), got {}",
                self.select_rate
            )));
        }
        if self.mask_prob < 0.0 || self.random_prob < 0.0 || self.keep_prob() < -1e-12 {
            return Err(Error::Invalid(
                "mask and random probabilities must be non-negative and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmTarget {
    pub position: usize,
    pub original: usize,
    pub action: MlmAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmCorruption {
    pub tokens: Vec<usize>,
    pub targets: Vec<MlmTarget>,
}

impl MlmCorruption {
    pub fn positions(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.position).collect()
    }

    pub fn originals(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.original).collect()
    }
}

/// Selects each eligible token with `select_rate`, then masks, randomizes or
/// keeps it. Reserved ids (other than SEP under `include_sep`) are never selected.
pub fn corrupt_mlm<R: Rng + ?Sized>(
    tokens: &[usize],
    policy: &MlmPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> MlmCorruption {
    let mut out = tokens.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in tokens.iter().enumerate() {
        let eligible = !is_reserved(id) || (policy.include_sep && id == SEP);
        if !eligible || rng.random::<f64>() >= policy.select_rate {
            continue;
        }
        let u: f64 = rng.random();
        let action = if u < policy.mask_prob {
            out[pos] = MASK;
            MlmAction::Mask
        } else if u < policy.mask_prob + policy.random_prob && vocab_size > RESERVED {
            out[pos] = rng.random_range(RESERVED..vocab_size);
            MlmAction::Random
        } else {
            MlmAction::Keep
        };
        targets.push(MlmTarget {
            position: pos,
            original: id,
            action,
        });
    }
    MlmCorruption {
        tokens: out,
        targets,
    }
}

/// MLM loss on the tape; `None` flags an empty target set (loss 0).
pub fn loss_mlm(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    tape.softmax_xent(logits, targets).map(Some)
}

/// Stable binary cross-entropy of a match logit against `y`.
pub fn loss_irm(tape: &mut Tape<'_>, logit: Var, y: u8) -> Result<Var> {
    tape.bce_logits(logit, &[f64::from(y)])
}

/// Positive-label sets of a study list, for negative sampling.
#[derive(Debug, Clone)]
pub struct LabelIndex {
    masks: Vec<u16>,
    counts: HashMap<u16, usize>,
}

impl LabelIndex {
    pub fn new(studies: &[&Study]) -> Self {
        let masks: Vec<u16> = studies.iter().map(|s| label_mask(&s.labels)).collect();
        let mut counts = HashMap::new();
        for &m in &masks {
            *counts.entry(m).or_insert(0) += 1;
        }
        Self { masks, counts }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn mask(&self, i: usize) -> u16 {
        self.masks[i]
    }

    pub fn distinct_sets(&self) -> usize {
        self.counts.len()
    }

    /// A study whose label set differs from `anchor`'s, uniformly.
    pub fn sample_negative<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<usize> {
        let m = self.masks[anchor];
        let valid = self.masks.len() - self.counts[&m];
        if valid == 0 {
            return Err(Error::NoValidNegative);
        }
        for _ in 0..64 {
            let j = rng.random_range(0..self.masks.len());
            if self.masks[j] != m {
                return Ok(j);
            }
        }
        let pick = rng.random_range(0..valid);
        Ok(self
            .masks
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != m)
            .nth(pick)
            .expect("counted")
            .0)
    }
}

/// `image` and `report` index the study list the [`LabelIndex`] was built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IrmExample {
    pub image: usize,
    pub report: usize,
    pub y: u8,
}

/// The anchor's true pair with probability 1/2, otherwise a label-aware negative.
pub fn sample_irm_for<R: Rng + ?Sized>(
    anchor: usize,
    index: &LabelIndex,
    rng: &mut R,
) -> Result<IrmExample> {
    if index.distinct_sets() < 2 {
        return Err(Error::NoValidNegative);
    }
    if rng.random::<bool>() {
        Ok(IrmExample {
            image: anchor,
            report: anchor,
            y: 1,
        })
    } else {
        Ok(IrmExample {
            image: anchor,
            report: index.sample_negative(anchor, rng)?,
            y: 0,
        })
    }
}

/// Uniform anchor, then [`sample_irm_for`].
pub fn sample_irm<R: Rng + ?Sized>(index: &LabelIndex, rng: &mut R) -> Result<IrmExample> {
    if index.is_empty() {
        return Err(Error::Invalid("no studies to sample from".into()));
    }
    let anchor = rng.random_range(0..index.len());
    sample_irm_for(anchor, index, rng)
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub scheme: MaskScheme,
    pub mlm_loss: f64,
    pub irm_loss: f64,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        self.mlm_loss + self.irm_loss
    }
}

pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,scheme,mlm_loss,irm_loss\n");
    for s in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.step,
            s.epoch,
            s.scheme.name(),
            s.mlm_loss,
            s.irm_loss
        );
    }
    out
}

/// Mean combined loss per epoch.
pub fn epoch_means(log: &[StepLog]) -> Vec<f64> {
    let epochs = log.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rows: Vec<f64> = log.iter().filter(|s| s.epoch == e).map(StepLog::total).collect();
            rows.iter().sum::<f64>() / rows.len().max(1) as f64
        })
        .collect()
}

pub struct PretrainOutput {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
}

struct ItemPlan {
    pair: IrmExample,
    visual: Vec<usize>,
    tokens: Vec<usize>,
    mlm: Option<MlmCorruption>,
}

fn scheme_for_step(selector: SchemeSelector, schedule: &MixedSchedule, seed: u64, step: usize) -> MaskScheme {
    match selector {
        SchemeSelector::Fixed(s) => s,
        SchemeSelector::BiS2s => sample_scheme(schedule, &mut rng_for(seed, "scheme", step as u64)),
    }
}

/// Fresh parameters for a pre-training run.
pub fn initial_params(cfg: &RunConfig, vocab_size: usize) -> ModelParams {
    let width = match cfg.scheme {
        SchemeSelector::Fixed(s) => match_width_for(s),
        SchemeSelector::BiS2s => 1,
    };
    init_params(&cfg.model, vocab_size, width, &mut rng_for(cfg.seed, "init", 0))
}

/// Runs pre-training over the training split. `on_epoch` receives the
/// parameters after every epoch (for checkpointing).
pub fn pretrain<F>(
    data: &Dataset,
    cfg: &RunConfig,
    init: Option<ModelParams>,
    mut on_epoch: F,
) -> Result<PretrainOutput>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    let studies = data.split(Split::Train);
    let index = LabelIndex::new(&studies);
    if index.distinct_sets() < 2 {
        return Err(Error::NoValidNegative);
    }
    let policy = MlmPolicy::from_config(cfg)?;
    let schedule = MixedSchedule::new(cfg.s2s_prob)?;
    let mcfg = &cfg.model;
    let vocab_size = data.vocab.len();
    let mut params = init.unwrap_or_else(|| initial_params(cfg, vocab_size));
    model::validate_shapes(&params, mcfg)?;
    let sequences: Vec<Vec<usize>> = studies
        .iter()
        .map(|s| report_ids(&s.report, &data.vocab, mcfg.max_len))
        .collect();
    let grid = mcfg.grid_capacity();
    let k = cfg.sample_k.min(grid);
    let used = match cfg.train_limit {
        0 => studies.len(),
        n => n.min(studies.len()),
    };

    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..used).collect();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch) {
            let scheme = scheme_for_step(cfg.scheme, &schedule, cfg.seed, step);
            let mut plans = Vec::with_capacity(batch.len());
            for (i, &anchor) in batch.iter().enumerate() {
                let mut rng = rng_for(cfg.seed, "item", (step * cfg.batch + i) as u64);
                let pair = sample_irm_for(anchor, &index, &mut rng)?;
                if pair.y == 0 && index.mask(pair.report) == index.mask(pair.image) {
                    return Err(Error::Numeric(format!(
                        "negative shares the anchor's label set at step {step}"
                    )));
                }
                let visual = sample_indices(grid, k, &mut rng)?;
                let tokens = sequences[pair.report].clone();
                let mlm = (pair.y == 1)
                    .then(|| corrupt_mlm(&tokens, &policy, vocab_size, &mut rng))
                    .filter(|c| !c.targets.is_empty());
                plans.push((plan_rng(cfg.seed, step, i), ItemPlan { pair, visual, tokens, mlm }));
            }
            let n_mlm = plans.iter().filter(|(_, p)| p.mlm.is_some()).count();
            let mut grads = crate::tensor::Gradients::default();
            let (mut mlm_sum, mut irm_sum) = (0.0, 0.0);
            for (mut drop_rng, plan) in plans {
                let mut tape = Tape::with_params(&params);
                let input_tokens = plan.mlm.as_ref().map_or(&plan.tokens, |c| &c.tokens);
                let example = Example {
                    image: &studies[plan.pair.image].image,
                    visual_subset: Some(&plan.visual),
                    tokens: input_tokens,
                    scheme,
                };
                let dropout: Option<&mut dyn rand::RngCore> =
                    if mcfg.dropout > 0.0 { Some(&mut drop_rng) } else { None };
                let run = run_on_tape(&mut tape, mcfg, &example, dropout, false)?;
                let logit = model::match_logit(&mut tape, &run)?;
                let irm = loss_irm(&mut tape, logit, plan.pair.y)?;
                irm_sum += tape.scalar(irm);
                let mut total = tape.scale(irm, 1.0 / batch.len() as f64);
                if let Some(c) = &plan.mlm {
                    let logits = model::mlm_logits(&mut tape, &run, &c.positions())?;
                    let mlm = loss_mlm(&mut tape, logits, &c.originals())?.expect("non-empty targets");
                    mlm_sum += tape.scalar(mlm);
                    let scaled = tape.scale(mlm, 1.0 / n_mlm as f64);
                    total = tape.add(total, scaled)?;
                }
                if !tape.scalar(total).is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {step}")));
                }
                grads.accumulate(&tape.backward(total)?, 1.0);
            }
            opt.step(&mut params, &grads);
            log.push(StepLog {
                step,
                epoch,
                scheme,
                mlm_loss: if n_mlm > 0 { mlm_sum / n_mlm as f64 } else { 0.0 },
                irm_loss: irm_sum / batch.len() as f64,
            });
            step += 1;
        }
        if let Err(name) = params.all_finite() {
            return Err(Error::Numeric(format!(
                "parameter '{name}' diverged by step {step}"
            )));
        }
        on_epoch(epoch, &params)?;
    }
    Ok(PretrainOutput { params, log })
}

fn plan_rng(seed: u64, step: usize, i: usize) -> crate::seed::Rng {
    rng_for(seed, "dropout", ((step as u64) << 20) | i as u64)
}
