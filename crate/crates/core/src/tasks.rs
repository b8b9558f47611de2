//! Downstream adapters: diagnosis classification, retrieval scoring, VQA,
//! report generation, and their fine-tuning.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::corpus::{label_mask, Dataset, Split, Study, VqaItem};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::masks::MaskScheme;
use crate::model::{self, add_vqa_head, run_on_tape, Example, ModelRun, NUM_LABELS};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Mat, ModelParams};
use crate::pretrain::{corrupt_mlm, sample_irm_for, LabelIndex, MlmPolicy};
use crate::seed::rng_for;
use crate::tensor::{logistic, softmax_rows_inplace, Gradients, Tape, Var};
use crate::vocab::{is_reserved, report_ids, Vocabulary, MASK, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Cls,
    Retrieval,
    Vqa,
    Gen,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Retrieval => "retrieval",
            Task::Vqa => "vqa",
            Task::Gen => "gen",
        }
    }

    /// Mask used for fine-tuning and inference. Generation is always S2S.
    pub fn scheme(self, cfg: &RunConfig) -> MaskScheme {
        match self {
            Task::Gen => MaskScheme::S2S,
            _ => cfg.scheme.understanding_mask(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "retrieval" => Ok(Task::Retrieval),
            "vqa" => Ok(Task::Vqa),
            "gen" => Ok(Task::Gen),
            _ => Err(Error::Invalid(format!(
                "unknown task '{s}' (cls, retrieval, vqa, gen)"
            ))),
        }
    }
}

/// A model ready for inference: configuration plus parameters.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub cfg: &'a RunConfig,
    pub params: &'a ModelParams,
}

impl<'a> Model<'a> {
    pub fn new(cfg: &'a RunConfig, params: &'a ModelParams) -> Self {
        Self { cfg, params }
    }

    fn understanding(&self) -> MaskScheme {
        self.cfg.scheme.understanding_mask()
    }

    /// Runs the full (unsampled) grid in eval mode and applies `head`.
    fn eval<T>(
        &self,
        image: &ImageGrid,
        tokens: &[usize],
        scheme: MaskScheme,
        head: impl FnOnce(&mut Tape<'a>, &ModelRun) -> Result<T>,
    ) -> Result<T> {
        let mut tape = Tape::with_params(self.params);
        let example = Example {
            image,
            visual_subset: None,
            tokens,
            scheme,
        };
        let run = run_on_tape(&mut tape, &self.cfg.model, &example, None, false)?;
        head(&mut tape, &run)
    }

    /// Per-label sigmoid probabilities, in finding-index order.
    pub fn classify(&self, image: &ImageGrid, tokens: &[usize]) -> Result<[f64; NUM_LABELS]> {
        self.eval(image, tokens, self.understanding(), |tape, run| {
            let z = model::classify_logits(tape, run)?;
            let mut out = [0.0; NUM_LABELS];
            for (o, &v) in out.iter_mut().zip(tape.value(z).iter()) {
                *o = logistic(v);
            }
            Ok(out)
        })
    }

    /// Match probability of an image-report pair.
    pub fn score_pair(&self, image: &ImageGrid, tokens: &[usize]) -> Result<f64> {
        self.eval(image, tokens, self.understanding(), |tape, run| {
            let z = model::match_logit(tape, run)?;
            Ok(logistic(tape.scalar(z)))
        })
    }

    /// Softmax over the answer table.
    pub fn answer(&self, image: &ImageGrid, question: &[usize]) -> Result<Vec<f64>> {
        self.eval(image, question, self.understanding(), |tape, run| {
            let z = model::vqa_logits(tape, run)?;
            let mut p = tape.value(z).clone();
            softmax_rows_inplace(&mut p);
            Ok(p.iter().copied().collect())
        })
    }

    /// MLM-head logits at content position `pos` of `tokens` under S2S.
    pub fn s2s_logits(&self, image: &ImageGrid, tokens: &[usize], pos: usize) -> Result<Vec<f64>> {
        self.eval(image, tokens, MaskScheme::S2S, |tape, run| {
            let z = model::mlm_logits(tape, run, &[pos])?;
            Ok(tape.value(z).iter().copied().collect())
        })
    }

    /// Greedy decoding: append MASK, predict it, replace, until SEP or `max_len`.
    pub fn generate(&self, image: &ImageGrid, max_len: usize) -> Result<Generation> {
        if max_len == 0 || max_len > self.cfg.model.max_len {
            return Err(Error::Invalid(format!(
                "decode length must lie in 1..={}, got {max_len}",
                self.cfg.model.max_len
            )));
        }
        let mut ids: Vec<usize> = Vec::new();
        for _ in 0..max_len {
            let mut input = ids.clone();
            input.push(MASK);
            let logits = self.s2s_logits(image, &input, ids.len())?;
            let next = greedy_pick(&logits);
            if next == SEP {
                return Ok(Generation {
                    ids,
                    stop: StopReason::Sep,
                });
            }
            ids.push(next);
        }
        Ok(Generation {
            ids,
            stop: StopReason::Length,
        })
    }

    /// Teacher-forced negative log-likelihood of every reference token
    /// (terminating SEP included) under the S2S mask.
    pub fn token_nlls(&self, image: &ImageGrid, reference: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(reference.len());
        for (j, &target) in reference.iter().enumerate() {
            let mut input = reference[..j].to_vec();
            input.push(MASK);
            let logits = self.s2s_logits(image, &input, j)?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(lse - logits[target]);
        }
        Ok(out)
    }
}

/// Argmax over content tokens and SEP; ties go to the lowest id.
fn greedy_pick(logits: &[f64]) -> usize {
    let mut best = SEP;
    for (id, &v) in logits.iter().enumerate() {
        if (is_reserved(id) && id != SEP) || v.is_nan() {
            continue;
        }
        if v > logits[best] {
            best = id;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Sep,
    Length,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Sep => "sep",
            StopReason::Length => "length",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub stop: StopReason,
}

/// Retrieval query direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ReportToImage,
    ImageToReport,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ReportToImage => "r2i",
            Direction::ImageToReport => "i2r",
        }
    }
}

pub const POOL_SIZE: usize = 100;

/// A query (study index) and its candidate pool over the same study list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalTrial {
    pub query: usize,
    pub candidates: Vec<usize>,
    /// Candidate shares the full positive-label set of the query.
    pub positive: Vec<bool>,
}

/// One trial per study: its true partner plus `pool - 1` other studies.
pub fn build_trials(masks: &[u16], pool: usize, seed: u64) -> Result<Vec<RetrievalTrial>> {
    if pool == 0 {
        return Err(Error::Invalid("retrieval pool must be non-empty".into()));
    }
    if pool > masks.len() {
        return Err(Error::Data(format!(
            "pool of {pool} candidates needs at least that many studies, have {}",
            masks.len()
        )));
    }
    let mut trials = Vec::with_capacity(masks.len());
    for q in 0..masks.len() {
        let mut rng = rng_for(seed, "trial", q as u64);
        let mut others: Vec<usize> = (0..masks.len()).filter(|&i| i != q).collect();
        others.shuffle(&mut rng);
        let mut candidates: Vec<usize> = others.into_iter().take(pool - 1).collect();
        candidates.push(q);
        candidates.sort_unstable();
        let positive = candidates.iter().map(|&c| masks[c] == masks[q]).collect();
        trials.push(RetrievalTrial {
            query: q,
            candidates,
            positive,
        });
    }
    Ok(trials)
}

/// Candidates sorted by descending score, ties by ascending candidate id.
/// Returns `(candidate, positive)` in rank order.
pub fn run_trial(trial: &RetrievalTrial, score: impl Fn(usize) -> f64) -> Vec<(usize, bool)> {
    let mut ranked: Vec<(usize, bool, f64)> = trial
        .candidates
        .iter()
        .zip(&trial.positive)
        .map(|(&c, &p)| (c, p, score(c)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(c, p, _)| (c, p)).collect()
}

/// Match probabilities `scores[image][report]` over a study list.
pub fn score_matrix(model: &Model<'_>, studies: &[&Study], vocab: &Vocabulary) -> Result<Mat> {
    let seqs: Vec<Vec<usize>> = studies
        .iter()
        .map(|s| report_ids(&s.report, vocab, model.cfg.model.max_len))
        .collect();
    let mut m = Mat::zeros((studies.len(), studies.len()));
    for (i, s) in studies.iter().enumerate() {
        for (j, seq) in seqs.iter().enumerate() {
            m[[i, j]] = model.score_pair(&s.image, seq)?;
        }
    }
    Ok(m)
}

/// Ranked positivity flags of every trial in one direction.
pub fn retrieval_flags(trials: &[RetrievalTrial], scores: &Mat, dir: Direction) -> Vec<Vec<bool>> {
    trials
        .iter()
        .map(|t| {
            run_trial(t, |c| match dir {
                Direction::ReportToImage => scores[[c, t.query]],
                Direction::ImageToReport => scores[[t.query, c]],
            })
            .into_iter()
            .map(|(_, p)| p)
            .collect()
        })
        .collect()
}

/// Sorted distinct answers of the training-split VQA items.
pub fn answer_table(data: &Dataset) -> Vec<String> {
    let set: BTreeSet<&str> = data
        .vqa_split(Split::Train)
        .into_iter()
        .map(|q| q.answer.as_str())
        .collect();
    set.into_iter().map(str::to_string).collect()
}

pub fn question_ids(item: &VqaItem, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    report_ids(&item.question, vocab, max_len)
}

/// Outcome of a fine-tuning run.
pub struct FinetuneOutput {
    pub params: ModelParams,
    pub scheme: MaskScheme,
    pub epoch_losses: Vec<f64>,
}

/// Parameters trained in head-only mode.
fn head_prefix(task: Task) -> &'static str {
    match task {
        Task::Cls => "head.cls.",
        Task::Retrieval => "head.match.",
        Task::Vqa => "head.vqa.",
        Task::Gen => "head.mlm.",
    }
}

/// Fine-tunes `params` for `task` on the training split. Model shape and
/// pre-training scheme come from `cfg` as well as the training settings.
/// `train.limit` (when non-zero) caps the studies or VQA items used.
pub fn finetune(
    task: Task,
    data: &Dataset,
    mut params: ModelParams,
    cfg: &RunConfig,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let mcfg = &cfg.model;
    model::validate_shapes(&params, mcfg)?;
    if params.require("emb.token")?.nrows() != data.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} tokens, dataset has {}",
            params.require("emb.token")?.nrows(),
            data.vocab.len()
        )));
    }
    let scheme = task.scheme(cfg);
    let studies = data.split(Split::Train);
    let answers = answer_table(data);
    let vqa_items = data.vqa_split(Split::Train);
    let limit = |n: usize| if cfg.train_limit == 0 { n } else { n.min(cfg.train_limit) };
    let n_items = match task {
        Task::Vqa => {
            if vqa_items.is_empty() || answers.is_empty() {
                return Err(Error::Data("dataset has no training VQA items".into()));
            }
            if params.get("head.vqa.weight").map(|w| w.ncols()) != Some(answers.len()) {
                add_vqa_head(&mut params, mcfg, answers.len(), &mut rng_for(cfg.seed, "vqa-head", 0));
            }
            limit(vqa_items.len())
        }
        _ => {
            if studies.is_empty() {
                return Err(Error::Data("dataset has no training studies".into()));
            }
            limit(studies.len())
        }
    };
    let index = LabelIndex::new(&studies);
    if task == Task::Retrieval && index.distinct_sets() < 2 {
        return Err(Error::NoValidNegative);
    }
    let seqs: Vec<Vec<usize>> = studies
        .iter()
        .map(|s| report_ids(&s.report, &data.vocab, mcfg.max_len))
        .collect();
    let policy = MlmPolicy::from_config(cfg)?;

    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let frozen: Vec<String> = params
        .names()
        .filter(|n| {
            (cfg.head_only && !n.starts_with(head_prefix(task)))
                || (cfg.vis_freeze && n.starts_with("vis."))
        })
        .map(str::to_string)
        .collect();
    opt.freeze(frozen);

    let purpose = format!("finetune-{}", task.name());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("{purpose}-shuffle"), epoch as u64));
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let mut grads = Gradients::default();
            let mut counted = 0usize;
            let mut batch_losses: Vec<(Gradients, f64)> = Vec::with_capacity(batch.len());
            for (i, &item) in batch.iter().enumerate() {
                let mut rng = rng_for(cfg.seed, &purpose, (step * cfg.batch + i) as u64);
                let mut drop_rng = rng_for(cfg.seed, &format!("{purpose}-dropout"), (step * cfg.batch + i) as u64);
                let mut tape = Tape::with_params(&params);
                let dropout: Option<&mut dyn rand::RngCore> =
                    if mcfg.dropout > 0.0 { Some(&mut drop_rng) } else { None };
                let loss: Option<Var> = match task {
                    Task::Cls => {
                        let s = studies[item];
                        let ex = Example { image: &s.image, visual_subset: None, tokens: &seqs[item], scheme };
                        let run = run_on_tape(&mut tape, mcfg, &ex, dropout, false)?;
                        let z = model::classify_logits(&mut tape, &run)?;
                        let y: Vec<f64> = s.labels.iter().map(|&b| f64::from(b)).collect();
                        Some(tape.bce_logits(z, &y)?)
                    }
                    Task::Retrieval => {
                        let pair = sample_irm_for(item, &index, &mut rng)?;
                        let ex = Example {
                            image: &studies[pair.image].image,
                            visual_subset: None,
                            tokens: &seqs[pair.report],
                            scheme,
                        };
                        let run = run_on_tape(&mut tape, mcfg, &ex, dropout, false)?;
                        let z = model::match_logit(&mut tape, &run)?;
                        Some(tape.bce_logits(z, &[f64::from(pair.y)])?)
                    }
                    Task::Vqa => {
                        let q = vqa_items[item];
                        let s = data
                            .study(&q.id)
                            .ok_or_else(|| Error::Data(format!("VQA item refers to unknown study '{}'", q.id)))?;
                        let target = answers.binary_search(&q.answer).expect("table built from train split");
                        let toks = question_ids(q, &data.vocab, mcfg.max_len);
                        let ex = Example { image: &s.image, visual_subset: None, tokens: &toks, scheme };
                        let run = run_on_tape(&mut tape, mcfg, &ex, dropout, false)?;
                        let z = model::vqa_logits(&mut tape, &run)?;
                        Some(tape.softmax_xent(z, &[target])?)
                    }
                    Task::Gen => {
                        let c = corrupt_mlm(&seqs[item], &policy, data.vocab.len(), &mut rng);
                        if c.targets.is_empty() {
                            None
                        } else {
                            let s = studies[item];
                            let ex = Example { image: &s.image, visual_subset: None, tokens: &c.tokens, scheme };
                            let run = run_on_tape(&mut tape, mcfg, &ex, dropout, false)?;
                            let z = model::mlm_logits(&mut tape, &run, &c.positions())?;
                            Some(tape.softmax_xent(z, &c.originals())?)
                        }
                    }
                };
                if let Some(l) = loss {
                    let v = tape.scalar(l);
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("non-finite {task} loss at step {step}")));
                    }
                    batch_losses.push((tape.backward(l)?, v));
                    counted += 1;
                }
            }
            for (g, v) in &batch_losses {
                grads.accumulate(g, 1.0 / counted as f64);
                epoch_sum += v;
                epoch_n += 1;
            }
            if counted > 0 {
                opt.step(&mut params, &grads);
            }
            step += 1;
        }
        if let Err(name) = params.all_finite() {
            return Err(Error::Numeric(format!("parameter '{name}' diverged in epoch {epoch}")));
        }
        epoch_losses.push(epoch_sum / epoch_n.max(1) as f64);
    }
    Ok(FinetuneOutput {
        params,
        scheme,
        epoch_losses,
    })
}

/// Studies of a split whose label set appears at least once (retrieval helper).
pub fn label_masks(studies: &[&Study]) -> Vec<u16> {
    studies.iter().map(|s| label_mask(&s.labels)).collect()
}
