//! Command implementations behind the `medvill` binary, plus the task
//! evaluations they share with the test suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SchemeSelector};
use crate::corpus::{
    gen_dataset, load_dataset, round_trip_failures, write_dataset, Dataset,
    FindingSpec, QuestionType, Split, SplitCounts, NUM_FINDINGS,
};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::masks::MaskScheme;
use crate::metrics::{
    bleu4, bootstrap, clinical_efficacy, micro_auroc, micro_f1, perplexity, ranking_metrics,
    MetricReport, BOOTSTRAP_RESAMPLES, F1_THRESHOLD,
};
use crate::model::{run_on_tape, Example};
use crate::params::Mat;
use crate::pretrain::{loss_log_csv, pretrain};
use crate::tasks::{
    answer_table, build_trials, finetune, label_masks, question_ids, retrieval_flags,
    score_matrix, Direction, Model, StopReason, Task, POOL_SIZE,
};
use crate::tensor::Tape;
use crate::vocab::{detokenize, report_ids, Vocabulary};

/// Ranking cutoff for Hit/Recall/Precision.
pub const RANK_K: usize = 5;
/// Default decode budget used by generation evaluation.
pub const DEFAULT_DECODE_LEN: usize = 64;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Settings shared by every evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub seed: u64,
    pub resamples: usize,
    pub decode_len: usize,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            resamples: BOOTSTRAP_RESAMPLES,
            decode_len: DEFAULT_DECODE_LEN,
        }
    }
}

/// Evaluates `model` on the test split.
pub fn evaluate(task: Task, data: &Dataset, model: &Model<'_>, opts: &EvalOptions) -> Result<MetricReport> {
    match task {
        Task::Cls => eval_cls(data, model, opts),
        Task::Retrieval => eval_retrieval(data, model, opts),
        Task::Vqa => eval_vqa(data, model, opts),
        Task::Gen => eval_gen(data, model, opts),
    }
}

fn test_studies(data: &Dataset) -> Result<Vec<&crate::corpus::Study>> {
    let test = data.split(Split::Test);
    if test.len() < 2 {
        return Err(Error::Data("evaluation needs at least 2 test studies".into()));
    }
    Ok(test)
}

type ClsItem = ([f64; NUM_FINDINGS], [bool; NUM_FINDINGS]);

fn pooled(items: &[&ClsItem]) -> (Vec<f64>, Vec<bool>) {
    let scores = items.iter().flat_map(|i| i.0).collect();
    let truths = items.iter().flat_map(|i| i.1).collect();
    (scores, truths)
}

fn eval_cls(data: &Dataset, model: &Model<'_>, opts: &EvalOptions) -> Result<MetricReport> {
    let mut items: Vec<ClsItem> = Vec::new();
    for s in test_studies(data)? {
        let ids = report_ids(&s.report, &data.vocab, model.cfg.model.max_len);
        let p = model.classify(&s.image, &ids)?;
        items.push((p, s.labels.map(|b| b != 0)));
    }
    let refs: Vec<&ClsItem> = items.iter().collect();
    let auroc = |it: &[&ClsItem]| {
        let (s, t) = pooled(it);
        micro_auroc(&s, &t)
    };
    let f1 = |it: &[&ClsItem]| {
        let (s, t) = pooled(it);
        let preds: Vec<bool> = s.iter().map(|&v| v >= F1_THRESHOLD).collect();
        Ok(micro_f1(&preds, &t))
    };
    let mut report = MetricReport::default();
    report.push("auroc", auroc(&refs)?, bootstrap(&items, opts.resamples, opts.seed, auroc)?);
    report.push("f1", f1(&refs)?, bootstrap(&items, opts.resamples, opts.seed, f1)?);
    Ok(report)
}

fn eval_retrieval(data: &Dataset, model: &Model<'_>, opts: &EvalOptions) -> Result<MetricReport> {
    let test = test_studies(data)?;
    let trials = build_trials(&label_masks(&test), POOL_SIZE, opts.seed)?;
    let scores = score_matrix(model, &test, &data.vocab)?;
    let mut report = MetricReport::default();
    for dir in [Direction::ReportToImage, Direction::ImageToReport] {
        let flags = retrieval_flags(&trials, &scores, dir);
        let refs: Vec<&Vec<bool>> = flags.iter().collect();
        let metric = |it: &[&Vec<bool>]| -> Result<crate::metrics::RankingMetrics> {
            let owned: Vec<Vec<bool>> = it.iter().map(|v| v.to_vec()).collect();
            ranking_metrics(&owned, RANK_K)
        };
        let point = metric(&refs)?;
        let parts: [(&str, fn(&crate::metrics::RankingMetrics) -> f64, f64); 4] = [
            ("mrr", |m| m.mrr, point.mrr),
            ("hit@5", |m| m.hit, point.hit),
            ("recall@5", |m| m.recall, point.recall),
            ("precision@5", |m| m.precision, point.precision),
        ];
        for (name, get, value) in parts {
            let boot = bootstrap(&flags, opts.resamples, opts.seed, |it| metric(it).map(|m| get(&m)))?;
            report.push(&format!("{}.{name}", dir.name()), value, boot);
        }
    }
    Ok(report)
}

fn accuracy_of(items: &[&(bool, QuestionType)], only: Option<QuestionType>) -> Result<f64> {
    let picked: Vec<bool> = items
        .iter()
        .filter(|(_, q)| only.is_none_or(|o| o == *q))
        .map(|(c, _)| *c)
        .collect();
    if picked.is_empty() {
        return Err(Error::Invalid("no questions of this type".into()));
    }
    Ok(picked.iter().filter(|&&c| c).count() as f64 / picked.len() as f64)
}

fn eval_vqa(data: &Dataset, model: &Model<'_>, opts: &EvalOptions) -> Result<MetricReport> {
    let table = answer_table(data);
    let width = model.params.get("head.vqa.weight").map(|w| w.ncols());
    if width != Some(table.len()) {
        return Err(Error::Checkpoint(format!(
            "tensor 'head.vqa.weight' must cover {} answers (found {:?}); fine-tune with --task vqa first",
            table.len(),
            width
        )));
    }
    let questions = data.vqa_split(Split::Test);
    if questions.len() < 2 {
        return Err(Error::Data("evaluation needs at least 2 test questions".into()));
    }
    let mut items = Vec::with_capacity(questions.len());
    let mut unseen = 0usize;
    for q in questions {
        let s = data
            .study(&q.id)
            .ok_or_else(|| Error::Data(format!("VQA item refers to unknown study '{}'", q.id)))?;
        let probs = model.answer(&s.image, &question_ids(q, &data.vocab, model.cfg.model.max_len))?;
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
        let gold = table.binary_search(&q.answer).ok();
        unseen += usize::from(gold.is_none());
        items.push((gold == Some(best), q.qtype));
    }
    let refs: Vec<&(bool, QuestionType)> = items.iter().collect();
    let mut report = MetricReport::default();
    for (name, only) in [
        ("accuracy", None),
        ("closed.accuracy", Some(QuestionType::Closed)),
        ("open.accuracy", Some(QuestionType::Open)),
    ] {
        let Ok(value) = accuracy_of(&refs, only) else { continue };
        let boot = bootstrap(&items, opts.resamples, opts.seed, |it| accuracy_of(it, only))?;
        report.push(name, value, boot);
    }
    if unseen > 0 {
        if let Some(e) = report.entries.first_mut() {
            e.note = Some(format!("{unseen} gold answers missing from the answer table"));
        }
    }
    Ok(report)
}

struct GenItem {
    nlls: Vec<f64>,
    generated: String,
    reference: String,
}

fn eval_gen(data: &Dataset, model: &Model<'_>, opts: &EvalOptions) -> Result<MetricReport> {
    let spec = FindingSpec::default();
    let decode_len = opts.decode_len.min(model.cfg.model.max_len);
    let mut items = Vec::new();
    for s in test_studies(data)? {
        let ids = report_ids(&s.report, &data.vocab, model.cfg.model.max_len);
        let nlls = model.token_nlls(&s.image, &ids)?;
        let g = model.generate(&s.image, decode_len)?;
        items.push(GenItem {
            nlls,
            generated: detokenize(&g.ids, &data.vocab),
            reference: detokenize(&ids, &data.vocab),
        });
    }
    let ppl = |it: &[&GenItem]| {
        let all: Vec<f64> = it.iter().flat_map(|i| i.nlls.iter().copied()).collect();
        perplexity(&all)
    };
    let texts = |it: &[&GenItem]| -> (Vec<String>, Vec<String>) {
        (
            it.iter().map(|i| i.generated.clone()).collect(),
            it.iter().map(|i| i.reference.clone()).collect(),
        )
    };
    let bleu = |it: &[&GenItem]| {
        let (h, r) = texts(it);
        bleu4(&h, &r, false)
    };
    let refs: Vec<&GenItem> = items.iter().collect();
    let mut report = MetricReport::default();
    report.push("perplexity", ppl(&refs)?, bootstrap(&items, opts.resamples, opts.seed, ppl)?);
    report.push("bleu4", bleu(&refs)?, bootstrap(&items, opts.resamples, opts.seed, bleu)?);
    let ce_parts: [(&str, fn(&crate::metrics::ClinicalEfficacy) -> f64); 4] = [
        ("ce.accuracy", |c| c.accuracy),
        ("ce.precision", |c| c.precision),
        ("ce.recall", |c| c.recall),
        ("ce.f1", |c| c.f1),
    ];
    for (name, get) in ce_parts {
        let metric = |it: &[&GenItem]| {
            let (h, r) = texts(it);
            clinical_efficacy(&h, &r, &spec).map(|c| get(&c))
        };
        report.push(name, metric(&refs)?, bootstrap(&items, opts.resamples, opts.seed, metric)?);
    }
    Ok(report)
}

/// `gen-data`: writes a corpus and checks it against the rule labeler.
pub fn cmd_gen_data(out: &Path, counts: SplitCounts, seed: u64) -> Result<String> {
    let spec = FindingSpec::default();
    let data = gen_dataset(counts, seed, &spec)?;
    let failures = round_trip_failures(&data.studies, &spec);
    if let Some(id) = failures.first() {
        return Err(Error::Data(format!(
            "{} studies fail the labeler round trip (first: {id})",
            failures.len()
        )));
    }
    write_dataset(&data, out)?;
    Ok(format!(
        "wrote {} studies and {} questions to {}",
        data.studies.len(),
        data.vqa.len(),
        out.display()
    ))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

/// `pretrain`: writes `out`, `out.epochN` after every epoch and `out.loss.csv`.
pub fn cmd_pretrain(config: &Path, data_dir: &Path, out: &Path) -> Result<String> {
    let cfg = load_config(config)?;
    let data = load_dataset(data_dir)?;
    let result = pretrain(&data, &cfg, None, |epoch, params| {
        Checkpoint::new(cfg.clone(), params.clone()).save(&with_suffix(out, &format!(".epoch{}", epoch + 1)))
    })?;
    Checkpoint::new(cfg.clone(), result.params).save(out)?;
    write_file(&with_suffix(out, ".loss.csv"), loss_log_csv(&result.log))?;
    Ok(format!(
        "pretrained {} steps with scheme {}; checkpoint {}",
        result.log.len(),
        cfg.scheme.name(),
        out.display()
    ))
}

/// `finetune`: starts from `ckpt` (or fresh parameters when absent). Training
/// settings come from `config` when given, otherwise from the checkpoint; the
/// checkpoint's pre-training scheme is always kept.
pub fn cmd_finetune(
    task: Task,
    ckpt: Option<&Path>,
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<String> {
    let loaded = ckpt.map(Checkpoint::load).transpose()?;
    let mut cfg = match (config, &loaded) {
        (Some(path), _) => load_config(path)?,
        (None, Some(c)) => c.config.clone(),
        (None, None) => {
            return Err(Error::Invalid("finetune needs --ckpt, --config or both".into()));
        }
    };
    if let Some(c) = &loaded {
        cfg.scheme = c.config.scheme;
    }
    let data = load_dataset(data_dir)?;
    let params = match loaded {
        Some(c) => c.params,
        None => crate::pretrain::initial_params(&cfg, data.vocab.len()),
    };
    let result = finetune(task, &data, params, &cfg)?;
    Checkpoint::new(cfg, result.params).save(out)?;
    let mut log = format!("task={task} mask={}\n", result.scheme.name().to_uppercase());
    for (i, l) in result.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "epoch={} loss={l:.6}", i + 1);
    }
    let _ = write!(log, "checkpoint {}", out.display());
    Ok(log)
}

/// `eval`: writes the report records to `out` and resamples to `out.resamples.csv`.
pub fn cmd_eval(
    task: Task,
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    compare: Option<&Path>,
    decode_len: usize,
) -> Result<MetricReport> {
    let data = load_dataset(data_dir)?;
    let a = Checkpoint::load(ckpt)?;
    let mut opts = EvalOptions::new(a.config.seed);
    opts.decode_len = decode_len;
    let mut report = evaluate(task, &data, &Model::new(&a.config, &a.params), &opts)?;
    if let Some(path) = compare {
        let b = Checkpoint::load(path)?;
        let other = evaluate(task, &data, &Model::new(&b.config, &b.params), &opts)?;
        report.compare(&other);
    }
    write_file(out, report.to_records())?;
    write_file(&with_suffix(out, ".resamples.csv"), report.resample_csv())?;
    Ok(report)
}

fn parse_split(split: &str) -> Result<Split> {
    split.parse().map_err(|_| Error::Invalid(format!("unknown split '{split}'")))
}

/// `generate`: one tab-separated line per study (`id`, stop reason, report).
pub fn cmd_generate(ckpt: &Path, data_dir: &Path, split: &str, max_len: usize, out: &Path) -> Result<String> {
    let split = parse_split(split)?;
    let data = load_dataset(data_dir)?;
    let c = Checkpoint::load(ckpt)?;
    let model = Model::new(&c.config, &c.params);
    let mut text = String::from("id\tstop_reason\treport\n");
    let studies = data.split(split);
    for s in &studies {
        let g = model.generate(&s.image, max_len)?;
        let _ = writeln!(text, "{}\t{}\t{}", s.id, g.stop.name(), detokenize(&g.ids, &data.vocab));
    }
    write_file(out, text)?;
    Ok(format!("generated {} reports into {}", studies.len(), out.display()))
}

/// Parses a `generate` output file into `(id, stop_reason, report)` rows.
pub fn read_generations(text: &str) -> Result<Vec<(String, StopReason, String)>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(stop), Some(report)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!("line {}: expected 3 tab-separated fields", n + 1)));
        };
        let stop = match stop {
            "sep" => StopReason::Sep,
            "length" => StopReason::Length,
            other => return Err(Error::Data(format!("line {}: unknown stop reason '{other}'", n + 1))),
        };
        rows.push((id.to_string(), stop, report.to_string()));
    }
    Ok(rows)
}

/// Attention of one head over a full (image, report) input.
pub struct AttentionExport {
    pub scheme: MaskScheme,
    pub weights: Mat,
    /// Mean attention each visual feature receives, on the feature grid.
    pub heat: ImageGrid,
}

/// Computes attention weights of `layer`/`head` (both 0-based).
pub fn attention_map(
    cfg: &RunConfig,
    params: &crate::params::ModelParams,
    image: &ImageGrid,
    tokens: &[usize],
    scheme: MaskScheme,
    layer: usize,
    head: usize,
) -> Result<AttentionExport> {
    if layer >= cfg.model.layers || head >= cfg.model.heads {
        return Err(Error::Invalid(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            cfg.model.layers, cfg.model.heads
        )));
    }
    let mut tape = Tape::with_params(params);
    let example = Example {
        image,
        visual_subset: None,
        tokens,
        scheme,
    };
    let run = run_on_tape(&mut tape, &cfg.model, &example, None, true)?;
    let weights = run.attention[layer][head].clone();
    let side = cfg.model.grid_side();
    let vis = run.layout.visual_range();
    let mut received: Vec<f64> = vis.clone().map(|c| weights.column(c).mean().unwrap_or(0.0)).collect();
    let max = received.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        received.iter_mut().for_each(|v| *v /= max);
    }
    let scale = cfg.model.vis_stride;
    let mut heat = ImageGrid::zeros(side * scale, side * scale);
    for y in 0..side * scale {
        for x in 0..side * scale {
            heat.set(y, x, received[(y / scale) * side + x / scale]);
        }
    }
    heat.quantize();
    Ok(AttentionExport {
        scheme,
        weights,
        heat,
    })
}

/// `export-attn`: writes `prefix.csv` (S x S) and `prefix.pgm`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_export_attn(
    ckpt: &Path,
    image: &Path,
    report: &str,
    vocab: &Vocabulary,
    layer: usize,
    head: usize,
    scheme: Option<MaskScheme>,
    prefix: &Path,
) -> Result<String> {
    let c = Checkpoint::load(ckpt)?;
    let img = ImageGrid::read_pgm(image)?;
    let size = c.config.model.image_size;
    if img.height() != size || img.width() != size {
        return Err(Error::Data(format!(
            "image is {}x{}, checkpoint expects {size}x{size}",
            img.height(),
            img.width()
        )));
    }
    let tokens = report_ids(report, vocab, c.config.model.max_len);
    let scheme = scheme.unwrap_or(match c.config.scheme {
        SchemeSelector::Fixed(s) => s,
        SchemeSelector::BiS2s => MaskScheme::S2S,
    });
    let map = attention_map(&c.config, &c.params, &img, &tokens, scheme, layer, head)?;
    let mut csv = String::new();
    for row in map.weights.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    write_file(&with_suffix(prefix, ".csv"), csv)?;
    map.heat.write_pgm(&with_suffix(prefix, ".pgm"))?;
    Ok(format!(
        "{}x{} attention ({} mask) written to {}.csv",
        map.weights.nrows(),
        map.weights.ncols(),
        scheme,
        prefix.display()
    ))
}

/// Loads the vocabulary stored with a corpus directory.
pub fn load_vocab(data_dir: &Path) -> Result<Vocabulary> {
    let path = data_dir.join("vocab.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Vocabulary::from_text(&text)
}

