//! Evaluation metrics, bootstrap resampling and Welch's t-test.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{rule_labeler, FindingSpec, NUM_FINDINGS};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vocab::split_words;

/// Ranking metrics at cutoff `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hit: f64,
    pub recall: f64,
    pub precision: f64,
}

/// `trials[t]` holds the positivity flags of trial `t` in ranked order.
pub fn ranking_metrics(trials: &[Vec<bool>], k: usize) -> Result<RankingMetrics> {
    if trials.is_empty() {
        return Err(Error::Invalid("ranking metrics need at least one trial".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("cutoff k must be positive".into()));
    }
    let mut m = RankingMetrics {
        mrr: 0.0,
        hit: 0.0,
        recall: 0.0,
        precision: 0.0,
    };
    for flags in trials {
        let total = flags.iter().filter(|&&f| f).count();
        let first = flags
            .iter()
            .position(|&f| f)
            .ok_or_else(|| Error::Invalid("trial without a positive candidate".into()))?;
        let top = flags.iter().take(k).filter(|&&f| f).count();
        m.mrr += 1.0 / (first + 1) as f64;
        m.hit += f64::from(u8::from(top > 0));
        m.recall += top as f64 / total as f64;
        m.precision += top as f64 / k as f64;
    }
    let n = trials.len() as f64;
    m.mrr /= n;
    m.hit /= n;
    m.recall /= n;
    m.precision /= n;
    Ok(m)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half, via average ranks.
pub fn micro_auroc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::Invalid("scores and truths differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in AUROC".into()));
    }
    let n_pos = truths.iter().filter(|&&t| t).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUROC undefined: only one class present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // count negatives below, ties at half weight
    let mut wins = 0.0;
    let mut i = 0;
    let mut neg_below = 0usize;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&x| truths[x]).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Pooled confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(preds: &[bool], truths: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in preds.iter().zip(truths) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

pub const F1_THRESHOLD: f64 = 0.5;

/// Micro F1 of thresholded predictions.
pub fn micro_f1(preds: &[bool], truths: &[bool]) -> f64 {
    Confusion::from_pairs(preds, truths).f1()
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity(token_nlls: &[f64]) -> Result<f64> {
    if token_nlls.is_empty() {
        return Err(Error::Invalid("perplexity needs at least one reference token".into()));
    }
    Ok((token_nlls.iter().sum::<f64>() / token_nlls.len() as f64).exp())
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with uniform weights and brevity penalty. With
/// `smoothing`, zero higher-order counts get add-one smoothing; otherwise any
/// zero precision makes the score 0.
pub fn bleu4(hypotheses: &[String], references: &[String], smoothing: bool) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "BLEU needs aligned non-empty corpora ({} vs {})",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let hw = split_words(h);
        let rw = split_words(rf);
        c += hw.len();
        r += rw.len();
        for n in 1..=4 {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            for (g, &cnt) in &hc {
                matched[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if smoothing && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln() / 4.0;
    }
    let bp = if c <= r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_sum.exp())
}

/// Label agreement between generated and reference reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClinicalEfficacy {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Labels both sides with the rule labeler and micro-pools over 14 labels,
/// reference labels taken as truth.
pub fn clinical_efficacy(
    generated: &[String],
    references: &[String],
    spec: &FindingSpec,
) -> Result<ClinicalEfficacy> {
    if generated.len() != references.len() {
        return Err(Error::Invalid("generated and reference lists differ in length".into()));
    }
    let mut preds = Vec::with_capacity(generated.len() * NUM_FINDINGS);
    let mut truths = Vec::with_capacity(generated.len() * NUM_FINDINGS);
    for (g, r) in generated.iter().zip(references) {
        preds.extend(rule_labeler(g, spec).iter().map(|&b| b != 0));
        truths.extend(rule_labeler(r, spec).iter().map(|&b| b != 0));
    }
    let c = Confusion::from_pairs(&preds, &truths);
    Ok(ClinicalEfficacy {
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    })
}

pub const BOOTSTRAP_RESAMPLES: usize = 30;
const MAX_RETRIES: u64 = 100;

/// Indices of resample `r`, attempt `attempt`.
pub fn resample_indices(n_items: usize, seed: u64, r: usize, attempt: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "bootstrap", ((r as u64) << 32) | attempt);
    (0..n_items).map(|_| rng.random_range(0..n_items)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// `n` same-size resamples with replacement; population std. A resample on
/// which the metric is undefined is redrawn, up to a bounded number of times.
pub fn bootstrap<T, F>(items: &[T], n: usize, seed: u64, metric: F) -> Result<Bootstrap>
where
    F: Fn(&[&T]) -> Result<f64>,
{
    if items.len() < 2 {
        return Err(Error::Invalid("bootstrap needs at least 2 items".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("bootstrap needs at least 1 resample".into()));
    }
    let mut values = Vec::with_capacity(n);
    for r in 0..n {
        let mut value = None;
        let mut last_err = None;
        for attempt in 0..MAX_RETRIES {
            let picked: Vec<&T> = resample_indices(items.len(), seed, r, attempt)
                .into_iter()
                .map(|i| &items[i])
                .collect();
            match metric(&picked) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        match value {
            Some(v) => values.push(v),
            None => {
                return Err(Error::Numeric(format!(
                    "metric undefined on resample {r} after {MAX_RETRIES} draws: {}",
                    last_err.map(|e| e.to_string()).unwrap_or_default()
                )))
            }
        }
    }
    let (mean, std) = mean_std(&values);
    Ok(Bootstrap { mean, std, values })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sample_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Significance level for comparisons.
pub const ALPHA: f64 = 0.05;

/// Two-sided Welch t-test p-value.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("t-test needs at least 2 values per sample".into()));
    }
    let (ma, va) = sample_var(a);
    let (mb, vb) = sample_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return if ma == mb {
            Err(Error::Numeric("p-value undefined: both samples constant and equal".into()))
        } else {
            Ok(0.0)
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numeric(format!("t distribution with df {df}: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// One metric of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip)]
    pub resamples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, value: f64, boot: Bootstrap) {
        self.entries.push(MetricEntry {
            metric: metric.to_string(),
            value,
            mean: boot.mean,
            std: boot.std,
            p_value: None,
            note: None,
            resamples: boot.values,
        });
    }

    pub fn get(&self, metric: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.metric == metric)
    }

    /// Fills p-values against the same-named metrics of `other`.
    pub fn compare(&mut self, other: &MetricReport) {
        for e in &mut self.entries {
            match other.get(&e.metric) {
                Some(o) => match t_test(&e.resamples, &o.resamples) {
                    Ok(p) => {
                        e.p_value = Some(p);
                        e.note = Some(if p < ALPHA { "significant" } else { "not significant" }.into());
                    }
                    Err(err) => e.note = Some(err.to_string()),
                },
                None => e.note = Some("metric missing from comparison".into()),
            }
        }
    }

    /// One JSON record per metric.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn resample_csv(&self) -> String {
        let mut out = String::from("metric,resample,value\n");
        for e in &self.entries {
            for (i, v) in e.resamples.iter().enumerate() {
                let _ = writeln!(out, "{},{i},{v}", e.metric);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        let perfect = vec![vec![true, false, false], vec![true, true, false]];
        let m = ranking_metrics(&perfect, 5).unwrap();
        assert_eq!((m.mrr, m.hit), (1.0, 1.0));

        let mut flags = vec![false; 5];
        flags.extend(vec![true; 10]);
        flags.extend(vec![false; 85]);
        let m = ranking_metrics(&[flags], 5).unwrap();
        assert!((m.mrr - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!((m.hit, m.recall, m.precision), (0.0, 0.0, 0.0));
        assert!(ranking_metrics(&[], 5).is_err());
        assert!(ranking_metrics(&[vec![false, false]], 5).is_err());
    }

    #[test]
    fn auroc_examples() {
        let truths = [false, false, true, true];
        assert_eq!(micro_auroc(&[0.1, 0.2, 0.8, 0.9], &truths).unwrap(), 1.0);
        assert_eq!(micro_auroc(&[0.5; 4], &truths).unwrap(), 0.5);
        assert!(micro_auroc(&[0.5, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        let t = [true, false, true];
        assert_eq!(micro_f1(&t, &t), 1.0);
        assert_eq!(micro_f1(&[false; 3], &t), 0.0);
        // TP=2 FP=1 FN=1
        let p = [true, true, true, false];
        let t = [true, true, false, true];
        assert!((micro_f1(&p, &t) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perplexity_uniform() {
        let nll = vec![50f64.ln(); 17];
        assert!((perplexity(&nll).unwrap() - 50.0).abs() < 1e-10);
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn bleu_examples() {
        let refs = vec!["there is a small effusion .".to_string(), "no edema .".to_string()];
        assert!((bleu4(&refs, &refs, false).unwrap() - 1.0).abs() < 1e-12);
        let disjoint = vec!["alpha beta gamma delta".to_string()];
        let other = vec!["one two three four".to_string()];
        assert_eq!(bleu4(&disjoint, &other, false).unwrap(), 0.0);
        assert!(bleu4(&[], &[], false).is_err());
    }

    #[test]
    fn bleu_hand_case() {
        // hyp: "a b c d e" (5 words), ref: "a b c d f g" (6 words)
        // 1-gram 4/5, 2-gram 3/4, 3-gram 2/3, 4-gram 1/2, BP = exp(1 - 6/5)
        let h = vec!["a b c d e".to_string()];
        let r = vec!["a b c d f g".to_string()];
        let want = (1.0 - 6.0 / 5.0f64).exp()
            * ((0.8f64.ln() + 0.75f64.ln() + (2.0 / 3.0f64).ln() + 0.5f64.ln()) / 4.0).exp();
        assert!((bleu4(&h, &r, false).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bleu_smoothing_flag() {
        let h = vec!["a b c x".to_string()];
        let r = vec!["a b c d".to_string()];
        assert_eq!(bleu4(&h, &r, false).unwrap(), 0.0);
        assert!(bleu4(&h, &r, true).unwrap() > 0.0);
    }

    #[test]
    fn efficacy_examples() {
        let spec = FindingSpec::default();
        let refs = vec!["there is ptx .".to_string(), "no acute findings .".to_string()];
        let ce = clinical_efficacy(&refs, &refs, &spec).unwrap();
        assert_eq!((ce.accuracy, ce.f1), (1.0, 1.0));

        let empty = vec!["no acute findings .".to_string(); 2];
        let ce = clinical_efficacy(&empty, &empty, &spec).unwrap();
        assert_eq!((ce.accuracy, ce.f1), (1.0, 0.0));

        // gen: {ptx}, {edema, fx}; ref: {ptx, edema}, {fx}
        let gen = vec!["there is ptx .".to_string(), "edema is seen . fx is seen .".to_string()];
        let rf = vec!["ptx is seen . there is edema .".to_string(), "there is fracture .".to_string()];
        let ce = clinical_efficacy(&gen, &rf, &spec).unwrap();
        // TP = 2 (ptx, fx), FN = 1 (edema in study 1), FP = 1 (edema in study 2), TN = 24
        assert!((ce.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((ce.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((ce.accuracy - 26.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_contract() {
        let items: Vec<f64> = (0..10).map(f64::from).collect();
        let b = bootstrap(&items, 30, 1, |_| Ok(3.0)).unwrap();
        assert_eq!(b.std, 0.0);
        assert_eq!(b.values.len(), 30);
        let mean = |xs: &[&f64]| Ok(xs.iter().copied().sum::<f64>() / xs.len() as f64);
        let a = bootstrap(&items, 30, 7, mean).unwrap();
        let b = bootstrap(&items, 30, 7, mean).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap(&items[..1], 30, 7, mean).is_err());
        assert!(bootstrap(&items, 30, 7, |_| Err(Error::Invalid("never".into()))).is_err());
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((t_test(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!(t_test(&[2.0; 5], &[2.0; 5]).is_err());
        assert_eq!(t_test(&[2.0; 5], &[3.0; 5]).unwrap(), 0.0);
        assert!(t_test(&[1.0], &a).is_err());
    }

    #[test]
    fn report_serialization() {
        let mut r = MetricReport::default();
        let boot = Bootstrap {
            mean: 0.5,
            std: 0.1,
            values: vec![0.4, 0.6],
        };
        r.push("mrr", 0.5, boot);
        let line = r.to_records();
        assert!(line.contains("\"metric\":\"mrr\""));
        assert!(line.contains("\"p_value\":null"));
        assert_eq!(r.resample_csv(), "metric,resample,value\nmrr,0,0.4\nmrr,1,0.6\n");
        let other = r.clone();
        r.compare(&other);
        assert!((r.entries[0].p_value.unwrap() - 1.0).abs() < 1e-9);
    }
}
