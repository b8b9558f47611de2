use std::collections::BTreeSet;
use std::fs;

use medvill::corpus::{
    gen_dataset, gen_vqa, load_dataset, region_mean, render_study, write_dataset, FindingSpec, QuestionType,
    Split, SplitCounts, IMAGE_DIR, MANIFEST, NO_FINDING_ANSWER, NUM_FINDINGS, REGION_COUNT, VQA_MANIFEST,
    VQA_PER_STUDY,
};
use medvill::seed::rng_for;
use proptest::prelude::*;

fn counts(train: usize, valid: usize, test: usize) -> SplitCounts {
    SplitCounts { train, valid, test }
}

#[test]
fn finding_regions_are_disjoint() {
    let spec = FindingSpec::default();
    let regions: BTreeSet<usize> = spec.findings.iter().map(|f| f.region).collect();
    assert_eq!(regions.len(), NUM_FINDINGS);
    assert!(regions.iter().all(|&r| r < REGION_COUNT));
}

#[test]
fn positive_regions_are_brighter() {
    let spec = FindingSpec::default();
    let data = gen_dataset(counts(500, 0, 0), 4, &spec).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in &data.studies {
        for f in &spec.findings {
            let m = region_mean(&s.image, f.region);
            if s.labels[f.index] != 0 { pos.push(m) } else { neg.push(m) }
        }
    }
    let lowest_pos = pos.iter().copied().fold(f64::INFINITY, f64::min);
    let highest_neg = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(!pos.is_empty());
    assert!(lowest_pos > highest_neg, "{lowest_pos} vs {highest_neg}");
}

#[test]
fn vqa_answer_rates_match_their_expectation() {
    let spec = FindingSpec::default();
    let data = gen_dataset(counts(5000, 0, 0), 9, &spec).unwrap();
    assert_eq!(data.vqa.len(), 5000 * VQA_PER_STUDY);
    let (mut closed, mut yes, mut yes_expect) = (0.0, 0.0, 0.0);
    let (mut open, mut found, mut found_expect) = (0.0, 0.0, 0.0);
    for (i, q) in data.vqa.iter().enumerate() {
        let study = &data.studies[i / VQA_PER_STUDY];
        let k = study.labels.iter().filter(|&&b| b != 0).count() as f64;
        match q.qtype {
            QuestionType::Closed => {
                closed += 1.0;
                yes += f64::from(u8::from(q.answer == "yes"));
                yes_expect += k / NUM_FINDINGS as f64;
            }
            QuestionType::Open => {
                open += 1.0;
                found += f64::from(u8::from(q.answer != NO_FINDING_ANSWER));
                // half point at a present finding; otherwise a uniform cell
                let r = k / REGION_COUNT as f64;
                found_expect += if k > 0.0 { 0.5 + 0.5 * r } else { 0.0 };
            }
        }
    }
    let n = data.vqa.len() as f64;
    let tol = |count: f64| 4.0 * count.sqrt().max(1.0);
    assert!((closed - n / 2.0).abs() < 4.0 * (n * 0.25).sqrt());
    assert!((yes - yes_expect).abs() < tol(yes_expect), "{yes} vs {yes_expect}");
    assert!((found - found_expect).abs() < tol(found_expect), "{found} vs {found_expect}");
    assert!(open > 0.0);
}

#[test]
fn manifests_have_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(counts(12, 3, 5), 1, &FindingSpec::default()).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let lines = |name: &str| fs::read_to_string(dir.path().join(name)).unwrap().lines().count();
    assert_eq!(lines(MANIFEST), 20);
    assert_eq!(lines(VQA_MANIFEST), 20 * VQA_PER_STUDY);
    assert_eq!(fs::read_dir(dir.path().join(IMAGE_DIR)).unwrap().count(), 20);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.split(Split::Valid).len(), 3);
    assert_eq!(back.vqa_split(Split::Test).len(), 5 * VQA_PER_STUDY);
}

#[test]
fn fixed_answers() {
    let spec = FindingSpec::default();
    let study = render_study(&spec, "s0", Split::Train, [1; NUM_FINDINGS], &mut rng_for(0, "s", 0));
    let empty = render_study(&spec, "s1", Split::Train, [0; NUM_FINDINGS], &mut rng_for(0, "s", 1));
    for i in 0..64 {
        let q = gen_vqa(&study, &spec, &mut rng_for(1, "q", i));
        if q.qtype == QuestionType::Closed {
            assert_eq!(q.answer, "yes");
        }
        let q = gen_vqa(&empty, &spec, &mut rng_for(1, "q", i));
        let expect = if q.qtype == QuestionType::Closed { "no" } else { NO_FINDING_ANSWER };
        assert_eq!(q.answer, expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn open_answer_names_the_finding_in_that_region(seed in 0u64..10_000) {
        let spec = FindingSpec::default();
        let data = gen_dataset(counts(4, 0, 0), seed, &spec).unwrap();
        for (i, q) in data.vqa.iter().enumerate() {
            let study = &data.studies[i / VQA_PER_STUDY];
            if q.qtype != QuestionType::Open {
                continue;
            }
            let region: usize = q.question.split(' ').nth(6).unwrap().parse().unwrap();
            let present = spec.findings.iter().find(|f| f.region == region && study.labels[f.index] != 0);
            prop_assert_eq!(q.answer.as_str(), present.map_or(NO_FINDING_ANSWER, |f| f.name));
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_seed(seed in 0u64..10_000) {
        let spec = FindingSpec::default();
        let a = gen_dataset(counts(6, 1, 1), seed, &spec).unwrap();
        prop_assert_eq!(&a, &gen_dataset(counts(6, 1, 1), seed, &spec).unwrap());
    }
}
