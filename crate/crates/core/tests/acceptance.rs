//! Acceptance criteria. Runs without the test harness and prints one
//! PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bias_suppress::corpus::{filter_bias_type, load_crows_pairs, BiasType, ChoiceSource, MultipleChoiceItem, PairDataset, SentencePair};
use bias_suppress::downstream::evaluate_item;
use bias_suppress::exec::ExecMode;
use bias_suppress::lexicon::{bundled, validate_descriptions, Gender};
use bias_suppress::metrics::{acc_bias_score, delta_percent, evaluate_condition, rbs, PairScores};
use bias_suppress::preamble::{assemble_prompt, build_cf_detailed, build_cf_simple, build_desc, Preamble, PreambleKind};
use bias_suppress::rng::sample_indices;
use bias_suppress::scoring::mock::MockServer;
use bias_suppress::scoring::{per_token_perplexity, score, Cached, HttpBackend, HttpConfig, ScoreCache, ScoreError, TableLm};
use bias_suppress::selection::{random_select, rank_by_perplexity, top_n};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::json;

fn pair(id: &str, ll_s: f64, ll_a: f64) -> PairScores {
    PairScores { pair_id: id.into(), loglik_s: ll_s, loglik_a: ll_a, condition: PreambleKind::None }
}

/// Fixed-seed runner so every run checks the same cases.
fn fixed_runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn within(limit: Duration, start: Instant) {
    let took = start.elapsed();
    assert!(took < limit, "took {took:?}, limit {limit:?}");
}

fn metric_oracle() {
    let start = Instant::now();
    // Independent values of ln(0.63 / 0.21) and ln(0.48 / 0.41).
    let nc = [pair("0", 0.63f64.ln(), 0.21f64.ln())];
    let with = [pair("0", 0.48f64.ln(), 0.41f64.ln())];
    assert!((rbs(&nc).unwrap() - 1.0986122886681098).abs() < 1e-9);
    assert!((rbs(&with).unwrap() - 0.15762894420358306).abs() < 1e-9);
    assert_eq!(acc_bias_score(&nc).unwrap(), 1.0);
    assert_eq!(acc_bias_score(&with).unwrap(), 1.0);
    within(Duration::from_secs(1), start);
}

fn template_goldens() {
    let start = Instant::now();
    let lex = bundled();
    let occ = "dental hygienist";
    assert_eq!(build_cf_simple("Austin", Gender::Male, occ, &lex).unwrap().text, "Austin became a dental hygienist.");
    assert_eq!(
        build_cf_detailed("Austin", Gender::Male, occ, &lex).unwrap().text,
        "Despite being a male, Austin became a dental hygienist."
    );
    assert_eq!(build_desc(PreambleKind::DescSimple, occ, &lex).unwrap().text, "Dental hygienists ensure oral health.");
    assert_eq!(
        build_desc(PreambleKind::DescDetailed, occ, &lex).unwrap().text,
        "Dental hygienists focus on promoting oral health and hygiene."
    );
    let text = std::fs::read_to_string(common::fixture("golden_preambles.jsonl")).unwrap();
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let g: serde_json::Value = serde_json::from_str(line).unwrap();
        let kind: PreambleKind = serde_json::from_value(g["kind"].clone()).unwrap();
        let occ = g["occupation"].as_str().unwrap();
        let built = match kind {
            PreambleKind::CfSimple | PreambleKind::CfDetailed => {
                let name = g["name"].as_str().unwrap();
                let gender: Gender = serde_json::from_value(g["gender"].clone()).unwrap();
                if kind == PreambleKind::CfSimple {
                    build_cf_simple(name, gender, occ, &lex)
                } else {
                    build_cf_detailed(name, gender, occ, &lex)
                }
            }
            _ => build_desc(kind, occ, &lex),
        }
        .unwrap();
        assert_eq!(built.text, g["text"].as_str().unwrap());
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} golden strings");
    within(Duration::from_secs(1), start);
}

fn lexicon_validator() {
    let report = validate_descriptions(&bundled());
    assert!(report.checked > 0);
    assert!(report.is_clean(), "{:?}", report.violations);
}

fn perplexity_values() {
    let mut runner = fixed_runner(64);
    for v in [2usize, 4, 16] {
        let vocab: Vec<String> = (0..v).map(|i| format!("w{i}")).collect();
        let lm = TableLm::uniform(&vocab).unwrap();
        runner
            .run(&prop::collection::vec(0..v, 1..30), |idx| {
                let target = idx.iter().map(|&i| vocab[i].as_str()).collect::<Vec<_>>().join(" ");
                let ppl = per_token_perplexity(&score(&lm, "", &target).unwrap());
                prop_assert!((ppl - v as f64).abs() < 1e-9, "V={} got {}", v, ppl);
                Ok(())
            })
            .unwrap();
    }
    let certain = TableLm::from_base(&[("yes", 1.0)]).unwrap();
    for n in 1..10 {
        let target = vec!["yes"; n].join(" ");
        assert_eq!(per_token_perplexity(&score(&certain, "", &target).unwrap()), 1.0);
    }
}

fn selection_oracle() {
    let start = Instant::now();
    let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
    let probs = [0.3, 0.25, 0.2, 0.1, 0.1, 0.05];
    let rows: Vec<(&str, f64)> = words.iter().copied().zip(probs).collect();
    let lm = TableLm::from_base(&rows).unwrap();
    let mut runner = fixed_runner(8);
    let strategy = prop::collection::vec(prop::collection::vec(0..words.len(), 1..5), 200);
    runner
        .run(&strategy, |texts| {
            let candidates: Vec<Preamble> = texts
                .iter()
                .map(|ix| Preamble {
                    kind: PreambleKind::DescSimple,
                    text: ix.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" "),
                    occupation: None,
                    person_name: None,
                    person_gender: None,
                })
                .collect();
            let ranked = rank_by_perplexity(&candidates, &lm, ExecMode::Parallel).unwrap();
            // Oracle: perplexity by hand from the table, then repeated
            // first-minimum extraction.
            let ppl: Vec<f64> = texts
                .iter()
                .map(|ix| (-(ix.iter().map(|&i| probs[i].ln()).sum::<f64>()) / ix.len() as f64).exp())
                .collect();
            let mut prev_span = String::new();
            for n in 1..=10 {
                let mut used = vec![false; candidates.len()];
                let mut oracle = Vec::new();
                for _ in 0..n {
                    let mut best: Option<usize> = None;
                    for i in 0..candidates.len() {
                        // Both sides agree to ~1 ulp; treat near-equal as tied.
                        if !used[i] && best.is_none_or(|b| ppl[i] < ppl[b] - 1e-12) {
                            best = Some(i);
                        }
                    }
                    used[best.unwrap()] = true;
                    oracle.push(candidates[best.unwrap()].clone());
                }
                let got = top_n(&ranked, n).unwrap();
                prop_assert_eq!(&got, &oracle);
                let span = assemble_prompt(&got, "x").unwrap().preamble_span().to_string();
                prop_assert!(span.starts_with(&prev_span));
                prev_span = span;
            }
            Ok(())
        })
        .unwrap();
    within(Duration::from_secs(10), start);
}

fn exclusion() {
    let lm = TableLm::from_base(&[("the", 0.5), ("cat", 0.15), ("sat", 0.1), ("ran", 0.125), ("far", 0.125)]).unwrap();
    let item = MultipleChoiceItem {
        id: "0".into(),
        premise: "cat".into(),
        choices: vec!["sat".into(), "ran far far".into()],
        gold_index: 1,
        source: ChoiceSource::Copa,
        question: None,
    };
    let pre = [Preamble {
        kind: PreambleKind::DescSimple,
        text: "the the the the".into(),
        occupation: None,
        person_name: None,
        person_gender: None,
    }];
    // Hand values: with exclusion, choice 0 averages ln .15, ln .1 and
    // choice 1 averages ln .15, ln .125 x3, so choice 1 wins. Counting the
    // four "the" tokens as well reverses the order.
    let excl = |xs: &[f64]| (-(xs.iter().map(|p: &f64| p.ln()).sum::<f64>()) / xs.len() as f64).exp();
    assert!(excl(&[0.15, 0.1]) > excl(&[0.15, 0.125, 0.125, 0.125]));
    assert!(excl(&[0.5, 0.5, 0.5, 0.5, 0.15, 0.1]) < excl(&[0.5, 0.5, 0.5, 0.5, 0.15, 0.125, 0.125, 0.125]));
    let pred = evaluate_item(&item, &lm, &pre).unwrap();
    assert_eq!(pred.chosen_index, 1);
    assert!((pred.per_choice_perplexity[0] - excl(&[0.15, 0.1])).abs() < 1e-12);
    assert!((pred.per_choice_perplexity[1] - excl(&[0.15, 0.125, 0.125, 0.125])).abs() < 1e-12);
}

fn suppression_demo() {
    let lm = TableLm::from_base(&[("she", 0.4), ("he", 0.1), ("cooks", 0.2), ("<unk>", 0.3)])
        .unwrap()
        .with_trigger("firefighter", &[("she", 0.2), ("he", 0.3), ("cooks", 0.2), ("<unk>", 0.3)])
        .unwrap();
    let dataset = PairDataset {
        pairs: vec![SentencePair {
            id: "0".into(),
            stereotypical: "she cooks".into(),
            anti_stereotypical: "he cooks".into(),
            bias_type: BiasType::Gender,
        }],
        ..PairDataset::default()
    };
    let cf = build_cf_detailed("Alyssa", Gender::Female, "firefighter", &bundled()).unwrap();
    assert_eq!(cf.text, "Despite being a female, Alyssa became a firefighter.");
    let nc = evaluate_condition(&dataset, &lm, &[], ExecMode::Sequential).unwrap();
    let with = evaluate_condition(&dataset, &lm, &[cf], ExecMode::Sequential).unwrap();
    // By hand: nc gives ln(.4 * .2) - ln(.1 * .2) = ln 4; after the trigger,
    // ln(.2 * .2) - ln(.3 * .2) = ln(2/3).
    assert!((nc.rbs - 1.3862943611198906).abs() < 1e-9, "{}", nc.rbs);
    assert!((with.rbs - (-0.40546510810816444)).abs() < 1e-9, "{}", with.rbs);
    assert!(with.rbs < nc.rbs);
    assert_eq!((nc.acc_bias, with.acc_bias), (1.0, 0.0));
}

fn random_baseline() {
    // Published vectors for 3 of 10 under seeds 0, 1, 2.
    let vectors = [[8, 6, 3], [3, 0, 8], [9, 2, 5]];
    for (seed, want) in vectors.iter().enumerate() {
        assert_eq!(sample_indices(10, 3, seed as u64), want.to_vec());
        assert_eq!(sample_indices(10, 3, seed as u64), sample_indices(10, 3, seed as u64));
    }

    let (dir, cfg) = common::workspace(json!({"selection": {"mode": "random", "seeds": [0, 1, 2]}, "downstream": []}));
    let c = cfg.to_str().unwrap();
    common::ok(&["build-preambles", "--config", c]);
    common::ok(&["select", "--config", c]);
    common::ok(&["score-bias", "--config", c]);
    let out = dir.path().join("out");
    let summary = common::read_csv(&out.join("bias/summary.csv"));
    let lm = TableLm::load(&dir.path().join("table.json")).unwrap();
    let dataset = filter_bias_type(&load_crows_pairs(&dir.path().join("crows_pairs.csv")).unwrap(), BiasType::Gender);
    let mut compared = 0;
    for kind in PreambleKind::GENERATED {
        let text = std::fs::read_to_string(out.join(format!("candidates/{kind}.jsonl"))).unwrap();
        let candidates: Vec<Preamble> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        for n in 1..=10 {
            let per_seed: Vec<f64> = (0..3)
                .map(|seed| {
                    let picked = random_select(&candidates, n, seed).unwrap();
                    evaluate_condition(&dataset, &lm, &picked, ExecMode::Sequential).unwrap().rbs
                })
                .collect();
            let mean = per_seed.iter().sum::<f64>() / 3.0;
            let row = summary
                .iter()
                .find(|r| r["condition"] == kind.as_str() && r["n_preambles"] == n.to_string())
                .unwrap();
            let reported: f64 = row["rbs"].parse().unwrap();
            assert!((reported - mean).abs() <= 1e-12, "{kind} N={n}: {reported} vs {mean}");
            compared += 1;
        }
    }
    assert_eq!(compared, 40);
}

fn http_conformance() {
    let srv = MockServer::from_dir(&common::fixture("http")).unwrap();
    let mut config = HttpConfig::new(srv.url(), "mock-7b");
    config.backoff_ms = 1;
    let fixture: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(common::fixture("http/aligned.json")).unwrap()).unwrap();
    let want: Vec<u64> = fixture["response"]["choices"][0]["logprobs"]["token_logprobs"].as_array().unwrap()[2..]
        .iter()
        .map(|v| v.as_f64().unwrap().to_bits())
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let requests = [("Alyssa rose.", " She works hard"), ("", "He ran fast.")];
    let cold = Cached::new(HttpBackend::with_api_key(config.clone(), None), Arc::new(ScoreCache::open(&path).unwrap()));
    let first = score(&cold, requests[0].0, requests[0].1).unwrap();
    assert_eq!(first.logprobs().map(f64::to_bits).collect::<Vec<_>>(), want);
    let cold_scores: Vec<_> = requests.iter().map(|(p, t)| score(&cold, p, t).unwrap()).collect();
    assert!(matches!(
        score(&cold, "Kelly was a", " plumber."),
        Err(ScoreError::TokenBoundaryMisaligned { .. })
    ));
    let served = srv.request_count();
    let cold_bytes = std::fs::read(&path).unwrap();

    let warm = Cached::new(HttpBackend::with_api_key(config, None), Arc::new(ScoreCache::open(&path).unwrap()));
    let warm_scores: Vec<_> = requests.iter().map(|(p, t)| score(&warm, p, t).unwrap()).collect();
    assert_eq!(srv.request_count(), served);
    assert_eq!(std::fs::read(&path).unwrap(), cold_bytes);
    for (c, w) in cold_scores.iter().zip(&warm_scores) {
        assert_eq!(
            c.logprobs().map(f64::to_bits).collect::<Vec<_>>(),
            w.logprobs().map(f64::to_bits).collect::<Vec<_>>()
        );
        assert_eq!(serde_json::to_vec(c).unwrap(), serde_json::to_vec(w).unwrap());
    }
}

fn invariants() {
    let start = Instant::now();
    // Multiples of 1/8 keep every sum exact.
    let value = (-400i32..400).prop_map(|v| v as f64 / 8.0);
    let pairs = prop::collection::vec((value.clone(), value.clone()), 1..40);
    let mut runner = fixed_runner(256);
    runner
        .run(&(pairs, value), |(raw, shift)| {
            let scores: Vec<PairScores> = raw.iter().map(|&(s, a)| pair("p", s, a)).collect();
            let swapped: Vec<PairScores> = raw.iter().map(|&(s, a)| pair("p", a, s)).collect();
            let shifted: Vec<PairScores> = raw.iter().map(|&(s, a)| pair("p", s + shift, a + shift)).collect();
            let r = rbs(&scores).unwrap();
            prop_assert!((rbs(&swapped).unwrap() + r).abs() < 1e-12);
            prop_assert!((rbs(&shifted).unwrap() - r).abs() < 1e-12);
            prop_assert_eq!(acc_bias_score(&shifted).unwrap(), acc_bias_score(&scores).unwrap());
            let ties: Vec<PairScores> = raw.iter().map(|&(s, _)| pair("p", s, s)).collect();
            prop_assert_eq!(acc_bias_score(&ties).unwrap(), 1.0);
            Ok(())
        })
        .unwrap();
    let mut runner = fixed_runner(256);
    runner
        .run(&prop_oneof![-1e6..-1e-9f64, 1e-9..1e6f64], |nc| {
            // Full suppression to zero is -100% when nc bias is positive.
            prop_assert_eq!(delta_percent(0.0, nc).unwrap(), -100.0 * nc.signum());
            prop_assert_eq!(delta_percent(nc, nc).unwrap(), 0.0);
            Ok(())
        })
        .unwrap();
    assert_eq!(delta_percent(0.0, 1.0).unwrap(), -100.0);
    assert_eq!(delta_percent(1.0, 1.0).unwrap(), 0.0);
    within(Duration::from_secs(30), start);
}

fn main() {
    let criteria: [(&str, fn()); 10] = [
        ("metric oracle", metric_oracle),
        ("template goldens", template_goldens),
        ("description validator on bundled lexicon", lexicon_validator),
        ("perplexity of uniform and certain tables", perplexity_values),
        ("selection oracle over 200 candidates", selection_oracle),
        ("preamble tokens excluded from downstream scoring", exclusion),
        ("suppression demonstration with hand-computed RBS", suppression_demo),
        ("random baseline vectors and CLI seed mean", random_baseline),
        ("HTTP conformance against mock server", http_conformance),
        ("metric invariant suite", invariants),
    ];
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let ms = start.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(()) => println!("[PASS] {:>2} {name} ({ms:.1} ms)", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("[FAIL] {:>2} {name} ({ms:.1} ms): {msg}", i + 1);
            }
        }
    }
    std::panic::set_hook(default_hook);
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
