use super::*;
use proptest::prelude::*;
use rand::Rng;
use serde_json::json;

fn sorted_words(s: &str) -> Vec<String> {
    let mut w: Vec<String> = s.split_whitespace().map(String::from).collect();
    w.sort();
    w
}

fn sorted_chars(s: &str) -> Vec<char> {
    let mut c: Vec<char> = s.chars().collect();
    c.sort();
    c
}

/// Words with pairwise distinct letters, so any transposition is visible.
fn distinct_letter_text(n_words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_words)
        .map(|_| {
            let len = rng.random_range(2..7);
            let mut letters: Vec<char> = ('a'..='z').collect();
            let mut w = String::new();
            for _ in 0..len {
                w.push(letters.remove(rng.random_range(0..letters.len())));
            }
            w
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn within_three_sigma(hits: usize, n: usize, p: f64) -> bool {
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - n as f64 * p).abs() <= 3.0 * sigma
}

#[test]
fn deletion_identity_and_non_empty() {
    assert_eq!(random_deletion("the cat sat", 0.0, 3), "the cat sat");
    for seed in 0..50 {
        assert_eq!(random_deletion("solo", 0.99, seed), "solo");
        assert!(!random_deletion("a b c", 0.99, seed).is_empty());
    }
}

#[test]
fn deletion_rate_monte_carlo() {
    let mut deleted = 0;
    let mut total = 0;
    for seed in 0..1000u64 {
        let text = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let out = random_deletion(&text, 0.10, seed);
        total += 100;
        deleted += 100 - out.split_whitespace().count();
    }
    assert!(total >= 100_000);
    assert!(within_three_sigma(deleted, total, 0.10), "{deleted}/{total}");
}

#[test]
fn swap_examples() {
    for seed in 0..20 {
        assert_eq!(random_swap("a b", seed), "b a");
    }
    assert_eq!(random_swap("one", 4), "one");
    let out = random_swap("a b c d e", 9);
    let diff = out
        .split(' ')
        .zip("a b c d e".split(' '))
        .filter(|(x, y)| x != y)
        .count();
    assert_eq!(diff, 2);
}

#[test]
fn char_noise_examples() {
    assert_eq!(char_noise("ab", 0.999_999, 1), "ba");
    assert_eq!(char_noise("hello world", 0.0, 1), "hello world");
    assert_eq!(char_noise("a b c", 0.999, 5), "a b c");
}

#[test]
fn char_noise_rate_monte_carlo() {
    let mut perturbed = 0;
    let mut total = 0;
    for seed in 0..1000u64 {
        let text = distinct_letter_text(100, seed + 10_000);
        let out = char_noise(&text, 0.05, seed);
        for (a, b) in text.split(' ').zip(out.split(' ')) {
            total += 1;
            perturbed += usize::from(a != b);
        }
    }
    assert!(total >= 100_000);
    assert!(within_three_sigma(perturbed, total, 0.05), "{perturbed}/{total}");
}

#[test]
fn back_translation_with_mocks() {
    let cfg = AugmentConfig::default();
    assert_eq!(
        back_translate("keep me as is", &IdentityService, &cfg).unwrap(),
        "keep me as is"
    );
    let scripted = ScriptedService::new([("hello", "hallo"), ("hallo", "hi")]);
    assert_eq!(back_translate("hello", &scripted, &cfg).unwrap(), "hi");
    assert_eq!(scripted.calls(), 2);
    assert_eq!(
        back_translate("one two three", &MockTranslator::default(), &cfg).unwrap(),
        "two one three"
    );
}

#[test]
fn timeout_is_retryable_with_attempt_count() {
    let cfg = AugmentConfig {
        retry: RetryPolicy::immediate(3),
        ..Default::default()
    };
    let flaky = FlakyService::new(IdentityService, usize::MAX, ServiceError::Timeout);
    let err = back_translate("x", &flaky, &cfg).unwrap_err();
    assert_eq!(
        err,
        AugmentError::Exhausted {
            attempts: 3,
            last: ServiceError::Timeout
        }
    );
    assert!(err.is_exhaustion());
    assert_eq!(flaky.calls(), 3);

    let recovering = FlakyService::new(IdentityService, 2, ServiceError::Status(503));
    assert_eq!(back_translate("y", &recovering, &cfg).unwrap(), "y");
    assert_eq!(recovering.calls(), 4);

    let fatal = FlakyService::new(IdentityService, 1, ServiceError::Status(401));
    assert_eq!(
        back_translate("z", &fatal, &cfg).unwrap_err(),
        AugmentError::Service(ServiceError::Status(401))
    );
    assert_eq!(fatal.calls(), 1);
}

#[test]
fn backoff_doubles_and_caps() {
    let p = RetryPolicy {
        max_attempts: 5,
        base_delay_ms: 100,
        max_delay_ms: 350,
    };
    let d: Vec<u64> = (0..4).map(|a| p.delay(a).as_millis() as u64).collect();
    assert_eq!(d, vec![100, 200, 350, 350]);
}

#[test]
fn paraphrase_prompt_is_verbatim() {
    let scripted = ScriptedService::new([("a cat", "\"  a small cat \" ")]);
    let cfg = AugmentConfig::default();
    assert_eq!(llm_paraphrase("a cat", 0, &scripted, &cfg).unwrap(), "a small cat");
    assert_eq!(
        paraphrase_prompt("a cat", 0).unwrap(),
        "Rewrite the following sentence with more detail, keeping the original meaning. \
         Respond with only the rewritten sentence: \"a cat\""
    );
    assert!(PARAPHRASE_PROMPTS[2].starts_with("You’re a high school teacher."));
    assert!(PARAPHRASE_PROMPTS.iter().all(|p| p.ends_with(": \"[X]\"")));
    assert_eq!(
        llm_paraphrase("a cat", 5, &scripted, &cfg).unwrap_err(),
        AugmentError::PromptId(5)
    );
    assert_eq!(
        llm_paraphrase("echo me", 3, &IdentityService, &cfg).unwrap(),
        "echo me"
    );
}

#[test]
fn response_validation() {
    let cfg = AugmentConfig {
        max_response_chars: 5,
        ..Default::default()
    };
    let empty = ScriptedService::new([("x", " \"\" ")]);
    assert_eq!(
        llm_paraphrase("x", 1, &empty, &cfg).unwrap_err(),
        AugmentError::EmptyResponse
    );
    let long = ScriptedService::new([("x", "abcdefgh")]);
    assert_eq!(
        llm_paraphrase("x", 1, &long, &cfg).unwrap_err(),
        AugmentError::Overlong { len: 8, max: 5 }
    );
}

#[test]
fn extract_sentence_from_prompts() {
    for id in 0..5 {
        let prompt = paraphrase_prompt("he said: \"hi\" twice", id).unwrap();
        assert_eq!(
            extract_sentence(&json!({ "prompt": prompt })).unwrap(),
            "he said: \"hi\" twice"
        );
    }
    assert!(extract_sentence(&json!({ "other": 1 })).is_err());
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("sentence number {i} has words")).collect()
}

#[test]
fn corpus_counts_and_tags() {
    let cfg = AugmentConfig::default();
    let c = build_pair_corpus(
        &texts(10),
        &[AugmentMethod::Deletion, AugmentMethod::Swap],
        &cfg,
        Clients::default(),
        7,
    )
    .unwrap();
    assert_eq!(c.pairs.len(), 20);
    assert_eq!(
        c.pairs.iter().filter(|p| p.method == AugmentMethod::Swap).count(),
        10
    );
    assert!(c.pairs.iter().all(|p| p.prompt_id.is_none()));
}

#[test]
fn local_corpus_is_deterministic() {
    let cfg = AugmentConfig::default();
    let methods = [AugmentMethod::Deletion, AugmentMethod::Swap, AugmentMethod::CharNoise];
    let a = build_pair_corpus(&texts(30), &methods, &cfg, Clients::default(), 5).unwrap();
    let b = build_pair_corpus(&texts(30), &methods, &cfg, Clients::default(), 5).unwrap();
    assert_eq!(a, b);
    let c = build_pair_corpus(&texts(30), &methods, &cfg, Clients::default(), 6).unwrap();
    assert_ne!(a.pairs, c.pairs);
}

#[test]
fn paraphrase_corpus_has_five_prompts_per_text() {
    let cfg = AugmentConfig::default();
    let mock = MockParaphraser::default();
    let n = 6;
    let c = build_pair_corpus(
        &texts(n),
        &[AugmentMethod::LlmParaphrase],
        &AugmentConfig { allow_identity: true, ..cfg },
        Clients {
            translator: None,
            paraphraser: Some(&mock),
        },
        1,
    )
    .unwrap();
    assert_eq!(c.pairs.len(), 5 * n);
    for (i, chunk) in c.pairs.chunks(5).enumerate() {
        let ids: Vec<_> = chunk.iter().map(|p| p.prompt_id.unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(chunk.iter().all(|p| p.anchor == texts(n)[i]));
    }
}

#[test]
fn identity_positives_filtered_unless_allowed() {
    let echo = IdentityService;
    let clients = Clients {
        translator: Some(&echo),
        paraphraser: Some(&echo),
    };
    let methods = [AugmentMethod::BackTranslation, AugmentMethod::LlmParaphrase];
    let strict = build_pair_corpus(&texts(3), &methods, &AugmentConfig::default(), clients, 0).unwrap();
    assert!(strict.pairs.is_empty());
    assert_eq!(strict.filtered, 3 * 6);
    let lenient = AugmentConfig {
        allow_identity: true,
        ..Default::default()
    };
    let kept = build_pair_corpus(&texts(3), &methods, &lenient, clients, 0).unwrap();
    assert_eq!(kept.pairs.len(), 18);
    assert!(kept.pairs.iter().all(|p| p.anchor == p.positive));

    let id = build_pair_corpus(&texts(2), &[AugmentMethod::Identity], &AugmentConfig::default(), clients, 0)
        .unwrap();
    assert_eq!(id.pairs.len(), 2);
}

#[test]
fn failures_reported_without_aborting() {
    let scripted = ScriptedService::new([("sentence number 1 has words", "one translated")]);
    let cfg = AugmentConfig {
        retry: RetryPolicy::immediate(2),
        ..Default::default()
    };
    let c = build_pair_corpus(
        &texts(3),
        &[AugmentMethod::BackTranslation, AugmentMethod::Swap],
        &cfg,
        Clients {
            translator: Some(&scripted),
            paraphraser: None,
        },
        0,
    )
    .unwrap();
    // text 1 forward succeeds but the pivot has no scripted answer back
    assert_eq!(c.failures.len(), 3);
    assert_eq!(c.pairs.len(), 3);
    assert!(c.failures.iter().all(|f| f.method == AugmentMethod::BackTranslation && !f.exhausted));
    assert!(matches!(
        build_pair_corpus(&texts(1), &[AugmentMethod::LlmParaphrase], &cfg, Clients::default(), 0),
        Err(AugmentError::MissingClient(AugmentMethod::LlmParaphrase))
    ));
}

#[test]
fn concurrency_does_not_change_output() {
    let mock = MockParaphraser::default();
    let clients = Clients {
        translator: None,
        paraphraser: Some(&mock),
    };
    let run = |cap| {
        let cfg = AugmentConfig {
            max_in_flight: cap,
            allow_identity: true,
            ..Default::default()
        };
        build_pair_corpus(&texts(12), &[AugmentMethod::LlmParaphrase, AugmentMethod::Deletion], &cfg, clients, 3)
            .unwrap()
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn stacked_composition() {
    let translator = MockTranslator::default();
    let cfg = AugmentConfig {
        composition: Composition::Stacked,
        deletion_p: 0.5,
        ..Default::default()
    };
    let c = build_pair_corpus(
        &texts(4),
        &[AugmentMethod::BackTranslation, AugmentMethod::Deletion],
        &cfg,
        Clients {
            translator: Some(&translator),
            paraphraser: None,
        },
        2,
    )
    .unwrap();
    assert_eq!(c.pairs.len(), 4);
    assert!(c.pairs.iter().all(|p| p.method == AugmentMethod::BackTranslation));
    assert!(c.pairs.iter().any(|p| p.positive.split(' ').count() < 5));
}

#[test]
fn topic_paraphraser_stays_in_topic() {
    let pools = vec![
        vec!["red".to_string(), "blue".into(), "green".into()],
        vec!["cat".to_string(), "dog".into(), "cow".into()],
    ];
    let tp = TopicParaphraser::new(pools.clone(), 1.0);
    let out = tp
        .call(&json!({ "prompt": paraphrase_prompt("red cat the blue", 1).unwrap() }))
        .unwrap();
    let w: Vec<&str> = out.split(' ').collect();
    assert!(pools[0].iter().any(|x| x == w[0]));
    assert!(pools[1].iter().any(|x| x == w[1]));
    assert_eq!(w[2], "the");
    assert!(pools[0].iter().any(|x| x == w[3]));
}

#[test]
fn method_names_roundtrip() {
    for m in AugmentMethod::ALL {
        assert_eq!(m.name().parse::<AugmentMethod>().unwrap(), m);
        let j = serde_json::to_string(&m).unwrap();
        assert_eq!(j, format!("\"{}\"", m.name()));
    }
    let pair = PositivePair {
        anchor: "a".into(),
        positive: "b".into(),
        method: AugmentMethod::LlmParaphrase,
        prompt_id: Some(2),
        seed: 9,
    };
    let line = serde_json::to_string(&pair).unwrap();
    assert_eq!(
        line,
        r#"{"anchor":"a","positive":"b","method":"llm_paraphrase","prompt_id":2,"seed":9}"#
    );
}

#[test]
fn config_validation() {
    let bad = AugmentConfig {
        deletion_p: 1.0,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(AugmentError::Probability { .. })));
    let bad = AugmentConfig {
        paraphrase_prompts: vec![0, 7],
        ..Default::default()
    };
    assert_eq!(bad.validate().unwrap_err(), AugmentError::PromptId(7));
}

proptest! {
    #[test]
    fn swap_preserves_multiset(ws in proptest::collection::vec("[a-z]{1,6}", 0..12), seed in any::<u64>()) {
        let text = ws.join(" ");
        prop_assert_eq!(sorted_words(&random_swap(&text, seed)), sorted_words(&text));
    }

    #[test]
    fn char_noise_preserves_word_letters(ws in proptest::collection::vec("[a-zé]{1,8}", 1..12), seed in any::<u64>(), p in 0.0f64..1.0) {
        let text = ws.join(" ");
        let out = char_noise(&text, p, seed);
        let pairs: Vec<_> = text.split(' ').zip(out.split(' ')).collect();
        prop_assert_eq!(pairs.len(), ws.len());
        for (a, b) in pairs {
            prop_assert_eq!(sorted_chars(a), sorted_chars(b));
        }
    }

    #[test]
    fn deletion_never_empty(ws in proptest::collection::vec("[a-z]{1,6}", 1..12), seed in any::<u64>(), p in 0.0f64..1.0) {
        let out = random_deletion(&ws.join(" "), p, seed);
        prop_assert!(!out.is_empty());
        prop_assert!(out.split(' ').all(|w| ws.iter().any(|x| x == w)));
    }
}
