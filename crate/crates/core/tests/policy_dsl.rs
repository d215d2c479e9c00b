mod common;

use common::{argmax_violations, golden_corpus, random_program, run_case};
use loopkit::policy::parse_policy;
use proptest::prelude::*;

#[test]
fn golden_corpus_matches() {
    let corpus = golden_corpus();
    assert!(corpus.len() >= 30);
    let failures: Vec<String> = corpus.iter().filter_map(run_case).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn golden_sources_print_to_a_fixpoint() {
    for c in golden_corpus() {
        let Ok(p) = parse_policy(&c.source) else { continue };
        let printed = p.to_string();
        let again = parse_policy(&printed).unwrap_or_else(|e| panic!("{}: reprint does not parse: {e}\n{printed}", c.name));
        assert_eq!(p, again, "{}", c.name);
        assert_eq!(printed, again.to_string(), "{}", c.name);
    }
}

fn leaf() -> impl Strategy<Value = String> {
    prop_oneof![
        (0u32..1000).prop_map(|v| v.to_string()),
        (0.0f64..100.0).prop_map(|v| format!("{v}")),
        prop::sample::select(vec!["click", "rating", "ctr"]).prop_map(|n| format!("pred(\"{n}\")")),
        prop::sample::select(vec!["age", "price"]).prop_map(|n| format!("feature(\"{n}\")")),
        prop::sample::select(vec!["w", "t"]).prop_map(|n| format!("param(\"{n}\")")),
    ]
}

fn expr() -> impl Strategy<Value = String> {
    leaf().prop_recursive(5, 48, 3, |inner| {
        prop_oneof![
            (inner.clone(), prop::sample::select(vec!["+", "-", "*", "/", "<", "<=", ">", ">=", "=="]), inner.clone())
                .prop_map(|(a, op, b)| format!("{a} {op} {b}")),
            inner.clone().prop_map(|a| format!("({a})")),
            inner.clone().prop_map(|a| format!("-{a}")),
            (prop::sample::select(vec!["log", "exp", "abs"]), inner.clone()).prop_map(|(f, a)| format!("{f}({a})")),
            (prop::sample::select(vec!["min", "max"]), inner.clone(), inner.clone())
                .prop_map(|(f, a, b)| format!("{f}({a}, {b})")),
            (prop::sample::select(vec!["if", "clamp"]), inner.clone(), inner.clone(), inner)
                .prop_map(|(f, a, b, c)| format!("{f}({a}, {b}, {c})")),
        ]
    })
}

fn program() -> impl Strategy<Value = String> {
    (prop::collection::vec(expr(), 0..3), expr(), any::<bool>()).prop_map(|(lets, last, decide)| {
        let mut src = String::new();
        for (i, e) in lets.iter().enumerate() {
            src.push_str(&format!("let v{i} = {e};\n"));
        }
        let term = if lets.is_empty() { last } else { format!("{last} + v{}", lets.len() - 1) };
        src.push_str(&format!("{} {term};", if decide { "decide" } else { "score" }));
        src
    })
}

proptest! {
    #[test]
    fn parse_print_parse_fixpoint(src in program()) {
        let p = parse_policy(&src);
        prop_assume!(p.is_ok());
        let p = p.unwrap();
        let printed = p.to_string();
        let again = parse_policy(&printed).expect("printed program parses");
        prop_assert_eq!(&p, &again);
        prop_assert_eq!(printed, again.to_string());
    }
}

#[test]
fn argmax_invariant_under_positive_affine_scaling() {
    assert_eq!(argmax_violations(1_000, 11), 0);
}

#[test]
fn generated_programs_print_to_a_fixpoint() {
    let mut parsed = 0;
    for seed in 0..300 {
        let src = random_program(seed);
        let Ok(p) = parse_policy(&src) else { continue };
        parsed += 1;
        let again = parse_policy(&p.to_string()).unwrap();
        assert_eq!(p, again, "{src}");
    }
    assert!(parsed > 250);
}
