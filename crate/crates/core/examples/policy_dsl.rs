//! Parses, pretty-prints and evaluates a few decision policies.

use loopkit::policy::{evaluate, parse_policy, EvalContext};

fn main() {
    let sources = [
        r#"let u = pred("click") * param("value"); decide u > param("cost");"#,
        r#"score 2 * pred("click") + 0.5 * log(1 + pred("dwell"));"#,
        r#"score clamp(feature("ttl_hint") * 60, 30, 3600);"#,
        r#"decide pred("click") >;"#,
        r#"decide 1; decide 0;"#,
    ];
    let ctx = EvalContext::default()
        .with_prediction("click", 0.42)
        .with_prediction("dwell", 3.0)
        .with_parameter("value", 1.0)
        .with_parameter("cost", 0.3)
        .with_feature("ttl_hint", 12.5);
    for src in sources {
        match parse_policy(src) {
            Ok(p) => {
                println!("{src}\n  canonical: {}", p.to_string().trim_end());
                println!("  reads predictions {:?}, parameters {:?}, features {:?}", p.predictions, p.parameters, p.features);
                match evaluate(&p, &ctx) {
                    Ok(v) => println!("  value: {}", serde_json::to_string(&v).unwrap()),
                    Err(e) => println!("  eval error: {e}"),
                }
            }
            Err(e) => println!("{src}\n  rejected: {e}"),
        }
    }
}
