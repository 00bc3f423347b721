//! Runs the desk-scale evaluation for one environment and prints medians.
//!
//! cargo run --release --example desk_run -- abr|cc [n_traces]

use std::sync::Arc;
use std::time::Instant;

use crystalbox::env::{AbrConfig, AbrEnv, CcConfig, CcEnv};
use crystalbox::eval::{Method, QueryFlavor};
use crystalbox::policy::{AimdPolicy, BufferBasedPolicy};
use crystalbox::suite::{run_suite, SuiteConfig, SuiteResult};
use crystalbox::trace::TraceKind;

fn print(result: &SuiteResult) {
    for flavor in [QueryFlavor::Factual, QueryFlavor::Counterfactual] {
        for method in Method::ALL {
            let r = result.report(method, flavor).unwrap();
            let medians: Vec<String> = (0..result.components.len())
                .map(|c| format!("{}={:.3e}", result.components.names[c], r.median(c).unwrap_or(f64::NAN)))
                .collect();
            println!("{flavor:>14} {method:>10} n={:<6} {}", r.queries, medians.join(" "));
        }
    }
    for (m, l) in &result.latency {
        println!("latency {m:>10} p50={:.3} ms p95={:.3} ms", l.p50_ms, l.p95_ms);
    }
}

fn main() -> crystalbox::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind: TraceKind = args.get(1).map(String::as_str).unwrap_or("abr").parse()?;
    let mut cfg = match args.get(2) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).expect("config file"))?,
        None => SuiteConfig::for_kind(kind),
    };
    cfg.seed = args.get(3).map_or(0, |s| s.parse().expect("seed"));
    let start = Instant::now();
    let result = match kind {
        TraceKind::Abr => {
            let config = Arc::new(AbrConfig::default());
            run_suite(&cfg, kind, &|t| AbrEnv::reset(t, config.clone()), &BufferBasedPolicy::default())?
        }
        TraceKind::Cc => {
            let config = Arc::new(CcConfig::default());
            run_suite(&cfg, kind, &|t| CcEnv::reset(t, config.clone()), &AimdPolicy::default())?
        }
    };
    println!("samples {} in {:.1}s", result.samples, start.elapsed().as_secs_f64());
    print(&result);
    Ok(())
}
