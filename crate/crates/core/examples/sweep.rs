use crystalbox::suite::{stall_weight_sweep, SweepConfig};

fn main() {
    let cfg = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap(),
        None => SweepConfig::default(),
    };
    for r in stall_weight_sweep(&cfg).unwrap() {
        println!("w_s={} steps={} drops={} dominant={:?} stall_share={:.3}", r.stall_weight, r.steps, r.drop_states, r.dominant_counts, r.share(2));
    }
}
