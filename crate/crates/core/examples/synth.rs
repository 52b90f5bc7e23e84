//! Writes a synthetic uniform profile to stdout; handy for producing test
//! and sample inputs: `cargo run -p pipeplan --example synth 6 1 2 4 1.0 100000000`.

use pipeplan::profile::{profile_to_json, synth_profile};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let get = |i: usize, default: &str| -> String {
        args.get(i).cloned().unwrap_or_else(|| default.to_string())
    };
    let layers: usize = get(0, "6").parse().expect("layers");
    let gpus: u32 = get(1, "1").parse().expect("gpus_per_node");
    let fwd: f64 = get(2, "2").parse().expect("fwd_ms");
    let bwd: f64 = get(3, "4").parse().expect("bwd_ms");
    let tp_eff: f64 = get(4, "1.0").parse().expect("tp_eff");
    let state: u64 = get(5, "100000000").parse().expect("state_bytes");
    let profile = synth_profile(layers, gpus, fwd, bwd, tp_eff, state).expect("valid arguments");
    print!("{}", profile_to_json(&profile));
}
