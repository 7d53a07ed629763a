//! One-knob sweeps, each value retrained from scratch on the same data.
//!
//!     cargo run --release --example ablation_sweep -- strength 0.1,1,5

use tsvlab::data::synth_generate;
use tsvlab::experiment::{ablate, format_table, ExperimentSetup, Sweep};

fn main() -> tsvlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let sweep: Sweep = args.next().as_deref().unwrap_or("strength").parse()?;
    let values: Vec<f64> = args
        .next()
        .as_deref()
        .unwrap_or("0.1,1,5")
        .split(',')
        .map(|v| v.parse().expect("numeric sweep value"))
        .collect();
    let setup = ExperimentSetup::default();
    let data = synth_generate(&setup.synth, setup.n_records)?;
    print!("{}", format_table(&ablate(&setup, &data, sweep, &values)?));
    Ok(())
}
