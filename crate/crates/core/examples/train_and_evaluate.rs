//! End-to-end synthetic run: trains the steering vector and prototypes, then
//! compares held-out AUROC with the same pipeline with steering frozen at zero.
//!
//!     cargo run --release --example train_and_evaluate

use tsvlab::backend::InProcessBackend;
use tsvlab::experiment::{baseline_config, make_splits, run_on, ExperimentSetup};
use tsvlab::train::Phase;

fn main() -> tsvlab::Result<()> {
    let setup = ExperimentSetup::default();
    let splits = make_splits(&setup)?;
    let mut backend = InProcessBackend::new(&setup.model)?;

    let run = run_on(&setup.train, &mut backend, &splits)?;
    for rec in &run.outcome.log {
        let phase = if rec.phase == Phase::Initial { "initial" } else { "augmented" };
        println!("epoch {:>2} {phase:<9} loss {:.4}", rec.epoch, rec.mean_loss);
    }
    let base = run_on(&baseline_config(&setup.train), &mut backend, &splits)?;

    println!("test AUROC with steering    {:.4}", run.test_auroc);
    println!("test AUROC without steering {:.4}", base.test_auroc);
    if let Some(acc) = run.outcome.pl_acc {
        println!("pseudo-label accuracy at K={} {acc:.4}", setup.train.k_select);
    }
    println!("pseudo-label accuracy at K=32 {:.4}", run.pl_acc_at(32, &splits)?);
    Ok(())
}
