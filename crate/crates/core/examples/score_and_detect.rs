//! Trains briefly, saves the checkpoint, reloads it and scores new data:
//! per-example truthfulness, thresholded decisions, AUROC and embedding norms.

use tsvlab::backend::open_backend;
use tsvlab::data::{synth_generate, SynthConfig};
use tsvlab::detect::{detect, evaluate, score_dataset};
use tsvlab::experiment::{make_splits, run_on, ExperimentSetup};
use tsvlab::backend::InProcessBackend;
use tsvlab::train::{Checkpoint, TrainConfig};

fn main() -> tsvlab::Result<()> {
    let setup = ExperimentSetup {
        train: TrainConfig {
            n_initial_epochs: 10,
            n_augmented_epochs: 5,
            ..Default::default()
        },
        ..Default::default()
    };
    let splits = make_splits(&setup)?;
    let mut backend = InProcessBackend::new(&setup.model)?;
    let run = run_on(&setup.train, &mut backend, &splits)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tsv.json");
    run.outcome.checkpoint.save(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    let mut backend = open_backend(&ckpt.backend)?;

    let fresh = synth_generate(&SynthConfig { seed: 99, ..Default::default() }, 8)?;
    for s in score_dataset(&ckpt, backend.as_mut(), &fresh, None)? {
        let verdict = if detect(s.score, 0.5) == 1 { "truthful" } else { "hallucinated" };
        println!("{} score {:.4} -> {verdict:<12} (label {:?})", s.id, s.score, s.label.unwrap());
    }

    let report = evaluate(&ckpt, backend.as_mut(), &splits.test, Some(&run.train_ids))?;
    println!("held-out AUROC {:.4} on {} + {}", report.auroc, report.n_truthful, report.n_hallucinated);
    println!(
        "mean embedding norm {:.4} unsteered, {:.4} steered",
        report.norms.unsteered.mean, report.norms.steered.mean
    );
    Ok(())
}
