//! Drives training through the line-delimited JSON protocol instead of the
//! in-process model. The reference server runs on a thread here; a real
//! adapter would be a child process started with `ExternalBackend::spawn`.

use std::io::BufReader;
use std::sync::Arc;

use tsvlab::backend::EmbeddingBackend;
use tsvlab::experiment::{make_splits, ExperimentSetup};
use tsvlab::model::ModelWeights;
use tsvlab::protocol::{serve, ExternalBackend};
use tsvlab::train::{train, TrainConfig};

fn main() -> tsvlab::Result<()> {
    let setup = ExperimentSetup::default();
    let weights = Arc::new(ModelWeights::init(&setup.model)?);
    let (req_r, req_w) = std::io::pipe()?;
    let (rep_r, rep_w) = std::io::pipe()?;
    let server = std::thread::spawn(move || serve(weights, BufReader::new(req_r), rep_w));

    let mut backend = ExternalBackend::connect(BufReader::new(rep_r), req_w, vec!["in-thread".into()])?;
    println!("connected: d = {}, {} layers", backend.dim(), backend.n_layers());

    let cfg = TrainConfig {
        n_initial_epochs: 5,
        n_augmented_epochs: 0,
        ..setup.train.clone()
    };
    let splits = make_splits(&setup)?;
    let (pool, hidden) = splits.pool.unlabeled_view();
    let outcome = train(&cfg, &mut backend, &splits.exemplars, &pool, Some(&hidden))?;
    for rec in &outcome.log {
        println!("epoch {} loss {:.4}", rec.epoch, rec.mean_loss);
    }
    backend.shutdown()?;
    server.join().expect("server thread")?;
    Ok(())
}
