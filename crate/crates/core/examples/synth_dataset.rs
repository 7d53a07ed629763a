//! Generates a synthetic dataset, writes it in the dataset file format and
//! splits it the way training does.
//!
//!     cargo run --example synth_dataset -- [count] [out.jsonl]

use tsvlab::data::{
    class_distribution_from_exemplars, load_dataset, save_dataset, split_exemplar_unlabeled, split_holdout,
    synth_generate, Class, SynthConfig,
};

fn main() -> tsvlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(512, |s| s.parse().expect("count"));
    let dir = tempfile::tempdir()?;
    let out = args.next().map_or_else(|| dir.path().join("synth.jsonl"), Into::into);

    let cfg = SynthConfig::default();
    let data = synth_generate(&cfg, count)?;
    save_dataset(&data, &out)?;
    let data = load_dataset(&out)?;
    println!(
        "{} records, {} truthful / {} hallucinated -> {}",
        data.len(),
        data.count(Class::Truthful),
        data.count(Class::Hallucinated),
        out.display()
    );

    let first = &data.records()[0];
    println!("{} {:?} tokens {:?}", first.id, first.truth(), first.sequence.tokens());

    let (exemplars, rest) = split_exemplar_unlabeled(&data, 32, cfg.seed)?;
    let (pool, test) = split_holdout(&rest, 0.5, cfg.seed)?;
    let w = class_distribution_from_exemplars(&exemplars)?;
    println!(
        "exemplars {} (w = {:.3} / {:.3}), unlabeled pool {}, test {}",
        exemplars.len(),
        w.get(Class::Truthful),
        w.get(Class::Hallucinated),
        pool.len(),
        test.len()
    );
    Ok(())
}
