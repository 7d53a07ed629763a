//! Turns class posteriors on unlabeled data into pseudo-labels: joint
//! posterior, Sinkhorn scaling to the exemplar class ratio, soft labels,
//! uncertainty and confident top-K selection.

use tsvlab::curate::{select_topk, uncertainty_scores};
use tsvlab::data::ClassDistribution;
use tsvlab::ot::{build_joint_posterior, plan_to_soft_labels, sinkhorn, SinkhornParams};

fn main() -> tsvlab::Result<()> {
    // posteriors that lean truthful far more often than the 3:1 prior allows
    let posteriors: Vec<[f64; 2]> = [0.95, 0.9, 0.85, 0.8, 0.7, 0.65, 0.6, 0.55]
        .iter()
        .map(|&t| [t, 1.0 - t])
        .collect();
    let w = ClassDistribution::from_counts(3, 1)?;
    let joint = build_joint_posterior(&posteriors, 1e-12)?;

    for n_iter in [1, 3, 50] {
        let plan = sinkhorn(&joint, &w, &SinkhornParams { n_iter, ..Default::default() })?;
        let cols = plan.col_sums();
        let m = posteriors.len() as f64;
        let row_err = plan.row_sums().iter().fold(0.0f64, |e, r| e.max((r - 1.0 / m).abs()));
        println!(
            "{n_iter:>3} iterations: class mass {:.4} / {:.4}, row marginal error {row_err:.1e}",
            cols[0], cols[1]
        );
    }

    let plan = sinkhorn(&joint, &w, &SinkhornParams::default())?;
    let labels = plan_to_soft_labels(&plan)?;
    let ids: Vec<String> = (0..posteriors.len()).map(|i| format!("u{i}")).collect();
    let qs: Vec<_> = ids.iter().cloned().zip(labels.iter().copied()).collect();
    let ps: Vec<_> = ids.iter().cloned().zip(posteriors.iter().copied()).collect();
    let records = uncertainty_scores(&qs, &ps)?;
    for (r, p) in records.iter().zip(&posteriors) {
        println!(
            "{}: p_truthful {:.2} -> q_truthful {:.3}, omega {:.3}",
            r.id,
            p[0],
            r.q.as_array()[0],
            r.omega
        );
    }
    let chosen = select_topk(&records, 4)?;
    println!("most confident 4: {:?}", chosen.ids().collect::<Vec<_>>());
    Ok(())
}
