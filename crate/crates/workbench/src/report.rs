//! Text and CSV rendering of protocol reports.

use std::fmt::Write;

use robustedit_core::evaluation::protocol::ProtocolReport;

pub struct RenderedReport {
    pub summary: String,
    /// `layer,count`, one row per layer.
    pub histogram_csv: String,
    pub edits_csv: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

pub fn render_report(r: &ProtocolReport) -> RenderedReport {
    let mut s = String::new();
    let _ = writeln!(s, "layers: {}", r.n_layers);
    for c in &r.categories {
        let _ = writeln!(
            s,
            "\ncategory {}: {} tasks, {} candidates, {} edits, {} candidates skipped",
            c.category,
            c.n_tasks,
            c.candidates.len(),
            c.edits.len(),
            c.skipped_candidates.len()
        );
        let _ = writeln!(s, "  mean G-RIR: {}", opt(c.mean_g_rir));
        let _ = writeln!(
            s,
            "  {:<24} {:>5} {:>9} {:>11} {:>10}",
            "task", "layer", "G-RIR", "pert before", "pert after"
        );
        for e in &c.edits {
            let _ = writeln!(
                s,
                "  {:<24} {:>5} {:>9} {:>11.4} {:>10.4}",
                e.task_id,
                e.key_layer,
                opt(e.g_rir),
                e.self_acc_pert_before,
                e.self_acc_pert_after
            );
        }
        for k in &c.skipped_candidates {
            let _ = writeln!(s, "  skipped {}: {}", k.task_id, k.reason);
        }
    }
    for k in &r.skipped_categories {
        let _ = writeln!(s, "\ncategory {} skipped: {}", k.category, k.reason);
    }

    let mut hist = String::from("layer,count\n");
    let _ = writeln!(s, "\nkey-layer histogram");
    match &r.key_layer_histogram {
        Some(h) => {
            let peak = h.histogram.iter().copied().max().unwrap_or(0).max(1);
            for (i, &n) in h.histogram.iter().enumerate() {
                let _ = writeln!(hist, "{},{}", i + 1, n);
                let bar = "#".repeat(n * 40 / peak);
                let _ = writeln!(s, "  {:>3} {:>4} {}", i + 1, n, bar);
            }
            let _ = writeln!(s, "  mean {:.4}, std {:.4}", h.mean, h.std);
        }
        None => {
            for i in 1..=r.n_layers {
                let _ = writeln!(hist, "{i},0");
            }
            let _ = writeln!(s, "  (no edits)");
        }
    }
    for d in &r.clean_deltas {
        let _ = writeln!(s, "clean delta pass@{}: {:.4}", d.k, d.value);
    }

    let mut edits = String::from("category,task_id,key_layer,g_rir,self_acc_pert_before,self_acc_pert_after,steps_taken\n");
    for c in &r.categories {
        for e in &c.edits {
            let _ = writeln!(
                edits,
                "{},{},{},{},{},{},{}",
                c.category,
                e.task_id,
                e.key_layer,
                e.g_rir.map_or(String::new(), |g| g.to_string()),
                e.self_acc_pert_before,
                e.self_acc_pert_after,
                e.steps_taken
            );
        }
    }
    RenderedReport {
        summary: s,
        histogram_csv: hist,
        edits_csv: edits,
    }
}
