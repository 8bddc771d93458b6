//! Run all three methods on the synthetic corpus over several seeds and
//! print per-seed and median metrics.
//!
//! ```text
//! cargo run --release -p oodkit --example synthetic_comparison -- [seeds] [section.key=value ...]
//! ```

use std::time::Instant;

use oodkit::pipeline::{run_all, Method, RunConfig};
use oodkit::synth::{self, SynthConfig, SYNTH_RUN_CONFIG};

/// auroc, fpr@90, aupr, ece, IND accuracy
type Row = (f64, f64, f64, f64, f64);

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut synth_cfg = SynthConfig::default();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(rest) = a.strip_prefix("synth.") {
            let mut doc = toml::Table::try_from(&synth_cfg).expect("serializable");
            oodkit::pipeline::apply_override(&mut doc, rest)?;
            synth_cfg = doc.try_into()?;
        } else {
            overrides.push(a);
        }
    }
    let dir = tempfile::tempdir()?;
    let bundle = synth::write_bundle(&synth::generate(&synth_cfg)?, dir.path())?;
    let started = Instant::now();
    let mut table: Vec<Vec<Row>> = vec![Vec::new(); 3];
    for seed in 0..seeds {
        let mut sets = overrides.clone();
        sets.push(format!("seed={seed}"));
        let config = RunConfig::from_toml(SYNTH_RUN_CONFIG, dir.path(), &sets)?;
        let reports = run_all(&config, &Method::ALL, &dir.path().join(format!("run{seed}")))?;
        for (i, r) in reports.iter().enumerate() {
            let m = &r.metrics;
            println!(
                "seed {seed} {:<12} auroc {:.4} fpr90 {:.4} aupr {:.4} ece {:.4} acc {:.4} pool {} {:?}",
                r.method.tag(),
                m.auroc,
                m.fpr_at_90,
                m.aupr,
                m.ece,
                r.ind_accuracy,
                r.n_ood_train,
                r.filter.as_ref().map(|f| (f.n_kept, f.n_candidates, f.d, f.t)),
            );
            table[i].push((m.auroc, m.fpr_at_90, m.aupr, m.ece, r.ind_accuracy));
        }
    }
    for (i, m) in Method::ALL.iter().enumerate() {
        let col = |f: fn(&Row) -> f64| median(table[i].iter().map(f).collect());
        println!(
            "median {:<12} auroc {:.4} fpr90 {:.4} aupr {:.4} ece {:.4} acc {:.4}",
            m.tag(),
            col(|t| t.0),
            col(|t| t.1),
            col(|t| t.2),
            col(|t| t.3),
            col(|t| t.4)
        );
    }
    println!("bundle {}, elapsed {:.1}s", bundle.config.display(), started.elapsed().as_secs_f64());
    Ok(())
}
