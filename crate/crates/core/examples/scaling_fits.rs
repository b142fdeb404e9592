//! Frontier extraction and power-law fits on the bundled synthetic log.
//!
//! Run with `cargo run --example scaling_fits -- [log.jsonl] [laws.csv]`.

use std::path::PathBuf;

use svsm_lab::scaling::{
    fit_laws, laws_csv_rows, read_run_log, recommend_allocation, write_laws_csv, DEFAULT_SMOOTHING_WINDOW,
    DEFAULT_SPLIT_LOSS,
};

fn main() -> svsm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let log = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/synthetic.jsonl")));
    let records = read_run_log(&log)?;
    let laws = fit_laws(&records, 8, DEFAULT_SPLIT_LOSS)?;
    for fam in &laws {
        println!("{}: {} frontier points", fam.family, fam.frontier.len());
        if let Some(f) = &fam.chinchilla {
            println!("  N_opt ~ C^{:.3} (r2 {:.4})", f.n_fit.exponent, f.n_fit.r2);
            println!("  D_opt ~ C^{:.3} (r2 {:.4})", f.d_fit.exponent, f.d_fit.r2);
            let a = recommend_allocation(1e16, f)?;
            println!("  at 1e16 FLOPs: N {:.3e}, D {:.3e}{}", a.n_opt, a.d_opt, if a.extrapolated { " (extrapolated)" } else { "" });
        }
        if let Some(p) = &fam.piecewise {
            println!("  loss ~ C^{:.3} above {}, C^{:.3} below", p.high.exponent, p.split_loss, p.low.exponent);
        }
    }
    if let Some(out) = args.next() {
        write_laws_csv(&PathBuf::from(&out), &laws_csv_rows(&laws, DEFAULT_SMOOTHING_WINDOW, DEFAULT_SPLIT_LOSS))?;
        println!("wrote {out}");
    }
    Ok(())
}
