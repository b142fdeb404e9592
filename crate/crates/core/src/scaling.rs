//! Compute frontiers and power-law fits over training logs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default loss value separating the two piecewise segments.
pub const DEFAULT_SPLIT_LOSS: f64 = 0.14;
/// Default centered rolling-mean window for loss curves.
pub const DEFAULT_SMOOTHING_WINDOW: usize = 50;
/// Budgets this far outside the fitted range are flagged.
pub const EXTRAPOLATION_FACTOR: f64 = 10.0;

/// Non-finite floats are written as `null` and read back as NaN.
mod nullable {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLogRecord {
    pub run_id: String,
    pub family: String,
    /// Trainable parameters.
    #[serde(rename = "N")]
    pub n: u64,
    pub step: u64,
    /// Target views rendered so far, `B * V_T * step`.
    #[serde(rename = "D")]
    pub d: u64,
    /// Cumulative training FLOPs.
    pub flops: u128,
    #[serde(with = "nullable")]
    pub train_loss: f64,
    #[serde(with = "nullable")]
    pub eval_loss: f64,
    #[serde(with = "nullable")]
    pub eval_psnr: f64,
    #[serde(with = "nullable")]
    pub eval_ssim: f64,
    pub wall_seconds: f64,
}

impl RunLogRecord {
    pub fn has_eval(&self) -> bool {
        self.eval_loss.is_finite()
    }
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunLogRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_run_log(path: &Path, records: &[RunLogRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Best evaluation loss reachable within a compute budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParetoPoint {
    /// The budget.
    pub flops: f64,
    pub eval_loss: f64,
    pub run_id: String,
    pub n: u64,
    pub d: u64,
    pub step: u64,
    /// Compute actually spent by the achieving record.
    pub record_flops: f64,
}

fn order(a: &RunLogRecord, b: &RunLogRecord) -> Ordering {
    a.eval_loss
        .total_cmp(&b.eval_loss)
        .then(a.flops.cmp(&b.flops))
        .then_with(|| a.run_id.cmp(&b.run_id))
        .then(a.step.cmp(&b.step))
}

fn point(budget: f64, r: &RunLogRecord) -> ParetoPoint {
    ParetoPoint {
        flops: budget,
        eval_loss: r.eval_loss,
        run_id: r.run_id.clone(),
        n: r.n,
        d: r.d,
        step: r.step,
        record_flops: r.flops as f64,
    }
}

/// Lower envelope of evaluation loss at each budget in `grid`.
///
/// Budgets below every evaluated record are skipped, so the result may be
/// empty. Ties are resolved by loss, then FLOPs, run id and step.
pub fn pareto_frontier(records: &[RunLogRecord], grid: &[f64]) -> Result<Vec<ParetoPoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain("frontier grid must be sorted ascending".into()));
    }
    let mut evals: Vec<&RunLogRecord> = records.iter().filter(|r| r.has_eval()).collect();
    evals.sort_by_key(|a| a.flops);
    let mut out = Vec::with_capacity(grid.len());
    let mut best: Option<&RunLogRecord> = None;
    let mut next = 0;
    for &budget in grid {
        while next < evals.len() && evals[next].flops as f64 <= budget {
            let r = evals[next];
            if best.is_none_or(|b| order(r, b) == Ordering::Less) {
                best = Some(r);
            }
            next += 1;
        }
        if let Some(b) = best {
            out.push(point(budget, b));
        }
    }
    Ok(out)
}

/// `per_decade` log-spaced budgets covering `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || per_decade == 0 {
        return Err(Error::Domain(format!("bad grid range [{lo}, {hi}]")));
    }
    let (a, b) = (lo.log10(), hi.log10());
    let steps = ((b - a) * per_decade as f64).ceil().max(0.0) as usize;
    let mut g: Vec<f64> = (0..=steps)
        .map(|i| 10f64.powf(a + i as f64 / per_decade as f64))
        .collect();
    *g.last_mut().unwrap() = g.last().unwrap().max(hi);
    g[0] = lo;
    Ok(g)
}

/// Grid spanning the evaluated records of a log.
pub fn default_grid(records: &[RunLogRecord], per_decade: usize) -> Result<Vec<f64>> {
    let flops: Vec<f64> = records
        .iter()
        .filter(|r| r.has_eval() && r.flops > 0)
        .map(|r| r.flops as f64)
        .collect();
    let lo = flops.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = flops.iter().cloned().fold(0.0, f64::max);
    if flops.is_empty() {
        return Ok(Vec::new());
    }
    log_grid(lo, hi, per_decade)
}

/// `y = exp(log_intercept) * x^exponent`, fitted in log-log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    /// Natural-log intercept.
    pub log_intercept: f64,
    pub r2: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.log_intercept + self.exponent * x.ln()).exp()
    }
}

/// Ordinary least squares on `(ln x, ln y)`. A target without variance has
/// `r2 = 1` by convention.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Domain(format!("power-law fit needs 2 points, got {}", points.len())));
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain(format!("power-law fit needs positive finite values, got ({x}, {y})")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Domain("power-law fit needs at least two distinct x values".into()));
    }
    let exponent = sxy / sxx;
    let log_intercept = my - exponent * mx;
    let r2 = if syy <= f64::EPSILON * f64::EPSILON * n {
        1.0
    } else {
        let ss_res: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (y - log_intercept - exponent * x).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max);
    Ok(PowerLawFit {
        exponent,
        log_intercept,
        r2,
        x_min,
        x_max,
        points: points.len(),
    })
}

/// Exponents of `N_opt ~ chi^a` and `D_opt ~ chi^b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChinchillaFit {
    pub n_fit: PowerLawFit,
    pub d_fit: PowerLawFit,
    /// Set when every frontier point has the same model size.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Distinct achieving records of a frontier, in compute order.
fn frontier_records(frontier: &[ParetoPoint]) -> Vec<&ParetoPoint> {
    let mut seen = std::collections::HashSet::new();
    let mut pts: Vec<&ParetoPoint> = frontier
        .iter()
        .filter(|p| seen.insert((p.run_id.clone(), p.step)))
        .collect();
    pts.sort_by(|a, b| a.record_flops.total_cmp(&b.record_flops));
    pts
}

/// Fits both exponents against the compute of the achieving records.
pub fn chinchilla_fit(frontier: &[ParetoPoint]) -> Result<ChinchillaFit> {
    let pts = frontier_records(frontier);
    let mut budgets: Vec<f64> = pts.iter().map(|p| p.record_flops).collect();
    budgets.dedup();
    if budgets.len() < 3 {
        return Err(Error::Domain(format!(
            "chinchilla fit needs 3 distinct compute values on the frontier, got {}",
            budgets.len()
        )));
    }
    let n_fit = fit_power_law(&pts.iter().map(|p| (p.record_flops, p.n as f64)).collect::<Vec<_>>())?;
    let d_fit = fit_power_law(&pts.iter().map(|p| (p.record_flops, p.d as f64)).collect::<Vec<_>>())?;
    let degenerate = pts.iter().all(|p| p.n == pts[0].n);
    let mut warnings = Vec::new();
    if degenerate {
        warnings.push(format!(
            "every frontier point uses N = {}; the model-size exponent is meaningless",
            pts[0].n
        ));
    }
    Ok(ChinchillaFit {
        n_fit,
        d_fit,
        degenerate,
        warnings,
    })
}

/// Loss-versus-compute fits above and at-or-below a loss threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PiecewiseFit {
    pub split_loss: f64,
    /// Points with loss above the split.
    pub high: PowerLawFit,
    /// Points with loss at or below the split.
    pub low: PowerLawFit,
    /// Set when a segment was too small and one fit covers everything.
    pub fallback: bool,
}

pub fn piecewise_loss_fit(frontier: &[ParetoPoint], split_loss: f64) -> Result<PiecewiseFit> {
    let pts: Vec<(f64, f64)> = frontier_records(frontier)
        .iter()
        .map(|p| (p.record_flops, p.eval_loss))
        .collect();
    let (high, low): (Vec<_>, Vec<_>) = pts.iter().partition(|p| p.1 > split_loss);
    if high.len() < 2 || low.len() < 2 {
        let all = fit_power_law(&pts)?;
        return Ok(PiecewiseFit {
            split_loss,
            high: all,
            low: all,
            fallback: true,
        });
    }
    Ok(PiecewiseFit {
        split_loss,
        high: fit_power_law(&high)?,
        low: fit_power_law(&low)?,
        fallback: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Allocation {
    pub n_opt: f64,
    pub d_opt: f64,
    pub extrapolated: bool,
    pub warning: Option<String>,
}

/// Model size and sample count the fitted laws prescribe for a budget.
pub fn recommend_allocation(budget: f64, fit: &ChinchillaFit) -> Result<Allocation> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::Domain(format!("budget must be positive, got {budget}")));
    }
    let (lo, hi) = (fit.n_fit.x_min, fit.n_fit.x_max);
    let extrapolated = budget > hi * EXTRAPOLATION_FACTOR || budget < lo / EXTRAPOLATION_FACTOR;
    Ok(Allocation {
        n_opt: fit.n_fit.predict(budget),
        d_opt: fit.d_fit.predict(budget),
        extrapolated,
        warning: extrapolated.then(|| {
            format!("budget {budget:e} is more than {EXTRAPOLATION_FACTOR}x outside the fitted range [{lo:e}, {hi:e}]")
        }),
    })
}

/// Centered rolling mean; the window shrinks at the ends.
pub fn rolling_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window.max(1) - half).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchGroup {
    pub b_eff: u64,
    pub run_ids: Vec<String>,
    pub final_psnr: Vec<f64>,
    pub mean_psnr: f64,
    /// `max - min` of final PSNR within the group.
    pub spread: f64,
    /// Largest gap between smoothed training-loss curves at a shared step.
    pub curve_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectiveBatchReport {
    pub groups: Vec<BatchGroup>,
    /// `max - min` of the group mean PSNRs.
    pub across_spread: f64,
    pub max_within_spread: f64,
    pub notes: Vec<String>,
}

/// Groups runs by `B_eff = D / step` and compares their outcomes.
pub fn effective_batch_report(records: &[RunLogRecord], window: usize) -> Result<EffectiveBatchReport> {
    let mut runs: BTreeMap<&str, Vec<&RunLogRecord>> = BTreeMap::new();
    for r in records {
        runs.entry(r.run_id.as_str()).or_default().push(r);
    }
    let mut groups: BTreeMap<u64, Vec<(&str, f64, BTreeMap<u64, f64>)>> = BTreeMap::new();
    let mut notes = Vec::new();
    for (id, mut recs) in runs {
        recs.sort_by_key(|r| r.step);
        let Some(last_step) = recs.iter().rev().find(|r| r.step > 0) else {
            notes.push(format!("{id}: no records past step 0"));
            continue;
        };
        let b_eff = last_step.d / last_step.step;
        let Some(psnr) = recs.iter().rev().find(|r| r.eval_psnr.is_finite()).map(|r| r.eval_psnr) else {
            notes.push(format!("{id}: never evaluated"));
            continue;
        };
        let curve: Vec<&RunLogRecord> = recs.iter().copied().filter(|r| r.train_loss.is_finite()).collect();
        let smooth = rolling_mean(&curve.iter().map(|r| r.train_loss).collect::<Vec<_>>(), window);
        let smooth = curve.iter().map(|r| r.step).zip(smooth).collect();
        groups.entry(b_eff).or_default().push((id, psnr, smooth));
    }
    let mut out = Vec::new();
    for (b_eff, members) in groups {
        if members.len() < 2 {
            notes.push(format!("B_eff {b_eff}: single run {}, excluded", members[0].0));
            continue;
        }
        let psnr: Vec<f64> = members.iter().map(|m| m.1).collect();
        let max = psnr.iter().cloned().fold(f64::MIN, f64::max);
        let min = psnr.iter().cloned().fold(f64::MAX, f64::min);
        let mut deviation: f64 = 0.0;
        for step in members[0].2.keys() {
            let vals: Vec<f64> = members.iter().filter_map(|m| m.2.get(step).copied()).collect();
            if vals.len() == members.len() {
                let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
                let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
                deviation = deviation.max(hi - lo);
            }
        }
        out.push(BatchGroup {
            b_eff,
            run_ids: members.iter().map(|m| m.0.to_string()).collect(),
            mean_psnr: psnr.iter().sum::<f64>() / psnr.len() as f64,
            spread: max - min,
            final_psnr: psnr,
            curve_deviation: deviation,
        });
    }
    let means: Vec<f64> = out.iter().map(|g| g.mean_psnr).collect();
    let across_spread = if means.len() < 2 {
        0.0
    } else {
        means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min)
    };
    let max_within_spread = out.iter().map(|g| g.spread).fold(0.0, f64::max);
    Ok(EffectiveBatchReport {
        groups: out,
        across_spread,
        max_within_spread,
        notes,
    })
}

/// Fits and frontier of one model family.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyLaws {
    pub family: String,
    pub frontier: Vec<ParetoPoint>,
    pub chinchilla: Option<ChinchillaFit>,
    pub piecewise: Option<PiecewiseFit>,
    pub notes: Vec<String>,
}

/// Frontier and fits per family found in a log.
pub fn fit_laws(records: &[RunLogRecord], per_decade: usize, split_loss: f64) -> Result<Vec<FamilyLaws>> {
    let mut by_family: BTreeMap<&str, Vec<RunLogRecord>> = BTreeMap::new();
    for r in records {
        by_family.entry(r.family.as_str()).or_default().push(r.clone());
    }
    by_family
        .into_iter()
        .map(|(family, recs)| {
            let grid = default_grid(&recs, per_decade)?;
            let frontier = pareto_frontier(&recs, &grid)?;
            let mut notes = Vec::new();
            let chinchilla = chinchilla_fit(&frontier)
                .map_err(|e| notes.push(format!("chinchilla fit skipped: {e}")))
                .ok();
            let piecewise = piecewise_loss_fit(&frontier, split_loss)
                .map_err(|e| notes.push(format!("loss fit skipped: {e}")))
                .ok();
            Ok(FamilyLaws {
                family: family.to_string(),
                frontier,
                chinchilla,
                piecewise,
                notes,
            })
        })
        .collect()
}

/// One row of the scaling-laws CSV. Frontier rows fill the point columns,
/// fit rows the fit columns, metadata rows `key` and `value`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LawsCsvRow {
    pub section: String,
    pub family: String,
    pub flops: Option<f64>,
    pub eval_loss: Option<f64>,
    pub run_id: Option<String>,
    #[serde(rename = "N")]
    pub n: Option<u64>,
    #[serde(rename = "D")]
    pub d: Option<u64>,
    pub exponent: Option<f64>,
    pub log_intercept: Option<f64>,
    pub r2: Option<f64>,
    pub key: Option<String>,
    pub value: Option<String>,
}

fn fit_row(section: &str, family: &str, f: &PowerLawFit) -> LawsCsvRow {
    LawsCsvRow {
        section: section.into(),
        family: family.into(),
        exponent: Some(f.exponent),
        log_intercept: Some(f.log_intercept),
        r2: Some(f.r2),
        ..Default::default()
    }
}

/// Serializes frontiers and fits, plus the smoothing window and split.
pub fn laws_csv_rows(laws: &[FamilyLaws], smoothing_window: usize, split_loss: f64) -> Vec<LawsCsvRow> {
    let meta = |k: &str, v: String| LawsCsvRow {
        section: "meta".into(),
        key: Some(k.into()),
        value: Some(v),
        ..Default::default()
    };
    let mut rows = vec![
        meta("smoothing_window", smoothing_window.to_string()),
        meta("split_loss", split_loss.to_string()),
    ];
    for fam in laws {
        for p in &fam.frontier {
            rows.push(LawsCsvRow {
                section: "frontier".into(),
                family: fam.family.clone(),
                flops: Some(p.flops),
                eval_loss: Some(p.eval_loss),
                run_id: Some(p.run_id.clone()),
                n: Some(p.n),
                d: Some(p.d),
                ..Default::default()
            });
        }
        if let Some(c) = &fam.chinchilla {
            rows.push(fit_row("fit_n", &fam.family, &c.n_fit));
            rows.push(fit_row("fit_d", &fam.family, &c.d_fit));
        }
        if let Some(p) = &fam.piecewise {
            rows.push(fit_row("fit_loss_high", &fam.family, &p.high));
            rows.push(fit_row("fit_loss_low", &fam.family, &p.low));
        }
    }
    rows
}

pub fn write_laws_csv(path: &Path, rows: &[LawsCsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_laws_csv(path: &Path) -> Result<Vec<LawsCsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::config(format!("{}: {e}", path.display()))))
        .collect()
}
