//! Sweep orchestration over (depth, width, seed) grids, power-law fitting,
//! the edge-of-stability experiment driver, and CSV emission.
//!
//! Sweep rows execute in a rayon pool; results are collected, sorted by
//! `(depth, width, seed, t)`, and written in one pass, so identical plans and
//! master seeds produce byte-identical CSV files regardless of scheduling.

use crate::autodiff::LossKind;
use crate::data::{eval_batch, Dataset};
use crate::error::{Error, Result};
use crate::milr::{estimate_milr, MilrConfig};
use crate::network::{init_network, ArchSpec, InitScheme};
use crate::rng::Rng;
use crate::sharpness::{loss_hessian_top_eigenvalue, PowerIterConfig};
use crate::training::{full_batch_gd, GdTrajectory, TrainConfig};
use rayon::prelude::*;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// Learning-rate policy for the input layer during probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrPolicy {
    /// Input layer trains at `eta * 1e-2`.
    InputSmall,
    /// Every layer trains at `eta`.
    Uniform,
    /// Input layer frozen at initialization.
    FrozenInput,
}

impl LrPolicy {
    pub fn name(self) -> &'static str {
        match self {
            LrPolicy::InputSmall => "input_small",
            LrPolicy::Uniform => "uniform",
            LrPolicy::FrozenInput => "frozen_input",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input_small" => Ok(LrPolicy::InputSmall),
            "uniform" => Ok(LrPolicy::Uniform),
            "frozen_input" => Ok(LrPolicy::FrozenInput),
            other => Err(Error::Config(format!("unknown lr policy '{other}'"))),
        }
    }

    /// Overwrite the train config's input-layer fields for this policy.
    pub fn apply_to(self, cfg: &mut TrainConfig) {
        match self {
            LrPolicy::InputSmall => {
                cfg.input_layer_multiplier = 1e-2;
                cfg.freeze_input = false;
            }
            LrPolicy::Uniform => {
                cfg.input_layer_multiplier = 1.0;
                cfg.freeze_input = false;
            }
            LrPolicy::FrozenInput => {
                cfg.freeze_input = true;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub depths: Vec<usize>,
    /// Widths are `ratio * depth` for each ratio.
    pub width_ratios: Vec<usize>,
    pub seeds_per_arch: usize,
    pub scheme: InitScheme,
    pub lr_policy: LrPolicy,
    /// Threshold accuracies; probes run once per threshold with shared seeds.
    pub thresholds: Vec<f64>,
    pub milr: MilrConfig,
    pub train: TrainConfig,
    /// Cap on the evaluation batch used for the sharpness-at-init probe.
    pub lambda_batch: usize,
    pub master_seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.width_ratios.is_empty() || self.seeds_per_arch == 0 {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("need at least one threshold".into()));
        }
        self.milr.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn config_lines(&self, dataset: &Dataset) -> Vec<String> {
        vec![
            format!("depths = {:?}", self.depths),
            format!("width_ratios = {:?}", self.width_ratios),
            format!("seeds_per_arch = {}", self.seeds_per_arch),
            format!("scheme = {}", self.scheme.name()),
            format!("lr_policy = {}", self.lr_policy.name()),
            format!("thresholds = {:?}", self.thresholds),
            format!(
                "milr = (l={}, u={}, s={}, e={})",
                self.milr.lower, self.milr.upper, self.milr.search_iters, self.milr.epochs
            ),
            format!(
                "train = (batch={}, loss={}, input_mult={}, freeze={})",
                self.train.batch_size,
                self.train.loss.name(),
                self.train.input_layer_multiplier,
                self.train.freeze_input
            ),
            format!("lambda_batch = {}", self.lambda_batch),
            format!("master_seed = {}", self.master_seed),
            format!("dataset = {}", dataset.source),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub t_used: f64,
    pub eta_star: Option<f64>,
    pub found: bool,
    pub lambda1_init: f64,
    pub two_over_lambda1: f64,
    pub wall_time_s: f64,
    /// Per-row failure, recorded instead of aborting the sweep.
    pub error: Option<String>,
}

/// Run the full grid: per (arch, seed) initialize once, estimate eta* for
/// every threshold from that same snapshot, and measure lambda1 at the
/// initialization. Row failures are recorded in the row and never abort the
/// sweep.
pub fn run_sweep(plan: &SweepPlan, dataset: &Dataset) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    dataset.validate()?;
    let mut tasks = Vec::new();
    for &depth in &plan.depths {
        for &ratio in &plan.width_ratios {
            let width = depth * ratio;
            for seed in 0..plan.seeds_per_arch as u64 {
                tasks.push((depth, width, seed));
            }
        }
    }
    let master = Rng::from_seed(plan.master_seed);
    let rows: Vec<Vec<SweepRow>> = tasks
        .par_iter()
        .map(|&(depth, width, seed)| run_row(plan, dataset, &master, depth, width, seed))
        .collect();
    let mut flat: Vec<SweepRow> = rows.into_iter().flatten().collect();
    flat.sort_by(|a, b| {
        (a.depth, a.width, a.seed, a.t_used.to_bits())
            .cmp(&(b.depth, b.width, b.seed, b.t_used.to_bits()))
    });
    Ok(flat)
}

fn run_row(
    plan: &SweepPlan,
    dataset: &Dataset,
    master: &Rng,
    depth: usize,
    width: usize,
    seed: u64,
) -> Vec<SweepRow> {
    let start = Instant::now();
    let make = |t: f64, eta: Option<f64>, found: bool, lam: f64, err: Option<String>| SweepRow {
        depth,
        width,
        seed,
        t_used: t,
        eta_star: eta,
        found,
        lambda1_init: lam,
        two_over_lambda1: if lam != 0.0 { 2.0 / lam } else { f64::INFINITY },
        wall_time_s: start.elapsed().as_secs_f64(),
        error: err,
    };

    let mut init_rng = master.derive(&[depth as u64, width as u64, seed]);
    let arch = match ArchSpec::constant_width(dataset.dim(), depth, width, dataset.classes) {
        Ok(a) => a,
        Err(e) => return vec![make(plan.thresholds[0], None, false, f64::NAN, Some(e.to_string()))],
    };
    let mlp = match init_network(&arch, plan.scheme, &mut init_rng) {
        Ok(m) => m,
        Err(e) => return vec![make(plan.thresholds[0], None, false, f64::NAN, Some(e.to_string()))],
    };

    // sharpness at initialization on a fixed evaluation batch
    let lambda1 = (|| -> Result<f64> {
        let (batch, _) = eval_batch(dataset, plan.lambda_batch, plan.train.loss)?;
        let mut prng = master.derive(&[0x6c616d, depth as u64, width as u64, seed]);
        let est = loss_hessian_top_eigenvalue(
            &mlp,
            &batch,
            plan.train.loss,
            &PowerIterConfig::default(),
            &mut prng,
        )?;
        Ok(est.lambda1)
    })();
    let (lambda1, lam_err) = match lambda1 {
        Ok(l) => (l, None),
        Err(e) => (f64::NAN, Some(e.to_string())),
    };

    let mut out = Vec::with_capacity(plan.thresholds.len());
    for &t in &plan.thresholds {
        let mut cfg = plan.milr.clone();
        cfg.t = t;
        let mut train = plan.train.clone();
        plan.lr_policy.apply_to(&mut train);
        // same data order for every probe and every threshold
        train.shuffle_seed = master.derive(&[0x74726e, depth as u64, width as u64, seed]).seed();
        match estimate_milr(&mlp, dataset, &cfg, &train) {
            Ok(res) => out.push(make(t, res.eta_star, res.found, lambda1, lam_err.clone())),
            Err(e) => out.push(make(t, None, false, lambda1, Some(e.to_string()))),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    /// Raw OLS slope of `ln y` on `ln x`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

impl FitResult {
    /// Slope reported with the power-law sign convention
    /// `E[ln y] = -alpha ln x + gamma`.
    pub fn alpha(&self) -> f64 {
        -self.slope
    }
}

/// Ordinary least squares of `ln y` on `ln x`. Rejects nonpositive inputs
/// (with the offending index); constant-`y` input yields slope 0 and, by the
/// guarded definition, `r_squared = 0`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::Config(format!(
            "log-log fit needs >= 2 points, got {}",
            points.len()
        )));
    }
    for (i, &(x, y)) in points.iter().enumerate() {
        if !(x > 0.0) {
            return Err(Error::NonPositive { index: i, value: x });
        }
        if !(y > 0.0) {
            return Err(Error::NonPositive { index: i, value: y });
        }
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..points.len() {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if sxx == 0.0 {
        return Err(Error::Config("all x values identical in log-log fit".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..points.len() {
        let r = ly[i] - (slope * lx[i] + intercept);
        ss_res += r * r;
        ss_tot += (ly[i] - my) * (ly[i] - my);
    }
    let r_squared = if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
    })
}

/// Fit inputs for the eta* power law from sweep rows: per-seed points and
/// per-architecture means of `ln eta*` (both are reported).
pub fn eta_star_fit_points(rows: &[SweepRow]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut per_seed = Vec::new();
    let mut by_arch: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    for r in rows {
        if let Some(e) = r.eta_star {
            if e > 0.0 {
                let x = (r.depth * r.width) as f64;
                per_seed.push((x, e));
                by_arch.entry((r.depth, r.width)).or_default().push(e.ln());
            }
        }
    }
    let per_arch: Vec<(f64, f64)> = by_arch
        .into_iter()
        .map(|((d, w), ls)| {
            let mean = ls.iter().sum::<f64>() / ls.len() as f64;
            ((d * w) as f64, mean.exp())
        })
        .collect();
    (per_seed, per_arch)
}

/// Points for the sharpness relation: `x = eta*`, `y = 2 / lambda1`.
pub fn sharpness_fit_points(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|r| match r.eta_star {
            Some(e) if e > 0.0 && r.lambda1_init.is_finite() && r.lambda1_init != 0.0 => {
                Some((e, 2.0 / r.lambda1_init.abs()))
            }
            _ => None,
        })
        .collect()
}

/// Fraction of found rows with `eta* > 2 / lambda1`.
pub fn fraction_above_two_over_lambda(rows: &[SweepRow]) -> Option<f64> {
    let mut ok = 0usize;
    let mut tot = 0usize;
    for r in rows {
        if let Some(e) = r.eta_star {
            if r.lambda1_init.is_finite() {
                tot += 1;
                if e > 2.0 / r.lambda1_init {
                    ok += 1;
                }
            }
        }
    }
    (tot > 0).then(|| ok as f64 / tot as f64)
}

/// Per-seed ratios `eta*(t_low) / eta*(t_high)` for rows with
/// width/depth >= `min_ratio`, summarized as (count, mean, min, max).
pub fn threshold_stability(
    rows: &[SweepRow],
    t_low: f64,
    t_high: f64,
    min_ratio: usize,
) -> Option<(usize, f64, f64, f64)> {
    let mut ratios = Vec::new();
    let key = |r: &SweepRow| (r.depth, r.width, r.seed);
    for lo in rows.iter().filter(|r| r.t_used == t_low) {
        if lo.width < min_ratio * lo.depth {
            continue;
        }
        if let Some(hi) = rows
            .iter()
            .find(|r| r.t_used == t_high && key(r) == key(lo))
        {
            if let (Some(el), Some(eh)) = (lo.eta_star, hi.eta_star) {
                if eh > 0.0 {
                    ratios.push(el / eh);
                }
            }
        }
    }
    if ratios.is_empty() {
        return None;
    }
    let n = ratios.len();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((n, mean, min, max))
}

/// One learning rate's trajectory in the edge-of-stability experiment.
#[derive(Debug, Clone)]
pub struct EosTrajectory {
    pub eta: f64,
    pub two_over_eta: f64,
    pub trajectory: GdTrajectory,
}

/// Run full-batch GD at each rate in `etas`, recording the sharpness
/// trajectory and the `2/eta` reference level. Probe steps are aligned
/// across rates by construction.
#[allow(clippy::too_many_arguments)]
pub fn eos_experiment(
    arch: &ArchSpec,
    scheme: InitScheme,
    loss: LossKind,
    etas: &[f64],
    dataset: &Dataset,
    steps: usize,
    probe_interval: usize,
    master: &Rng,
) -> Result<Vec<EosTrajectory>> {
    let results: Vec<Result<EosTrajectory>> = etas
        .par_iter()
        .enumerate()
        .map(|(i, &eta)| {
            let mut init_rng = master.derive(&[0x656f73, 0]);
            let mut mlp = init_network(arch, scheme, &mut init_rng)?;
            let mut probe_rng = master.derive(&[0x656f73, 1, i as u64]);
            let traj = full_batch_gd(
                &mut mlp,
                dataset,
                loss,
                eta,
                steps,
                probe_interval,
                &mut probe_rng,
            )?;
            Ok(EosTrajectory {
                eta,
                two_over_eta: 2.0 / eta,
                trajectory: traj,
            })
        })
        .collect();
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// Format a float for CSV: shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Write a headered CSV with `# `-prefixed config comment lines. Byte output
/// is a pure function of the inputs.
pub fn write_csv(path: &Path, config_lines: &[String], header: &str, rows: &[String]) -> Result<()> {
    let mut buf = String::new();
    for line in config_lines {
        buf.push_str("# ");
        buf.push_str(line);
        buf.push('\n');
    }
    buf.push_str(header);
    buf.push('\n');
    for r in rows {
        buf.push_str(r);
        buf.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub const SWEEP_HEADER: &str =
    "depth,width,seed,t_used,eta_star,found,lambda1_init,two_over_lambda1,error";

/// Sweep rows as CSV lines (deterministic; excludes wall time, which is kept
/// in memory and emitted separately on request so reruns stay byte-identical).
pub fn sweep_rows_csv(rows: &[SweepRow]) -> Vec<String> {
    rows.iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.depth,
                r.width,
                r.seed,
                fmt_f64(r.t_used),
                opt_f64(r.eta_star),
                r.found,
                fmt_f64(r.lambda1_init),
                fmt_f64(r.two_over_lambda1),
                r.error.clone().unwrap_or_default().replace(',', ";")
            )
        })
        .collect()
}

/// Parse back a sweep CSV produced by [`sweep_rows_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line == SWEEP_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Config(format!("bad sweep row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            if s == "nan" {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| Error::Config(format!("bad float {s}")))
            }
        };
        rows.push(SweepRow {
            depth: f[0].parse().map_err(|_| Error::Config("bad depth".into()))?,
            width: f[1].parse().map_err(|_| Error::Config("bad width".into()))?,
            seed: f[2].parse().map_err(|_| Error::Config("bad seed".into()))?,
            t_used: parse(f[3])?,
            eta_star: if f[4].is_empty() { None } else { Some(parse(f[4])?) },
            found: f[5] == "true",
            lambda1_init: parse(f[6])?,
            two_over_lambda1: parse(f[7])?,
            wall_time_s: 0.0,
            error: if f[8].is_empty() { None } else { Some(f[8].to_string()) },
        });
    }
    Ok(rows)
}

pub const FIT_HEADER: &str = "slope,intercept,r_squared,n_points";

pub fn fit_csv_row(fit: &FitResult) -> String {
    format!(
        "{},{},{},{}",
        fmt_f64(fit.slope),
        fmt_f64(fit.intercept),
        fmt_f64(fit.r_squared),
        fit.n_points
    )
}

pub const EOS_HEADER: &str = "eta,step,loss,lambda1,two_over_eta";

pub fn eos_csv_rows(trajectories: &[EosTrajectory]) -> Vec<String> {
    let mut out = Vec::new();
    for t in trajectories {
        for p in &t.trajectory.probes {
            out.push(format!(
                "{},{},{},{},{}",
                fmt_f64(t.eta),
                p.step,
                fmt_f64(p.loss),
                fmt_f64(p.lambda1),
                fmt_f64(t.two_over_eta)
            ));
        }
    }
    out
}

pub const MILR_TRACE_HEADER: &str = "iteration,m,best_acc,passed";

pub fn milr_trace_csv(trace: &[crate::milr::ProbeRecord]) -> Vec<String> {
    trace
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{}",
                p.iteration,
                fmt_f64(p.midpoint),
                fmt_f64(p.best_accuracy),
                p.passed
            )
        })
        .collect()
}
