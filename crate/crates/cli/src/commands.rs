//! Subcommand implementations.

use crate::kv::Kv;
use crate::{Cli, Command};
use milr_core::analysis::{
    self, eos_experiment, eta_star_fit_points, fit_loglog, fraction_above_two_over_lambda,
    run_sweep, sharpness_fit_points, LrPolicy, SweepPlan,
};
use milr_core::autodiff::LossKind;
use milr_core::data::{self, eval_batch, Dataset, GaussianSpec};
use milr_core::milr::{estimate_milr, MilrConfig};
use milr_core::network::{init_network, ArchSpec, InitScheme};
use milr_core::rng::Rng;
use milr_core::sharpness::{
    frobenius_sq_mc, loss_hessian_top_eigenvalue, FrobeniusConfig, HessianWeighting,
    PowerIterConfig,
};
use milr_core::theory::{self, CorrectionMode, MomentSource, TheoryConfig, YQuantity};
use milr_core::training::TrainConfig;
use milr_core::{Error, Result};
use std::path::{Path, PathBuf};

pub fn run(cli: Cli) -> Result<()> {
    let kv = Kv::load(cli.config.as_deref())?;
    let out = cli.out.clone();
    let seed = cli.seed;
    match &cli.command {
        Command::GenData => gen_data(&kv, seed, need_out(&out)?),
        Command::Milr(d) => milr_cmd(&kv, seed, &d.data, need_out(&out)?),
        Command::Sweep(d) => sweep_cmd(&kv, seed, &d.data, need_out(&out)?),
        Command::Sharpness(d) => sharpness_cmd(&kv, seed, &d.data, need_out(&out)?),
        Command::FrobMc => frob_mc_cmd(&kv, seed, need_out(&out)?),
        Command::TheoryCheck => theory_check_cmd(&kv, seed, need_out(&out)?),
        Command::Eos(d) => eos_cmd(&kv, seed, &d.data, need_out(&out)?),
        Command::Fit { input } => fit_cmd(&kv, input, need_out(&out)?),
    }?;
    kv.finish()
}

fn need_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn loss_kind(kv: &Kv) -> Result<LossKind> {
    match kv.get_string("loss", "cross_entropy").as_str() {
        "mse" => Ok(LossKind::Mse),
        "cross_entropy" => Ok(LossKind::CrossEntropy),
        other => Err(Error::Config(format!("unknown loss '{other}'"))),
    }
}

fn gen_data(kv: &Kv, seed: u64, out: &Path) -> Result<()> {
    let spec = GaussianSpec {
        d: kv.get("d", 100usize)?,
        per_class_train: kv.get("per_class_train", 9000usize)?,
        per_class_val: kv.get("per_class_val", 1000usize)?,
        anisotropic: kv.get("anisotropic", false)?,
        seed: kv.get("data_seed", 0u64)?,
    };
    let ds = data::gen_gaussian(&spec, &mut Rng::from_seed(seed))?;
    data::write_cache(&ds, out)?;
    println!(
        "wrote {}: {} samples ({} train / {} val), d = {}",
        out.display(),
        ds.n(),
        ds.train_idx.len(),
        ds.val_idx.len(),
        ds.dim()
    );
    Ok(())
}

fn train_cfg(kv: &Kv) -> Result<TrainConfig> {
    Ok(TrainConfig {
        base_lr: 0.1, // replaced per probe
        input_layer_multiplier: kv.get("input_layer_multiplier", 1e-2)?,
        batch_size: kv.get("batch_size", 128usize)?,
        epochs: kv.get("epochs", 10usize)?,
        loss: loss_kind(kv)?,
        shuffle_seed: 0,
        freeze_input: false,
    })
}

fn milr_config(kv: &Kv, t: f64) -> Result<MilrConfig> {
    Ok(MilrConfig {
        t,
        lower: kv.get("lower", 0.0)?,
        upper: kv.get("upper", 1.0)?,
        search_iters: kv.get("search_iters", 5usize)?,
        epochs: kv.get("epochs", 10usize)?,
    })
}

/// Threshold accuracy: explicit `t = <value>`, or the linear baseline.
fn resolve_threshold(kv: &Kv, ds: &Dataset, seed: u64) -> Result<(f64, String)> {
    if let Some(t) = kv.get_opt::<f64>("t")? {
        return Ok((t, format!("t = {t} (explicit)")));
    }
    let mut cfg = train_cfg(kv)?;
    cfg.base_lr = kv.get("baseline_lr", 0.5)?;
    cfg.shuffle_seed = Rng::from_seed(seed).derive(&[0x626c]).seed();
    let t = milr_core::training::linear_baseline(ds, &cfg, seed)?;
    Ok((t, format!("t = {t} (linear baseline)")))
}

fn milr_cmd(kv: &Kv, seed: u64, data: &Path, out: &Path) -> Result<()> {
    let ds = data::read_cache(data)?;
    let depth = kv.get("depth", 5usize)?;
    let width = kv.get("width", 40usize)?;
    let scheme = InitScheme::parse(&kv.get_string("scheme", "kaiming"))?;
    let (t, t_line) = resolve_threshold(kv, &ds, seed)?;
    let cfg = milr_config(kv, t)?;
    let mut tc = train_cfg(kv)?;
    LrPolicy::parse(&kv.get_string("lr_policy", "input_small"))?.apply_to(&mut tc);
    tc.shuffle_seed = Rng::from_seed(seed).derive(&[0x74726e]).seed();
    let arch = ArchSpec::constant_width(ds.dim(), depth, width, ds.classes)?;
    let mut init_rng = Rng::from_seed(seed).derive(&[depth as u64, width as u64]);
    let mlp = init_network(&arch, scheme, &mut init_rng)?;
    let res = estimate_milr(&mlp, &ds, &cfg, &tc)?;
    let mut cfg_lines = vec![
        format!("command = milr"),
        format!("seed = {seed}"),
        format!("dataset = {}", ds.source),
        format!("depth = {depth}, width = {width}, scheme = {}", scheme.name()),
        t_line,
        format!(
            "milr = (l={}, u={}, s={}, e={})",
            cfg.lower, cfg.upper, cfg.search_iters, cfg.epochs
        ),
    ];
    cfg_lines.push(match res.eta_star {
        Some(e) => format!("eta_star = {e}"),
        None => "eta_star = none (no passing midpoint)".into(),
    });
    analysis::write_csv(
        out,
        &cfg_lines,
        analysis::MILR_TRACE_HEADER,
        &analysis::milr_trace_csv(&res.trace),
    )?;
    println!(
        "eta* = {:?} (found = {}), trace written to {}",
        res.eta_star,
        res.found,
        out.display()
    );
    Ok(())
}

fn sweep_plan(kv: &Kv, seed: u64, ds: &Dataset) -> Result<(SweepPlan, Vec<String>)> {
    let thresholds = match kv.get_list::<f64>("thresholds", &[])? {
        v if v.is_empty() => {
            let (t, _) = resolve_threshold(kv, ds, seed)?;
            vec![t]
        }
        v => v,
    };
    let mut train = train_cfg(kv)?;
    let policy = LrPolicy::parse(&kv.get_string("lr_policy", "input_small"))?;
    policy.apply_to(&mut train);
    let plan = SweepPlan {
        depths: kv.get_list("depths", &[5usize, 10, 15])?,
        width_ratios: kv.get_list("width_ratios", &[8usize, 16])?,
        seeds_per_arch: kv.get("seeds_per_arch", 5usize)?,
        scheme: InitScheme::parse(&kv.get_string("scheme", "kaiming"))?,
        lr_policy: policy,
        thresholds: thresholds.clone(),
        milr: milr_config(kv, thresholds[0])?,
        train,
        lambda_batch: kv.get("lambda_batch", 4096usize)?,
        master_seed: seed,
    };
    let lines = plan.config_lines(ds);
    Ok((plan, lines))
}

fn sweep_cmd(kv: &Kv, seed: u64, data: &Path, out: &Path) -> Result<()> {
    let ds = data::read_cache(data)?;
    let (plan, mut cfg_lines) = sweep_plan(kv, seed, &ds)?;
    let rows = run_sweep(&plan, &ds)?;
    cfg_lines.insert(0, "command = sweep".into());
    analysis::write_csv(
        out,
        &cfg_lines,
        analysis::SWEEP_HEADER,
        &analysis::sweep_rows_csv(&rows),
    )?;
    let found = rows.iter().filter(|r| r.found).count();
    println!(
        "{} rows ({} found) written to {}",
        rows.len(),
        found,
        out.display()
    );
    if let Some(f) = fraction_above_two_over_lambda(&rows) {
        println!("fraction eta* > 2/lambda1: {f:.3}");
    }
    Ok(())
}

fn sharpness_cmd(kv: &Kv, seed: u64, data: &Path, out: &Path) -> Result<()> {
    let ds = data::read_cache(data)?;
    let depth = kv.get("depth", 5usize)?;
    let width = kv.get("width", 40usize)?;
    let seeds = kv.get("seeds", 25usize)?;
    let scheme = InitScheme::parse(&kv.get_string("scheme", "kaiming"))?;
    let loss = loss_kind(kv)?;
    let lambda_batch = kv.get("lambda_batch", 4096usize)?;
    let arch = ArchSpec::constant_width(ds.dim(), depth, width, ds.classes)?;
    let (batch, used) = eval_batch(&ds, lambda_batch, loss)?;
    let master = Rng::from_seed(seed);
    let mut rows = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let mut r = master.derive(&[depth as u64, width as u64, s]);
        let mlp = init_network(&arch, scheme, &mut r)?;
        let mut prng = master.derive(&[0x6c616d, s]);
        match loss_hessian_top_eigenvalue(&mlp, &batch, loss, &PowerIterConfig::default(), &mut prng)
        {
            Ok(est) => rows.push(format!(
                "{s},{},{},{}",
                analysis::fmt_f64(est.lambda1),
                est.iterations,
                !est.converged
            )),
            Err(Error::Numeric { .. }) => rows.push(format!("{s},nan,0,true")),
            Err(e) => return Err(e),
        }
    }
    let cfg_lines = vec![
        "command = sharpness".into(),
        format!("seed = {seed}"),
        format!("dataset = {}", ds.source),
        format!("depth = {depth}, width = {width}, scheme = {}", scheme.name()),
        format!("loss = {}", loss.name()),
        format!("eval_batch = {used}"),
    ];
    analysis::write_csv(out, &cfg_lines, "seed,estimate,probes,diverged", &rows)?;
    println!("{seeds} sharpness rows written to {}", out.display());
    Ok(())
}

fn frob_mc_cmd(kv: &Kv, seed: u64, out: &Path) -> Result<()> {
    let n0 = kv.get("n0", 8usize)?;
    let width = kv.get("width", 8usize)?;
    let depth = kv.get("depth", 4usize)?;
    let seeds = kv.get("seeds", 200usize)?;
    let probes = kv.get("probes", 32usize)?;
    let scheme = InitScheme::parse(&kv.get_string("scheme", "kaiming"))?;
    let weighting = match kv.get_string("weighting", "raw").as_str() {
        "raw" => HessianWeighting::Raw,
        "effective" => HessianWeighting::EffectiveLr,
        other => return Err(Error::Config(format!("unknown weighting '{other}'"))),
    };
    let eta = kv.get_opt::<f64>("eta")?;
    let arch = ArchSpec::constant_width(n0, depth, width, 1)?;
    let cfg = FrobeniusConfig {
        seeds,
        probes_per_seed: probes,
        dense_cap: kv.get("dense_cap", 2000usize)?,
        weighting,
        eta_per_layer: eta.map(|e| vec![e; depth + 1]),
    };
    let stats = frobenius_sq_mc(&arch, scheme, &cfg, &Rng::from_seed(seed))?;
    let cfg_lines = vec![
        "command = frob-mc".into(),
        format!("seed = {seed}"),
        format!("n0 = {n0}, width = {width}, depth = {depth}, scheme = {}", scheme.name()),
        format!("seeds = {seeds}, probes = {probes}, weighting = {weighting:?}"),
        format!("mean = {}", stats.mean),
        format!("std_err = {}", stats.std_err),
        format!("discarded = {}", stats.discarded),
    ];
    let rows: Vec<String> = stats
        .per_seed
        .iter()
        .enumerate()
        .map(|(s, v)| format!("{s},{},{probes},false", analysis::fmt_f64(*v)))
        .collect();
    analysis::write_csv(out, &cfg_lines, "seed,estimate,probes,diverged", &rows)?;
    println!(
        "E||H||_F^2 = {} +- {} over {} seeds ({} discarded)",
        stats.mean, stats.std_err, stats.seeds, stats.discarded
    );
    Ok(())
}

fn theory_check_cmd(kv: &Kv, seed: u64, out: &Path) -> Result<()> {
    let n0 = kv.get("n0", 8usize)?;
    let width = kv.get("width", 8usize)?;
    let depth = kv.get("depth", 4usize)?;
    let seeds = kv.get("seeds", 2000usize)?;
    let eta = kv.get("eta", 1.0f64)?;
    let cfg = TheoryConfig {
        widths: {
            let mut w = vec![n0];
            w.extend(std::iter::repeat(width).take(depth));
            w
        },
        eta: vec![eta; depth + 1],
        x_norm_sq: kv.get("x_norm_sq", n0 as f64)?,
        moment_source: MomentSource::ClosedForm,
    };
    let state = theory::evaluate(&cfg, CorrectionMode::Exact)?;
    let est = theory::mc_estimate_all(&cfg, depth, seeds, &Rng::from_seed(seed))?;
    let mut rows = Vec::new();
    for layer in 1..=depth {
        for (qi, q) in YQuantity::ALL.iter().enumerate() {
            let rec = q.get(&state.at(layer).y);
            let (mc, se) = est.per_layer[layer - 1][qi];
            // deterministic quantities carry only float noise; report z = 0
            let z = if se > 1e-9 * mc.abs().max(1e-300) {
                (rec - mc) / se
            } else {
                0.0
            };
            rows.push(format!(
                "{layer},{},{},{},{},{}",
                q.name(),
                analysis::fmt_f64(rec),
                analysis::fmt_f64(mc),
                analysis::fmt_f64(se),
                analysis::fmt_f64(z)
            ));
        }
    }
    let pred = theory::heff_prediction(&cfg)?;
    let cfg_lines = vec![
        "command = theory-check".into(),
        format!("seed = {seed}"),
        format!("n0 = {n0}, width = {width}, depth = {depth}, eta = {eta}, seeds = {seeds}"),
        format!("heff_frob_sq_prediction = {}", pred.heff_frob_sq),
        format!("raw_h_frob_sq_prediction = {}", pred.h_frob_sq_scaled),
        format!("lambda1_upper = {}", pred.lambda1_upper),
    ];
    analysis::write_csv(
        out,
        &cfg_lines,
        "layer,quantity,recursion,mc_mean,mc_std_err,z_score",
        &rows,
    )?;
    let max_z = rows
        .iter()
        .filter_map(|r| r.rsplit(',').next().and_then(|z| z.parse::<f64>().ok()))
        .fold(0.0f64, |a, b| a.max(b.abs()));
    println!(
        "{} comparisons written to {}; max |z| = {max_z:.2}",
        rows.len(),
        out.display()
    );
    Ok(())
}

fn eos_cmd(kv: &Kv, seed: u64, data: &Path, out: &Path) -> Result<()> {
    let ds = data::read_cache(data)?;
    let depth = kv.get("depth", 3usize)?;
    let width = kv.get("width", 80usize)?;
    let steps = kv.get("steps", 4000usize)?;
    let probe_interval = kv.get("probe_interval", 250usize)?;
    let scheme = InitScheme::parse(&kv.get_string("scheme", "kaiming"))?;
    let loss = loss_kind(kv)?;
    let etas = kv.get_list("etas", &[2.0 / 20.0, 2.0 / 50.0, 2.0 / 80.0, 2.0 / 110.0])?;
    let arch = ArchSpec::constant_width(ds.dim(), depth, width, ds.classes)?;
    let trajs = eos_experiment(
        &arch,
        scheme,
        loss,
        &etas,
        &ds,
        steps,
        probe_interval,
        &Rng::from_seed(seed),
    )?;
    let cfg_lines = vec![
        "command = eos".into(),
        format!("seed = {seed}"),
        format!("dataset = {}", ds.source),
        format!("depth = {depth}, width = {width}, scheme = {}", scheme.name()),
        format!("loss = {}, steps = {steps}, probe_interval = {probe_interval}", loss.name()),
        format!("etas = {etas:?}"),
    ];
    analysis::write_csv(out, &cfg_lines, analysis::EOS_HEADER, &analysis::eos_csv_rows(&trajs))?;
    for t in &trajs {
        let last = t.trajectory.probes.last();
        println!(
            "eta = {:.5}: final lambda1 = {:?}, train acc = {:.4}, diverged = {}",
            t.eta,
            last.map(|p| p.lambda1),
            t.trajectory.final_train_accuracy,
            t.trajectory.diverged
        );
    }
    Ok(())
}

fn fit_cmd(kv: &Kv, input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let rows = analysis::parse_sweep_csv(&text)?;
    let mode = kv.get_string("fit", "eta_star_arch");
    let (points, label) = match mode.as_str() {
        "eta_star_arch" => (eta_star_fit_points(&rows).1, "ln eta* vs ln(depth*width), per-arch means"),
        "eta_star_seed" => (eta_star_fit_points(&rows).0, "ln eta* vs ln(depth*width), per-seed"),
        "sharpness" => (sharpness_fit_points(&rows), "ln(2/lambda1) vs ln eta*"),
        other => return Err(Error::Config(format!("unknown fit '{other}'"))),
    };
    if points.len() < 3 {
        return Err(Error::Config(format!(
            "fit needs >= 3 points, have {}",
            points.len()
        )));
    }
    let fit = fit_loglog(&points)?;
    let mut cfg_lines = vec![
        "command = fit".into(),
        format!("input = {}", input.display()),
        format!("fit = {mode} ({label})"),
    ];
    if mode.starts_with("eta_star") {
        cfg_lines.push(format!("alpha = {}", fit.alpha()));
    } else {
        cfg_lines.push(format!("beta = {}", fit.slope));
    }
    if let Some(f) = fraction_above_two_over_lambda(&rows) {
        cfg_lines.push(format!("fraction_eta_star_above_2_over_lambda1 = {f}"));
    }
    analysis::write_csv(out, &cfg_lines, analysis::FIT_HEADER, &[analysis::fit_csv_row(&fit)])?;
    println!(
        "slope = {}, r_squared = {}, n = {} -> {}",
        fit.slope,
        fit.r_squared,
        fit.n_points,
        out.display()
    );
    Ok(())
}
