//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! The suite is deterministic: every random quantity derives from the fixed
//! master seeds below.
//!
//! Known red: `criterion2_theorem_scaling_in_width`. The measured scaling of
//! `E||H||_F^2` with width over {8, 16, 32, 64} at depth 4 is ~1.36, outside
//! the required 2.0 +/- 0.2 band: at these widths the exact finite-width
//! moment factors (1 + 5/n)^L inflate the narrow-net values, and the
//! asymptotic width^2 law needs 5L/n << 1. The Monte-Carlo value agrees with
//! the exact recursion prediction to within noise, so the band, not the
//! implementation, is what fails; see the depth-scaling test (which passes)
//! and the repository notes.

use milr_core::analysis::{
    self, eta_star_fit_points, fit_loglog, fraction_above_two_over_lambda, run_sweep, LrPolicy,
    SweepPlan,
};
use milr_core::autodiff::{self, fd, Batch, LossKind, ParamVector};
use milr_core::data::{eval_batch, gen_gaussian, Dataset, GaussianSpec};
use milr_core::linalg;
use milr_core::milr::{bisect, MilrConfig};
use milr_core::network::{init_network, ArchSpec, InitScheme, Mlp};
use milr_core::rng::Rng;
use milr_core::sharpness::{
    frobenius_sq_mc, loss_hessian_top_eigenvalue, FrobeniusConfig, HessianWeighting,
    PowerIterConfig,
};
use milr_core::theory::{self, CorrectionMode, TheoryConfig, YQuantity};
use milr_core::training::{full_batch_gd, linear_baseline, TrainConfig};
use once_cell::sync::Lazy;

// ---------------------------------------------------------------------------
// criterion 1: oracle equivalence
// ---------------------------------------------------------------------------

fn tiny_net(seed: u64) -> (Mlp, Batch, Batch) {
    let mut r = Rng::from_seed(seed);
    let n0 = 2 + (r.gen_u64() % 4) as usize;
    let h1 = 2 + (r.gen_u64() % 5) as usize;
    let h2 = 2 + (r.gen_u64() % 4) as usize;
    let out = 2 + (r.gen_u64() % 3) as usize;
    let arch = ArchSpec::new(n0, vec![h1, h2], out).unwrap();
    let mlp = init_network(&arch, InitScheme::Kaiming, &mut r).unwrap();
    assert!(mlp.n_params() <= 200);
    let k = 3;
    let mut inputs = vec![0.0; k * n0];
    r.fill_standard_normal(&mut inputs);
    let mut values = vec![0.0; k * out];
    r.fill_standard_normal(&mut values);
    let labels: Vec<u32> = (0..k).map(|_| (r.gen_u64() % out as u64) as u32).collect();
    let mse = Batch::regression(inputs.clone(), n0, values, out).unwrap();
    let ce = Batch::classification(inputs, n0, labels).unwrap();
    (mlp, mse, ce)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[test]
fn criterion1_oracle_equivalence() {
    let mut worst_grad = 0.0f64;
    let mut worst_hvp = 0.0f64;
    let mut worst_asym = 0.0f64;
    let mut worst_eig = 0.0f64;
    for seed in 0..20u64 {
        let (mlp, mse, ce) = tiny_net(4000 + seed);
        for (kind, batch) in [(LossKind::Mse, &mse), (LossKind::CrossEntropy, &ce)] {
            let g = autodiff::grad(&mlp, batch, kind).unwrap();
            let gfd = fd::grad(&mlp, batch, kind).unwrap();
            worst_grad = worst_grad.max(max_rel(&g.values, &gfd.values));

            let mut r = Rng::from_seed(seed * 7 + 1);
            let mut v = ParamVector::zeros_like(&mlp);
            r.fill_standard_normal(&mut v.values);
            let h = autodiff::hvp(&mlp, batch, kind, &v).unwrap();
            let hfd = fd::hvp(&mlp, batch, kind, &v).unwrap();
            worst_hvp = worst_hvp.max(max_rel(&h.values, &hfd.values));

            let p = mlp.n_params();
            let hm = autodiff::dense_hessian(&mlp, batch, kind, None).unwrap();
            for i in 0..p {
                for j in 0..p {
                    worst_asym = worst_asym.max((hm[i * p + j] - hm[j * p + i]).abs());
                }
            }
            let ev = linalg::symmetric_eigenvalues(&hm, p);
            let extreme = ev
                .iter()
                .cloned()
                .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                .unwrap();
            let mut prng = Rng::from_seed(seed * 13 + 5);
            let est = loss_hessian_top_eigenvalue(
                &mlp,
                batch,
                kind,
                &PowerIterConfig {
                    tol: 1e-6,
                    max_iter: 20_000,
                },
                &mut prng,
            )
            .unwrap();
            worst_eig = worst_eig.max((est.lambda1 - extreme).abs() / extreme.abs());
        }
    }
    let pass = worst_grad < 1e-5 && worst_hvp < 1e-4 && worst_asym < 1e-9 && worst_eig < 1e-3;
    println!(
        "criterion 1 (oracle equivalence): {} — grad fd {:.2e} (<1e-5), hvp fd {:.2e} (<1e-4), \
         asymmetry {:.2e} (<1e-9), power-vs-dense {:.2e} (<1e-3)",
        if pass { "PASS" } else { "FAIL" },
        worst_grad,
        worst_hvp,
        worst_asym,
        worst_eig
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 2: theorem scaling
// ---------------------------------------------------------------------------

fn raw_frob_mc(n0: usize, n: usize, depth: usize, seeds: usize, seed: u64) -> (f64, f64) {
    let arch = ArchSpec::constant_width(n0, depth, n, 1).unwrap();
    let cfg = FrobeniusConfig {
        seeds,
        probes_per_seed: 32,
        dense_cap: 2000,
        weighting: HessianWeighting::Raw,
        eta_per_layer: None,
    };
    let stats = frobenius_sq_mc(&arch, InitScheme::Kaiming, &cfg, &Rng::from_seed(seed)).unwrap();
    (stats.mean, stats.std_err)
}

#[test]
fn criterion2_theorem_scaling_in_width() {
    let widths = [8usize, 16, 32, 64];
    let mut points = Vec::new();
    for (i, &n) in widths.iter().enumerate() {
        let (mean, se) = raw_frob_mc(n, n, 4, 400, 900 + i as u64);
        println!("  width {n}: E||H||_F^2 = {mean:.4e} +- {se:.1e}");
        points.push((n as f64, mean));
    }
    let fit = fit_loglog(&points).unwrap();
    let pass = (fit.slope - 2.0).abs() <= 0.2;
    println!(
        "criterion 2a (width scaling of E||H||_F^2): {} — slope {:.3} (band 2.0 +/- 0.2)",
        if pass { "PASS" } else { "FAIL" },
        fit.slope
    );
    assert!(
        pass,
        "width slope {:.3} outside 2.0 +/- 0.2: the exact finite-width moments \
         (1 + 5/n)^L inflate E||H||_F^2 at widths <= 64 (the MC agrees with the \
         verified recursion prediction; the asymptotic band is unattainable at \
         these widths — see the decisions notes)",
        fit.slope
    );
}

#[test]
fn criterion2_theorem_scaling_in_depth() {
    let depths = [2usize, 4, 8];
    let mut points = Vec::new();
    for (i, &l) in depths.iter().enumerate() {
        let (mean, se) = raw_frob_mc(64, 64, l, 400, 950 + i as u64);
        println!("  depth {l}: E||H||_F^2 = {mean:.4e} +- {se:.1e}");
        points.push((l as f64, mean));
    }
    let fit = fit_loglog(&points).unwrap();
    let pass = (fit.slope - 2.0).abs() <= 0.3;
    println!(
        "criterion 2b (depth scaling of E||H||_F^2): {} — slope {:.3} (band 2.0 +/- 0.3)",
        if pass { "PASS" } else { "FAIL" },
        fit.slope
    );
    assert!(pass, "depth slope {}", fit.slope);
}

// ---------------------------------------------------------------------------
// criterion 3: recursion verification
// ---------------------------------------------------------------------------

#[test]
fn criterion3_recursion_verification() {
    // mu-family: layers <= 4, widths {8, 16}, eta = 1, >= 2000 seeds, 3 se
    let mut worst_mu: f64 = 0.0;
    for &w in &[8usize, 16] {
        let cfg = TheoryConfig::constant(w, w, 4, 1.0);
        let state = theory::evaluate(&cfg, CorrectionMode::Exact).unwrap();
        let est = theory::mc_estimate_mu_family(&cfg, 4, 4000, &Rng::from_seed(31_000 + w as u64))
            .unwrap();
        for layer in 1..=4 {
            for (qi, q) in YQuantity::MU_FAMILY.iter().enumerate() {
                let rec = q.get(&state.at(layer).y);
                let (mc, se) = est[layer - 1][qi];
                if se <= 1e-9 * mc.abs().max(1e-300) {
                    assert!((rec - mc).abs() <= 1e-9 * mc.abs().max(1e-12));
                } else {
                    let z = ((rec - mc) / se).abs();
                    worst_mu = worst_mu.max(z);
                    assert!(
                        z <= 3.0,
                        "mu-family width {w} layer {layer} {}: z = {z:.2}",
                        q.name()
                    );
                }
            }
        }
    }

    // munu-family: widths {6, 8}, >= 5000 seeds, 3 se
    let mut worst_munu: f64 = 0.0;
    for &w in &[6usize, 8] {
        let cfg = TheoryConfig::constant(w, w, 4, 1.0);
        let state = theory::evaluate(&cfg, CorrectionMode::Exact).unwrap();
        let est =
            theory::mc_estimate_all(&cfg, 4, 6000, &Rng::from_seed(32_000 + w as u64)).unwrap();
        for layer in 1..=4 {
            for q in YQuantity::MUNU_FAMILY {
                let qi = YQuantity::ALL.iter().position(|&p| p == q).unwrap();
                let rec = q.get(&state.at(layer).y);
                let (mc, se) = est.per_layer[layer - 1][qi];
                if se <= 1e-9 * mc.abs().max(1e-300) {
                    assert!((rec - mc).abs() <= 1e-9 * mc.abs().max(1e-12));
                } else {
                    let z = ((rec - mc) / se).abs();
                    worst_munu = worst_munu.max(z);
                    assert!(
                        z <= 3.0,
                        "munu-family width {w} layer {layer} {}: z = {z:.2}",
                        q.name()
                    );
                }
            }
        }
    }

    // closed forms vs iterated recursions at n = 1e6
    let n = 1_000_000usize;
    let mut cfg = TheoryConfig::constant(n, n, 5, 1.0);
    cfg.eta = vec![0.9, 1.1, 1.0, 0.8, 1.2, 1.0];
    let exact = theory::evaluate(&cfg, CorrectionMode::Exact).unwrap();
    let leading = theory::evaluate(&cfg, CorrectionMode::LeadingOrder).unwrap();
    let mut worst_closed: f64 = 0.0;
    for l in 1..=5 {
        let a = theory::closed_form_du_sq(&cfg, l);
        let ra = exact.at(l).y.du_sq;
        worst_closed = worst_closed.max((a - ra).abs() / ra.abs());
        let b = theory::closed_form_du_sq_z_sq(&cfg, l);
        let rb = leading.at(l).y.du_sq_z_sq;
        worst_closed = worst_closed.max((b - rb).abs() / rb.abs());
    }
    let pass = worst_closed < 1e-12;
    println!(
        "criterion 3 (recursion verification): {} — worst mu z {:.2}, worst munu z {:.2}, \
         closed-form rel err {:.2e} (<1e-12 at n = 1e6)",
        if pass { "PASS" } else { "FAIL" },
        worst_mu,
        worst_munu,
        worst_closed
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 4: lambda1 bound containment
// ---------------------------------------------------------------------------

#[test]
fn criterion4_lambda1_bound_containment() {
    // 200 Kaiming seeds at (n = 32, L = 4): mean |lambda1| <= sqrt(mean ||H||_F^2)
    let arch = ArchSpec::constant_width(32, 4, 32, 1).unwrap();
    let x = vec![1.0; 32];
    let master = Rng::from_seed(41_000);
    let mut lam_abs = Vec::with_capacity(200);
    for s in 0..200u64 {
        let mut r = master.derive(&[s]);
        let mlp = init_network(&arch, InitScheme::Kaiming, &mut r).unwrap();
        let y = r.standard_normal();
        let batch = Batch::regression(x.clone(), 32, vec![y], 1).unwrap();
        let mut prng = master.derive(&[s, 99]);
        let est = loss_hessian_top_eigenvalue(
            &mlp,
            &batch,
            LossKind::Mse,
            &PowerIterConfig::default(),
            &mut prng,
        )
        .unwrap();
        lam_abs.push(est.lambda1.abs());
    }
    let mean_lam = lam_abs.iter().sum::<f64>() / lam_abs.len() as f64;
    let cfg = FrobeniusConfig {
        seeds: 200,
        probes_per_seed: 32,
        dense_cap: 2000,
        weighting: HessianWeighting::Raw,
        eta_per_layer: None,
    };
    let frob = frobenius_sq_mc(&arch, InitScheme::Kaiming, &cfg, &Rng::from_seed(41_500)).unwrap();
    let bound = frob.mean.sqrt();
    let contained = mean_lam <= bound;

    // LeCun: median |lambda1| strictly decreasing over L in {4, 8, 12}
    let mut medians = Vec::new();
    for &depth in &[4usize, 8, 12] {
        let arch = ArchSpec::constant_width(32, depth, 32, 1).unwrap();
        let mut vals = Vec::new();
        for s in 0..50u64 {
            let mut r = master.derive(&[depth as u64, s, 7]);
            let mlp = init_network(&arch, InitScheme::LeCun, &mut r).unwrap();
            let y = r.standard_normal();
            let batch = Batch::regression(x.clone(), 32, vec![y], 1).unwrap();
            let mut prng = master.derive(&[depth as u64, s, 8]);
            let est = loss_hessian_top_eigenvalue(
                &mlp,
                &batch,
                LossKind::Mse,
                &PowerIterConfig::default(),
                &mut prng,
            )
            .unwrap();
            vals.push(est.lambda1.abs());
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(vals[vals.len() / 2]);
    }
    let decreasing = medians[0] > medians[1] && medians[1] > medians[2];
    let pass = contained && decreasing;
    println!(
        "criterion 4 (lambda1 bounds): {} — mean |lambda1| {:.3} <= sqrt(E||H||^2) {:.3}; \
         LeCun medians {:.3e} > {:.3e} > {:.3e}",
        if pass { "PASS" } else { "FAIL" },
        mean_lam,
        bound,
        medians[0],
        medians[1],
        medians[2]
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 5: Algorithm-1 exactness (and its CSV for criterion 9)
// ---------------------------------------------------------------------------

fn criterion5_trace_csv() -> String {
    let cfg = MilrConfig {
        t: 0.5,
        lower: 0.0,
        upper: 1.0,
        search_iters: 5,
        epochs: 1,
    };
    let res = bisect(&cfg, |m| Ok(if m <= 0.3 { 1.0 } else { 0.0 })).unwrap();
    assert_eq!(res.eta_star, Some(0.28125));
    let mut text = String::from(analysis::MILR_TRACE_HEADER);
    for line in analysis::milr_trace_csv(&res.trace) {
        text.push('\n');
        text.push_str(&line);
    }
    text
}

#[test]
fn criterion5_algorithm1_exactness() {
    let _ = criterion5_trace_csv(); // asserts the 0.28125 case

    let cfg = MilrConfig {
        t: 0.5,
        lower: 0.0,
        upper: 1.0,
        search_iters: 5,
        epochs: 1,
    };
    let all = bisect(&cfg, |_| Ok(1.0)).unwrap();
    assert_eq!(all.eta_star, Some(0.96875));
    let none = bisect(&cfg, |_| Ok(0.0)).unwrap();
    assert!(!none.found);

    let mut rng = Rng::from_seed(50_000);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = rng.uniform(0.0, 1.0);
        let res = bisect(&cfg, |m| Ok(if m <= theta { 1.0 } else { 0.0 })).unwrap();
        let err = match res.eta_star {
            Some(e) => (e - theta).abs(),
            None => theta, // below the finest midpoint; distance from l0
        };
        worst = worst.max(err);
        assert!(err <= 1.0 / 32.0, "theta {theta}: err {err}");
    }
    println!(
        "criterion 5 (Algorithm 1 exactness): PASS — 0.28125 case exact, contraction bound \
         held for 100 thresholds (worst |eta* - theta| = {worst:.5} <= 1/32)"
    );
}

// ---------------------------------------------------------------------------
// criteria 6 + 7 + 9: desk-scale power law, eta* vs 2/lambda1, determinism
// ---------------------------------------------------------------------------

const SWEEP_MASTER_SEED: u64 = 13;

fn desk_dataset() -> Dataset {
    // Fig.-5-style defaults: isotropic Gaussian, d = 100, 9k + 1k per class
    gen_gaussian(&GaussianSpec::default(), &mut Rng::from_seed(SWEEP_MASTER_SEED)).unwrap()
}

fn desk_plan(t: f64) -> SweepPlan {
    SweepPlan {
        depths: vec![5, 10, 15],
        width_ratios: vec![8, 16],
        seeds_per_arch: 5,
        scheme: InitScheme::Kaiming,
        lr_policy: LrPolicy::InputSmall,
        thresholds: vec![t],
        milr: MilrConfig {
            t,
            lower: 0.0,
            upper: 1.0,
            search_iters: 8,
            epochs: 10,
        },
        train: TrainConfig {
            base_lr: 0.1,
            input_layer_multiplier: 1e-2,
            batch_size: 128,
            epochs: 10,
            loss: LossKind::CrossEntropy,
            shuffle_seed: 0,
            freeze_input: false,
        },
        lambda_batch: 4096,
        master_seed: SWEEP_MASTER_SEED,
    }
}

struct DeskSweep {
    threshold: f64,
    rows_csv: String,
    rows: Vec<analysis::SweepRow>,
}

fn run_desk_sweep() -> DeskSweep {
    let ds = desk_dataset();
    let mut tc = TrainConfig {
        base_lr: 0.5,
        input_layer_multiplier: 1.0,
        batch_size: 128,
        epochs: 10,
        loss: LossKind::CrossEntropy,
        shuffle_seed: 1,
        freeze_input: false,
    };
    tc.shuffle_seed = Rng::from_seed(SWEEP_MASTER_SEED).derive(&[0x626c]).seed();
    let t = linear_baseline(&ds, &tc, SWEEP_MASTER_SEED).unwrap();
    let plan = desk_plan(t);
    let rows = run_sweep(&plan, &ds).unwrap();
    let rows_csv = analysis::sweep_rows_csv(&rows).join("\n");
    DeskSweep {
        threshold: t,
        rows_csv,
        rows,
    }
}

static DESK: Lazy<DeskSweep> = Lazy::new(run_desk_sweep);

#[test]
fn criterion6_power_law_reproduction() {
    let desk = &*DESK;
    println!("  linear-baseline threshold t = {}", desk.threshold);
    let (_, per_arch) = eta_star_fit_points(&desk.rows);
    assert!(per_arch.len() >= 3, "need >= 3 architecture means");
    let fit = fit_loglog(&per_arch).unwrap();
    let alpha = fit.alpha();
    let pass = fit.slope < 0.0 && (0.4..=0.8).contains(&alpha) && fit.r_squared > 0.9;
    println!(
        "criterion 6 (desk-scale power law): {} — alpha = {:.3} (band [0.4, 0.8]), \
         R^2 = {:.3} (> 0.9), {} arch means",
        if pass { "PASS" } else { "FAIL" },
        alpha,
        fit.r_squared,
        fit.n_points
    );
    assert!(pass, "alpha {alpha}, r2 {}", fit.r_squared);
}

#[test]
fn criterion7_eta_star_exceeds_two_over_lambda() {
    let desk = &*DESK;
    let frac = fraction_above_two_over_lambda(&desk.rows).expect("found rows exist");
    let pass = frac >= 0.8;
    println!(
        "criterion 7 (eta* > 2/lambda1): {} — fraction {:.3} (>= 0.8)",
        if pass { "PASS" } else { "FAIL" },
        frac
    );
    assert!(pass);
}

#[test]
fn criterion9_determinism() {
    // criterion 5 rerun
    let t1 = criterion5_trace_csv();
    let t2 = criterion5_trace_csv();
    let milr_ok = t1.as_bytes() == t2.as_bytes();

    // criterion 6 rerun: a fresh sweep with the same plan and master seed
    let desk = &*DESK;
    let again = run_desk_sweep();
    let sweep_ok = desk.rows_csv.as_bytes() == again.rows_csv.as_bytes();
    let pass = milr_ok && sweep_ok;
    println!(
        "criterion 9 (determinism): {} — milr trace bytes identical: {milr_ok}, \
         sweep CSV bytes identical: {sweep_ok}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 8: edge of stability
// ---------------------------------------------------------------------------

#[test]
fn criterion8_edge_of_stability() {
    // 2k-sample Gaussian task, Kaiming MLP (d=20 -> 80x3 -> 2), MSE one-hot,
    // full-batch GD at eta = 2/50
    let ds = gen_gaussian(
        &GaussianSpec {
            d: 20,
            per_class_train: 1000,
            per_class_val: 100,
            anisotropic: false,
            seed: 11,
        },
        &mut Rng::from_seed(80_000),
    )
    .unwrap();
    let arch = ArchSpec::constant_width(20, 3, 80, 2).unwrap();
    let eta = 2.0 / 50.0;
    let master = Rng::from_seed(80_001);
    let mut mlp = init_network(&arch, InitScheme::Kaiming, &mut master.derive(&[0])).unwrap();
    let mut prng = master.derive(&[1]);
    let traj = full_batch_gd(&mut mlp, &ds, LossKind::Mse, eta, 5000, 250, &mut prng).unwrap();
    assert!(!traj.diverged, "GD diverged");
    let last = traj.probes.last().unwrap();
    let two_over_eta = 2.0 / eta;
    let band = (0.6 * two_over_eta, 1.4 * two_over_eta);
    let in_band = last.lambda1 >= band.0 && last.lambda1 <= band.1;
    let acc_ok = traj.final_train_accuracy >= 0.99;

    // Kaiming initial lambda1 exceeds LeCun initial lambda1 (median, 10 seeds)
    let (batch, _) = eval_batch(&ds, usize::MAX, LossKind::Mse).unwrap();
    let median_init = |scheme: InitScheme| -> f64 {
        let mut vals = Vec::new();
        for s in 0..10u64 {
            let mut r = master.derive(&[2, s]);
            let net = init_network(&arch, scheme, &mut r).unwrap();
            let mut pr = master.derive(&[3, s]);
            let est = loss_hessian_top_eigenvalue(
                &net,
                &batch,
                LossKind::Mse,
                &PowerIterConfig::default(),
                &mut pr,
            )
            .unwrap();
            vals.push(est.lambda1.abs());
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        0.5 * (vals[4] + vals[5])
    };
    let kaiming_med = median_init(InitScheme::Kaiming);
    let lecun_med = median_init(InitScheme::LeCun);
    let ordering_ok = kaiming_med > lecun_med;

    let pass = in_band && acc_ok && ordering_ok;
    println!(
        "criterion 8 (edge of stability): {} — final lambda1 {:.2} in [{:.0}, {:.0}] at \
         train acc {:.4}; init lambda1 medians kaiming {:.2} > lecun {:.3e}",
        if pass { "PASS" } else { "FAIL" },
        last.lambda1,
        band.0,
        band.1,
        traj.final_train_accuracy,
        kaiming_med,
        lecun_med
    );
    assert!(pass);
}
