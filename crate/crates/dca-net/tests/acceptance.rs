//! Acceptance gate: ten numbered criteria, one `criterion NN PASS|FAIL` line
//! each (run with `--nocapture` to watch them live; every line is also
//! appended to `target/acceptance-report.txt`).
//!
//! Criteria 1-6 pin the calibration algebra, the gradients and the metrics
//! against independent oracles; 7 and 8 run the scaled-down
//! leave-one-domain-out experiments end to end; 9 and 10 pin determinism and
//! checkpoint integrity. The long criteria train real networks and are sized
//! for a single desktop CPU core.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use dca_net::checkpoint;
use dca_net::data::split::{leave_one_domain_out_split, SplitSpec};
use dca_net::data::synthetic::{generate_registry, SyntheticConfig};
use dca_net::data::DomainRegistry;
use dca_net::dca::{
    attention_weights, dca_forward, preceptor_bank, CalibrationMode, DcaParams, PdpInput,
};
use dca_net::gradcheck::{max_relative_error, numeric_gradient, FD_STEP, REL_ERR_FLOOR};
use dca_net::losses::{compactness_loss, dice_loss, divergence_loss, total_loss, LossConfig};
use dca_net::metrics::{self, EvalConfig, EvalResult};
use dca_net::network::{build_baseline_unet, build_dca_unet, copy_shared_params, NetworkConfig};
use dca_net::optim::{Adam, AdamConfig};
use dca_net::tensor::{Graph, ParamStore};
use dca_net::trainer::{
    evaluate_checkpoint, read_log, run_lodo_experiment, train, LogEvent, TrainConfig, TrainMode,
};

// ---------------------------------------------------------------- reporting

fn report_file() -> &'static Mutex<File> {
    static FILE: OnceLock<Mutex<File>> = OnceLock::new();
    FILE.get_or_init(|| {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../target/acceptance-report.txt");
        Mutex::new(File::create(path).expect("create acceptance report"))
    })
}

/// Run one criterion body and print exactly one PASS/FAIL line for it.
fn run_criterion(num: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let started = Instant::now();
    let outcome = body();
    let elapsed = started.elapsed().as_secs_f64();
    let (verdict, detail) = match &outcome {
        Ok(msg) => ("PASS", msg.as_str()),
        Err(msg) => ("FAIL", msg.as_str()),
    };
    let line = format!("criterion {num:02} {verdict} ({elapsed:.1} s) {name}: {detail}");
    println!("{line}");
    if let Ok(mut f) = report_file().lock() {
        let _ = writeln!(f, "{line}");
        let _ = f.flush();
    }
    if outcome.is_err() {
        panic!("{line}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err(format!($($arg)+));
        }
    };
}

fn ok<T>(r: dca_net::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn tmpdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

// ------------------------------------------------------------ small helpers

fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch")
}

fn rand_vec(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn bits_equal(a: &ArrayD<f64>, b: &ArrayD<f64>) -> bool {
    a.shape() == b.shape()
        && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Fresh calibration block over a store whose parameter values are then
/// fully overwritten by the caller, so the init draw never matters.
fn fresh_block(
    channels: usize,
    bank: usize,
    reduction: usize,
) -> (ParamStore<f64>, DcaParams) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0xB10C);
    let p = DcaParams::init(
        &mut store,
        &mut rng,
        "blk.",
        channels,
        bank,
        reduction,
        PdpInput::Tiled,
        true,
        1e-5,
    )
    .expect("valid block dimensions");
    (store, p)
}

// ========================================================================
// 1. Divergence oracle
// ========================================================================

#[test]
fn criterion_01_divergence_oracle() {
    run_criterion(1, "divergence oracle", || {
        let started = Instant::now();
        // Hand case: rows (0,0), (1,0), (0,1) -> pairwise squared distances
        // 1 + 1 + 2 = 4, loss 1 - sqrt(4/3).
        let mut g = Graph::<f64>::new();
        let bank = g.constant(arr(&[1, 3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let v = ok(divergence_loss(&mut g, bank, (0, 1, 2), false))?;
        let got = g.scalar(v);
        let expected = 1.0 - (4.0f64 / 3.0).sqrt();
        let err = (got - expected).abs();
        ensure!(err < 1e-6, "hand case returned {got}, expected {expected} (err {err:.2e})");

        // Identical rows: zero spread must map to exactly 1.
        let mut g = Graph::<f64>::new();
        let same = g.constant(arr(&[2, 3, 2], vec![0.37, 0.81].repeat(6)));
        let v = ok(divergence_loss(&mut g, same, (2, 0, 1), false))?;
        let ident = g.scalar(v);
        ensure!(ident == 1.0, "identical rows returned {ident}, expected exactly 1.0");

        let secs = started.elapsed().as_secs_f64();
        ensure!(secs < 1.0, "exceeded 1 s budget: {secs:.2} s");
        Ok(format!("hand case err {err:.1e}; identical rows gave exactly 1"))
    });
}

// ========================================================================
// 2. Gradient suite
// ========================================================================

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

fn grad_err_dice(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (b, h, w) = (2, 5, 5);
    let x0 = rand_vec(&mut rng, b * h * w, 0.05, 0.95);
    let labels = arr(
        &[b, h, w],
        (0..b * h * w).map(|_| f64::from(rng.gen_bool(0.4))).collect(),
    );
    let eval = |x: &[f64]| {
        let mut g = Graph::<f64>::new();
        let p = g.constant(arr(&[b, h, w], x.to_vec()));
        let l = g.constant(labels.clone());
        let v = dice_loss(&mut g, p, l, 1e-5).expect("shapes fixed");
        g.scalar(v)
    };
    let mut g = Graph::<f64>::new();
    let p = g.leaf(arr(&[b, h, w], x0.clone()));
    let l = g.constant(labels.clone());
    let v = dice_loss(&mut g, p, l, 1e-5).expect("shapes fixed");
    g.backward(v);
    let analytic: Vec<f64> = g.grad(p).expect("grad reaches probs").iter().copied().collect();
    let numeric = numeric_gradient(eval, &x0, FD_STEP);
    max_relative_error(&analytic, &numeric, REL_ERR_FLOOR)
}

fn grad_err_divergence(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
    let (b, n, c) = (2, 4, 3);
    let x0 = rand_vec(&mut rng, b * n * c, 0.05, 0.95);
    let triple = (0, 1, 3);
    let eval = |x: &[f64]| {
        let mut g = Graph::<f64>::new();
        let bank = g.constant(arr(&[b, n, c], x.to_vec()));
        let v = divergence_loss(&mut g, bank, triple, false).expect("shapes fixed");
        g.scalar(v)
    };
    let mut g = Graph::<f64>::new();
    let bank = g.leaf(arr(&[b, n, c], x0.clone()));
    let v = divergence_loss(&mut g, bank, triple, false).expect("shapes fixed");
    g.backward(v);
    let analytic: Vec<f64> = g.grad(bank).expect("grad reaches bank").iter().copied().collect();
    let numeric = numeric_gradient(eval, &x0, FD_STEP);
    max_relative_error(&analytic, &numeric, REL_ERR_FLOOR)
}

fn grad_err_compactness(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
    let (b, h, w) = (2, 6, 6);
    let x0 = rand_vec(&mut rng, b * h * w, 0.05, 0.95);
    let eval = |x: &[f64]| {
        let mut g = Graph::<f64>::new();
        let p = g.constant(arr(&[b, h, w], x.to_vec()));
        let v = compactness_loss(&mut g, p, 1e-6).expect("shapes fixed");
        g.scalar(v)
    };
    let mut g = Graph::<f64>::new();
    let p = g.leaf(arr(&[b, h, w], x0.clone()));
    let v = compactness_loss(&mut g, p, 1e-6).expect("shapes fixed");
    g.backward(v);
    let analytic: Vec<f64> = g.grad(p).expect("grad reaches probs").iter().copied().collect();
    let numeric = numeric_gradient(eval, &x0, FD_STEP);
    max_relative_error(&analytic, &numeric, REL_ERR_FLOOR)
}

fn grad_err_dca_forward(seed: u64) -> f64 {
    let (b, c, h, w, n, red) = (2, 4, 3, 3, 3, 2);
    let mut rng = ChaCha12Rng::seed_from_u64(300 + seed);
    // Fixed random readout makes the scalar sensitive to every output entry.
    let readout = arr(&[b, c, h, w], rand_vec(&mut rng, b * c * h * w, -1.0, 1.0));

    let (store0, p0) = fresh_block(c, n, red);
    let ids = p0.all_ids();
    let sizes: Vec<usize> = ids.iter().map(|&id| store0.value(id).len()).collect();
    let nf = b * c * h * w;
    let total: usize = nf + sizes.iter().sum::<usize>();
    let x0 = rand_vec(&mut rng, total, -0.8, 0.8);

    let forward_scalar = |x: &[f64], track_features: bool| -> (Graph<f64>, ParamStore<f64>, dca_net::tensor::Var, dca_net::tensor::Var) {
        let (mut store, p) = fresh_block(c, n, red);
        let mut off = nf;
        for (&id, &len) in ids.iter().zip(&sizes) {
            for (dst, src) in store.value_mut(id).iter_mut().zip(&x[off..off + len]) {
                *dst = *src;
            }
            off += len;
        }
        let mut g = Graph::<f64>::new();
        let feats_arr = arr(&[b, c, h, w], x[..nf].to_vec());
        let feats = if track_features { g.leaf(feats_arr) } else { g.constant(feats_arr) };
        let out = dca_forward(&mut g, &store, feats, &p, CalibrationMode::Learned)
            .expect("shapes fixed");
        let r = g.constant(readout.clone());
        let m = g.mul(out.calibrated, r);
        let s = g.mean_all(m);
        (g, store, feats, s)
    };

    let eval = |x: &[f64]| {
        let (g, _store, _feats, s) = forward_scalar(x, false);
        g.scalar(s)
    };

    let (mut g, mut store, feats, s) = forward_scalar(&x0, true);
    g.backward(s);
    let mut analytic: Vec<f64> =
        g.grad(feats).expect("grad reaches features").iter().copied().collect();
    store.zero_grads();
    g.accumulate_param_grads(&mut store);
    for &id in &ids {
        analytic.extend(store.grad(id).iter().copied());
    }
    let numeric = numeric_gradient(eval, &x0, FD_STEP);
    max_relative_error(&analytic, &numeric, REL_ERR_FLOOR)
}

fn grad_err_total(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(400 + seed);
    let (b, h, w, n, c) = (1, 8, 8, 4, 3);
    let n_logits = b * 2 * h * w;
    let n_bank = b * n * c;
    let mut x0 = rand_vec(&mut rng, n_logits, -1.5, 1.5);
    x0.extend(rand_vec(&mut rng, n_bank, 0.05, 0.95));
    let labels = arr(
        &[b, h, w],
        (0..b * h * w).map(|_| f64::from(rng.gen_bool(0.35))).collect(),
    );
    let cfg = LossConfig {
        lambda1: 0.7,
        lambda2: 0.3,
        ds_weights: vec![1.0],
        ..LossConfig::default()
    };
    // The triple draw must be identical across evaluations: re-seed per call.
    let build = |x: &[f64], g: &mut Graph<f64>, track: bool| {
        let logits_arr = arr(&[b, 2, h, w], x[..n_logits].to_vec());
        let bank_arr = arr(&[b, n, c], x[n_logits..].to_vec());
        let (logits, bank) = if track {
            (g.leaf(logits_arr), g.leaf(bank_arr))
        } else {
            (g.constant(logits_arr), g.constant(bank_arr))
        };
        let y = g.constant(labels.clone());
        let mut trng = ChaCha12Rng::seed_from_u64(9000 + seed);
        let t = total_loss(g, &[logits], y, &[bank], &cfg, &mut trng).expect("shapes fixed");
        (logits, bank, t.l_total)
    };
    let eval = |x: &[f64]| {
        let mut g = Graph::<f64>::new();
        let (_, _, v) = build(x, &mut g, false);
        g.scalar(v)
    };
    let mut g = Graph::<f64>::new();
    let (logits, bank, v) = build(&x0, &mut g, true);
    g.backward(v);
    let mut analytic: Vec<f64> =
        g.grad(logits).expect("grad reaches logits").iter().copied().collect();
    analytic.extend(g.grad(bank).expect("grad reaches bank").iter().copied());
    let numeric = numeric_gradient(eval, &x0, FD_STEP);
    max_relative_error(&analytic, &numeric, REL_ERR_FLOOR)
}

#[test]
fn criterion_02_gradient_suite() {
    run_criterion(2, "gradient suite", || {
        let started = Instant::now();
        let cases: [(&str, fn(u64) -> f64); 5] = [
            ("dca_forward", grad_err_dca_forward),
            ("dice", grad_err_dice),
            ("divergence", grad_err_divergence),
            ("compactness", grad_err_compactness),
            ("total", grad_err_total),
        ];
        let mut summary = Vec::new();
        for (name, f) in cases {
            let worst = (0..GRAD_SEEDS).map(f).fold(0.0, f64::max);
            ensure!(
                worst < GRAD_TOL,
                "{name}: max relative error {worst:.3e} over {GRAD_SEEDS} seeds exceeds {GRAD_TOL:.0e}"
            );
            summary.push(format!("{name} {worst:.1e}"));
        }
        let secs = started.elapsed().as_secs_f64();
        ensure!(secs < 120.0, "exceeded 2 min budget: {secs:.1} s");
        Ok(format!(
            "max rel err over {GRAD_SEEDS} seeds: {} (tolerance {GRAD_TOL:.0e})",
            summary.join(", ")
        ))
    });
}

// ========================================================================
// 3. Preceptor independence
// ========================================================================

#[test]
fn criterion_03_preceptor_independence() {
    run_criterion(3, "preceptor independence", || {
        let started = Instant::now();
        let (b, c, n, red) = (2, 8, 4, 4);
        let (mut store, p) = fresh_block(c, n, red);
        let mut rng = ChaCha12Rng::seed_from_u64(0x5EED);
        for &id in &p.all_ids() {
            for v in store.value_mut(id).iter_mut() {
                *v = rng.gen_range(-0.9..0.9);
            }
        }
        let pooled = arr(&[b, c], rand_vec(&mut rng, b * c, -1.2, 1.2));

        // Cross-row gradients: every entry of p_i against every parameter
        // coordinate owned by row j != i must be exactly zero.
        let mut g = Graph::<f64>::new();
        let pin = g.constant(pooled.clone());
        let bank = ok(preceptor_bank(&mut g, &store, pin, &p))?;
        let bank_shape = g.value(bank).shape().to_vec();
        let mut checked = 0usize;
        let mut own_nonzero = 0usize;
        for i in 0..n {
            for bi in 0..b {
                for ci in 0..c {
                    let mut seed = ArrayD::<f64>::zeros(IxDyn(&bank_shape));
                    seed[[bi, i, ci]] = 1.0;
                    g.zero_grads();
                    g.backward_seeded(bank, seed);
                    store.zero_grads();
                    g.accumulate_param_grads(&mut store);
                    for &id in &p.preceptor_ids() {
                        let grad = store.grad(id);
                        for j in 0..n {
                            let range = p
                                .row_range(id, j)
                                .ok_or_else(|| format!("no row range for {}", store.name(id)))?;
                            for row_idx in range {
                                let lane = grad.index_axis(ndarray::Axis(0), row_idx);
                                if j == i {
                                    if lane.iter().any(|&v| v != 0.0) {
                                        own_nonzero += 1;
                                    }
                                } else {
                                    for &v in lane.iter() {
                                        ensure!(
                                            v == 0.0,
                                            "d p_{i}[{bi},{ci}] / d {}[row {j}] = {v:e}, expected exactly 0",
                                            store.name(id)
                                        );
                                        checked += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        ensure!(own_nonzero > 0, "no gradient ever reached a row's own parameters (vacuous test)");

        // Perturbation: bump every parameter coordinate owned by row `j`,
        // re-run, and require p_i bit-identical for all i != j.
        let before: ArrayD<f64> = g.value(bank).clone();
        let j = 1usize;
        for &id in &p.preceptor_ids() {
            let range = p.row_range(id, j).expect("preceptor tensors have row ranges");
            let val = store.value_mut(id);
            for row_idx in range {
                for v in val.index_axis_mut(ndarray::Axis(0), row_idx).iter_mut() {
                    *v += rng.gen_range(0.1..0.3);
                }
            }
        }
        let mut g2 = Graph::<f64>::new();
        let pin2 = g2.constant(pooled);
        let bank2 = ok(preceptor_bank(&mut g2, &store, pin2, &p))?;
        let after = g2.value(bank2);
        let mut row_j_changed = false;
        for bi in 0..b {
            for i in 0..n {
                for ci in 0..c {
                    let (x, y) = (before[[bi, i, ci]], after[[bi, i, ci]]);
                    if i == j {
                        row_j_changed |= x.to_bits() != y.to_bits();
                    } else {
                        ensure!(
                            x.to_bits() == y.to_bits(),
                            "p_{i}[{bi},{ci}] changed ({x} -> {y}) when only row {j} was perturbed"
                        );
                    }
                }
            }
        }
        ensure!(row_j_changed, "perturbing row {j} left its own output untouched (vacuous test)");

        let secs = started.elapsed().as_secs_f64();
        ensure!(secs < 30.0, "exceeded 30 s budget: {secs:.1} s");
        Ok(format!(
            "{checked} cross-row gradient entries exactly 0; rows i != {j} bit-identical under row-{j} perturbation"
        ))
    });
}

// ========================================================================
// 4. Attention simplex
// ========================================================================

#[test]
fn criterion_04_attention_simplex() {
    run_criterion(4, "attention simplex", || {
        let started = Instant::now();
        let (c, n, red) = (8, 5, 4);
        let (mut store, p) = fresh_block(c, n, red);
        let mut rng = ChaCha12Rng::seed_from_u64(0xA77);

        let mut rows = 0usize;
        let mut worst_sum_err = 0.0f64;
        for _ in 0..10 {
            let batch = arr(&[100, c, 4, 4], rand_vec(&mut rng, 100 * c * 16, -2.0, 2.0));
            let mut g = Graph::<f64>::new();
            let x = g.constant(batch);
            let beta = ok(attention_weights(&mut g, &store, x, &p))?;
            let w = g.value(beta);
            for bi in 0..100 {
                let mut sum = 0.0;
                for ni in 0..n {
                    let v = w[[bi, ni]];
                    ensure!(v >= 0.0, "negative attention weight {v} at ({bi},{ni})");
                    sum += v;
                }
                worst_sum_err = worst_sum_err.max((sum - 1.0).abs());
                ensure!(
                    (sum - 1.0).abs() < 1e-6,
                    "attention row sums to {sum}, off by {:.2e}",
                    (sum - 1.0).abs()
                );
                rows += 1;
            }
        }
        ensure!(rows == 1000, "expected 1000 rows, checked {rows}");

        // Zeroed final FC layer: logits collapse to 0, softmax must give the
        // exact uniform distribution.
        store.value_mut(p.attn_fc2_w).fill(0.0);
        store.value_mut(p.attn_fc2_b).fill(0.0);
        let batch = arr(&[64, c, 4, 4], rand_vec(&mut rng, 64 * c * 16, -2.0, 2.0));
        let mut g = Graph::<f64>::new();
        let x = g.constant(batch);
        let beta = ok(attention_weights(&mut g, &store, x, &p))?;
        let w = g.value(beta);
        let uniform = 1.0 / n as f64;
        for (idx, &v) in w.iter().enumerate() {
            ensure!(
                v.to_bits() == uniform.to_bits(),
                "zero-weight head entry {idx} is {v}, expected exactly 1/{n}"
            );
        }

        let secs = started.elapsed().as_secs_f64();
        ensure!(secs < 10.0, "exceeded 10 s budget: {secs:.1} s");
        Ok(format!(
            "1000 rows on the simplex (worst sum error {worst_sum_err:.1e}); zeroed head gives exactly 1/{n}"
        ))
    });
}

// ========================================================================
// 5. Calibration identity
// ========================================================================

#[test]
fn criterion_05_calibration_identity() {
    run_criterion(5, "calibration identity", || {
        // Block level: identity mode must be bit-transparent.
        let (c, n, red) = (6, 3, 2);
        let (store, p) = fresh_block(c, n, red);
        let mut rng = ChaCha12Rng::seed_from_u64(0x1D);
        let feats = arr(&[2, c, 8, 8], rand_vec(&mut rng, 2 * c * 64, -3.0, 3.0));
        let mut g = Graph::<f64>::new();
        let x = g.constant(feats.clone());
        let out = ok(dca_forward(&mut g, &store, x, &p, CalibrationMode::Identity))?;
        ensure!(
            bits_equal(g.value(out.calibrated), &feats),
            "identity calibration altered the feature map"
        );
        ensure!(
            g.value(out.alpha).iter().all(|&a| a == 1.0),
            "identity calibration vector is not all-ones"
        );

        // Network level: calibrated net in identity mode == plain baseline
        // with the shared weights copied over, bit for bit.
        let cfg = NetworkConfig {
            encoder_widths: vec![4, 4, 8, 8, 8],
            bank_size: 3,
            reduction: 2,
            ..NetworkConfig::default()
        };
        let mut store_dca = ParamStore::<f64>::new();
        let mut rng_a = ChaCha12Rng::seed_from_u64(11);
        let net_dca = ok(build_dca_unet(&mut store_dca, &cfg, &mut rng_a))?;
        let mut store_base = ParamStore::<f64>::new();
        let mut rng_b = ChaCha12Rng::seed_from_u64(99);
        let net_base = ok(build_baseline_unet(&mut store_base, &cfg, &mut rng_b))?;
        let copied = copy_shared_params(&store_dca, &mut store_base);
        ensure!(
            copied == store_base.len(),
            "only {copied} of {} baseline tensors are shared with the calibrated net",
            store_base.len()
        );
        let images = arr(&[1, 3, 32, 32], rand_vec(&mut rng, 3 * 32 * 32, -1.0, 1.0));
        let mut ga = Graph::<f64>::new();
        let xa = ga.constant(images.clone());
        let oa = ok(net_dca.forward(&mut ga, &store_dca, xa, CalibrationMode::Identity))?;
        let mut gb = Graph::<f64>::new();
        let xb = gb.constant(images);
        let ob = ok(net_base.forward(&mut gb, &store_base, xb, CalibrationMode::Learned))?;
        ensure!(
            oa.logits_per_scale.len() == ob.logits_per_scale.len(),
            "scale count mismatch between the two networks"
        );
        for (s, (&va, &vb)) in
            oa.logits_per_scale.iter().zip(&ob.logits_per_scale).enumerate()
        {
            ensure!(
                bits_equal(ga.value(va), gb.value(vb)),
                "scale {s} logits differ between identity-mode net and baseline"
            );
        }
        Ok(format!(
            "block identity bit-transparent; all {} logit scales bit-equal to the shared-weight baseline",
            oa.logits_per_scale.len()
        ))
    });
}

// ========================================================================
// 6. Metric oracles
// ========================================================================

fn brute_dice(a: &Array3<u8>, b: &Array3<u8>) -> f64 {
    let mut inter = 0usize;
    let mut sa = 0usize;
    let mut sb = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        sa += x as usize;
        sb += y as usize;
        inter += (x & y) as usize;
    }
    if sa + sb == 0 {
        return 100.0;
    }
    100.0 * (2.0 * inter as f64) / (sa + sb) as f64
}

fn brute_surface(m: &Array3<u8>, sp: (f64, f64, f64)) -> Vec<[f64; 3]> {
    let (nz, ny, nx) = m.dim();
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m[(z, y, x)] == 0 {
                    continue;
                }
                let exposed = (z == 0 || m[(z - 1, y, x)] == 0)
                    || (z + 1 == nz || m[(z + 1, y, x)] == 0)
                    || (y == 0 || m[(z, y - 1, x)] == 0)
                    || (y + 1 == ny || m[(z, y + 1, x)] == 0)
                    || (x == 0 || m[(z, y, x - 1)] == 0)
                    || (x + 1 == nx || m[(z, y, x + 1)] == 0);
                if exposed {
                    pts.push([z as f64 * sp.0, y as f64 * sp.1, x as f64 * sp.2]);
                }
            }
        }
    }
    pts
}

/// All-pairs nearest-neighbor ASD, the quadratic reference the k-d-tree
/// implementation is checked against.
fn brute_asd(p: &Array3<u8>, g: &Array3<u8>, sp: (f64, f64, f64)) -> f64 {
    let ps = brute_surface(p, sp);
    let gs = brute_surface(g, sp);
    assert!(!ps.is_empty() && !gs.is_empty(), "oracle needs non-empty surfaces");
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let sum: f64 = from
            .iter()
            .map(|a| {
                to.iter()
                    .map(|b| {
                        let dz = a[0] - b[0];
                        let dy = a[1] - b[1];
                        let dx = a[2] - b[2];
                        dz * dz + dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        sum / from.len() as f64
    };
    0.5 * (directed(&ps, &gs) + directed(&gs, &ps))
}

#[test]
fn criterion_06_metric_oracles() {
    run_criterion(6, "metric oracles", || {
        let started = Instant::now();
        let densities = [0.03, 0.15, 0.4];
        let spacings = [(1.0, 1.0, 1.0), (2.0, 1.0, 0.5), (0.7, 1.3, 2.0)];
        let mut worst_asd_err = 0.0f64;
        for pair in 0..50u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + pair);
            let density = densities[pair as usize % densities.len()];
            let sp = spacings[pair as usize % spacings.len()];
            let mut make = |d: f64| {
                let mut m = Array3::<u8>::zeros((16, 16, 16));
                for v in m.iter_mut() {
                    *v = u8::from(rng.gen::<f64>() < d);
                }
                if m.iter().all(|&v| v == 0) {
                    m[(8, 8, 8)] = 1;
                }
                m
            };
            let a = make(density);
            let b = make(density * 0.8 + 0.02);

            let dice = ok(metrics::dice_score(&a, &b))?;
            let dice_ref = brute_dice(&a, &b);
            ensure!(
                dice == dice_ref,
                "pair {pair}: Dice {dice} != brute-force {dice_ref}"
            );

            let asd = ok(metrics::asd(&a, &b, sp))?;
            let asd_ref = brute_asd(&a, &b, sp);
            let err = (asd - asd_ref).abs();
            worst_asd_err = worst_asd_err.max(err);
            ensure!(
                err <= 1e-9,
                "pair {pair}: ASD {asd} vs brute-force {asd_ref} (err {err:.2e})"
            );
        }

        // Two single voxels three steps apart along x at unit spacing.
        let mut p = Array3::<u8>::zeros((16, 16, 16));
        let mut g = Array3::<u8>::zeros((16, 16, 16));
        p[(4, 5, 2)] = 1;
        g[(4, 5, 5)] = 1;
        let v = ok(metrics::asd(&p, &g, (1.0, 1.0, 1.0)))?;
        ensure!((v - 3.0).abs() < 1e-12, "3-apart voxels gave ASD {v}, expected 3.0");

        let secs = started.elapsed().as_secs_f64();
        ensure!(secs < 60.0, "exceeded 1 min budget: {secs:.1} s");
        Ok(format!(
            "50 pairs: Dice exact, worst ASD deviation {worst_asd_err:.1e}; 3-apart voxels gave ASD 3.0"
        ))
    });
}

// ========================================================================
// 7 & 8. Leave-one-domain-out experiments (desk scale)
// ========================================================================

/// Dataset seed for the shipped generator defaults; the thresholds below
/// were calibrated once against this exact dataset and then frozen.
const LODO_DATA_SEED: u64 = 0;

/// Unseen-domain mean Dice floor for the calibrated network (fraction).
const UNSEEN_DICE_FLOOR: f64 = 0.85;

/// Allowed shortfall against the pooled baseline (fraction): directional
/// check acknowledging desk-scale noise.
const BASELINE_MARGIN: f64 = 0.01;

fn lodo_registry() -> dca_net::Result<DomainRegistry> {
    generate_registry(&SyntheticConfig::default(), LODO_DATA_SEED)
}

fn lodo_net() -> NetworkConfig {
    NetworkConfig { encoder_widths: vec![8, 16, 32, 64, 128], ..NetworkConfig::default() }
}

fn lodo_eval() -> EvalConfig {
    // Training consumes generator-scale slices directly, so evaluation must
    // skip re-normalization and resizing to match.
    EvalConfig { input_size: 64, normalize: false, batch_size: 8 }
}

/// Experiment arms, calibrated once on the shipped generator defaults
/// (dataset seed 0, held-out site_d) and frozen. The calibrated arm runs
/// lr 3e-3 with compactness weight 0.1: at 64x64 the full-scale weight 1.0
/// stalls training in a diffuse-prediction regime (validated Dice collapses
/// after the first few hundred iterations), while 0.1 keeps the term active
/// and trains stably. The pooled baseline gets its own best setting, lr 1e-3.
fn lodo_train(mode: TrainMode, seed: u64, iterations: usize) -> TrainConfig {
    TrainConfig {
        lr: match mode {
            TrainMode::Deepall | TrainMode::DeepallComp => 1e-3,
            _ => 3e-3,
        },
        iterations,
        batch_size: 4,
        bank_size: 8,
        lambda1: 0.1,
        lambda2: 0.1,
        seed,
        val_every: 250,
        mode,
        grad_clip: None,
        domain_balanced: false,
    }
}

fn mean_dice_fraction(results: &[EvalResult]) -> f64 {
    results.iter().map(|r| r.dice_percent).sum::<f64>() / results.len() as f64 / 100.0
}

/// One full training run against held-out `site_d`, returning the unseen
/// test-set mean Dice as a fraction.
fn site_d_run(
    reg: &DomainRegistry,
    cfg: &TrainConfig,
    ecfg: &EvalConfig,
) -> Result<f64, String> {
    let split = ok(leave_one_domain_out_split(reg, &SplitSpec::new("site_d", cfg.seed)))?;
    let dir = tmpdir()?;
    let report =
        ok(train::<f32>(&split, &lodo_net(), &LossConfig::default(), cfg, ecfg, dir.path()))?;
    let results = ok(evaluate_checkpoint::<f32>(&report.best_checkpoint, &split.test, ecfg))?;
    Ok(mean_dice_fraction(&results))
}

#[test]
fn criterion_07_unseen_domain_generalization() {
    run_criterion(7, "unseen-domain generalization", || {
        let reg = ok(lodo_registry())?;
        let ecfg = lodo_eval();
        let seeds = [0u64, 1, 2];
        let mut dca = Vec::new();
        let mut deepall = Vec::new();
        for &seed in &seeds {
            dca.push(site_d_run(&reg, &lodo_train(TrainMode::Dca, seed, 2000), &ecfg)?);
            deepall.push(site_d_run(&reg, &lodo_train(TrainMode::Deepall, seed, 2000), &ecfg)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (dca_mean, deepall_mean) = (mean(&dca), mean(&deepall));
        let fmt = |v: &[f64]| {
            v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
        };
        ensure!(
            dca_mean >= UNSEEN_DICE_FLOOR,
            "calibrated net unseen mean Dice {dca_mean:.4} (seeds: {}) below floor {UNSEEN_DICE_FLOOR}",
            fmt(&dca)
        );
        ensure!(
            dca_mean >= deepall_mean - BASELINE_MARGIN,
            "calibrated net {dca_mean:.4} trails pooled baseline {deepall_mean:.4} by more than {BASELINE_MARGIN}"
        );
        Ok(format!(
            "unseen mean Dice: calibrated {dca_mean:.4} (seeds: {}), baseline {deepall_mean:.4} (seeds: {}); floor {UNSEEN_DICE_FLOOR}, margin {BASELINE_MARGIN} (45-min reference budget)",
            fmt(&dca),
            fmt(&deepall)
        ))
    });
}

#[test]
fn criterion_08_ablation_plumbing() {
    run_criterion(8, "ablation plumbing", || {
        let reg = ok(lodo_registry())?;
        let ecfg = lodo_eval();
        // Plumbing criterion: the ablations must run the full experiment and
        // emit the complete table; 150 iterations keeps every run far inside
        // the per-run reference budget without touching any schema path.
        let iterations = 150;
        let arms = [
            ("dca_no_div", TrainMode::DcaNoDiv, 8usize),
            ("bank4", TrainMode::Dca, 4),
            ("bank16", TrainMode::Dca, 16),
        ];
        let expected_header =
            "held_out,mode,seed,n,dice_mean,dice_std,asd_mean,asd_std,asd_missing";
        let mut summary = Vec::new();
        for (label, mode, bank) in arms {
            let mut cfg = lodo_train(mode, 0, iterations);
            cfg.bank_size = bank;
            cfg.val_every = iterations;
            let dir = tmpdir()?;
            let rows = ok(run_lodo_experiment::<f32>(
                &reg,
                &lodo_net(),
                &LossConfig::default(),
                &cfg,
                &ecfg,
                dir.path(),
            ))?;
            ensure!(
                rows.len() == 5,
                "{label}: expected 4 domain rows + average, got {}",
                rows.len()
            );
            let avg = &rows[4];
            ensure!(avg.held_out == "average", "{label}: last row is {}", avg.held_out);
            for row in rows.iter() {
                ensure!(
                    row.mode == mode.as_str(),
                    "{label}: row {} carries mode {}",
                    row.held_out,
                    row.mode
                );
                ensure!(
                    (0.0..=100.0).contains(&row.dice_mean),
                    "{label}: row {} has Dice {}",
                    row.held_out,
                    row.dice_mean
                );
            }
            ensure!(
                rows[..4].iter().all(|r| r.n == 8) && avg.n == 32,
                "{label}: unexpected test-set sizes {:?}",
                rows.iter().map(|r| r.n).collect::<Vec<_>>()
            );
            let csv = fs::read_to_string(dir.path().join("lodo_results.csv"))
                .map_err(|e| e.to_string())?;
            let mut lines = csv.lines();
            ensure!(
                lines.next() == Some(expected_header),
                "{label}: table header mismatch"
            );
            ensure!(
                lines.count() == 5,
                "{label}: table body does not hold 5 rows"
            );

            // Mode- and bank-specific plumbing actually reached the artifacts.
            let ck = ok(checkpoint::load::<f32>(&dir.path().join("site_a/best.ckpt")))?;
            ensure!(
                ck.config.bank_size == bank && ck.config.use_dca,
                "{label}: checkpoint stores bank size {} (expected {bank})",
                ck.config.bank_size
            );
            if mode == TrainMode::DcaNoDiv {
                let events = ok(read_log(&dir.path().join("site_a/train.jsonl")))?;
                let meta_ok = matches!(
                    &events[0],
                    LogEvent::Meta { train, .. } if train.mode == TrainMode::DcaNoDiv
                );
                ensure!(meta_ok, "{label}: log meta does not carry the ablation mode");
                let first_loss = events.iter().find_map(|e| match e {
                    LogEvent::Loss { values, .. } => Some(*values),
                    _ => None,
                });
                let v = first_loss.ok_or("no loss events logged")?;
                ensure!(v.l_div != 0.0, "{label}: divergence not measured");
                ensure!(
                    (v.l_total - (v.l_seg + 0.1 * v.l_comp)).abs() < 1e-5,
                    "{label}: divergence leaked into the total ({v:?})"
                );
            }
            summary.push(format!("{label} avg {:.1}", avg.dice_mean));
        }
        Ok(format!(
            "full 5-row tables with intact schema for {} ({} iterations per run)",
            summary.join(", "),
            iterations
        ))
    });
}

// ========================================================================
// 9. Determinism
// ========================================================================

#[test]
fn criterion_09_determinism() {
    run_criterion(9, "determinism", || {
        // Volume evaluation honors DCA_NUM_WORKERS; pin the single-threaded
        // numeric mode the guarantee is stated for.
        std::env::remove_var("DCA_NUM_WORKERS");
        let reg = ok(lodo_registry())?;
        let ecfg = lodo_eval();
        let cfg = TrainConfig {
            iterations: 10,
            val_every: 10,
            ..lodo_train(TrainMode::Dca, 0, 10)
        };
        let split = ok(leave_one_domain_out_split(&reg, &SplitSpec::new("site_d", cfg.seed)))?;
        let run = || -> Result<(Vec<[u64; 4]>, Vec<u8>, Vec<u8>), String> {
            let dir = tmpdir()?;
            let report = ok(train::<f32>(
                &split,
                &lodo_net(),
                &LossConfig::default(),
                &cfg,
                &ecfg,
                dir.path(),
            ))?;
            let bits: Vec<[u64; 4]> = report
                .losses
                .iter()
                .map(|v| {
                    [
                        v.l_seg.to_bits(),
                        v.l_comp.to_bits(),
                        v.l_div.to_bits(),
                        v.l_total.to_bits(),
                    ]
                })
                .collect();
            let results =
                ok(evaluate_checkpoint::<f32>(&report.final_checkpoint, &split.test, &ecfg))?;
            let csv_path = dir.path().join("volumes.csv");
            ok(metrics::write_volume_csv(&csv_path, &results))?;
            let csv = fs::read(&csv_path).map_err(|e| e.to_string())?;
            let ckpt = fs::read(&report.final_checkpoint).map_err(|e| e.to_string())?;
            Ok((bits, csv, ckpt))
        };
        let (bits_a, csv_a, ckpt_a) = run()?;
        let (bits_b, csv_b, ckpt_b) = run()?;
        ensure!(bits_a.len() == 10, "expected 10 logged iterations, got {}", bits_a.len());
        ensure!(
            bits_a == bits_b,
            "loss trajectories diverge: first mismatch at iteration {}",
            bits_a.iter().zip(&bits_b).position(|(a, b)| a != b).unwrap_or(0) + 1
        );
        ensure!(csv_a == csv_b, "result CSVs differ between identically-seeded runs");
        ensure!(ckpt_a == ckpt_b, "final checkpoints differ between identically-seeded runs");
        Ok(format!(
            "10-iteration loss trajectory bit-identical; result CSV ({} bytes) and final checkpoint ({} bytes) byte-identical",
            csv_a.len(),
            ckpt_a.len()
        ))
    });
}

// ========================================================================
// 10. Checkpoint round-trip
// ========================================================================

#[test]
fn criterion_10_checkpoint_round_trip() {
    run_criterion(10, "checkpoint round-trip", || {
        let cfg = NetworkConfig {
            encoder_widths: vec![4, 4, 8, 8, 8],
            bank_size: 3,
            reduction: 2,
            ..NetworkConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = ok(build_dca_unet(&mut store, &cfg, &mut rng))?;
        let mut adam = Adam::new(&store, AdamConfig::default());

        // A couple of real optimizer steps so the saved state is non-trivial.
        let images = ArrayD::<f32>::from_shape_vec(
            IxDyn(&[1, 3, 16, 16]),
            (0..3 * 256).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect(),
        )
        .expect("static shape");
        for _ in 0..2 {
            let mut g = Graph::<f32>::new();
            let x = g.constant(images.clone());
            let out = ok(model.forward(&mut g, &store, x, CalibrationMode::Learned))?;
            let s = g.mean_all(out.logits_per_scale[0]);
            store.zero_grads();
            g.backward(s);
            g.accumulate_param_grads(&mut store);
            adam.step(&mut store);
        }

        let dir = tmpdir()?;
        let path = dir.path().join("model.ckpt");
        ok(checkpoint::save(&path, &cfg, &store, Some(&adam), 123))?;
        let loaded = ok(checkpoint::load_model::<f32>(&path))?;
        ensure!(loaded.iteration == 123, "iteration came back as {}", loaded.iteration);
        ensure!(loaded.config == cfg, "configuration round-trip mismatch");
        ensure!(loaded.adam.is_some(), "optimizer state lost in round-trip");

        // Forward equality, bit for bit.
        let mut ga = Graph::<f32>::new();
        let xa = ga.constant(images.clone());
        let oa = ok(model.forward(&mut ga, &store, xa, CalibrationMode::Learned))?;
        let mut gb = Graph::<f32>::new();
        let xb = gb.constant(images);
        let ob = ok(loaded.model.forward(&mut gb, &loaded.store, xb, CalibrationMode::Learned))?;
        for (s, (&va, &vb)) in
            oa.logits_per_scale.iter().zip(&ob.logits_per_scale).enumerate()
        {
            let (a, b) = (ga.value(va), gb.value(vb));
            ensure!(
                a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "scale {s} logits differ after reload"
            );
        }

        // Re-saving the reloaded state must reproduce the file byte for byte
        // (weights, optimizer moments and header all survived).
        let path2 = dir.path().join("model2.ckpt");
        ok(checkpoint::save(
            &path2,
            &loaded.config,
            &loaded.store,
            loaded.adam.as_ref(),
            loaded.iteration,
        ))?;
        let bytes1 = fs::read(&path).map_err(|e| e.to_string())?;
        let bytes2 = fs::read(&path2).map_err(|e| e.to_string())?;
        ensure!(bytes1 == bytes2, "re-saved checkpoint differs from the original");

        // Version header enforcement: a clobbered magic must be rejected
        // before anything else is believed.
        let mut tampered = bytes1.clone();
        tampered[6] ^= 0xFF;
        let bad = dir.path().join("tampered.ckpt");
        fs::write(&bad, &tampered).map_err(|e| e.to_string())?;
        match checkpoint::load::<f32>(&bad) {
            Err(dca_net::Error::Checkpoint(msg)) => {
                ensure!(
                    msg.contains("version"),
                    "magic tamper produced the wrong message: {msg}"
                );
            }
            Err(e) => return Err(format!("magic tamper mapped to the wrong error: {e}")),
            Ok(_) => return Err("tampered version header was accepted".into()),
        }
        // Integrity: flipping one payload byte must also be rejected.
        let mut corrupt = bytes1.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0x01;
        fs::write(&bad, &corrupt).map_err(|e| e.to_string())?;
        ensure!(
            checkpoint::load::<f32>(&bad).is_err(),
            "payload corruption went undetected"
        );

        Ok(format!(
            "forward bit-exact after reload; re-save byte-identical ({} bytes); tampered header and payload both rejected",
            bytes1.len()
        ))
    });
}
