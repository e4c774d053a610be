//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not fatal, unless `LIC_ACCEPTANCE_STRICT=1`.
//! `LIC_ACCEPTANCE_ONLY=1,8` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

use lic_cli::artifacts::{verify_dir, Kind};
use lic_cli::stages::{eval, eval_coded, run_pipeline};
use lic_cli::{Overrides, PipelineConfig};
use lic_core::codec::{batch_rd, train, Bound, FloatHooks, LicConfig, LicModel, Sampler, TrainConfig};
use lic_core::engine::{IntModel, PatchConfig};
use lic_core::entropy::{ac_decode, ac_encode, ChannelCdf, TOTAL};
use lic_core::image::synthetic_corpus;
use lic_core::metrics::{bd_psnr, bd_rate, BdMethod, RdCurve};
use lic_core::nn::gradcheck::{max_rel_error, op_suite, TOL};
use lic_core::nn::{Graph, Var};
use lic_core::pruner::{compact, count_flops, layer_flops, prune, PruneSchedule};
use lic_core::quantizer::{calibrate, fake_quant, qat_finetune, NoObserver, QuantContext, QuantizedModel};
use lic_core::watermark::{
    chance_band, derive_watermark, naive_postfloat_watermark_then_quantize, pqw_detect, pqw_embed, qaw_finetune, wm_loss,
    KeyMatrix, PqwConfig, ProviderKey, QawConfig, WatermarkBits, PQW_THRESHOLD,
};
use lic_core::Tensor;
use lic_drm::{package, trace_leak, unlock, unlock_and_load, ClientIdentity, EncryptedContainer, Registry, WatermarkPolicy};

type R<T> = Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

struct Run {
    only: Option<Vec<u32>>,
    results: Vec<Outcome>,
}

impl Run {
    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|v| v.contains(&id))
    }

    fn check(&mut self, id: u32, name: &'static str, f: impl FnOnce() -> R<(bool, String)>) {
        if !self.wants(id) {
            return;
        }
        let t0 = Instant::now();
        let (pass, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let secs = t0.elapsed().as_secs_f64();
        let o = Outcome {
            id,
            name,
            pass,
            detail,
            secs,
        };
        println!("{}", line(&o));
        self.results.push(o);
    }
}

fn line(o: &Outcome) -> String {
    format!(
        "[{}] C{:<2} {:<28} {:>8.1}s  {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.secs,
        o.detail
    )
}

fn info(msg: String) {
    println!("       info: {msg}");
}

// ---------------------------------------------------------------- C1

fn tiny_inputs(model: &LicModel) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = model.layers.iter().map(|l| l.weight.value.clone()).collect();
    v.extend(model.layers.iter().map(|l| l.bias.value.clone()));
    v.push(model.prior.mu.value.clone());
    v.push(model.prior.log_b.value.clone());
    v
}

fn bound_from(vars: &[Var], layers: usize) -> Bound {
    Bound {
        weights: vars[..layers].to_vec(),
        biases: vars[layers..2 * layers].to_vec(),
        mu: vars[2 * layers],
        log_b: vars[2 * layers + 1],
    }
}

fn c1_gradients() -> R<(bool, String)> {
    let ops = op_suite();
    let (worst_op, worst_err) = ops
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("empty op suite")?;
    let model = LicModel::new(
        LicConfig {
            stages: 2,
            channels: 2,
            ..LicConfig::default()
        },
        11,
    )?;
    let x = Tensor::new(vec![1, 3, 8, 8], synthetic_corpus(1, 8, 5)[0].data().to_vec())?;
    let tc = TrainConfig {
        batch_size: 1,
        seed: 21,
        ..TrainConfig::default()
    };
    let nl = model.layers.len();
    let inputs = tiny_inputs(&model);
    let rd = |g: &mut Graph, v: &[Var]| {
        let bound = bound_from(v, nl);
        let mut s = Sampler::new(&tc);
        Ok(batch_rd(&model, g, &bound, &x, &mut s, &FloatHooks)?.loss)
    };
    let e_rd = max_rel_error(&rd, &inputs);
    let target = model.decoder_layer_index(1)?;
    let key = KeyMatrix::for_model(3, &model, target, 32)?;
    let bits = derive_watermark(b"gradcheck", b"salt", 32)?;
    let beta = 0.05;
    let joint = |g: &mut Graph, v: &[Var]| {
        let bound = bound_from(v, nl);
        let mut s = Sampler::new(&tc);
        let rd = batch_rd(&model, g, &bound, &x, &mut s, &FloatHooks)?.loss;
        let e = wm_loss(g, bound.weights[target], &key, &bits)?;
        let e = g.scale(e, beta)?;
        g.add(rd, e)
    };
    let e_joint = max_rel_error(&joint, &inputs);
    let pass = worst_err < TOL && e_rd < TOL && e_joint < TOL;
    Ok((
        pass,
        format!(
            "{} ops, worst {worst_op} {worst_err:.2e}; rd loss {e_rd:.2e}; rd+beta*wm loss {e_joint:.2e} (tol {TOL:.0e})",
            ops.len()
        ),
    ))
}

// ---------------------------------------------------------------- C2

fn c2_entropy() -> R<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut over, mut worst) = (0usize, 0usize, f64::NEG_INFINITY);
    let (mut total_bytes, mut total_symbols) = (0usize, 0usize);
    let trials = 10_000;
    for _ in 0..trials {
        let n_sym = rng.gen_range(1..=48);
        let escape = rng.gen_bool(0.3);
        let skew: i32 = rng.gen_range(1..=6);
        let mut probs: Vec<f64> = (0..n_sym).map(|_| rng.gen::<f64>().powi(skew) + 1e-9).collect();
        if escape {
            probs.push(rng.gen_range(1e-4..0.05));
        }
        let smin = rng.gen_range(-40..=5);
        let cdf = ChannelCdf::from_probabilities(smin, &probs, escape)?;
        let smax = smin + n_sym - 1;
        let count = rng.gen_range(0..=1500);
        let symbols: Vec<i32> = (0..count)
            .map(|_| {
                let slot = cdf.lookup(rng.gen_range(0..TOTAL));
                if Some(slot) == cdf.escape_slot() {
                    if rng.gen_bool(0.5) {
                        smax + 1 + rng.gen_range(0..100_000)
                    } else {
                        smin - 1 - rng.gen_range(0..100_000)
                    }
                } else {
                    smin + slot as i32
                }
            })
            .collect();
        let bytes = ac_encode(&symbols, &cdf)?;
        if ac_decode(&bytes, &cdf, count)? != symbols {
            mismatches += 1;
        }
        let ideal = symbols.iter().map(|&s| cdf.cost_bits(s)).sum::<f64>() / 8.0;
        let slack = bytes.len() as f64 - (ideal * 1.001 + 8.0);
        worst = worst.max(bytes.len() as f64 - ideal);
        if slack > 0.0 {
            over += 1;
        }
        total_bytes += bytes.len();
        total_symbols += count;
    }
    Ok((
        mismatches == 0 && over == 0,
        format!(
            "{trials} round trips, {total_symbols} symbols, {total_bytes} bytes; mismatches {mismatches}, over budget {over}, worst excess {worst:.2} B"
        ),
    ))
}

// ---------------------------------------------------------------- C3

fn c3_grid() -> (bool, String) {
    let scales = [1e-3, 7.3e-3, 0.037, 0.5, 1.9];
    let per = 200_001;
    let (mut points, mut bad_idem, mut bad_bound, mut bad_sat) = (0usize, 0usize, 0usize, 0usize);
    for &s in &scales {
        let span = 150.0 * s;
        for i in 0..per {
            let theta = -span + 2.0 * span * i as f64 / (per - 1) as f64;
            let q = fake_quant(theta, s);
            points += 1;
            if fake_quant(q, s) != q {
                bad_idem += 1;
            }
            let err = (q - theta).abs();
            if theta.abs() <= 127.0 * s {
                if err > s / 2.0 * (1.0 + 1e-12) {
                    bad_bound += 1;
                }
            } else if (err - (theta.abs() - 127.0 * s)).abs() > 1e-9 * span {
                bad_sat += 1;
            }
        }
    }
    (
        points >= 1_000_000 && bad_idem + bad_bound + bad_sat == 0,
        format!("{points} points; idempotence failures {bad_idem}, in-range > s/2 {bad_bound}, saturation {bad_sat}"),
    )
}

fn c3_parity(qm: &QuantizedModel) -> R<(bool, String)> {
    let im = IntModel::load(qm.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut acts, mut worse, mut worst) = (0usize, 0usize, 0.0f64);
    let trials = 1000;
    for _ in 0..trials {
        let side = 4 * rng.gen_range(2..=6);
        let x = Tensor::from_fn(&[1, 3, side, side], |_| rng.gen_range(0u32..=255) as f64 / 255.0);
        let sim = qm.simulate(&x)?;
        for (i, l) in im.layers.iter().enumerate() {
            let (input, ih, iw) = if i == 0 {
                IntModel::pixels(&x)?
            } else {
                let (_, _, h, w) = sim[i - 1].dims4()?;
                let v = sim[i - 1].data().iter().map(|v| (v / qm.layers[i].s_in).round() as i32).collect();
                (v, h, w)
            };
            let (o, _, _) = l.forward(&input, ih, iw)?;
            let s = qm.layers[i].s_out;
            for (a, b) in o.iter().zip(sim[i].data()) {
                let d = (*a as f64 - b / s).abs();
                worst = worst.max(d);
                acts += 1;
                if d > 1.0 + 1e-9 {
                    worse += 1;
                }
            }
        }
    }
    Ok((
        worse == 0,
        format!("{trials} random inputs, {acts} activations; over 1 LSB {worse}, worst {worst:.3} LSB"),
    ))
}

// ---------------------------------------------------------------- shared toy setup

struct Toy {
    train: Vec<Tensor>,
    test: Vec<Tensor>,
    float: LicModel,
    registry: Registry,
    target: usize,
    patch: PatchConfig,
    qat: TrainConfig,
    qaw: QawConfig,
}

struct SeedRun {
    client: String,
    twin: QuantizedModel,
    twin_psnr: f64,
    marked: QuantizedModel,
    qaw_cber: f64,
    qaw_psnr: f64,
    qaw_steps: usize,
    naive_int8: f64,
    naive_int4: f64,
    naive_float: f64,
    pqw: Option<(f64, f64)>,
}

fn toy_setup() -> R<Toy> {
    let defaults = PipelineConfig::default();
    let train_set = synthetic_corpus(24, 64, 3);
    let test = synthetic_corpus(6, 64, 4);
    let cfg = LicConfig {
        stages: 2,
        channels: 32,
        ..LicConfig::default()
    };
    let (float, _) = train(&train_set, &cfg, &TrainConfig::default())?;
    let target = float.decoder_layer_index(1)?;
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let provider = ProviderKey::generate(&mut rng);
    let mut registry = Registry::new(WatermarkPolicy { target_layer: target, bits: 64 });
    for i in 0..10 {
        let id = ClientIdentity::generate(format!("client-{i:02}"), &mut rng);
        registry.register(&id.public(), &provider);
    }
    Ok(Toy {
        train: train_set,
        test,
        float,
        registry,
        target,
        patch: PatchConfig::default(),
        qat: defaults.qat.clone(),
        qaw: QawConfig {
            target_layer: Some(target),
            bits: 64,
            ..defaults.qaw
        },
    })
}

fn coded_psnr(toy: &Toy, qm: &QuantizedModel) -> R<f64> {
    Ok(eval_coded(&IntModel::load(qm.clone())?, &toy.test, &toy.patch)?.psnr)
}

fn seed_run(toy: &Toy, s: u64, with_pqw: bool) -> R<SeedRun> {
    let rec = &toy.registry.clients[(3 + s as usize) % toy.registry.clients.len()];
    let key = KeyMatrix::for_model(rec.key_seed, &toy.float, toy.target, 64)?;
    let bits: WatermarkBits = derive_watermark(&rec.public_key, &rec.salt, 64)?;
    let qtc = TrainConfig {
        seed: 1000 + s,
        ..toy.qat.clone()
    };
    let stats = calibrate(&toy.float, &toy.train)?;

    let (mut tm, mut tctx) = (toy.float.clone(), QuantContext::new(&toy.float, &stats)?);
    qat_finetune(&mut tm, &mut tctx, &toy.train, &qtc, &mut NoObserver)?;
    let twin = QuantizedModel::export(&tm, &tctx, &toy.train)?;
    let twin_psnr = coded_psnr(toy, &twin)?;

    let (mut wm, mut ctx) = (toy.float.clone(), QuantContext::new(&toy.float, &stats)?);
    let r = qaw_finetune(&mut wm, &mut ctx, &key, &bits, &toy.train, &toy.train, &qtc, &toy.qaw)?;
    let qaw_psnr = coded_psnr(toy, &r.quantized)?;

    let (_, naive) = naive_postfloat_watermark_then_quantize(&toy.float, &key, &bits, &toy.train, &qtc, &toy.qaw)?;

    let pqw = if with_pqw {
        let marked = pqw_embed(
            &twin,
            &PqwConfig {
                layer: toy.target,
                key: 9000 + s,
                strength: 0.75,
            },
        )?;
        Some((pqw_detect(&marked, toy.target, 9000 + s)?, coded_psnr(toy, &marked)?))
    } else {
        None
    };
    Ok(SeedRun {
        client: rec.id.clone(),
        twin,
        twin_psnr,
        marked: r.quantized,
        qaw_cber: r.report.c_ber,
        qaw_psnr,
        qaw_steps: r.steps,
        naive_int8: naive.int8.c_ber,
        naive_int4: naive.int4.c_ber,
        naive_float: naive.float.c_ber,
        pqw,
    })
}

// ---------------------------------------------------------------- C7

fn c7_pruning(toy: &Toy) -> R<(bool, String)> {
    let schedule = PruneSchedule::default();
    let mut m = toy.float.clone();
    let rows = prune(&mut m, &schedule, &toy.train, &toy.test)?;
    let shape = [1, 3, 64, 64];
    let base_params = toy.float.nonzero_param_count();
    let pruned_params = m.nonzero_param_count();
    let reduction = 100.0 * (1.0 - pruned_params as f64 / base_params as f64);
    let full = layer_flops(&toy.float, &shape)?;
    let masked = layer_flops(&m, &shape)?;
    let mask = m.mask.clone().ok_or("pruned model has no mask")?;
    let keep = 1.0 - schedule.cumulative_ratio();
    let mut flops_ok = true;
    for (i, l) in toy.float.layers.iter().enumerate() {
        let kept = mask.kept(i);
        let expect = full[i] / l.out_ch as u64 * kept as u64;
        flops_ok &= masked[i] == expect;
        // The output layer is never pruned; elsewhere each iteration rounds up once.
        flops_ok &= if i + 1 == toy.float.layers.len() {
            kept == l.out_ch
        } else {
            (kept as f64 - keep * l.out_ch as f64).abs() <= schedule.iterations as f64
        };
    }
    let flop_ratio = count_flops(&m, &shape)? as f64 / count_flops(&toy.float, &shape)? as f64;

    let compacted = compact(&m)?;
    let mut forward_equal = true;
    for x in &toy.test {
        let (za, xa) = m.reconstruct(x)?;
        let (zb, xb) = compacted.reconstruct(x)?;
        let live: Vec<f64> = (0..za.shape()[1])
            .filter(|&c| mask.keep[m.encoder_len - 1][c])
            .flat_map(|c| {
                let plane = za.shape()[2] * za.shape()[3];
                za.data()[c * plane..(c + 1) * plane].to_vec()
            })
            .collect();
        forward_equal &= live == zb.data() && xa == xb;
    }
    let kept: Vec<usize> = (0..m.layers.len()).map(|i| mask.kept(i)).collect();
    info(format!(
        "compacted params {} of {} ({:.1}% structural), psnr {:.2} -> {:.2} dB",
        compacted.param_count(),
        toy.float.param_count(),
        100.0 * (1.0 - compacted.param_count() as f64 / toy.float.param_count() as f64),
        rows[0].psnr,
        rows.last().map_or(f64::NAN, |r| r.psnr)
    ));
    let pass = (25.0..=30.0).contains(&reduction) && flops_ok && forward_equal;
    Ok((
        pass,
        format!(
            "kept {kept:?}; params {base_params} -> {pruned_params} (-{reduction:.2}%); flops x{flop_ratio:.4} vs {keep:.3}, per-layer oracle {}; compact==masked {forward_equal}",
            if flops_ok { "ok" } else { "violated" }
        ),
    ))
}

// ---------------------------------------------------------------- C8

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        s += f(lo + i as f64 * h);
    }
    s * h
}

/// Least-squares cubic through `(x, y)`, solved on centered abscissae.
fn oracle_cubic(x: &[f64], y: &[f64]) -> impl Fn(f64) -> f64 {
    let c = x.iter().sum::<f64>() / x.len() as f64;
    let mut a = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let t = xi - c;
        let p = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            for k in 0..4 {
                a[r][k] += p[r] * p[k];
            }
            a[r][4] += p[r] * yi;
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..5 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..4).map(|r| a[r][4] / a[r][r]).collect();
    move |v| {
        let t = v - c;
        coef[0] + t * (coef[1] + t * (coef[2] + t * coef[3]))
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
fn oracle_pchip(x: &[f64], y: &[f64]) -> impl Fn(f64) -> f64 {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
    let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
            d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let edge = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let e = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if e * m0 <= 0.0 {
            0.0
        } else if m0 * m1 < 0.0 && e.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            e
        }
    };
    d[0] = edge(h[0], h[1], del[0], del[1]);
    d[n - 1] = edge(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    let (x, y) = (x.to_vec(), y.to_vec());
    move |v| {
        let k = (0..n - 1).rev().find(|&k| v >= x[k]).unwrap_or(0);
        let hk = x[k + 1] - x[k];
        let t = (v - x[k]) / hk;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * y[k] + (t3 - 2.0 * t2 + t) * hk * d[k] + (3.0 * t2 - 2.0 * t3) * y[k + 1] + (t3 - t2) * hk * d[k + 1]
    }
}

/// BD value over `[lo, hi]` from interpolants fitted to `(xa, ya)` and `(xb, yb)`.
fn oracle_bd(method: BdMethod, xa: &[f64], ya: &[f64], xb: &[f64], yb: &[f64], lo: f64, hi: f64) -> f64 {
    let n = 20_000;
    let (ia, ib) = match method {
        BdMethod::Cubic => (
            trapezoid(oracle_cubic(xa, ya), lo, hi, n),
            trapezoid(oracle_cubic(xb, yb), lo, hi, n),
        ),
        BdMethod::Pchip => (
            trapezoid(oracle_pchip(xa, ya), lo, hi, n),
            trapezoid(oracle_pchip(xb, yb), lo, hi, n),
        ),
    };
    (ib - ia) / (hi - lo)
}

type Curve = (f64, f64, f64);

fn psnr_of(c: Curve, r: f64) -> f64 {
    c.0 + c.1 * (1.0 + c.2 * r).ln()
}

fn rate_of(c: Curve, p: f64) -> f64 {
    ((p - c.0) / c.1).exp_m1() / c.2
}

fn sample_rates(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lo: f64 = rng.gen_range(0.08..0.15);
    let hi: f64 = rng.gen_range(1.2..2.0);
    let mut r: Vec<f64> = (0..5).map(|i| lo * (hi / lo).powf(i as f64 / 4.0)).collect();
    for v in r.iter_mut().skip(1).take(3) {
        *v *= rng.gen_range(0.9..1.1);
    }
    r
}

fn c8_bd() -> R<(bool, String)> {
    let pairs = [(0.12, 27.1), (0.25, 29.4), (0.5, 31.9), (0.9, 34.0), (1.6, 36.2)];
    let a = RdCurve::from_pairs(&pairs)?;
    let shifted: Vec<(f64, f64)> = pairs.iter().map(|&(r, p)| (r, p + 1.0)).collect();
    let b = RdCurve::from_pairs(&shifted)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for m in [BdMethod::Cubic, BdMethod::Pchip] {
        let same = bd_psnr(&a, &a, m)?;
        let same_rate = bd_rate(&a, &a, m)?;
        let plus = bd_psnr(&a, &b, m)?;
        ok &= same.abs() < 1e-12 && same_rate.abs() < 1e-10 && (plus - 1.0).abs() < 1e-9;
        notes.push(format!("{m:?}: same {same:.1e}/{same_rate:.1e}, +1dB {plus:.12}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_p, mut worst_r) = (0.0f64, 0.0f64);
    let (mut truth_p, mut truth_r, mut truth_n) = (0.0f64, 0.0f64, 0usize);
    let trials = 200;
    for trial in 0..trials {
        let pa: Curve = (rng.gen_range(24.0..32.0), rng.gen_range(2.5..5.0), rng.gen_range(2.0..8.0));
        // Every other pair is a near competitor of the first curve.
        let pb: Curve = if trial % 2 == 0 {
            (rng.gen_range(24.0..32.0), rng.gen_range(2.5..5.0), rng.gen_range(2.0..8.0))
        } else {
            (pa.0 + rng.gen_range(-1.0..1.0), pa.1 * rng.gen_range(0.9..1.1), pa.2 * rng.gen_range(0.9..1.1))
        };
        let (ra, rb) = (sample_rates(&mut rng), sample_rates(&mut rng));
        let (qa, qb): (Vec<f64>, Vec<f64>) = (ra.iter().map(|&r| psnr_of(pa, r)).collect(), rb.iter().map(|&r| psnr_of(pb, r)).collect());
        let ca = RdCurve::from_pairs(&ra.iter().cloned().zip(qa.iter().cloned()).collect::<Vec<_>>())?;
        let cb = RdCurve::from_pairs(&rb.iter().cloned().zip(qb.iter().cloned()).collect::<Vec<_>>())?;
        let (la, lb): (Vec<f64>, Vec<f64>) = (ra.iter().map(|r| r.log10()).collect(), rb.iter().map(|r| r.log10()).collect());

        let (lo, hi) = (la[0].max(lb[0]), la[4].min(lb[4]));
        let (plo, phi) = (qa[0].max(qb[0]), qa[4].min(qb[4]));
        for m in [BdMethod::Cubic, BdMethod::Pchip] {
            let got_p = bd_psnr(&ca, &cb, m)?;
            worst_p = worst_p.max((got_p - oracle_bd(m, &la, &qa, &lb, &qb, lo, hi)).abs());
            let got_r = (phi > plo).then(|| bd_rate(&ca, &cb, m)).transpose()?;
            if let Some(got_r) = got_r {
                let avg = oracle_bd(m, &qa, &la, &qb, &lb, plo, phi);
                worst_r = worst_r.max((got_r - (10f64.powf(avg) - 1.0) * 100.0).abs());
            }
            if trial % 2 == 1 {
                let dp = |lr: f64| psnr_of(pb, 10f64.powf(lr)) - psnr_of(pa, 10f64.powf(lr));
                truth_p = truth_p.max((got_p - trapezoid(dp, lo, hi, 20_000) / (hi - lo)).abs());
                if let Some(got_r) = got_r {
                    let dr = |p: f64| rate_of(pb, p).log10() - rate_of(pa, p).log10();
                    let t = (10f64.powf(trapezoid(dr, plo, phi, 20_000) / (phi - plo)) - 1.0) * 100.0;
                    truth_r = truth_r.max((got_r - t).abs());
                    truth_n += 1;
                }
            }
        }
    }
    info(format!(
        "against the generating curves (near pairs, {truth_n} fits): worst {truth_p:.4} dB, {truth_r:.3} pts"
    ));
    ok &= worst_p <= 0.05 && worst_r <= 0.5;
    Ok((
        ok,
        format!(
            "{}; {trials} random curve pairs vs trapezoid oracle: worst BD-PSNR gap {worst_p:.2e} dB, BD-rate gap {worst_r:.2e} pts",
            notes.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- C9

fn c9_tamper() -> R<(bool, String)> {
    let data = synthetic_corpus(3, 16, 9);
    let cfg = LicConfig {
        stages: 2,
        channels: 4,
        ..LicConfig::default()
    };
    let (model, _) = train(
        &data,
        &cfg,
        &TrainConfig {
            steps: 20,
            batch_size: 2,
            crop: 16,
            ..TrainConfig::default()
        },
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(90);
    let provider = ProviderKey::generate(&mut rng);
    let client = ClientIdentity::generate("client-small", &mut rng);
    let policy = WatermarkPolicy {
        target_layer: model.decoder_layer_index(1)?,
        bits: 32,
    };
    let rec = lic_drm::ClientRecord::new(&client.public(), &provider);
    let key = KeyMatrix::for_model(rec.key_seed, &model, policy.target_layer, policy.bits)?;
    let bits = derive_watermark(&rec.public_key, &rec.salt, policy.bits)?;
    let stats = calibrate(&model, &data)?;
    let (mut wm, mut ctx) = (model.clone(), QuantContext::new(&model, &stats)?);
    let tc = TrainConfig {
        steps: 50,
        batch_size: 2,
        crop: 16,
        ..TrainConfig::default()
    };
    let qcfg = QawConfig {
        target_layer: Some(policy.target_layer),
        bits: policy.bits,
        ..QawConfig::default()
    };
    let r = qaw_finetune(&mut wm, &mut ctx, &key, &bits, &data, &data, &tc, &qcfg)?;
    let sealed = package(&r.quantized, &client.public(), &provider, &policy, &mut rng)?;
    let bytes = sealed.to_bytes();
    let (mut rejected, mut flips) = (0usize, 0usize);
    for i in 0..bytes.len() * 8 {
        let mut b = bytes.clone();
        b[i / 8] ^= 1 << (i % 8);
        flips += 1;
        let accepted = EncryptedContainer::from_bytes(&b).is_ok_and(|c| unlock(&c, &client).is_ok());
        if !accepted {
            rejected += 1;
        }
    }
    let opened = unlock(&EncryptedContainer::from_bytes(&bytes)?, &client)?;
    let exact = opened.payload == r.quantized.to_bytes();
    let (meta, engine) = unlock_and_load(&EncryptedContainer::from_bytes(&bytes)?, &client)?;
    let hash_ok = engine.hash == r.quantized.hash() && meta.model_hash == hex::encode(r.quantized.hash());
    Ok((
        rejected == flips && exact && hash_ok,
        format!(
            "{} byte container, {rejected}/{flips} single-bit flips rejected; round trip byte-exact {exact}, hash {hash_ok}",
            bytes.len()
        ),
    ))
}

fn c9_trace(toy: &Toy, run: &SeedRun) -> R<(bool, String)> {
    let ranked = trace_leak(&run.marked, &toy.registry)?;
    let top = &ranked[0];
    let others_ok = ranked[1..].iter().all(|m| m.in_chance_band);
    let (lo, hi) = chance_band(toy.registry.policy.bits);
    let worst_other = ranked[1..].iter().map(|m| (m.c_ber - 50.0).abs()).fold(0.0, f64::max);
    let unmarked = trace_leak(&run.twin, &toy.registry)?;
    info(format!(
        "unmarked twin: all clients in chance band {}",
        unmarked.iter().all(|m| m.in_chance_band)
    ));
    Ok((
        top.client == run.client && top.c_ber == 100.0 && others_ok,
        format!(
            "rank 1 {} at {:.1}; other 9 in [{lo:.2}, {hi:.2}] {others_ok} (max |c_ber-50| {worst_other:.1})",
            top.client, top.c_ber
        ),
    ))
}

fn attack_sim(toy: &Toy, run: &SeedRun) -> R<String> {
    let leaked = run.marked.dequantize()?;
    let stats = calibrate(&leaked, &toy.train)?;
    let mut ctx = QuantContext::new(&leaked, &stats)?;
    let mut m = leaked.clone();
    let tc = TrainConfig {
        steps: 100,
        seed: 77,
        ..toy.qat.clone()
    };
    qat_finetune(&mut m, &mut ctx, &toy.train, &tc, &mut NoObserver)?;
    let q = QuantizedModel::export(&m, &ctx, &toy.train)?;
    let ranked = trace_leak(&q, &toy.registry)?;
    Ok(format!(
        "after 100 fine-tune steps by the leaker: rank 1 {} at {:.1}, psnr {:.2} dB",
        ranked[0].client,
        ranked[0].c_ber,
        coded_psnr(toy, &q)?
    ))
}

// ---------------------------------------------------------------- C10

fn c10_lambda(toy: &Toy) -> R<(bool, String)> {
    let lambdas = [0.001, 0.005, 0.01, 0.05, 0.1];
    let dir = tempfile::tempdir()?;
    let mut cfg = PipelineConfig::default();
    cfg.paths.out = dir.path().join("out");
    let mut rows = Vec::new();
    let mut paths = Vec::new();
    for &lambda in &lambdas {
        let lc = LicConfig {
            stages: 2,
            channels: 32,
            lambda,
            ..LicConfig::default()
        };
        let (m, _) = train(&toy.train, &lc, &TrainConfig::default())?;
        let p = dir.path().join(format!("lambda-{lambda}.licf"));
        std::fs::write(&p, m.to_bytes())?;
        paths.push(p);
        let ctx = QuantContext::new(&m, &calibrate(&m, &toy.train)?)?;
        let qm = QuantizedModel::export(&m, &ctx, &toy.train)?;
        let e = eval_coded(&IntModel::load(qm)?, &toy.test, &toy.patch)?;
        rows.push((lambda, e.bpp, e.psnr));
    }
    let ordered = rows.windows(2).all(|w| w[1].1 > w[0].1 && w[1].2 >= w[0].2);
    cfg.paths.out = dir.path().join("eval");
    let estimated = eval(&cfg, &paths, None, None, Some(&write_test_pngs(dir.path(), &toy.test)?), None)?;
    info(format!("float checkpoints through eval: monotone {}", estimated.monotone));
    let text: Vec<String> = rows.iter().map(|(l, b, p)| format!("{l}:{b:.3}bpp/{p:.2}dB")).collect();
    Ok((ordered, format!("coded int8: {}", text.join(" "))))
}

fn write_test_pngs(root: &Path, images: &[Tensor]) -> R<PathBuf> {
    let d = root.join("test-png");
    std::fs::create_dir_all(&d)?;
    for (i, x) in images.iter().enumerate() {
        lic_core::image::save_png(&d.join(format!("img_{i:04}.png")), x)?;
    }
    Ok(d)
}

// ---------------------------------------------------------------- C11

fn snapshot(root: &Path) -> R<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn c11_pipeline() -> R<(bool, String)> {
    let home = std::env::current_dir()?;
    let cfg = PipelineConfig::resolve(None, &Overrides::default())?;
    let mut snaps = Vec::new();
    let mut last = None;
    let t0 = Instant::now();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        std::env::set_current_dir(dir.path())?;
        let run = run_pipeline(&cfg, "client-01", true, None);
        let snap = snapshot(Path::new("."));
        let verified = verify_dir(Path::new("."));
        std::env::set_current_dir(&home)?;
        let run = run?;
        snaps.push(snap?);
        last = Some((run, verified?));
    }
    let secs = t0.elapsed().as_secs_f64() / 2.0;
    let (run, verified) = last.ok_or("pipeline did not run")?;
    let strip = |s: &BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        s.iter()
            .filter(|(p, _)| p.extension().is_none_or(|e| e != "lice"))
            .map(|(p, b)| (p.clone(), b.clone()))
            .collect()
    };
    let (a, b) = (strip(&snaps[0]), strip(&snaps[1]));
    let differing: Vec<String> = a
        .iter()
        .filter(|(p, v)| b.get(*p) != Some(v))
        .map(|(p, _)| p.display().to_string())
        .chain(b.keys().filter(|p| !a.contains_key(*p)).map(|p| p.display().to_string()))
        .collect();
    let kinds: std::collections::BTreeSet<String> = verified.iter().map(|e| format!("{:?}", e.kind)).collect();
    let wanted = [
        Kind::FloatCheckpoint,
        Kind::QuantizedModel,
        Kind::Bitstream,
        Kind::EncryptedContainer,
        Kind::Png,
        Kind::Json,
        Kind::Csv,
        Kind::KeyFile,
    ];
    let all_kinds = wanted.iter().all(|k| kinds.contains(&format!("{k:?}")));
    let bad = verified.iter().filter(|e| !e.ok).count();
    let pass = differing.is_empty() && all_kinds && bad == 0 && run.extract.exact && secs < 45.0 * 60.0;
    Ok((
        pass,
        format!(
            "{} files, differing (excluding .lice) {:?}; kinds {kinds:?}; verify failures {bad}; c_ber {:.1}; psnr {:.2} dB; {secs:.0} s per run",
            a.len(),
            differing,
            run.extract.c_ber,
            run.decode.psnr.unwrap_or(f64::NAN)
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let t_all = Instant::now();
    let only = std::env::var("LIC_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut run = Run {
        only,
        results: Vec::new(),
    };
    run.check(1, "gradient correctness", c1_gradients);
    run.check(2, "entropy coder losslessness", c2_entropy);
    run.check(8, "bd metrics", c8_bd);
    run.check(11, "end-to-end pipeline", c11_pipeline);
    if [3, 4, 5, 6, 7, 9, 10].iter().any(|&id| run.wants(id)) {
        toy_criteria(&mut run);
    }
    finish(run, t_all);
}

fn toy_criteria(run: &mut Run) {
    let t0 = Instant::now();
    let toy = match toy_setup() {
        Ok(t) => t,
        Err(e) => {
            let msg = format!("toy setup failed: {e}");
            for id in [3, 4, 5, 6, 7, 9, 10] {
                run.check(id, "toy model criteria", || Err(msg.clone().into()));
            }
            return;
        }
    };
    info(format!("toy float model trained in {:.1} s", t0.elapsed().as_secs_f64()));

    let mut seeds: Vec<R<SeedRun>> = Vec::new();
    let mut setup_secs = Vec::new();
    let seed_count = if [3, 4, 5, 6, 9].iter().any(|&id| run.wants(id)) { 5 } else { 0 };
    for s in 0..seed_count {
        let t = Instant::now();
        let r = seed_run(&toy, s, s < 3);
        setup_secs.push(t.elapsed().as_secs_f64());
        match &r {
            Ok(v) => info(format!(
                "seed {s} ({}): twin {:.2} dB; qaw c_ber {:.1} {:.2} dB in {} steps; naive float {:.1} int8 {:.1} int4 {:.1}{}",
                v.client,
                v.twin_psnr,
                v.qaw_cber,
                v.qaw_psnr,
                v.qaw_steps,
                v.naive_float,
                v.naive_int8,
                v.naive_int4,
                v.pqw.map_or(String::new(), |(c, p)| format!("; pqw corr {c:.3} {p:.2} dB"))
            )),
            Err(e) => info(format!("seed {s} failed: {e}")),
        }
        seeds.push(r);
    }
    let ok_runs: Vec<&SeedRun> = seeds.iter().filter_map(|r| r.as_ref().ok()).collect();
    let all_ok = ok_runs.len() == seeds.len();

    run.check(3, "quantization contract", || {
        let (g_ok, g) = c3_grid();
        let first = ok_runs.first().ok_or("no trained model")?;
        let (p_ok, p) = c3_parity(&first.marked)?;
        Ok((g_ok && p_ok, format!("{g}; {p}")))
    });

    run.check(4, "qaw headline", || {
        let r = seeds[0].as_ref().map_err(|e| e.to_string())?;
        let gap = (r.twin_psnr - r.qaw_psnr).abs();
        Ok((
            r.qaw_cber == 100.0 && gap <= 0.5,
            format!(
                "c_ber {:.1}, qaw {:.2} dB vs twin {:.2} dB (gap {gap:.3}); {:.0} s incl. training",
                r.qaw_cber,
                r.qaw_psnr,
                r.twin_psnr,
                setup_secs[0] + t0.elapsed().as_secs_f64() - setup_secs.iter().sum::<f64>()
            ),
        ))
    });

    run.check(5, "float embed then ptq", || {
        let per: Vec<String> = ok_runs
            .iter()
            .map(|r| format!("{:.1}<{:.1}", r.naive_int8, r.qaw_cber))
            .collect();
        let strictly = ok_runs.iter().all(|r| r.naive_int8 < r.qaw_cber);
        let int4: Vec<String> = ok_runs.iter().map(|r| format!("{:.1}", r.naive_int4)).collect();
        Ok((
            all_ok && strictly,
            format!("int8 naive<qaw per seed [{}]; int4 naive [{}]", per.join(", "), int4.join(", ")),
        ))
    });

    run.check(6, "qaw vs pqw penalty", || {
        let paired: Vec<(f64, f64, f64, bool)> = ok_runs
            .iter()
            .filter_map(|r| {
                r.pqw.map(|(corr, p)| {
                    (r.twin_psnr - r.qaw_psnr, r.twin_psnr - p, corr, r.qaw_cber == 100.0 && corr >= PQW_THRESHOLD)
                })
            })
            .collect();
        let pass = paired.len() >= 3 && paired.iter().all(|&(q, p, _, det)| det && q <= p);
        let text: Vec<String> = paired
            .iter()
            .map(|(q, p, c, _)| format!("qaw {q:.3} / pqw {p:.3} dB (corr {c:.2})"))
            .collect();
        Ok((pass, text.join("; ")))
    });

    run.check(7, "pruning direction", || c7_pruning(&toy));

    run.check(9, "drm", || {
        let (t_ok, t) = c9_tamper()?;
        let r = seeds[0].as_ref().map_err(|e| e.to_string())?;
        let (r_ok, tr) = c9_trace(&toy, r)?;
        match attack_sim(&toy, r) {
            Ok(s) => info(s),
            Err(e) => info(format!("attack simulation failed: {e}")),
        }
        Ok((t_ok && r_ok, format!("{t}; {tr}")))
    });

    run.check(10, "rd ordering over lambda", || c10_lambda(&toy));
}

fn finish(mut run: Run, t_all: Instant) {
    run.results.sort_by_key(|o| o.id);
    println!("\nsummary ({:.0} s)", t_all.elapsed().as_secs_f64());
    for o in &run.results {
        println!("{}", line(o));
    }
    let failed = run.results.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", run.results.len() - failed);
    if failed > 0 && std::env::var("LIC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
