//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any gated
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use diffaudio::attention::{diff_weights_tensor, DiffAttnConfig, DiffAttnParams};
use diffaudio::autograd::LAYER_NORM_EPS;
use diffaudio::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use diffaudio::data::{features_of, synthetic_examples};
use diffaudio::diagnostics::{gradient_suite, SuiteOptions, GRADCHECK_TOLERANCE};
use diffaudio::encoder::ClsPosition;
use diffaudio::frontend::{compute_fbank, FbankConfig, Waveform};
use diffaudio::masking::{block_mask, make_clones};
use diffaudio::metrics::mean_average_precision;
use diffaudio::model::init_model;
use diffaudio::objective::TeacherState;
use diffaudio::train::{evaluate, Example, Finetuner, Pretrainer, Task};
use diffaudio::{ParamStore, RunConfig, Tensor};

type Verdict = Result<(bool, String), String>;

struct Row {
    id: usize,
    title: &'static str,
    gated: bool,
    passed: bool,
    detail: String,
    secs: f64,
}

fn run(id: usize, title: &'static str, gated: bool, limit_secs: f64, f: impl FnOnce() -> Verdict) -> Row {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let secs = t0.elapsed().as_secs_f64();
    let (mut passed, mut detail) = match res {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".into()),
    };
    if secs > limit_secs {
        passed = false;
        detail.push_str(&format!("; over the {limit_secs} s budget"));
    }
    let tag = match (passed, gated) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "SOFT-FAIL",
    };
    let note = if gated { "" } else { " [reported, not gated]" };
    println!("[{tag}] {id:>2} {title}{note}: {detail} ({secs:.1} s)");
    Row {
        id,
        title,
        gated,
        passed,
        detail,
        secs,
    }
}

fn e2s(e: diffaudio::Error) -> String {
    e.to_string()
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::randn(&[rows, cols], scale, rng)
}

// ---------------------------------------------------------------- 1

fn attention_row_sums() -> Verdict {
    let mut worst_unit: f64 = 0.0;
    let mut worst_diff: f64 = 0.0;
    for &lambda in &[0.0, 0.1, 0.3, 0.5] {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=24);
            let m = rng.gen_range(1..=24);
            let d = rng.gen_range(1..=16);
            let scale = rng.gen_range(0.1..4.0);
            let q1 = randn(n, d, &mut rng, scale);
            let k1 = randn(m, d, &mut rng, scale);
            let q2 = randn(n, d, &mut rng, scale);
            let k2 = randn(m, d, &mut rng, scale);
            let tr = diff_weights_tensor(&q1, &k1, &q2, &k2, lambda, d).map_err(e2s)?;
            for i in 0..n {
                let s1: f64 = tr.a1.row(i).iter().sum();
                let s2: f64 = tr.a2.row(i).iter().sum();
                let s: f64 = tr.a.row(i).iter().sum();
                worst_unit = worst_unit.max((s1 - 1.0).abs()).max((s2 - 1.0).abs());
                worst_diff = worst_diff.max((s - (1.0 - lambda)).abs());
            }
        }
    }
    Ok((
        worst_unit <= 1e-10 && worst_diff <= 1e-9,
        format!("max |rowsum(A1,A2) - 1| = {worst_unit:.2e} (<= 1e-10), max |rowsum(A) - (1 - lambda)| = {worst_diff:.2e} (<= 1e-9)"),
    ))
}

// ---------------------------------------------------------------- 2

fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

fn cols(x: &[f64], rows: usize, width: usize, start: usize, len: usize) -> Vec<f64> {
    (0..rows)
        .flat_map(|r| x[r * width + start..r * width + start + len].iter().copied())
        .collect()
}

/// Plain multi-head attention over `(Q1, K1, V)` with per-head
/// non-affine layer norm and output projection.
fn reference_mha(p: &DiffAttnParams, z: &Tensor) -> Vec<f64> {
    let (l, d) = (z.shape()[0], p.cfg.d_model);
    let h = p.cfg.heads;
    let dh = d / h;
    let q = mm(z.data(), p.w_q.data(), l, d, 2 * d);
    let k = mm(z.data(), p.w_k.data(), l, d, 2 * d);
    let v = mm(z.data(), p.w_v.data(), l, d, d);
    let mut cat = vec![0.0; l * d];
    for head in 0..h {
        let q1 = cols(&q, l, 2 * d, head * 2 * dh, dh);
        let k1 = cols(&k, l, 2 * d, head * 2 * dh, dh);
        let vh = cols(&v, l, d, head * dh, dh);
        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|t| q1[i * dh + t] * k1[j * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let row: Vec<f64> = (0..dh)
                .map(|t| (0..l).map(|j| e[j] / z * vh[j * dh + t]).sum())
                .collect();
            let mean = row.iter().sum::<f64>() / dh as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dh as f64;
            for t in 0..dh {
                cat[i * d + head * dh + t] = (row[t] - mean) / (var + LAYER_NORM_EPS).sqrt();
            }
        }
    }
    mm(&cat, p.w_o.data(), l, d, d)
}

fn lambda_zero_reduction() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let dh = rng.gen_range(2..=8);
        let l = rng.gen_range(1..=12);
        let cfg = DiffAttnConfig::new(heads * dh, heads, 0.0);
        let p = DiffAttnParams::random(cfg, &mut rng).map_err(e2s)?;
        let z = randn(l, heads * dh, &mut rng, 1.0);
        let got = p.forward(&z).map_err(e2s)?;
        let want = reference_mha(&p, &z);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max |diff - reference| = {worst:.2e} over 20 configs (<= 1e-12)")))
}

// ---------------------------------------------------------------- 3

fn gradient_fidelity() -> Verdict {
    let cfg = RunConfig::desk();
    let outcomes = gradient_suite(&cfg, &SuiteOptions::default()).map_err(e2s)?;
    let worst = outcomes.iter().map(|o| o.max_relative_error).fold(0.0, f64::max);
    let coords: usize = outcomes.iter().map(|o| o.coords_checked).sum();
    let by_name: Vec<String> = outcomes
        .iter()
        .filter(|o| {
            ["diff_attention_block", "encoder_layer", "decoder", "total_loss"].contains(&o.name.as_str())
        })
        .map(|o| format!("{} {:.1e}", o.name, o.max_relative_error))
        .collect();
    Ok((
        outcomes.iter().all(|o| o.passed()),
        format!(
            "{}; worst {worst:.2e} over {coords} coords (< {GRADCHECK_TOLERANCE:e})",
            by_name.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn ema_exactness() -> Verdict {
    let cfg = RunConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = init_model(&cfg, &mut rng).map_err(e2s)?;
    let perturb = |p: &ParamStore, rng: &mut ChaCha8Rng| -> ParamStore {
        let mut q = p.clone();
        for (_, t) in q.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        q
    };

    let tau = 0.999;
    let mut teacher = TeacherState::from_student(&init, tau).map_err(e2s)?;
    let mut student = init.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        student = perturb(&student, &mut rng);
        let prev = teacher.params.clone();
        teacher.ema_update(&student).map_err(e2s)?;
        for (name, t) in teacher.params.iter() {
            let (p, s) = (prev.require(name).map_err(e2s)?, student.require(name).map_err(e2s)?);
            for ((a, b), c) in t.data().iter().zip(p.data()).zip(s.data()) {
                worst = worst.max((a - (tau * b + (1.0 - tau) * c)).abs());
            }
        }
    }

    let moved = perturb(&init, &mut rng);
    let mut copy = TeacherState::from_student(&init, 0.0).map_err(e2s)?;
    copy.ema_update(&moved).map_err(e2s)?;
    let copies = copy.params == moved.filter(|n| copy.params.contains(n));
    let mut frozen = TeacherState::from_student(&init, 1.0).map_err(e2s)?;
    let before = frozen.params.clone();
    frozen.ema_update(&moved).map_err(e2s)?;
    let freezes = frozen.params == before;
    Ok((
        worst <= 1e-12 && copies && freezes,
        format!("50-step max error {worst:.2e} (<= 1e-12); tau=0 copies: {copies}; tau=1 freezes: {freezes}"),
    ))
}

// ---------------------------------------------------------------- 5

fn masking_contract() -> Verdict {
    let (n, ratio, block) = (500, 0.8, 5);
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    let mut cls_masked = 0;
    let mut distinct = 0;
    for seed in 0..1000u64 {
        let plan = block_mask(n, ratio, block, seed).map_err(e2s)?;
        let f = plan.masked_fraction();
        lo = lo.min(f);
        hi = hi.max(f);
        for pos in [ClsPosition::Head, ClsPosition::Middle] {
            let idx = pos.index(n);
            let keep = plan.sequence_keep(idx).map_err(e2s)?;
            if keep.len() != n + 1 || !keep[idx] {
                cls_masked += 1;
            }
        }
        let clones = make_clones(n, ratio, block, 16, seed).map_err(e2s)?;
        let all_distinct = (0..16).all(|a| (a + 1..16).all(|b| clones[a].keep != clones[b].keep));
        distinct += all_distinct as usize;
    }
    Ok((
        lo >= 0.8 && hi <= 0.81 && cls_masked == 0 && distinct >= 999,
        format!(
            "masked fraction in [{lo:.4}, {hi:.4}] (want [0.8, 0.81]); CLS masked {cls_masked} times; 16 clones distinct in {distinct}/1000"
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn toy_pretraining(pretrained: &mut Option<ParamStore>) -> Verdict {
    let cfg = RunConfig::desk();
    let data = features_of(synthetic_examples(&cfg, cfg.seed).map_err(e2s)?);
    let train = || -> Result<(Vec<f64>, ParamStore), String> {
        let mut p = Pretrainer::new(cfg.clone(), 100).map_err(e2s)?;
        let mut losses = Vec::new();
        p.run(&data, |r| losses.push(r.loss_total)).map_err(e2s)?;
        Ok((losses, p.student))
    };
    let (losses, student) = train()?;
    let (again, student2) = train()?;
    let deterministic = losses == again && student == student2;
    let (first, last) = (mean(&losses[..10]), mean(&losses[90..]));
    let ratio = last / first;
    *pretrained = Some(student);
    Ok((
        losses.len() == 100 && ratio <= 0.5 && deterministic,
        format!(
            "{} clips, 100 steps: first-10 mean {first:.3}, last-10 mean {last:.3}, ratio {ratio:.3} (<= 0.5); repeat run identical: {deterministic}",
            data.len()
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn toy_finetune(pretrained: Option<&ParamStore>) -> Verdict {
    let cfg = RunConfig::desk();
    let student = match pretrained {
        Some(p) => p.clone(),
        None => return Err("no pretrained model (criterion 6 did not finish)".into()),
    };
    let data = synthetic_examples(&cfg, cfg.seed + 1).map_err(e2s)?;
    let (train, test) = data.split_at(160);
    let mut ft = Finetuner::new(cfg.clone(), &student, 4, Task::SingleLabel, 200).map_err(e2s)?;
    let mut first = None;
    ft.run(train, |_, loss| {
        first.get_or_insert(loss);
    })
    .map_err(e2s)?;
    let ce0 = first.ok_or("no steps ran")?;
    let acc = evaluate(&ft.params, test, &cfg, Task::SingleLabel)
        .map_err(e2s)?
        .accuracy
        .expect("single-label accuracy");
    let ce_err = (ce0 - 4f64.ln()).abs();
    Ok((
        acc >= 0.9 && ce_err <= 1e-3,
        format!(
            "test accuracy {acc:.3} on {} clips (>= 0.9); initial CE {ce0:.6} vs ln 4 = {:.6} (|diff| {ce_err:.1e} <= 1e-3)",
            test.len(),
            4f64.ln()
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn ablation_direction() -> Verdict {
    let run_one = |seed: u64, lambda: f64| -> Result<f64, String> {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        cfg.encoder.lambda = lambda;
        cfg.synthetic.classes = 6;
        cfg.synthetic.clips = 144;
        cfg.synthetic.clip_secs = 0.5;
        cfg.synthetic.noise = 0.3;
        let data: Vec<Example> = synthetic_examples(&cfg, 500 + seed).map_err(e2s)?;
        let (train, test) = data.split_at(96);
        let init = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(e2s)?;
        let mut ft = Finetuner::new(cfg.clone(), &init, 6, Task::SingleLabel, 60).map_err(e2s)?;
        ft.run(train, |_, _| {}).map_err(e2s)?;
        Ok(evaluate(&ft.params, test, &cfg, Task::SingleLabel).map_err(e2s)?.accuracy.expect("accuracy"))
    };
    let jobs: Vec<(u64, f64)> = (0..5u64).flat_map(|s| [(s, 0.3), (s, 0.0)]).collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(s, l)| run_one(s, l))
        .collect::<Result<_, _>>()?;
    let with: Vec<f64> = accs.iter().step_by(2).copied().collect();
    let without: Vec<f64> = accs.iter().skip(1).step_by(2).copied().collect();
    let (mw, mo) = (mean(&with), mean(&without));
    let per_seed: Vec<String> = (0..5)
        .map(|s| format!("seed {s}: {:.3}/{:.3}", with[s], without[s]))
        .collect();
    Ok((
        mw >= mo,
        format!("mean accuracy lambda=0.3 {mw:.3} vs lambda=0 {mo:.3} ({})", per_seed.join(", ")),
    ))
}

// ---------------------------------------------------------------- 9

/// Sort by descending score (ties by index) and accumulate precision at
/// each positive.
fn oracle_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let (mut hits, mut acc) = (0usize, 0.0);
    for (r, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

fn map_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut agree, mut compared) = (0, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=3);
        let scores: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0..2) as f64).collect();
        let aps: Vec<f64> = (0..c)
            .filter_map(|k| {
                let s: Vec<f64> = (0..n).map(|i| scores[i * c + k]).collect();
                let l: Vec<bool> = (0..n).map(|i| labels[i * c + k] == 1.0).collect();
                oracle_ap(&s, &l)
            })
            .collect();
        let want = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        let got = mean_average_precision(
            &Tensor::new(vec![n, c], scores).map_err(e2s)?,
            &Tensor::new(vec![n, c], labels).map_err(e2s)?,
        );
        let ok = match (got, want) {
            (Ok(r), Some(w)) => {
                compared += 1;
                r.map == w
            }
            (Err(_), None) => true,
            _ => false,
        };
        agree += ok as usize;
    }
    Ok((
        agree == 1000,
        format!("{agree}/1000 instances agree exactly ({compared} with a defined mAP)"),
    ))
}

// ---------------------------------------------------------------- 10

fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
    let n = (secs * 16000.0) as usize;
    let s = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
        .collect();
    Waveform::new(s, 16000).expect("valid waveform")
}

fn frontend_checks() -> Verdict {
    let cfg = FbankConfig::default();
    let ten = compute_fbank(&tone(440.0, 10.0, 0.3), &cfg).map_err(e2s)?;
    let shape_ok = ten.frames.shape() == [998, 128];

    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let step = (mel(8000.0) - mel(0.0)) / 129.0;
    let expected = (0..128)
        .min_by(|&a, &b| {
            let da = (mel(0.0) + step * (a + 1) as f64 - mel(1000.0)).abs();
            let db = (mel(0.0) + step * (b + 1) as f64 - mel(1000.0)).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let spec = compute_fbank(&tone(1000.0, 1.0, 0.5), &cfg).map_err(e2s)?;
    let (frames, mels) = (spec.num_frames(), spec.num_mels());
    let avg: Vec<f64> = (0..mels)
        .map(|k| (0..frames).map(|t| spec.frames.at(t, k)).sum::<f64>() / frames as f64)
        .collect();
    let peak = (0..mels).max_by(|&a, &b| avg[a].partial_cmp(&avg[b]).unwrap()).unwrap();

    let quiet = compute_fbank(&tone(1000.0, 1.0, 0.25), &cfg).map_err(e2s)?;
    let floor = cfg.log_floor.ln();
    let mut worst: f64 = 0.0;
    let mut counted = 0;
    for (x, y) in quiet.frames.data().iter().zip(spec.frames.data()) {
        if *x > floor + 1e-6 {
            worst = worst.max((y - x - 4f64.ln()).abs());
            counted += 1;
        }
    }
    Ok((
        shape_ok && peak == expected && worst <= 1e-9 && counted > 0,
        format!(
            "10 s clip -> {:?}; 1 kHz peak bin {peak} (analytic {expected}); doubling shift error {worst:.1e} over {counted} entries (<= 1e-9)",
            ten.frames.shape()
        ),
    ))
}

// ---------------------------------------------------------------- 11

fn checkpoint_and_cli() -> Verdict {
    let cfg = RunConfig::desk();
    let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).map_err(e2s)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck = Checkpoint {
        params: params.clone(),
        config: cfg.clone(),
        step: 17,
    };
    save_checkpoint(dir.path(), &ck).map_err(e2s)?;
    let back = load_checkpoint(dir.path()).map_err(e2s)?;
    let mut worst_excess: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for (name, t) in params.iter() {
        let u = back.params.require(name).map_err(e2s)?;
        if u.shape() != t.shape() {
            return Ok((false, format!("`{name}` changed shape")));
        }
        for (a, b) in t.data().iter().zip(u.data()) {
            // round-to-nearest f32: relative error at most 2^-24
            let bound = (a.abs() * 2f64.powi(-24)).max(f64::from(f32::from_bits(1)));
            worst_excess = worst_excess.max((a - b).abs() - bound);
            worst_abs = worst_abs.max((a - b).abs());
        }
    }
    let same_meta = back.config == cfg && back.step == 17 && back.params.len() == params.len();
    let out = Command::new(env!("CARGO_BIN_EXE_diffaudio"))
        .args(["--preset", "desk", "gradcheck"])
        .output()
        .map_err(|e| e.to_string())?;
    let cli_ok = out.status.success();
    Ok((
        worst_excess <= 0.0 && same_meta && cli_ok,
        format!(
            "{} tensors, max abs diff {worst_abs:.1e} within f32 rounding: {}; config/step preserved: {same_meta}; `gradcheck --preset desk` exit {:?}",
            params.len(),
            worst_excess <= 0.0,
            out.status.code()
        ),
    ))
}

fn main() {
    let mut pretrained = None;
    let rows = vec![
        run(1, "differential attention row sums", true, 5.0, attention_row_sums),
        run(2, "lambda=0 reduces to standard attention", true, 5.0, lambda_zero_reduction),
        run(3, "gradient fidelity", true, 120.0, gradient_fidelity),
        run(4, "EMA exactness", true, 60.0, ema_exactness),
        run(5, "masking contract", true, 60.0, masking_contract),
        run(6, "toy pretraining learns", true, 300.0, || toy_pretraining(&mut pretrained)),
        run(7, "toy fine-tune separates classes", true, 300.0, || toy_finetune(pretrained.as_ref())),
        run(8, "ablation direction lambda=0.3 vs 0", false, 300.0, ablation_direction),
        run(9, "mAP oracle equivalence", true, 60.0, map_oracle),
        run(10, "frontend", true, 60.0, frontend_checks),
        run(11, "checkpoint round trip and gradcheck CLI", true, 120.0, checkpoint_and_cli),
    ];
    let gated_fail: Vec<&Row> = rows.iter().filter(|r| r.gated && !r.passed).collect();
    let total: f64 = rows.iter().map(|r| r.secs).sum();
    println!(
        "acceptance: {}/{} passed ({} gated failures) in {total:.1} s",
        rows.iter().filter(|r| r.passed).count(),
        rows.len(),
        gated_fail.len()
    );
    if !gated_fail.is_empty() {
        for r in gated_fail {
            eprintln!("failed: {} {} ({})", r.id, r.title, r.detail);
        }
        std::process::exit(1);
    }
}
