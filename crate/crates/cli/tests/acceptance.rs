//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! Set `AIRT_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.
//!
//! Criteria can be selected by number on the command line or through
//! `AIRT_ACCEPTANCE=1,3,5`; by default all ten run. Trained models are shared
//! between criteria 5, 7, 8 and 9.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use airt_core::autodiff::layers::{linear, multi_head_attention, MhaVars};
use airt_core::autodiff::{grad_check, Tape, Tensor, Var, DEFAULT_GRAD_CHECK_STEP};
use airt_core::baselines::{pca, pca_rows, ppt_with, tsr, Transform};
use airt_core::caae::{batch_gradients, encode_sequence, train, CaaeConfig, ModelState, TrainOutput};
use airt_core::metrics::{
    best_of_stack, contrast, denoise_then_pca_eval, iou, snr, IdentityReconstructor, MetricsReport, PcCurveRow,
    RegionMask, SNR_DB_SENTINEL,
};
use airt_core::synth::{generate, PanelSpec, DEFAULT_DT, DEFAULT_N_T};
use airt_core::{reshape_raster, ImageStack, PixelMatrix, ThermogramSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// One trained model on a synthetic panel plus the scores of its latents and
/// of the two references.
struct PanelRun {
    seq: ThermogramSequence,
    mask: RegionMask,
    trained: TrainOutput,
    caae: MetricsReport,
    pca: MetricsReport,
    raw: MetricsReport,
    seconds: f64,
}

impl PanelRun {
    fn model(&self) -> &ModelState {
        &self.trained.model
    }
}

fn agg_contrast(r: &MetricsReport) -> f64 {
    r.aggregate().map_or(f64::NAN, |a| a.contrast)
}

fn agg_snr_db(r: &MetricsReport) -> f64 {
    r.aggregate().map_or(f64::NAN, |a| a.snr_db)
}

fn frames_stack(seq: &ThermogramSequence) -> ImageStack {
    let images = (0..seq.n_t()).map(|k| seq.frame(k).to_vec()).collect();
    ImageStack::new(seq.n_y(), seq.n_x(), "raw", images).unwrap()
}

fn panel_run(spec: &PanelSpec, cfg: &CaaeConfig) -> PanelRun {
    let start = Instant::now();
    let (seq, mask) = generate(spec, DEFAULT_N_T, DEFAULT_DT).unwrap();
    let pm = reshape_raster(&seq).center().unwrap();
    let trained = train(&pm, cfg).unwrap();
    let latents = encode_sequence(&seq, &trained.model).unwrap();
    let caae = best_of_stack(&latents, &mask).unwrap();
    let pcs = pca(&pm, cfg.latent_dim).unwrap();
    let pca_stack = ImageStack::new(seq.n_y(), seq.n_x(), "pca", pcs.score_images()).unwrap();
    let pca = best_of_stack(&pca_stack, &mask).unwrap();
    let raw = best_of_stack(&frames_stack(&seq), &mask).unwrap();
    PanelRun {
        seq,
        mask,
        trained,
        caae,
        pca,
        raw,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn masked_config(seed: u64) -> CaaeConfig {
    let mut cfg = CaaeConfig::new(DEFAULT_N_T);
    cfg.seed = seed;
    cfg
}

/// No patches, no noise, every pixel.
fn unmasked_config(seed: u64) -> CaaeConfig {
    let mut cfg = masked_config(seed);
    cfg.mask_ratio = 0.0;
    cfg.noise_sigma_rel = 0.0;
    cfg.subset_size = None;
    cfg
}

#[derive(Default)]
struct Ctx {
    masked: BTreeMap<u64, PanelRun>,
    unmasked: BTreeMap<u64, PanelRun>,
}

impl Ctx {
    fn masked(&mut self, seed: u64) -> &PanelRun {
        self.masked.entry(seed).or_insert_with(|| {
            eprintln!("  training masked model, default panel, seed {seed}");
            panel_run(&PanelSpec::default_panel(seed), &masked_config(seed))
        })
    }

    fn unmasked(&mut self, seed: u64) -> &PanelRun {
        self.unmasked.entry(seed).or_insert_with(|| {
            eprintln!("  training unmasked model on all pixels, default panel, seed {seed}");
            panel_run(&PanelSpec::default_panel(seed), &unmasked_config(seed))
        })
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random weighted sum so every output entry reaches the scalar.
fn probe(tape: &mut Tape<'_>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &tape.shape(v).to_vec());
    let c = tape.constant(w);
    let m = tape.mul(v, c).unwrap();
    tape.sum(m)
}

type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn for<'t> Fn(&mut Tape<'t>, &[Var]) -> airt_core::autodiff::Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
    // relu inputs bounded away from the kink
    let relu_in = Tensor::new(vec![2, 4], vec![0.3, -0.7, 0.9, -0.2, 0.5, -0.4, 0.15, -0.95]).unwrap();
    let (d, heads, d_k) = (4, 2, 3);
    let mut mha = vec![r(&[3, d])];
    for _ in 0..3 * heads {
        mha.push(r(&[d, d_k]));
    }
    mha.push(r(&[heads * d_k, d]));
    let mut bias = r(&[d]);
    bias.data_mut().iter_mut().for_each(|v| *v += 3.0);
    mha.push(bias);

    vec![
        ("conv1d", vec![r(&[2, 7]), r(&[3, 2, 3]), r(&[3])], Box::new(|t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            Ok(probe(t, y, 1))
        })),
        ("relu", vec![relu_in], Box::new(|t, v| {
            let y = t.relu(v[0]);
            Ok(probe(t, y, 2))
        })),
        ("sigmoid", vec![r(&[5])], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            Ok(probe(t, y, 3))
        })),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            Ok(probe(t, y, 4))
        })),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(probe(t, y, 5))
        })),
        ("scale", vec![r(&[4])], Box::new(|t, v| {
            let y = t.scale(v[0], -1.3);
            Ok(probe(t, y, 6))
        })),
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(probe(t, y, 7))
        })),
        ("matmul_nt", vec![r(&[3, 4]), r(&[5, 4])], Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            Ok(probe(t, y, 8))
        })),
        ("matmul_tn", vec![r(&[4, 3]), r(&[4, 5])], Box::new(|t, v| {
            let y = t.matmul_tn(v[0], v[1])?;
            Ok(probe(t, y, 9))
        })),
        ("add_row_bias", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            Ok(probe(t, y, 10))
        })),
        ("add_col_bias", vec![r(&[3, 4]), r(&[3])], Box::new(|t, v| {
            let y = t.add_col_bias(v[0], v[1])?;
            Ok(probe(t, y, 11))
        })),
        ("transpose", vec![r(&[3, 2])], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            Ok(probe(t, y, 12))
        })),
        ("reshape", vec![r(&[3, 2])], Box::new(|t, v| {
            let y = t.reshape(v[0], vec![2, 3])?;
            Ok(probe(t, y, 13))
        })),
        ("concat_cols", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            Ok(probe(t, y, 14))
        })),
        ("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], Box::new(|t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            Ok(probe(t, y, 15))
        })),
        ("softmax rows", vec![r(&[3, 4])], Box::new(|t, v| {
            let y = t.softmax(v[0], 1)?;
            Ok(probe(t, y, 16))
        })),
        ("softmax cols", vec![r(&[3, 4])], Box::new(|t, v| {
            let y = t.softmax(v[0], 0)?;
            Ok(probe(t, y, 17))
        })),
        ("linear", vec![r(&[3, 4]), r(&[4, 2]), r(&[2])], Box::new(|t, v| {
            let y = linear(t, v[0], v[1], v[2])?;
            Ok(probe(t, y, 18))
        })),
        ("mse", vec![r(&[6]), r(&[6])], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("cosine_distance", vec![r(&[5]), r(&[5])], Box::new(|t, v| t.cosine_distance(v[0], v[1]))),
        ("sum", vec![r(&[4])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("sum_squares", vec![r(&[4])], Box::new(|t, v| Ok(t.sum_squares(v[0])))),
        ("multi_head_attention", mha, Box::new(move |t, v| {
            let p = MhaVars {
                w_q: v[1..1 + heads].to_vec(),
                w_k: v[1 + heads..1 + 2 * heads].to_vec(),
                w_v: v[1 + 2 * heads..1 + 3 * heads].to_vec(),
                w_o: v[1 + 3 * heads],
                b_o: v[2 + 3 * heads],
            };
            let out = multi_head_attention(t, v[0], &p)?;
            Ok(probe(t, out.output, 19))
        })),
    ]
}

/// Central differences of the batch loss of the 4-pixel toy network.
fn full_loss_error() -> f64 {
    let mut cfg = CaaeConfig::new(16).with_width(4, 2);
    cfg.latent_dim = 4;
    cfg.mlp_hidden = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = ModelState::init(cfg, 1.0, &mut rng).unwrap();
    for p in model.params.iter_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let clean: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let corrupted: Vec<f64> = clean.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
    let teacher: Vec<f64> = (0..4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (grads, _) = batch_gradients(&model, &corrupted, &clean, &teacher).unwrap();
    let h = DEFAULT_GRAD_CHECK_STEP;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        for j in 0..model.params[i].len() {
            let x = model.params[i].data()[j];
            model.params[i].data_mut()[j] = x + h;
            let up = batch_gradients(&model, &corrupted, &clean, &teacher).unwrap().1.total;
            model.params[i].data_mut()[j] = x - h;
            let down = batch_gradients(&model, &corrupted, &clean, &teacher).unwrap().1.total;
            model.params[i].data_mut()[j] = x;
            let fd = (up - down) / (2.0 * h);
            let rel = (grads[i][j] - fd).abs() / (grads[i][j].abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

fn criterion_1(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, params, f) in op_cases() {
        let err = grad_check(|t, v| f(t, v), &params, DEFAULT_GRAD_CHECK_STEP).unwrap();
        if err >= worst_op.1 {
            worst_op = (name, err);
        }
    }
    let full = full_loss_error();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.1 < 1e-6 && full < 1e-4 && secs < 30.0,
        format!(
            "worst op {} rel err {:.2e} (< 1e-6), full loss rel err {full:.2e} (< 1e-4), {secs:.1}s (< 30s)",
            worst_op.0, worst_op.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. PCA against an eigendecomposition oracle

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        for (i, row) in a.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    off += v * v;
                }
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn criterion_2(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let n = 10;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|r| x[r * n + i] * x[r * n + j]).sum()).collect())
            .collect();
        let ev = jacobi_eigenvalues(gram);
        for k in 1..=n {
            let res = pca_rows(&x, n, n, k).unwrap();
            let err: f64 = res.reconstruct().iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            let optimal: f64 = ev[k..].iter().sum();
            worst = worst.max((err - optimal).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-8 && secs < 10.0,
        format!("100 matrices 10x10, all k: max |error - oracle| {worst:.2e} (< 1e-8), {secs:.2}s (< 10s)"),
    )
}

// ---------------------------------------------------------------------------
// 3. TSR and PPT on analytic signals

fn criterion_3(_: &mut Ctx) -> Outcome {
    let dt = 0.04;
    let series: Vec<f64> = (1..=128).map(|k| (k as f64 * dt).powf(-0.5)).collect();
    let pm = PixelMatrix::from_rows(1, 1, 128, dt, series).unwrap();
    let fit = tsr(&pm, 5).unwrap();
    let slope_err = (fit.coefficients[1][0] + 0.5).abs();
    let other = (0..=5)
        .filter(|&j| j != 1)
        .map(|j| fit.coefficients[j][0].abs())
        .fold(0.0, f64::max);

    let n_t = 16;
    let wave = |f: fn(f64) -> f64| -> PixelMatrix {
        let s = (0..n_t).map(|k| f(2.0 * std::f64::consts::PI * 3.0 * k as f64 / n_t as f64)).collect();
        PixelMatrix::from_rows(1, 1, n_t, 0.1, s).unwrap()
    };
    let mut phase_err = 0.0f64;
    for t in [Transform::Fft, Transform::Direct] {
        let c = ppt_with(&wave(f64::cos), t).unwrap().phase[3][0];
        let s = ppt_with(&wave(f64::sin), t).unwrap().phase[3][0];
        phase_err = phase_err.max(c.abs()).max((s + std::f64::consts::FRAC_PI_2).abs());
    }
    outcome(
        slope_err < 1e-6 && other < 1e-6 && phase_err < 1e-9,
        format!("TSR slope err {slope_err:.1e}, max other coef {other:.1e} (< 1e-6); PPT max phase err {phase_err:.1e} (< 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// 4. metric formulas

fn mask_of(defect: &[bool]) -> RegionMask {
    RegionMask::binary(1, defect.len(), defect).unwrap()
}

fn criterion_4(_: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let m = mask_of(&[true, false, false]);
    check(contrast(&[3.0, 1.0, 1.0], &m, None).unwrap() == 0.5, "contrast 3 vs 1");
    check(contrast(&[2.0, 2.0, 2.0], &m, None).unwrap() == 0.0, "contrast identical");
    check(contrast(&[4.0, 0.0, 0.0], &m, None).unwrap() == 1.0, "contrast zero sound");
    let s = snr(&[5.0, -1.0, 3.0], &m, None).unwrap();
    check(s.linear == 2.0 && s.db == 20.0 * 2f64.log10(), "snr 5/1/2");
    check(snr(&[1.0, -1.0, 3.0], &m, None).unwrap().db == SNR_DB_SENTINEL, "snr equal means");
    check(snr(&[10.0, -2.0, 6.0], &m, None).unwrap().linear == 2.0, "snr doubled");
    let full = RegionMask::binary(2, 2, &[true; 4]).unwrap();
    let left = RegionMask::binary(2, 2, &[true, false, true, false]).unwrap();
    let right = RegionMask::binary(2, 2, &[false, true, false, true]).unwrap();
    check(iou(&left, &left).unwrap() == 1.0, "iou identical");
    check(iou(&left, &right).unwrap() == 0.0, "iou disjoint");
    check(iou(&left, &full).unwrap() == 0.5, "iou half");

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut snr_dev, mut con_dev) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(6..40);
        let mut defect: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        defect[0] = true;
        defect[1] = false;
        let mask = mask_of(&defect);
        let img: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let (a, b, c) = (rng.gen_range(0.1..10.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.1..10.0));
        let affine: Vec<f64> = img.iter().map(|v| a * v + b).collect();
        let scaled: Vec<f64> = img.iter().map(|v| c * v).collect();
        let (s0, s1) = (snr(&img, &mask, None), snr(&affine, &mask, None));
        if let (Ok(s0), Ok(s1)) = (s0, s1) {
            snr_dev = snr_dev.max((s0.linear - s1.linear).abs() / s0.linear.max(1e-12));
        }
        let (c0, c1) = (contrast(&img, &mask, None).unwrap(), contrast(&scaled, &mask, None).unwrap());
        con_dev = con_dev.max((c0 - c1).abs());
    }
    check(snr_dev < 1e-9, "snr affine invariance");
    check(con_dev < 1e-12, "contrast scale invariance");
    outcome(
        failures.is_empty(),
        format!(
            "unit examples exact; 1000 random images: max snr rel dev {snr_dev:.1e}, max contrast dev {con_dev:.1e}{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. latent contrast against raw frames and PCA

fn enhancement_ok(r: &PanelRun) -> (bool, String) {
    let (c, p, raw) = (agg_contrast(&r.caae), agg_contrast(&r.pca), agg_contrast(&r.raw));
    (
        c >= 1.2 * raw && c >= p,
        format!("caae {c:.3} / raw {raw:.3} = {:.2}x, pca {p:.3}", c / raw),
    )
}

fn criterion_5(ctx: &mut Ctx) -> Outcome {
    let mut lines = Vec::new();
    let mut passes = 0;
    let mut seconds = 0.0;
    for seed in SEEDS {
        let run = ctx.masked(seed);
        let (ok, text) = enhancement_ok(run);
        passes += usize::from(ok);
        seconds += run.seconds;
        lines.push(format!("seed {seed}: {text}"));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        passes == SEEDS.len() && seconds < 600.0,
        format!(
            "{passes}/3 seeds with caae >= 1.2x raw and >= pca [{}]; {seconds:.0}s on {cores} core(s) (< 600s)",
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. subset training speedup on a 180x180 panel

fn criterion_6(_: &mut Ctx) -> Outcome {
    let spec = PanelSpec::large_panel(1);
    eprintln!("  large panel: one epoch on all pixels");
    let (seq, _) = generate(&spec, DEFAULT_N_T, DEFAULT_DT).unwrap();
    let pm = reshape_raster(&seq).center().unwrap();
    let mut full_cfg = unmasked_config(1);
    full_cfg.mask_ratio = 0.5;
    full_cfg.noise_sigma_rel = 0.05;
    full_cfg.epochs = 1;
    let full = train(&pm, &full_cfg).unwrap();
    let full_epoch = full.history.epochs[0].wall_seconds;
    drop((seq, pm));

    eprintln!("  large panel: subset training");
    let run = panel_run(&spec, &masked_config(1));
    let epochs = &run.trained.history.epochs;
    let subset_epoch = epochs.iter().map(|e| e.wall_seconds).sum::<f64>() / epochs.len() as f64;
    let ratio = full_epoch / subset_epoch;
    let (ok, text) = enhancement_ok(&run);
    outcome(
        ratio >= 10.0 && ok,
        format!(
            "P = {}: epoch {full_epoch:.1}s full vs {subset_epoch:.2}s subset, ratio {ratio:.1} (>= 10); {text}",
            run.seq.n_pixels()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. masking ablation

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7(ctx: &mut Ctx) -> Outcome {
    let (mut cm, mut sm, mut cu, mut su) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let r = ctx.masked(seed);
        cm.push(agg_contrast(&r.caae));
        sm.push(agg_snr_db(&r.caae));
        let r = ctx.unmasked(seed);
        cu.push(agg_contrast(&r.caae));
        su.push(agg_snr_db(&r.caae));
    }
    let (cm, sm, cu, su) = (median(cm), median(sm), median(cu), median(su));
    outcome(
        cm >= cu - 0.02 && sm > su,
        format!("median contrast masked {cm:.3} vs unmasked {cu:.3} (>= -0.02); median SNR {sm:.2} dB vs {su:.2} dB (strictly higher)"),
    )
}

// ---------------------------------------------------------------------------
// 8. loss behaviour over 50 epochs

fn criterion_8(ctx: &mut Ctx) -> Outcome {
    let h = &ctx.masked(SEEDS[0]).trained.history;
    let (first, last) = (h.epochs[0].total, h.epochs.last().unwrap().total);
    let kd_ok = h.steps.iter().all(|s| (0.0..=2.0).contains(&s.kd));
    let finite = h.steps.iter().all(|s| s.total.is_finite() && s.rec.is_finite() && s.kd.is_finite());
    outcome(
        h.epochs.len() == 50 && last < 0.5 * first && kd_ok && finite,
        format!(
            "{} epochs: first {first:.2}, last {last:.2} (ratio {:.3} < 0.5); kd in [0,2] every step: {kd_ok}; all finite: {finite}",
            h.epochs.len(),
            last / first
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. denoise then PCA

fn best_contrast(rows: &[PcCurveRow]) -> f64 {
    PcCurveRow::best(rows).map_or(f64::NAN, |r| r.contrast)
}

fn criterion_9(ctx: &mut Ctx) -> Outcome {
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let r = ctx.masked(seed);
        let denoised = denoise_then_pca_eval(&r.seq, r.model(), 20, &r.mask).unwrap();
        let raw = denoise_then_pca_eval(&r.seq, &IdentityReconstructor, 20, &r.mask).unwrap();
        let (d, w) = (best_contrast(&denoised), best_contrast(&raw));
        passes += usize::from(denoised.len() == 20 && d >= w);
        lines.push(format!("seed {seed}: {d:.3} vs {w:.3}"));
    }
    outcome(
        passes == SEEDS.len(),
        format!("{passes}/3 seeds with best-of-20-PC contrast reconstructed >= raw [{}]", lines.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// 10. CLI determinism

fn airt(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_airt"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("airt {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Runs the whole pipeline in `dir` and collects every output hash it reports.
fn pipeline(dir: &Path, extra: &[&str]) -> Result<BTreeMap<String, String>, String> {
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--n-t", "32", "--out", "panel.tsq"],
        vec![
            "train", "--tsq", "panel.tsq", "--epochs", "2", "--subset", "300", "--channels", "4", "--heads", "2",
            "--latent-dim", "8", "--mlp-hidden", "16", "--out", "model.ckpt",
        ],
        vec!["encode", "--tsq", "panel.tsq", "--checkpoint", "model.ckpt", "--out", "latent.stk"],
        vec!["reconstruct", "--tsq", "panel.tsq", "--checkpoint", "model.ckpt", "--out", "rec.tsq"],
        vec!["pca", "--tsq", "panel.tsq", "--k", "8", "--out", "pca.stk"],
        vec!["tsr", "--tsq", "panel.tsq", "--out", "tsr.stk"],
        vec!["ppt", "--tsq", "panel.tsq", "--out", "ppt.stk"],
        vec!["eval", "--stack", "latent.stk", "--panel", "panel.panel.json", "--out", "report.json"],
        vec![
            "denoise-eval", "--tsq", "panel.tsq", "--checkpoint", "model.ckpt", "--panel", "panel.panel.json", "--k",
            "8", "--out", "curve.csv",
        ],
        vec!["export", "--stack", "latent.stk", "--out-dir", "pgm"],
    ];
    for step in &steps {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend(step);
        airt(dir, &args)?;
    }
    let mut hashes = BTreeMap::new();
    let mut manifests: Vec<_> = walk(dir).into_iter().filter(|p| p.ends_with(".manifest.json")).collect();
    manifests.sort();
    for path in manifests {
        let m: Value = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for o in m["outputs"].as_array().into_iter().flatten() {
            let p = o["path"].as_str().unwrap_or_default().to_string();
            // the loss CSV carries wall-clock seconds; its losses are hashed separately
            if !p.ends_with(".loss.csv") {
                hashes.insert(p, o["sha256"].as_str().unwrap_or_default().to_string());
            }
        }
        if let Some(h) = m["details"]["loss_history_sha256"].as_str() {
            hashes.insert("loss history".into(), h.to_string());
        }
    }
    Ok(hashes)
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).into_iter().flatten().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.display().to_string());
        }
    }
    out
}

fn criterion_10(_: &mut Ctx) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let run = || -> Result<(BTreeMap<String, String>, BTreeMap<String, String>), String> {
        Ok((pipeline(&a, &["--seed", "5", "--threads", "1"])?, pipeline(&b, &["--seed", "5", "--threads", "2"])?))
    };
    match run() {
        Ok((ha, hb)) => {
            let differing: Vec<&String> = ha.iter().filter(|(k, v)| hb.get(*k) != Some(v)).map(|(k, _)| k).collect();
            outcome(
                ha.len() == hb.len() && differing.is_empty() && ha.len() > 10,
                format!("{} output hashes compared across two runs (1 vs 2 threads), {} differ {:?}", ha.len(), differing.len(), differing),
            )
        }
        Err(e) => outcome(false, e),
    }
}

// ---------------------------------------------------------------------------

fn selection() -> Vec<u8> {
    let mut picked: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if let Ok(v) = std::env::var("AIRT_ACCEPTANCE") {
        picked.extend(v.split(',').filter_map(|s| s.trim().parse::<u8>().ok()));
    }
    picked.retain(|n| (1..=10).contains(n));
    if picked.is_empty() {
        (1..=10).collect()
    } else {
        picked.sort_unstable();
        picked.dedup();
        picked
    }
}

fn main() {
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("PCA oracle equivalence", criterion_2),
        ("analytic TSR/PPT recovery", criterion_3),
        ("metric formulas", criterion_4),
        ("signal enhancement", criterion_5),
        ("subset training speedup", criterion_6),
        ("masking ablation", criterion_7),
        ("loss behaviour", criterion_8),
        ("denoise then PCA", criterion_9),
        ("CLI determinism", criterion_10),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    let picked = selection();
    let total = picked.len();
    for n in picked {
        let (name, f) = criteria[n as usize - 1];
        eprintln!("criterion {n}: {name} ...");
        let start = Instant::now();
        let o = f(&mut ctx);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {n:>2} {verdict} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", total - failed);
    // a failing binary stops `cargo test` before later test targets run, so
    // the exit status only reflects failures when asked to
    if failed > 0 && std::env::var_os("AIRT_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
