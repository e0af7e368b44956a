//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use slap::data::{generate_corpus, plan_windows, CorpusConfig, Manifest, SYNTH_CORPUS_ID};
use slap::dsp::{hz_to_mel, mel_to_hz, LogMelExtractor, MelConfig, Waveform};
use slap::eval::{aggregate, chance_f1, evaluate, f1, naive_baseline, positive_rate, EvalMode, EvalOptions, EvalReport, ReportRow};
use slap::gradcheck::{self, GradCheckConfig};
use slap::model::{clap_loss, SlapModel};
use slap::prompts::{Dimension, TaskRegistry, TaskSpec};
use slap::tensor::{Tape, Tensor};
use slap::train::{run, RunConfig, RunOptions, RunSummary};

fn report_line(id: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} {verdict}: {title} ({detail})");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_fidelity() {
    let cfg = GradCheckConfig::default();
    let report = gradcheck::run(&cfg, None).unwrap();
    let worst = report
        .results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let required = [
        "matmul",
        "softmax",
        "layer_norm",
        "gelu",
        "projection_head",
        "encoder_block",
        "clap_loss",
        "clap_loss_tau",
        "mae_loss",
    ];
    let covered = required.iter().all(|op| report.results.iter().any(|r| r.op == *op));
    let enough = report.results.iter().all(|r| r.cases >= 50);
    let pass = report.all_passed() && covered && enough && report.seconds < 60.0;
    report_line(
        1,
        "gradient fidelity",
        pass,
        &format!(
            "{} ops x {} cases, worst {} at {:.2e} < 1e-4, {:.2}s < 60s",
            report.results.len(),
            cfg.cases,
            worst.op,
            worst.max_rel_error,
            report.seconds
        ),
    );
    for r in &report.results {
        assert!(r.passed, "{}: {:.3e}", r.op, r.max_rel_error);
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn clap(sim: &[Vec<f64>], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(sim).unwrap());
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    let l = clap_loss(&mut tape, s, lt).unwrap();
    tape.value(l).item()
}

/// Direct double loop over the symmetric cross-entropy.
fn clap_reference(sim: &[Vec<f64>], tau: f64) -> f64 {
    let b = sim.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| (sim[i][j] / tau).exp()).sum();
        let col: f64 = (0..b).map(|j| (sim[j][i] / tau).exp()).sum();
        total += (row.ln() - sim[i][i] / tau) + (col.ln() - sim[i][i] / tau);
    }
    total / (2.0 * b as f64)
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn criterion_2_loss_oracles() {
    let single = clap(&[vec![0.37]], 0.07);
    let identity = clap(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
    let expected = (1.0 + (-1.0f64).exp()).ln();

    let mut state = 7u64;
    let (mut worst_scale, mut worst_perm, mut worst_ref) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..50 {
        let b = 2 + case % 7;
        let sim: Vec<Vec<f64>> = (0..b).map(|_| (0..b).map(|_| 2.0 * lcg(&mut state) - 1.0).collect()).collect();
        let tau = 0.05 + lcg(&mut state);
        let base = clap(&sim, tau);
        worst_ref = worst_ref.max((base - clap_reference(&sim, tau)).abs());

        let c = 0.25 + 3.0 * lcg(&mut state);
        let scaled: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|x| c * x).collect()).collect();
        worst_scale = worst_scale.max((clap(&scaled, c * tau) - base).abs());

        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, (lcg(&mut state) * (i + 1) as f64) as usize % (i + 1));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| sim[i][j]).collect()).collect();
        worst_perm = worst_perm.max((clap(&permuted, tau) - base).abs());
    }

    let pass = single == 0.0
        && (identity - expected).abs() <= 1e-12
        && worst_scale <= 1e-12
        && worst_perm <= 1e-12
        && worst_ref <= 1e-12;
    report_line(
        2,
        "loss oracles",
        pass,
        &format!(
            "B=1 loss {}, B=2 identity err {:.1e}, scaling {worst_scale:.1e}, permutation {worst_perm:.1e}, reference {worst_ref:.1e}",
            single.abs(),
            (identity - expected).abs()
        ),
    );
    assert_eq!(single, 0.0);
    assert!((identity - expected).abs() <= 1e-12);
    assert!(worst_scale <= 1e-12 && worst_perm <= 1e-12 && worst_ref <= 1e-12);
}

// ---------------------------------------------------------------- 3

/// Mel energies of one frame from a direct DFT and triangles built here.
fn oracle_mel_frame(samples: &[f64]) -> Vec<f64> {
    let (n_fft, window, sr, n_mels) = (512usize, 400usize, 16000.0, 128usize);
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..window {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                re += samples[n] * hann[n] * ang.cos();
                im += samples[n] * hann[n] * ang.sin();
            }
            re * re + im * im
        })
        .collect();
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(8000.0);
    let pts: Vec<f64> = (0..n_mels + 2).map(|i| hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    (0..n_mels)
        .map(|m| {
            power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * sr / n_fft as f64;
                    let w = if f < pts[m] || f > pts[m + 2] {
                        0.0
                    } else if f <= pts[m + 1] {
                        (f - pts[m]) / (pts[m + 1] - pts[m])
                    } else {
                        (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1])
                    };
                    w * p
                })
                .sum()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

#[test]
fn criterion_3_dsp_oracle() {
    let sine: Vec<f64> = (0..16000)
        .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
        .collect();
    let ex = LogMelExtractor::new(MelConfig::default());
    let spec = ex.compute(&Waveform::new(sine.clone(), 16000).unwrap()).unwrap();

    let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
    let centers: Vec<f64> = (1..=128)
        .map(|i| 700.0 * (10f64.powf(top * i as f64 / 129.0 / 2595.0) - 1.0))
        .collect();
    let nearest = argmax(&centers.iter().map(|c| -(c - 1000.0).abs()).collect::<Vec<_>>());
    let oracle_bins: Vec<usize> = [0usize, 40, 97]
        .iter()
        .map(|&t| argmax(&oracle_mel_frame(&sine[t * 160..t * 160 + 400])))
        .collect();
    let frame_bins: Vec<usize> = (0..spec.num_frames).map(|t| argmax(spec.frame(t))).collect();
    let sine_ok = frame_bins.iter().all(|&b| b == nearest) && oracle_bins.iter().all(|&b| b == nearest);
    let scale_ok = (mel_to_hz(hz_to_mel(1000.0)) - 1000.0).abs() < 1e-9;

    let silence = ex.compute(&Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
    let floor = 1e-10f64.ln();
    let silence_ok = silence.frames.iter().all(|&v| v == floor);

    let lengths = [400usize, 401, 559, 560, 16000, 16001, 48_123];
    let mut frames_ok = true;
    for &len in &lengths {
        let s = ex.compute(&Waveform::new(vec![0.1; len], 16000).unwrap()).unwrap();
        frames_ok &= s.num_frames == (len - 400) / 160 + 1;
    }
    frames_ok &= spec.num_frames == 98;

    let pass = sine_ok && scale_ok && silence_ok && frames_ok;
    report_line(
        3,
        "DSP oracle",
        pass,
        &format!(
            "1 kHz argmax bin {} over {} frames, oracle {:?}, nearest-center bin {nearest}; silence uniform {silence_ok}; frame counts {frames_ok}",
            frame_bins[0], spec.num_frames, oracle_bins
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4, 5

/// Training runs are serialized so wall-clock budgets are measured alone.
static TRAIN_LOCK: Mutex<()> = Mutex::new(());

struct Trained {
    model: SlapModel,
    summary: RunSummary,
}

fn desk_manifest() -> &'static Manifest {
    static M: OnceLock<Manifest> = OnceLock::new();
    M.get_or_init(|| generate_corpus(&CorpusConfig::default()).unwrap().manifest)
}

/// Larger corpus with new speakers for the ablation probes.
fn eval_manifest() -> &'static Manifest {
    static M: OnceLock<Manifest> = OnceLock::new();
    M.get_or_init(|| {
        generate_corpus(&CorpusConfig {
            n_speakers: 120,
            seed: 99,
            ..Default::default()
        })
        .unwrap()
        .manifest
    })
}

fn synth_tasks() -> Vec<TaskSpec> {
    TaskRegistry::default()
        .for_corpus(SYNTH_CORPUS_ID)
        .into_iter()
        .cloned()
        .collect()
}

fn desk_config(lambda: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.lambda = lambda;
    cfg
}

fn train(lambda: f64) -> Trained {
    let _guard = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        resume: None,
    };
    let summary = run(&desk_config(lambda), &[desk_manifest().clone()], &opts, &mut |_| {}).unwrap();
    let model = SlapModel::load(&summary.final_checkpoint).unwrap();
    Trained { model, summary }
}

fn clap_arm() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| train(1.0))
}

fn mae_arm() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| train(0.0))
}

fn untrained() -> SlapModel {
    SlapModel::new(desk_config(1.0).model, 0).unwrap()
}

fn eval_report(manifest: &Manifest, model: &SlapModel) -> EvalReport {
    let opts = EvalOptions {
        modes: vec![EvalMode::Zeroshot, EvalMode::Probe],
        margins: true,
        ..Default::default()
    };
    evaluate(std::slice::from_ref(manifest), &synth_tasks(), Some(model), &opts).unwrap()
}

fn f1_of(r: &EvalReport, task: &str, mode: EvalMode) -> f64 {
    r.row(task, mode).and_then(|row| row.f1).unwrap_or_else(|| panic!("{task} {mode:?} not scored"))
}

/// Zero-shot F1 and its label-independent chance level for one task.
fn zeroshot_vs_chance(r: &EvalReport, task: &str) -> (f64, f64) {
    let ms: Vec<_> = r.margins.iter().filter(|m| m.task_id == task).collect();
    let labels: Vec<bool> = ms.iter().map(|m| m.label).collect();
    let preds: Vec<bool> = ms.iter().map(|m| m.margin > 0.0).collect();
    let score = f1(&preds, &labels);
    assert!((score - f1_of(r, task, EvalMode::Zeroshot)).abs() < 1e-12);
    (score, chance_f1(positive_rate(&labels), positive_rate(&preds)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_end_to_end_learning() {
    let trained = clap_arm();
    let held_out = desk_manifest();
    let after = eval_report(held_out, &trained.model);
    let before = eval_report(held_out, &untrained());

    let sex = f1_of(&after, "synth_sex", EvalMode::Zeroshot);
    let cond = f1_of(&after, "synth_dysphonia", EvalMode::Zeroshot);
    let tasks = synth_tasks();
    let (raw, chance): (Vec<f64>, Vec<f64>) = tasks.iter().map(|t| zeroshot_vs_chance(&before, &t.task_id)).unzip();
    let untrained_gap = (mean(&raw) - mean(&chance)).abs();
    let mut probe_ok = true;
    let mut per_task = Vec::new();
    for t in &tasks {
        let (z, p) = (
            f1_of(&after, &t.task_id, EvalMode::Zeroshot),
            f1_of(&after, &t.task_id, EvalMode::Probe),
        );
        probe_ok &= p >= z;
        per_task.push(format!("{} zs {z:.3} probe {p:.3}", t.task_id));
    }
    let steps = trained.summary.end_step;
    let minutes = trained.summary.wall_seconds / 60.0;

    let pass = sex >= 0.90 && cond >= 0.75 && untrained_gap <= 0.15 && probe_ok && steps <= 3000 && minutes <= 15.0;
    report_line(
        4,
        "end-to-end learning",
        pass,
        &format!(
            "{steps} steps in {minutes:.1} min; sex {sex:.3} >= 0.90, condition {cond:.3} >= 0.75; untrained mean {:.3} vs chance {:.3}; {}",
            mean(&raw),
            mean(&chance),
            per_task.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_ablation_direction() {
    let ablated = mae_arm();
    let data = eval_manifest();
    let after = eval_report(data, &ablated.model);
    let before = eval_report(data, &untrained());

    let tasks = synth_tasks();
    let mut zs_ok = true;
    let mut details = Vec::new();
    let (mut probe_after, mut probe_before) = (Vec::new(), Vec::new());
    for t in &tasks {
        let (z, c) = zeroshot_vs_chance(&after, &t.task_id);
        zs_ok &= (z - c).abs() <= 0.15;
        let (pa, pb) = (
            f1_of(&after, &t.task_id, EvalMode::Probe),
            f1_of(&before, &t.task_id, EvalMode::Probe),
        );
        probe_after.push(pa);
        probe_before.push(pb);
        details.push(format!("{} zs {z:.3} chance {c:.3} probe {pa:.3} vs {pb:.3}", t.task_id));
    }
    let probe_ok = mean(&probe_after) > mean(&probe_before);
    let pass = zs_ok && probe_ok;
    report_line(
        5,
        "ablation direction",
        pass,
        &format!(
            "lambda=0 probe mean {:.3} > untrained {:.3}; {}",
            mean(&probe_after),
            mean(&probe_before),
            details.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_protocol_conformance() {
    let expected: [(f64, &[(f64, f64)]); 5] = [
        (7.0, &[(0.0, 7.0)]),
        (10.0, &[(0.0, 10.0)]),
        (15.0, &[(0.0, 10.0), (5.0, 15.0)]),
        (20.0, &[(0.0, 10.0), (5.0, 15.0), (10.0, 20.0)]),
        (23.0, &[(0.0, 10.0), (5.0, 15.0), (10.0, 20.0), (13.0, 23.0)]),
    ];
    let windows_ok = expected
        .iter()
        .all(|(d, w)| plan_windows(*d).unwrap().windows == w.to_vec());

    let balanced_test = [true, false, true, false, true, false];
    let naive_tie = naive_baseline(&[true, false, false, true], &balanced_test);
    let naive_pos = naive_baseline(&[true, true, false], &balanced_test);
    let naive_ok = (naive_tie - 2.0 / 3.0).abs() < 1e-15 && (naive_pos - 2.0 / 3.0).abs() < 1e-15;

    let row = |task: &str, dim: Dimension, f: Option<f64>| ReportRow {
        task_id: task.into(),
        dimension: dim,
        mode: EvalMode::Zeroshot,
        f1: f,
        macro_f1: None,
        n_pos: 1,
        n_neg: 1,
        skipped: None,
    };
    let rows = vec![
        row("a", Dimension::Demographics, Some(0.8)),
        row("b", Dimension::Demographics, Some(0.6)),
        row("c", Dimension::Voice, Some(0.31)),
        row("d", Dimension::Voice, Some(0.47)),
        row("e", Dimension::Voice, Some(0.92)),
        row("f", Dimension::Health, Some(0.55)),
        row("g", Dimension::Health, None),
    ];
    let (dims, overall) = aggregate(&rows);
    let hand = [
        (Dimension::Demographics, 0.7),
        (Dimension::Voice, (0.31 + 0.47 + 0.92) / 3.0),
        (Dimension::Health, 0.55),
    ];
    let mut agg_err = 0.0f64;
    for (d, v) in hand {
        let got = dims.iter().find(|m| m.dimension == d).unwrap().mean_f1;
        agg_err = agg_err.max((got - v).abs());
    }
    agg_err = agg_err.max((overall[0].mean_f1 - (0.8 + 0.6 + 0.31 + 0.47 + 0.92 + 0.55) / 6.0).abs());
    let agg_ok = agg_err <= 1e-12 && overall[0].n_tasks == 6;

    let pass = windows_ok && naive_ok && agg_ok;
    report_line(
        6,
        "protocol conformance",
        pass,
        &format!("window plans {windows_ok}; naive F1 {naive_tie:.6} and {naive_pos:.6} vs 2/3; aggregation error {agg_err:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

/// Steps of each reproducibility run; every stage of the desk pipeline runs.
const REPRO_STEPS: u64 = 300;

/// Synthesizes a corpus to disk, pretrains, evaluates, and returns the bytes
/// of the metrics log and the report files.
fn full_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let _guard = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let manifest_path = corpus.write(&dir.join("corpus")).unwrap();
    let manifest = Manifest::load(&manifest_path).unwrap();

    let mut cfg = RunConfig::default();
    cfg.train.total_steps = REPRO_STEPS;
    cfg.train.checkpoint_every = 100;
    let opts = RunOptions {
        out_dir: dir.join("run"),
        resume: None,
    };
    let summary = run(&cfg, std::slice::from_ref(&manifest), &opts, &mut |_| {}).unwrap();
    let model = SlapModel::load(&summary.final_checkpoint).unwrap();
    let eval_opts = EvalOptions {
        margins: true,
        ..Default::default()
    };
    let report = evaluate(std::slice::from_ref(&manifest), &synth_tasks(), Some(&model), &eval_opts).unwrap();
    report.write_json(&dir.join("report.json")).unwrap();
    report.write_csv(&dir.join("report.csv")).unwrap();
    report.write_margins_csv(&dir.join("margins.csv")).unwrap();

    let files = [
        "run/metrics.csv".to_string(),
        "run/final.json".to_string(),
        "report.json".to_string(),
        "report.csv".to_string(),
        "margins.csv".to_string(),
    ];
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

#[test]
fn criterion_7_reproducibility() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_pipeline(a.path());
    let second = full_pipeline(b.path());
    let mut differing = Vec::new();
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(!x.is_empty(), "{name} is empty");
        if x != y {
            differing.push(name.clone());
        }
    }
    let pass = differing.is_empty();
    report_line(
        7,
        "reproducibility",
        pass,
        &format!(
            "two {REPRO_STEPS}-step runs; {} files compared, differing: {:?}",
            first.len(),
            differing
        ),
    );
    assert!(pass);
}
