//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcca::cli::{cmd_eval, cmd_gen, cmd_train, evaluate_model, RunConfigFile, CHECKPOINT_FILE, METRICS_CSV, TRAIN_LOG_FILE};
use tcca::crf::{
    action_row_argmax, crf_log_partition, crf_nll, crf_nll_with_grad, greedy_decode, row_argmax_agreement,
    viterbi_decode, InitMode,
};
use tcca::datagen::{sample_dataset, Dataset};
use tcca::decoder::{Decoder, DecoderConfig};
use tcca::encoder::EncoderConfig;
use tcca::metrics::{average_precision, decode_to_frames, edit_score, match_segments, spans_of, F1_THRESHOLDS};
use tcca::params::ParamStore;
use tcca::tensor::Matrix;
use tcca::training::checkpoint::Checkpoint;
use tcca::training::gradcheck::{gradient_check, relative_error, FD_EPS};
use tcca::training::{segment_corpus, subsample, train, LossTerm, Model, ModelSpec, TrainConfig, TrainingSample};

use common::*;

const SYNTHETIC_CONFIG: &str = include_str!("../../../configs/synthetic.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn crf_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_max, mut worst_z, mut path_mismatch, mut unique) = (0.0f64, 0.0f64, 0, 0);
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let classes = rng.random_range(1..=4);
        let omega = rng.random_range(0.0..2.0);
        let (e, m) = random_crf_instance(&mut rng, k, classes);
        let oracle = enumerate_crf(&e, &m, omega);
        let (path, score) = viterbi_decode(&e, &m, omega).unwrap();
        worst_max = worst_max.max((score - oracle.best_score).abs());
        worst_z = worst_z.max((crf_log_partition(&e, &m, omega).unwrap() - oracle.log_partition).abs());
        if oracle.argmax.len() == 1 {
            unique += 1;
            path_mismatch += usize::from(oracle.argmax[0] != path);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_max <= 1e-9 && worst_z <= 1e-6 && path_mismatch == 0 && secs < 30.0,
        format!(
            "max |viterbi - brute| {worst_max:.1e}, max |logZ - enum| {worst_z:.1e}, \
             {path_mismatch}/{unique} unique-argmax path mismatches, {secs:.1}s"
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();

    // CRF NLL against its own finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut de, mut dt) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let classes = rng.random_range(1..=3);
        let (e, m) = random_crf_instance(&mut rng, k, classes);
        let path: Vec<usize> = (0..k).map(|_| rng.random_range(0..=classes)).collect();
        let g = crf_nll_with_grad(&e, &path, &m, 0.7).unwrap();
        for i in 0..e.len() {
            let mut up = e.clone();
            up.as_mut_slice()[i] += FD_EPS;
            let mut down = e.clone();
            down.as_mut_slice()[i] -= FD_EPS;
            let n = (crf_nll(&up, &path, &m, 0.7).unwrap() - crf_nll(&down, &path, &m, 0.7).unwrap()) / (2.0 * FD_EPS);
            de = de.max(relative_error(g.d_emissions.as_slice()[i], n));
        }
        let size = classes + 3;
        for a in 0..size {
            for b in 0..size {
                let mut up = m.clone();
                up.set(a, b, m.get(a, b) + FD_EPS);
                let mut down = m.clone();
                down.set(a, b, m.get(a, b) - FD_EPS);
                let n = (crf_nll(&e, &path, &up, 0.7).unwrap() - crf_nll(&e, &path, &down, 0.7).unwrap())
                    / (2.0 * FD_EPS);
                dt = dt.max(relative_error(g.d_transitions.get(a, b), n));
            }
        }
    }
    worst.push(("crf/emissions".into(), de));
    worst.push(("crf/transitions".into(), dt));

    // Model losses on a small instance.
    let gen = tcca::datagen::GeneratorConfig {
        classes: 4,
        feature_dim: 4,
        duration_mean_range: (4.0, 6.0),
        ..Default::default()
    };
    let spec = gen.build_spec().unwrap();
    let video = subsample(&tcca::datagen::sample_video(&spec, &mut tcca::datagen::stream_rng(5, 0)), 2, 0);
    let enc = EncoderConfig { hidden_dim: 8, window: 4, global_stride: 2, ..Default::default() };
    let dec = DecoderConfig { hidden_dim: 8, queries: 4, layers: 1, max_positions: 64, ..Default::default() };
    let cfg = TrainConfig::default();
    let model = Model::new(&ModelSpec::new(4, 4, &enc, &dec, &Default::default(), &cfg), None).unwrap();
    let sample = TrainingSample::from_video(&video, 0.3, 4, 4).unwrap();
    let all =
        [LossTerm::Segmentation, LossTerm::Smoothing, LossTerm::Duration, LossTerm::Future, LossTerm::Past, LossTerm::Sequence];
    for (name, terms) in [
        ("dur", &[LossTerm::Duration][..]),
        ("fut", &[LossTerm::Future][..]),
        ("past", &[LossTerm::Past][..]),
        ("seg", &[LossTerm::Segmentation][..]),
        ("smooth", &[LossTerm::Smoothing][..]),
        ("crf", &[LossTerm::Sequence][..]),
        ("total", &all[..]),
    ] {
        let r = gradient_check(&model, &sample, &cfg, terms, None, 8).unwrap();
        worst.push((name.into(), r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(max < 1e-4 && secs < 120.0, format!("{}; {secs:.1}s", parts.join(", ")))
}

fn degenerate_link() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let classes = rng.random_range(1..=9);
        let (e, m) = random_crf_instance(&mut rng, k, classes);
        let (path, _) = viterbi_decode(&e, &m, 0.0).unwrap();
        let argmax: Vec<usize> =
            (0..k).map(|i| (0..=classes).fold(0, |b, y| if e.get(i, y) > e.get(i, b) { y } else { b })).collect();
        mismatches += usize::from(path != argmax || path != greedy_decode(&e));
    }
    outcome(mismatches == 0, format!("{mismatches}/1000 paths differ from the per-position argmax"))
}

fn duration_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut models = Vec::new();
    for seed in 0..4u64 {
        let mut store = ParamStore::default();
        let classes = 3 + seed as usize;
        let cfg = DecoderConfig { hidden_dim: 16, queries: 4 + seed as usize, layers: 1, ..Default::default() };
        let dec = Decoder::new(&mut store, &cfg, 2 * classes, classes, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        models.push((store, dec, 2 * classes));
    }
    for i in 0..1000 {
        let (store, dec, width) = &models[i % models.len()];
        let t = rng.random_range(1..40);
        let scale = [0.1, 1.0, 10.0, 100.0][i % 4];
        let f = Matrix::from_vec(t, *width, (0..t * width).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = dec.decode(store, &f).unwrap();
        worst = worst.max((out.d_hat.iter().sum::<f64>() - 1.0).abs());
    }
    let mut wrong_len = 0;
    for i in 0..1000 {
        let n = rng.random_range(0..8);
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let durations: Vec<f64> = (0..rng.random_range(0..10))
            .map(|_| match i % 5 {
                0 => 0.0,
                1 => -rng.random_range(0.0..1.0),
                2 => f64::NAN,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let horizon = rng.random_range(0..300);
        wrong_len += usize::from(decode_to_frames(&actions, &durations, horizon, 0).len() != horizon);
    }
    outcome(
        worst <= 1e-6 && wrong_len == 0,
        format!("max |sum d - 1| {worst:.1e} over 1000 draws; {wrong_len}/1000 expansions off-horizon"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut edit_bad = 0;
    for _ in 0..500 {
        let a: Vec<usize> = (0..rng.random_range(0..9)).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..rng.random_range(0..9)).map(|_| rng.random_range(0..4)).collect();
        let longest = a.len().max(b.len());
        let expected =
            if longest == 0 { 1.0 } else { 1.0 - reference_levenshtein(&a, &b) as f64 / longest as f64 };
        edit_bad += usize::from(edit_score(&a, &b) != expected);
    }
    let mut f1_bad = 0;
    for i in 0..500 {
        let len = rng.random_range(4..30);
        let pred = random_track(&mut rng, 5, 3, 8);
        let gt = random_track(&mut rng, 5, 3, len / 2 + 1);
        let tau = F1_THRESHOLDS[i % 3];
        let (ps, gs) = (spans_of(&pred), spans_of(&gt));
        f1_bad += usize::from(match_segments(&ps, &gs, tau).tp != exhaustive_true_positives(&ps, &gs, tau));
    }
    let mut ap_bad = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..15);
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let positives: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (got, want) = (average_precision(&scores, &positives), quadratic_ap(&scores, &positives));
        ap_bad += usize::from(match (got, want) {
            (Some(g), Some(w)) => (g - w).abs() > 1e-12,
            (None, None) => false,
            _ => true,
        });
    }
    outcome(
        edit_bad + f1_bad + ap_bad == 0,
        format!("disagreements: edit {edit_bad}/500, F1 matching {f1_bad}/500, AP {ap_bad}/500"),
    )
}

struct Run {
    report: tcca::metrics::MetricsReport,
    model: Model,
    elapsed: Duration,
}

fn train_run(base: &RunConfigFile, data: &Dataset, seed: u64, edit: impl Fn(&mut RunConfigFile)) -> Run {
    let mut cfg = base.clone();
    cfg.train.seed = seed;
    edit(&mut cfg);
    let start = Instant::now();
    let model = Model::new(&cfg.model_spec(data), Some(&segment_corpus(&data.train))).unwrap();
    let model = train(model, data, &cfg.train).unwrap().model;
    let elapsed = start.elapsed();
    let report = evaluate_model(&model, data, &cfg.eval, cfg.train.sample_rate).unwrap();
    Run { report, model, elapsed }
}

fn end_to_end(base: &RunConfigFile, data: &Dataset) -> (Vec<Outcome>, Vec<Run>, Run) {
    let seeds = [0u64, 1, 2];
    let full: Vec<Run> = seeds.iter().map(|&s| train_run(base, data, s, |_| {})).collect();
    let no_crf: Vec<Run> = seeds.iter().map(|&s| train_run(base, data, s, |c| c.train.use_crf = false)).collect();
    let no_bacr: Vec<Run> = seeds
        .iter()
        .map(|&s| {
            train_run(base, data, s, |c| {
                c.train.use_bacr_fut = false;
                c.train.use_bacr_past = false;
            })
        })
        .collect();
    let precomputed = train_run(base, data, 0, |c| c.crf.init_mode = InitMode::Precomputed);

    let slowest = full.iter().chain(&no_crf).chain(&no_bacr).chain([&precomputed]).map(|r| r.elapsed).max().unwrap();
    let in_budget = slowest < Duration::from_secs(15 * 60);
    let at = |runs: &[Run], a: f64, b: f64| -> Vec<f64> { runs.iter().map(|r| r.report.moc_at(a, b).unwrap()).collect() };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");

    let full_long = at(&full, 0.3, 0.5);
    let a = median(full_long.clone());
    let (crf_short, plain_short) = (at(&full, 0.3, 0.1), at(&no_crf, 0.3, 0.1));
    let (b_with, b_without) = (median(crf_short.clone()), median(plain_short.clone()));
    let mean = |runs: &[Run]| -> Vec<f64> { runs.iter().map(|r| r.report.mean_moc()).collect() };
    let (bacr, none) = (mean(&full), mean(&no_bacr));
    let (c_with, c_without) = (median(bacr.clone()), median(none.clone()));
    let timing = format!("slowest run {:.0}s", slowest.as_secs_f64());
    let outcomes = vec![
        outcome(
            a >= 0.375 && in_budget,
            format!("median MoC(0.3, 0.5) {a:.3} (runs {}), threshold 0.375; {timing}", fmt(&full_long)),
        ),
        outcome(
            b_with >= b_without,
            format!("median MoC(0.3, 0.1) with CRF {b_with:.3} ({}) vs without {b_without:.3} ({})", fmt(&crf_short), fmt(&plain_short)),
        ),
        outcome(
            c_with >= c_without,
            format!("median mean MoC with both context losses {c_with:.3} ({}) vs neither {c_without:.3} ({})", fmt(&bacr), fmt(&none)),
        ),
    ];
    (outcomes, full, precomputed)
}

fn transition_recovery(data: &Dataset, random: &Model, precomputed: &Model) -> Outcome {
    let counts = data.train_transition_counts();
    let rows: Vec<usize> = (0..data.classes).filter(|&a| counts.row(a).iter().sum::<f64>() >= 20.0).collect();
    let gt: Vec<usize> = (0..data.classes)
        .map(|a| (0..data.classes).fold(0, |b, c| if data.gt_transitions.get(a, c) > data.gt_transitions.get(a, b) { c } else { b }))
        .collect();
    let (tr, tp) = (random.transition_matrix(), precomputed.transition_matrix());
    let learned = action_row_argmax(&tr);
    let vs_gt = rows.iter().filter(|&&r| learned[r] == gt[r]).count() as f64 / rows.len() as f64;
    let pre = action_row_argmax(&tp);
    let pre_vs_gt = rows.iter().filter(|&&r| pre[r] == gt[r]).count() as f64 / rows.len() as f64;
    let cross = row_argmax_agreement(&tr, &tp, &rows);
    outcome(
        vs_gt >= 0.7 && cross >= 0.8,
        format!(
            "{} rows with >= 20 transitions; random-init vs ground truth {:.0}% (precomputed {:.0}%), \
             random vs precomputed {:.0}%",
            rows.len(),
            100.0 * vs_gt,
            100.0 * pre_vs_gt,
            100.0 * cross
        ),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| root.path().join(name);
    let mut cfg: RunConfigFile = serde_json::from_str(SYNTHETIC_CONFIG).unwrap();
    cfg.generator.n_train = 24;
    cfg.generator.n_test = 8;
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 1;
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();

    let h1 = cmd_gen(&cfg, &dir("data1")).unwrap();
    let h2 = cmd_gen(&cfg, &dir("data2")).unwrap();
    let gen_same = h1 == h2 && read(dir("data1/manifest.json")) == read(dir("data2/manifest.json"));

    cmd_train(&cfg, &dir("data1"), &dir("run1")).unwrap();
    cmd_train(&cfg, &dir("data2"), &dir("run2")).unwrap();
    let train_same = read(dir("run1").join(CHECKPOINT_FILE)) == read(dir("run2").join(CHECKPOINT_FILE))
        && read(dir("run1").join(TRAIN_LOG_FILE)) == read(dir("run2").join(TRAIN_LOG_FILE));

    cmd_eval(&dir("run1").join(CHECKPOINT_FILE), &dir("data1"), &dir("eval1")).unwrap();
    cmd_eval(&dir("run2").join(CHECKPOINT_FILE), &dir("data1"), &dir("eval2")).unwrap();
    let eval_same = read(dir("eval1").join(METRICS_CSV)) == read(dir("eval2").join(METRICS_CSV));

    // In-memory model versus the model reloaded from its checkpoint.
    let data = Dataset::load(&dir("data1")).unwrap();
    let model = Model::new(&cfg.model_spec(&data), Some(&segment_corpus(&data.train))).unwrap();
    let trained = train(model, &data, &cfg.train).unwrap().model;
    let direct = evaluate_model(&trained, &data, &cfg.eval, cfg.train.sample_rate).unwrap().to_csv();
    let ck = Checkpoint::from_model(&trained, &cfg.train, &cfg.eval, None, cfg.train.epochs);
    let reloaded = Checkpoint::from_bytes(&ck.to_bytes(), "memory").unwrap().to_model().unwrap();
    let round_trip = evaluate_model(&reloaded, &data, &cfg.eval, cfg.train.sample_rate).unwrap().to_csv();
    let reload_same = direct == round_trip && direct.as_bytes() == read(dir("eval1").join(METRICS_CSV));

    outcome(
        gen_same && train_same && eval_same && reload_same,
        format!("gen {gen_same}, train {train_same}, eval {eval_same}, checkpoint round-trip {reload_same}"),
    )
}

fn report(results: &mut Vec<(String, Outcome)>, name: &str, o: Outcome) {
    println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((name.to_string(), o));
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, "1 crf oracle equivalence", crf_oracle());
    report(&mut results, "2 gradient suite", gradient_suite());
    report(&mut results, "3 degenerate link", degenerate_link());
    report(&mut results, "4 duration contract", duration_contract());
    report(&mut results, "5 metric oracles", metric_oracles());

    let base: RunConfigFile = serde_json::from_str(SYNTHETIC_CONFIG).unwrap();
    let spec = base.generator.build_spec().unwrap();
    let data = sample_dataset(&spec, base.generator.n_train, base.generator.n_test).unwrap();
    let (six, full, precomputed) = end_to_end(&base, &data);
    for (name, o) in ["6a full model vs 3x chance", "6b CRF effect", "6c context-loss effect"].into_iter().zip(six) {
        report(&mut results, name, o);
    }
    report(&mut results, "7 transition recovery", transition_recovery(&data, &full[0].model, &precomputed.model));
    report(&mut results, "8 determinism", determinism());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.as_str()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
