//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 5`.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mcqtok::data::{gen_shapes, gen_vectors, LabeledDataset, MixtureSpec, Split};
use mcqtok::eval::{
    compare_quantizers, mean_accuracy, measure, roadmap_ablation, CompareRow, Measurement, Stage,
};
use mcqtok::par::Execution;
use mcqtok::quantize::io::{decode_quantizer, encode_quantizer, VectorSet};
use mcqtok::quantize::{
    fit_quantizer, random_quantizer, vocab_bits, Codebook, KMeansConfig, MultiCodebookQuantizer,
    Quantizer, QuantizerSpec, ResidualQuantizer, Scheme,
};
use mcqtok::train::{decode_checkpoint, encode_checkpoint, load_dataset, TrainConfig, Trainer};

use common::gradcheck::{
    full_loss_errors, primitive_errors, stop_gradient_mismatch, straight_through_is_exact, TOL,
};
use common::normals;

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

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let e = started.elapsed();
    (
        e <= limit,
        format!("{:.1} s of {} s", e.as_secs_f64(), limit.as_secs()),
    )
}

// ---- shared training runs ----

fn shapes() -> &'static LabeledDataset {
    static DS: OnceLock<LabeledDataset> = OnceLock::new();
    DS.get_or_init(|| load_dataset(&TrainConfig::default().data).expect("default dataset"))
}

struct Run {
    init: Measurement,
    last: Measurement,
    secs: f64,
}

fn train_and_measure(cfg: TrainConfig) -> Run {
    let ds = shapes();
    let held = ds.indices(Split::HeldOut);
    let recon = cfg.loss.lambda_recon > 0.0;
    let started = Instant::now();
    let mut t = Trainer::new(cfg, ds.num_classes()).expect("valid config");
    let init = measure(t.model(), ds, &held, recon, Execution::default()).unwrap();
    t.run(ds).expect("training runs");
    let last = measure(t.model(), ds, &held, recon, Execution::default()).unwrap();
    Run {
        init,
        last,
        secs: started.elapsed().as_secs_f64(),
    }
}

fn seeded(seed: u64, edit: impl Fn(&mut TrainConfig)) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.optim.seed = seed;
    edit(&mut c);
    c
}

/// The default joint configuration for seeds 0, 1, 2.
fn joint(seed: u64) -> &'static Run {
    static RUNS: [OnceLock<Run>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| train_and_measure(seeded(seed, |_| {})))
}

// ---- criteria ----

fn brute_nearest(rows: &[f32], dim: usize, q: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, r) in rows.chunks_exact(dim).enumerate() {
        let d: f64 = r
            .iter()
            .zip(q)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

fn rel_ok(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-6 * want.abs().max(1e-12)
}

fn book(seed: u64, k: usize, dim: usize) -> Codebook {
    Codebook::new(normals(seed, k * dim), k, dim).unwrap()
}

fn quantization_oracle() -> Outcome {
    let started = Instant::now();
    let tokens_of = |seed, dim: usize| normals(seed, 1000 * dim);
    let mut bad = Vec::new();

    for (i, &(k, dim)) in [(4096, 64), (1000, 7), (37, 1), (2048, 32)]
        .iter()
        .enumerate()
    {
        let cb = book(10 + i as u64, k, dim);
        for q in tokens_of(20 + i as u64, dim).chunks_exact(dim) {
            let (got, d) = cb.nearest(q).unwrap();
            let want = brute_nearest(cb.entries(), dim, q);
            if got != want || !rel_ok(d as f64, sq(q, cb.entry(want))) {
                bad.push(format!("lookup K={k} d={dim}"));
                break;
            }
        }
    }

    let (n, k, dim) = (4, 1024, 64);
    let c = dim / n;
    let books: Vec<Codebook> = (0..n).map(|j| book(30 + j as u64, k, c)).collect();
    let mcq = MultiCodebookQuantizer::new(books.clone()).unwrap();
    for q in tokens_of(40, dim).chunks_exact(dim) {
        let t = mcq.encode(q).unwrap();
        let want: Vec<usize> = (0..n)
            .map(|j| brute_nearest(books[j].entries(), c, &q[j * c..(j + 1) * c]))
            .collect();
        if t.indices != want || !rel_ok(t.error, sq(q, &t.quantized)) {
            bad.push("mcq".into());
            break;
        }
    }

    let shared = ResidualQuantizer::shared(book(50, 4096, dim), 4).unwrap();
    let per_level =
        ResidualQuantizer::per_level((0..4).map(|l| book(60 + l, 512, dim)).collect()).unwrap();
    for (label, rq) in [("rq shared", &shared), ("rq per-level", &per_level)] {
        for q in tokens_of(70, dim).chunks_exact(dim) {
            let t = rq.encode(q).unwrap();
            let mut residual = q.to_vec();
            let mut sum = vec![0.0f32; dim];
            let mut want = Vec::new();
            for level in 0..rq.num_levels() {
                let cb = rq.level(level);
                let i = brute_nearest(cb.entries(), dim, &residual);
                for ((r, s), &e) in residual.iter_mut().zip(sum.iter_mut()).zip(cb.entry(i)) {
                    *r -= e;
                    *s += e;
                }
                want.push(i);
            }
            if t.indices != want || t.quantized != sum || !rel_ok(t.error, sq(q, &sum)) {
                bad.push(label.into());
                break;
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(30), started);
    outcome(
        bad.is_empty() && fast,
        if bad.is_empty() {
            format!("lookup, MCQ and RQ agree with brute force on 1000 tokens each; {time}")
        } else {
            format!("mismatch in {bad:?}; {time}")
        },
    )
}

fn mcq_degeneracy() -> Outcome {
    let started = Instant::now();
    let cb = book(3, 256, 16);
    let tokens = normals(4, 10_000 * 16);
    let vq = Quantizer::Vq(cb.clone());
    let mcq = Quantizer::Mcq(MultiCodebookQuantizer::new(vec![cb]).unwrap());
    let a = vq.encode_batch(Execution::default(), &tokens).unwrap();
    let b = mcq.encode_batch(Execution::default(), &tokens).unwrap();
    let identical = a.len() == 10_000
        && a.iter().zip(&b).all(|(x, y)| {
            x.indices == y.indices
                && x.error.to_bits() == y.error.to_bits()
                && x.quantized
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(y.quantized.iter().map(|v| v.to_bits()))
        });
    let (fast, time) = within(Duration::from_secs(10), started);
    outcome(
        identical && fast,
        format!("10000 tokens bit-identical: {identical}; {time}"),
    )
}

fn vocabulary_arithmetic() -> Outcome {
    let table: [(&[usize], f64); 5] = [
        (&[16384], 14.0),
        (&[8192; 2], 26.0),
        (&[4096; 4], 48.0),
        (&[2048; 8], 88.0),
        (&[16384; 4], 56.0),
    ];
    let got: Vec<f64> = table.iter().map(|(s, _)| vocab_bits(s)).collect();
    let ok = table.iter().zip(&got).all(|((_, want), g)| g == want);
    outcome(
        ok,
        format!("1x16384, 2x8192, 4x4096, 8x2048, 4x16384 -> {got:?} bits"),
    )
}

fn split_vectors(seed: u64, train: usize, test: usize, dim: usize) -> (VectorSet, VectorSet) {
    (
        gen_vectors(1000 + seed, train, dim, MixtureSpec::Isotropic),
        gen_vectors(2000 + seed, test, dim, MixtureSpec::Isotropic),
    )
}

fn fmt_errors(rows: &[CompareRow]) -> String {
    rows.iter()
        .map(|r| format!("{:.3}", r.error_mean))
        .collect::<Vec<_>>()
        .join(" > ")
}

fn budget_trend() -> Outcome {
    let started = Instant::now();
    let specs: Vec<QuantizerSpec> = [(1, 256), (2, 128), (4, 64), (8, 32)]
        .iter()
        .map(|&(n, k)| QuantizerSpec::new(Scheme::Mcq, n, k))
        .collect();
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let (train, test) = split_vectors(seed, 50_000, 10_000, 32);
        let rows =
            compare_quantizers(Execution::default(), &train, &test, &specs, &[seed]).unwrap();
        ok &= rows.windows(2).all(|w| w[1].error_mean < w[0].error_mean);
        lines.push(format!("seed {seed}: {}", fmt_errors(&rows)));
    }
    let (fast, time) = within(Duration::from_secs(300), started);
    outcome(
        ok && fast,
        format!(
            "1x256 > 2x128 > 4x64 > 8x32 held-out error; {}; {time}",
            lines.join("; ")
        ),
    )
}

fn mcq_beats_rq() -> Outcome {
    let started = Instant::now();
    let specs = [
        QuantizerSpec::new(Scheme::Mcq, 8, 256),
        QuantizerSpec::new(Scheme::Rq, 8, 256),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let (train, test) = split_vectors(10 + seed, 50_000, 10_000, 64);
        let rows =
            compare_quantizers(Execution::default(), &train, &test, &specs, &[seed]).unwrap();
        let (m, r) = (rows[0].error_mean, rows[1].error_mean);
        ok &= m < r;
        lines.push(format!(
            "seed {seed}: MCQ {m:.3} vs RQ {r:.3} (ratio {:.2}x)",
            r / m
        ));
    }
    let (fast, time) = within(Duration::from_secs(300), started);
    outcome(ok && fast, format!("{}; {time}", lines.join("; ")))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst = ("", 0.0f64);
    let prims = primitive_errors();
    for (name, e) in &prims {
        if *e > worst.1 {
            worst = (name, *e);
        }
    }
    let full = full_loss_errors();
    let full_worst = full.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let stop = stop_gradient_mismatch();
    let st = straight_through_is_exact();
    let ok = worst.1 < TOL && full_worst < TOL && stop.is_none() && st;
    let (fast, time) = within(Duration::from_secs(120), started);
    outcome(
        ok && fast,
        format!(
            "{} primitives (worst {} {:.1e}), {} parameter groups of the full loss (worst {:.1e}), \
             stop-gradient closed forms {}, straight-through exact {st}; {time}",
            prims.len(),
            worst.0,
            worst.1,
            full.len(),
            full_worst,
            if stop.is_none() { "ok" } else { "mismatch" },
        ),
    )
}

fn toy_convergence() -> Outcome {
    let run = joint(0);
    let (p0, p1) = (run.init.psnr.unwrap(), run.last.psnr.unwrap());
    let acc = run.last.zs_accuracy;
    let fast = run.secs <= 600.0;
    outcome(
        p1 >= p0 + 6.0 && acc >= 0.60 && fast,
        format!(
            "held-out PSNR {p0:.2} -> {p1:.2} dB (need +6), zero-shot {acc:.3} (need 0.60), {:.0} s of 600 s",
            run.secs
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn no_conflict() -> Outcome {
    let mut joint_acc = Vec::new();
    let mut joint_psnr = Vec::new();
    let mut contra_acc = Vec::new();
    let mut recon_psnr = Vec::new();
    for seed in 0..3 {
        let j = joint(seed);
        joint_acc.push(j.last.zs_accuracy);
        joint_psnr.push(j.last.psnr.unwrap());
        let c = train_and_measure(seeded(seed, |c| c.loss.lambda_recon = 0.0));
        contra_acc.push(c.last.zs_accuracy);
        let r = train_and_measure(seeded(seed, |c| c.loss.lambda_contra = 0.0));
        recon_psnr.push(r.last.psnr.unwrap());
    }
    let acc_gap = mean(&joint_acc) - mean(&contra_acc);
    let psnr_gap = mean(&joint_psnr) - mean(&recon_psnr);
    outcome(
        acc_gap.abs() <= 0.05 && psnr_gap.abs() <= 1.0,
        format!(
            "zero-shot joint {joint_acc:.3?} vs contrastive-only {contra_acc:.3?} (mean gap {acc_gap:+.3}, limit 0.05); \
             PSNR joint {joint_psnr:.2?} vs recon-only {recon_psnr:.2?} (mean gap {psnr_gap:+.2} dB, limit 1)"
        ),
    )
}

fn roadmap_trend() -> Outcome {
    let stages = [
        Stage::Contrastive,
        Stage::AttentionFactorized,
        Stage::LinearFactorized,
        Stage::Discretized,
    ];
    let rows = roadmap_ablation(
        &TrainConfig::default(),
        shapes(),
        &stages,
        &[0, 1, 2],
        Execution::default(),
    )
    .unwrap();
    let m = |s| mean_accuracy(&rows, s).unwrap();
    let (plain, attn, linear, disc) = (
        m(Stage::Contrastive),
        m(Stage::AttentionFactorized),
        m(Stage::LinearFactorized),
        m(Stage::Discretized),
    );
    let ok = plain >= attn && attn >= linear && disc <= linear;
    outcome(
        ok,
        format!(
            "mean zero-shot: unfactorized {plain:.3}, attention {attn:.3}, linear {linear:.3}, linear+MCQ {disc:.3} \
             (need unfactorized >= attention >= linear >= linear+MCQ)"
        ),
    )
}

fn determinism_and_persistence() -> Outcome {
    let ds = gen_shapes(9, 400, 8).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.optim.steps = 12;
    cfg.optim.batch_size = 32;
    cfg.optim.eval_interval = 5;
    cfg.quantizer.revival_interval = 5;
    let run = |until: u64| {
        let mut t = Trainer::new(cfg.clone(), 8).unwrap();
        t.run_until(&ds, until, |_| Ok(())).unwrap();
        t
    };
    let mut failures = Vec::new();
    let full = encode_checkpoint(&run(12)).unwrap();
    if encode_checkpoint(&run(12)).unwrap() != full {
        failures.push("repeat run differs".to_string());
    }
    let mut seq = Trainer::new(cfg.clone(), 8)
        .unwrap()
        .with_execution(Execution::Sequential);
    seq.run(&ds).unwrap();
    if encode_checkpoint(&seq).unwrap() != full {
        failures.push("sequential run differs".into());
    }
    let back = decode_checkpoint(&full).unwrap();
    if encode_checkpoint(&back).unwrap() != full {
        failures.push("checkpoint save/load not byte-exact".into());
    }
    for split in 1..12 {
        let part = run(split);
        let mut resumed = decode_checkpoint(&encode_checkpoint(&part).unwrap()).unwrap();
        resumed.run(&ds).unwrap();
        if encode_checkpoint(&resumed).unwrap() != full {
            failures.push(format!("resume at {split} differs"));
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let small = gen_shapes(1, 24, 8).unwrap();
    small.save_dir(dir.path()).unwrap();
    let loaded = LabeledDataset::load_dir(dir.path()).unwrap();
    let ppm_ok = loaded.images() == small.images() && loaded.labels() == small.labels();
    let again = tempfile::tempdir().unwrap();
    loaded.save_dir(again.path()).unwrap();
    let files_ok = small.file_names().iter().all(|f| {
        std::fs::read(dir.path().join(f)).unwrap() == std::fs::read(again.path().join(f)).unwrap()
    });
    if !(ppm_ok && files_ok) {
        failures.push("PPM round trip".into());
    }
    let v = gen_vectors(5, 300, 12, MixtureSpec::Isotropic);
    let bytes = v.encode().unwrap();
    if VectorSet::decode(&bytes).unwrap().encode().unwrap() != bytes {
        failures.push("UTKV round trip".into());
    }
    for spec in ["vq:1x16", "mcq:4x16", "rq:3x16", "rq-perlevel:3x16"] {
        let spec: QuantizerSpec = spec.parse().unwrap();
        let q = random_quantizer(&spec, 12, 2).unwrap();
        let fitted = fit_quantizer(
            Execution::default(),
            &v.data,
            12,
            &spec,
            &KMeansConfig::new(spec.k, 0),
        )
        .unwrap();
        for q in [q, fitted] {
            let b = encode_quantizer(&q).unwrap();
            if encode_quantizer(&decode_quantizer(&b).unwrap()).unwrap() != b {
                failures.push(format!("UTKQ round trip {}", spec.label()));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "repeat, sequential and 11 resumed runs give identical checkpoints; checkpoint, PPM, UTKV and UTKQ round trips exact"
                .to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn codebook_health() -> Outcome {
    let run = joint(0);
    let k = TrainConfig::default().quantizer.codebook_size as f64;
    let stats = &run.last.codebooks;
    let ok = !stats.is_empty()
        && stats
            .iter()
            .all(|s| s.utilization >= 0.5 && s.perplexity >= 0.25 * k);
    let parts: Vec<String> = stats
        .iter()
        .map(|s| format!("{:.2}/{:.1}", s.utilization, s.perplexity))
        .collect();
    outcome(
        ok,
        format!(
            "held-out utilization/perplexity per sub-codebook {parts:?} (need >= 0.5 and >= {:.0})",
            0.25 * k
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("quantization oracle", quantization_oracle),
        ("single-codebook MCQ equals VQ", mcq_degeneracy),
        ("vocabulary bits", vocabulary_arithmetic),
        ("error falls as codebooks split", budget_trend),
        ("MCQ beats shared RQ", mcq_beats_rq),
        ("gradient correctness", gradient_correctness),
        ("toy training convergence", toy_convergence),
        ("joint training has no conflict", no_conflict),
        ("roadmap ordering", roadmap_trend),
        ("determinism and persistence", determinism_and_persistence),
        ("codebook health", codebook_health),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        println!(
            "{} {number:>2} {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.push(number);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        std::process::exit(1);
    }
}
