use std::fs;
use std::path::{Path, PathBuf};

use mcqtok::data::{gen_shapes, gen_vectors, LabeledDataset, MixtureSpec, Split};
use mcqtok::eval::{
    compare_csv, compare_quantizers, measure, roadmap_ablation, roadmap_csv, EvalReport, Stage,
};
use mcqtok::par::Execution;
use mcqtok::quantize::io::{load_quantizer, save_quantizer, write_atomic, VectorSet};
use mcqtok::quantize::{fit_quantizer, KMeansConfig, Quantizer, QuantizerSpec, Scheme};
use mcqtok::train::{fit, load_checkpoint, load_dataset, TrainConfig};
use mcqtok::{Error, Result};

use crate::{Command, SchemeArg, SplitArg, SynthKind};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            kind,
            seed,
            count,
            num_classes,
            dim,
            components,
            spread,
            out,
        } => synth_data(
            kind,
            seed,
            count,
            num_classes,
            dim,
            components,
            spread,
            &out,
        ),
        Command::FitCodebooks {
            input,
            scheme,
            sub_codebooks,
            codebook_size,
            per_level,
            seed,
            max_iters,
            tol,
            out,
        } => {
            let scheme = match scheme {
                SchemeArg::Vq => Scheme::Vq,
                SchemeArg::Mcq => Scheme::Mcq,
                SchemeArg::Rq => Scheme::Rq,
            };
            if scheme == Scheme::Vq && sub_codebooks != 1 {
                return Err(Error::InvalidParameter(
                    "vq uses exactly one codebook; pass --sub-codebooks 1".into(),
                ));
            }
            let spec = QuantizerSpec {
                scheme,
                n: sub_codebooks,
                k: codebook_size,
                shared: !per_level,
            };
            println!(
                "fit-codebooks: scheme={scheme} sub_codebooks={sub_codebooks} codebook_size={codebook_size} \
                 per_level={per_level} seed={seed} max_iters={max_iters} tol={tol}"
            );
            let vectors = VectorSet::load(&input)?;
            let cfg = KMeansConfig {
                max_iters,
                tol,
                ..KMeansConfig::new(codebook_size, seed)
            };
            let mut q = fit_quantizer(
                Execution::default(),
                &vectors.data,
                vectors.dim,
                &spec,
                &cfg,
            )?;
            let codes = q.quantize_batch(Execution::default(), &vectors.data)?;
            let err = codes.iter().map(|c| c.error).sum::<f64>() / codes.len().max(1) as f64;
            save_quantizer(&q, &out)?;
            println!(
                "wrote {} ({} vectors of dim {}, vocab {:.1} bits, train error {err:.6})",
                out.display(),
                vectors.len(),
                vectors.dim,
                q.vocab_bits()
            );
            Ok(())
        }
        Command::Quantize {
            codebooks,
            input,
            out,
        } => {
            let q = load_quantizer(&codebooks)?;
            let vectors = VectorSet::load(&input)?;
            let codes = q.encode_batch(Execution::default(), &vectors.data)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let n = codes.first().map_or(0, |c| c.indices.len());
            let mut header = vec!["row".to_string()];
            header.extend((0..n).map(|i| format!("index_{i}")));
            header.push("error".into());
            w.write_record(&header)?;
            for (row, c) in codes.iter().enumerate() {
                let mut rec = vec![row.to_string()];
                rec.extend(c.indices.iter().map(usize::to_string));
                rec.push(c.error.to_string());
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            write_atomic(&out, &bytes)?;
            println!("wrote {} ({} rows)", out.display(), codes.len());
            Ok(())
        }
        Command::Compare {
            input,
            configs,
            seeds,
            sequential,
            out,
        } => {
            let specs = configs
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<QuantizerSpec>>>()?;
            let seeds = parse_seeds(&seeds)?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            println!("compare: configs={configs} seeds={seeds:?} sequential={sequential}");
            let vectors = VectorSet::load(&input)?;
            let train = vectors.select(|i| !mcqtok::data::is_held_out(i));
            let test = vectors.select(mcqtok::data::is_held_out);
            let rows = compare_quantizers(exec, &train, &test, &specs, &seeds)?;
            write_atomic(&out, compare_csv(&rows)?.as_bytes())?;
            for r in &rows {
                println!(
                    "{:<18} seed {:<4} error {:.6} util {:.3} ppl {:.1} bits {:.0}",
                    r.config, r.seed, r.error_mean, r.utilization, r.perplexity, r.vocab_bits
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            out,
            resume,
            print_config,
            overrides,
        } => {
            let cfg = read_config(config.as_deref(), &overrides)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            println!("train: config fingerprint {}", cfg.fingerprint());
            println!("{}", cfg.to_toml());
            let result = fit(cfg, &out, resume.as_deref())?;
            if let Some(row) = result.trainer.history().last() {
                println!(
                    "step {} total {:.5} psnr {} zs_acc {}",
                    row.step,
                    row.total,
                    fmt_opt(row.psnr),
                    fmt_opt(row.zs_acc)
                );
            }
            println!(
                "wrote {} and {}",
                result.checkpoint.display(),
                result.metrics.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let cfg = trainer.config();
            let ds = match &data {
                Some(dir) => LabeledDataset::load_dir(dir)?,
                None => load_dataset(&cfg.data)?,
            };
            let split = match split {
                SplitArg::Heldout => Split::HeldOut,
                SplitArg::Train => Split::Train,
                SplitArg::All => Split::All,
            };
            println!(
                "eval: split={split:?} data={}",
                data.as_deref()
                    .map_or("<from config>".into(), |p| p.display().to_string())
            );
            let idx = ds.indices(split);
            let m = measure(trainer.model(), &ds, &idx, true, Execution::default())?;
            let untrained = cfg.loss.lambda_contra == 0.0;
            if untrained {
                log::warn!("contrastive weight was 0 during training; zero-shot accuracy uses untrained class embeddings");
            }
            let report = EvalReport::new(
                m,
                untrained,
                cfg.fingerprint(),
                cfg.optim.seed,
                trainer.step_count(),
            );
            write_atomic(&out, report.to_json().as_bytes())?;
            println!(
                "psnr {:.3} dB, zs_acc {:.4}{}, {} images",
                report.psnr,
                report.zs_accuracy,
                if untrained { " (untrained tower)" } else { "" },
                report.count
            );
            Ok(())
        }
        Command::Roadmap {
            config,
            seeds,
            out,
            overrides,
        } => {
            let cfg = read_config(config.as_deref(), &overrides)?;
            let seeds = parse_seeds(&seeds)?;
            println!(
                "roadmap: seeds={seeds:?} steps={} fingerprint {}",
                cfg.optim.steps,
                cfg.fingerprint()
            );
            let ds = load_dataset(&cfg.data)?;
            let rows = roadmap_ablation(&cfg, &ds, &Stage::ALL, &seeds, Execution::default())?;
            write_atomic(&out, roadmap_csv(&rows)?.as_bytes())?;
            for stage in Stage::ALL {
                if let Some(acc) = mcqtok::eval::mean_accuracy(&rows, stage) {
                    println!("{:<22} mean zs_acc {acc:.4}", stage.name());
                }
            }
            Ok(())
        }
        Command::Inspect {
            checkpoint,
            codebooks,
            input,
        } => match (checkpoint, codebooks) {
            (Some(path), _) => inspect_checkpoint(&path),
            (None, Some(path)) => inspect_codebooks(&path, input.as_deref()),
            (None, None) => Err(Error::InvalidParameter(
                "pass --checkpoint or --codebooks".into(),
            )),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad seed {x:?}")))
        })
        .collect()
}

fn read_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    for o in overrides {
        if !o.starts_with("--") || !o.contains('=') {
            return Err(Error::Config(format!(
                "unexpected argument {o:?}; overrides look like --section.key=value"
            )));
        }
    }
    let text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    TrainConfig::with_overrides(&text, overrides)
}

#[allow(clippy::too_many_arguments)]
fn synth_data(
    kind: SynthKind,
    seed: u64,
    count: usize,
    num_classes: usize,
    dim: usize,
    components: usize,
    spread: f64,
    out: &Path,
) -> Result<()> {
    match kind {
        SynthKind::Vectors => {
            if dim == 0 {
                return Err(Error::InvalidParameter("--dim must be positive".into()));
            }
            let spec = if components == 0 {
                MixtureSpec::Isotropic
            } else {
                MixtureSpec::Mixture {
                    components,
                    spread: spread as f32,
                }
            };
            println!("synth-data: kind=vectors seed={seed} count={count} dim={dim} components={components} spread={spread}");
            gen_vectors(seed, count, dim, spec).save(out)?;
            println!("wrote {}", out.display());
        }
        SynthKind::Shapes => {
            println!("synth-data: kind=shapes seed={seed} count={count} num_classes={num_classes}");
            let ds = gen_shapes(seed, count, num_classes)?;
            if out.exists() && fs::read_dir(out)?.next().is_some() {
                return Err(Error::InvalidParameter(format!(
                    "{} exists and is not empty",
                    out.display()
                )));
            }
            // build beside the target, then move into place
            let staging = staging_dir(out);
            if staging.exists() {
                fs::remove_dir_all(&staging)?;
            }
            let written = ds.save_dir(&staging);
            if let Err(e) = written {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
            if out.exists() {
                fs::remove_dir(out)?;
            }
            fs::rename(&staging, out)?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map_or("data".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.partial"))
}

fn inspect_codebooks(path: &Path, input: Option<&Path>) -> Result<()> {
    let q = load_quantizer(path)?;
    print_quantizer(&q);
    if let Some(input) = input {
        let vectors = VectorSet::load(input)?;
        let mut q = q;
        q.reset_usage();
        let codes = q.quantize_batch(Execution::default(), &vectors.data)?;
        let n = codes.len().max(1) as f64;
        let mean = codes.iter().map(|c| c.error).sum::<f64>() / n;
        println!("recomputed over {} vectors: mean error {mean}", codes.len());
        for (i, s) in q.stats().iter().enumerate() {
            println!(
                "  codebook {i}: utilization {:.4} perplexity {:.3}",
                s.utilization, s.perplexity
            );
        }
    }
    Ok(())
}

fn print_quantizer(q: &Quantizer) {
    println!(
        "scheme {} token_dim {} codes per token {} sizes {:?} vocab {:.1} bits",
        q.scheme(),
        q.token_dim(),
        q.num_codes(),
        q.code_sizes(),
        q.vocab_bits()
    );
    for (i, cb) in q.codebooks().iter().enumerate() {
        let s = cb.stats();
        println!(
            "  codebook {i}: {} x {}, lookups {}, utilization {:.4}, perplexity {:.3}",
            cb.size(),
            cb.dim(),
            cb.total_lookups(),
            s.utilization,
            s.perplexity
        );
    }
}

fn inspect_checkpoint(path: &Path) -> Result<()> {
    let t = load_checkpoint(path)?;
    let cfg = t.config();
    println!("checkpoint {} at step {}", path.display(), t.step_count());
    println!("config fingerprint {}", cfg.fingerprint());
    println!(
        "model: factorization {:?}, width {}, latent {}, {} parameters, temperature {:.4}",
        cfg.model.factorization,
        cfg.model.width,
        cfg.model.code_dim(),
        t.model().params().num_values(),
        t.model().temperature()
    );
    match t.model().quantizer() {
        Some(q) => print_quantizer(q),
        None => println!("no quantizer"),
    }
    if let Some(r) = t.history().last() {
        println!(
            "last metrics (step {}): total {:.5} recon {:.5} vq {:.5} contrastive {:.5} psnr {} zs_acc {}",
            r.step,
            r.total,
            r.recon,
            r.vq,
            r.contrastive,
            fmt_opt(r.psnr),
            fmt_opt(r.zs_acc)
        );
    }
    Ok(())
}
