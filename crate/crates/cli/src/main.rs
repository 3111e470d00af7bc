use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segnext::analysis::{bench_latency, cost_report};
use segnext::io::checkpoint::load_checkpoint;
use segnext::io::image::{read_ppm, write_pgm, write_ppm};
use segnext::io::RunConfig;
use segnext::model::{DecoderKind, SegModel};
use segnext::msca::AttentionKind;
use segnext::train::infer::{evaluate, predict_labels};
use segnext::train::trainer::data_seeds;
use segnext::train::{synth_dataset, train};
use segnext::{Error, Result};

/// Default scale set of the multi-scale flip test.
const MS_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

#[derive(Parser)]
#[command(name = "segnext", version, about = "Convolutional-attention semantic segmentation: build, analyze, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct the model and print a summary.
    Build { config: PathBuf },
    /// Per-layer parameter and FLOP report.
    Analyze {
        config: PathBuf,
        #[arg(long, default_value = "512x512", value_parser = parse_hw)]
        input_size: (usize, usize),
        /// Emit `layer<TAB>params<TAB>flops` lines instead of the table.
        #[arg(long)]
        tsv: bool,
    },
    /// Train on synthetic data.
    Train {
        config: PathBuf,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// mIoU of a checkpoint on the synthetic validation set.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ms_flip: bool,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Segment one PPM image into a PGM label map.
    Infer {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ms_flip: bool,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Forward latency (informational).
    Bench {
        config: PathBuf,
        #[arg(long, default_value = "512x512", value_parser = parse_hw)]
        input_size: (usize, usize),
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Decoder and attention ablations: cost at 512x512 plus a synthetic training run.
    Ablate {
        config: PathBuf,
        #[arg(long, value_parser = parse_decoder)]
        decoder: Option<DecoderKind>,
        #[arg(long)]
        with_stage1: bool,
        /// Replace multi-scale attention with a single large-kernel branch.
        #[arg(long)]
        no_msca: bool,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic validation samples as PPM images and PGM labels.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size `{s}`"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_decoder(s: &str) -> std::result::Result<DecoderKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn eval_settings(cfg: &RunConfig, ms_flip: bool, scales: Option<Vec<f64>>) -> (Vec<f64>, bool) {
    match (scales, ms_flip) {
        (Some(s), flip) => (s, flip || cfg.eval.flip),
        (None, true) => (MS_SCALES.to_vec(), true),
        (None, false) => (cfg.eval.scales.clone(), cfg.eval.flip),
    }
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn summary(cfg: &RunConfig, model: &SegModel<f32>) -> String {
    let m = &cfg.model;
    let mut s = format!(
        "model {}\nchannels {:?}\ndepths {:?}\nexpansions {:?}\ndecoder {} (dim {}, stage1 {}, rank {}, iters {})\nattention {}\nclasses {}\nparams {} ({:.3} M)\n",
        cfg.preset,
        m.channels(),
        m.depths(),
        m.stages.map(|x| x.expansion),
        m.decoder,
        m.decoder_dim,
        m.include_stage1,
        m.ham_rank,
        m.ham_iters,
        m.attention,
        m.num_classes,
        model.num_params(),
        model.num_params() as f64 / 1e6
    );
    for (i, (h, w)) in segnext::analysis::stage_sizes(cfg.data.size, cfg.data.size).iter().enumerate() {
        s += &format!("stage{} {}x{}x{} at input {}\n", i + 1, m.stages[i].channels, h, w, cfg.data.size);
    }
    s
}

fn load_model(path: &Path) -> Result<SegModel<f32>> {
    Ok(load_checkpoint(path)?.model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build { config } => {
            let cfg = RunConfig::load(&config)?;
            let model = SegModel::<f32>::build(&cfg.model, cfg.seed)?;
            print!("{}", summary(&cfg, &model));
        }
        Command::Analyze { config, input_size, tsv } => {
            let cfg = RunConfig::load(&config)?;
            let model = SegModel::<f32>::build(&cfg.model, cfg.seed)?;
            let report = cost_report(&model, input_size)?;
            print!("{}", if tsv { report.to_tsv() } else { report.to_table() });
        }
        Command::Train { config, out, iters, threads } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = iters {
                cfg.train.iters = n;
            }
            if let Some(t) = threads {
                cfg.train.threads = t;
            }
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = train(&cfg, Some(&dir))?;
            let last_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            println!("iters {} final loss {last_loss:.4} val mIoU {:.4}", outcome.log.len(), outcome.final_miou);
            for p in &outcome.checkpoints {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { config, checkpoint, ms_flip, scales } => {
            let cfg = RunConfig::load(&config)?;
            let model = load_model(&checkpoint)?;
            let (scales, flip) = eval_settings(&cfg, ms_flip, scales);
            let val = synth_dataset(data_seeds(cfg.seed).1, cfg.data.val_samples, cfg.data.size, model.cfg.num_classes)?;
            let r = with_threads(cfg.train.threads, || evaluate(&model, &val, &scales, flip))??;
            for (c, iou) in r.per_class.iter().enumerate() {
                match iou {
                    Some(v) => println!("class {c}\t{v:.4}"),
                    None => println!("class {c}\tabsent"),
                }
            }
            println!("mIoU\t{:.4}", r.mean);
        }
        Command::Infer { config, checkpoint, image, out, ms_flip, scales } => {
            let cfg = RunConfig::load(&config)?;
            let model = load_model(&checkpoint)?;
            let (scales, flip) = eval_settings(&cfg, ms_flip, scales);
            let img = read_ppm(&image)?;
            let labels = with_threads(cfg.train.threads, || predict_labels(&model, &img, &scales, flip))??;
            write_pgm(&out, &labels)?;
            println!("wrote {} ({}x{})", out.display(), labels.w, labels.h);
        }
        Command::Bench { config, input_size, reps, warmup, threads } => {
            let cfg = RunConfig::load(&config)?;
            let model = SegModel::<f32>::build(&cfg.model, cfg.seed)?;
            let stats = with_threads(threads.unwrap_or(cfg.train.threads), || bench_latency(&model, input_size, warmup, reps))??;
            println!(
                "input {}x{} reps {} median {:.2} ms p90 {:.2} ms threads {} optimized {}",
                input_size.0, input_size.1, reps, stats.median_ms, stats.p90_ms, stats.threads, stats.optimized
            );
        }
        Command::Ablate { config, decoder, with_stage1, no_msca, iters, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(d) = decoder {
                cfg.model.decoder = d;
            }
            cfg.model.include_stage1 |= with_stage1;
            if no_msca {
                cfg.model.attention = AttentionKind::LargeKernel;
            }
            if let Some(n) = iters {
                cfg.train.iters = n;
            }
            let model = SegModel::<f32>::build(&cfg.model, cfg.seed)?;
            let report = cost_report(&model, (512, 512))?;
            println!(
                "decoder {} stage1 {} attention {}: params {:.3} M, {:.3} GFLOPs at 512x512",
                cfg.model.decoder,
                cfg.model.include_stage1,
                cfg.model.attention,
                report.total_params() as f64 / 1e6,
                report.total_flops() as f64 / 1e9
            );
            let outcome = train(&cfg, out.as_deref())?;
            let last_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            println!("iters {} final loss {last_loss:.4} val mIoU {:.4}", outcome.log.len(), outcome.final_miou);
        }
        Command::Synth { config, out, count } => {
            let cfg = RunConfig::load(&config)?;
            let samples = synth_dataset(data_seeds(cfg.seed).1, count, cfg.data.size, cfg.model.num_classes)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, s) in samples.iter().enumerate() {
                write_ppm(&out.join(format!("{i:03}.ppm")), &s.image)?;
                write_pgm(&out.join(format!("{i:03}.pgm")), &s.label)?;
            }
            println!("wrote {count} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
