//! The training loop.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{apply_augment, sample_params};
use super::data::{IGNORE_INDEX, SegSample, synth_dataset};
use super::infer::evaluate;
use super::optim::{OptimState, poly_lr};
use crate::error::Error;
use crate::io::checkpoint::save_checkpoint;
use crate::io::config::RunConfig;
use crate::model::SegModel;
use crate::tensor::{Shape, Tape, Tensor};

/// Seeds of the training and validation sets, derived from the run seed.
pub fn data_seeds(seed: u64) -> (u64, u64) {
    (seed ^ 0x7472_6169_6e00_0000, seed ^ 0x7661_6c00_0000_0000)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub miou: Option<f64>,
}

impl LogRow {
    /// `iter<TAB>loss<TAB>lr[<TAB>miou]`.
    pub fn to_line(&self) -> String {
        match self.miou {
            Some(m) => format!("{}\t{}\t{}\t{}", self.iter, self.loss, self.lr, m),
            None => format!("{}\t{}\t{}", self.iter, self.loss, self.lr),
        }
    }
}

pub struct TrainOutcome {
    pub model: SegModel<f32>,
    pub optim: OptimState<f32>,
    pub log: Vec<LogRow>,
    /// Validation mIoU after the last step.
    pub final_miou: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Stacks augmented samples into one batch tensor and a flat label vector.
fn make_batch(samples: &[SegSample]) -> Result<(Tensor<f32>, Vec<u8>), Error> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    Ok((Tensor::stack(&images)?.reshape(Shape::new(samples.len(), 3, samples[0].label.h, samples[0].label.w))?, labels))
}

/// Trains from scratch on synthetic data. When `out_dir` is given, writes
/// `metrics.tsv`, periodic `ckpt_<iter>.sgnx` files and `final.sgnx` there.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| run(cfg, out_dir))
}

fn run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, Error> {
    let t = &cfg.train;
    let k = cfg.model.num_classes;
    let (train_seed, val_seed) = data_seeds(cfg.seed);
    let train_set = synth_dataset(train_seed, cfg.data.train_samples, cfg.data.size, k)?;
    let val_set = synth_dataset(val_seed, cfg.data.val_samples, cfg.data.size, k)?;

    let mut model = SegModel::<f32>::build(&cfg.model, cfg.seed)?;
    let mut optim = OptimState::new(&model.store, t.adamw());
    let lr_scale: Vec<f64> = model
        .store
        .params()
        .iter()
        .map(|p| if p.name.starts_with("decoder.") { t.head_lr_mult } else { 1.0 })
        .collect();
    let schedule = t.schedule();

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            Some((BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(t.iters);
    let mut checkpoints = Vec::new();
    let mut last_miou = None;

    for i in 0..t.iters {
        let lr = poly_lr(i, &schedule)?;
        // Draw all randomness sequentially, then augment in parallel.
        let draws: Vec<_> = (0..t.batch)
            .map(|_| {
                let idx = rng.random_range(0..train_set.len());
                let s = &train_set[idx];
                (idx, sample_params(&mut rng, s.label.h, s.label.w, t.crop))
            })
            .collect();
        let batch: Vec<SegSample> = draws.par_iter().map(|(idx, p)| apply_augment(&train_set[*idx], p, t.crop)).collect();
        let (images, labels) = make_batch(&batch)?;

        let mut tape = Tape::new();
        tape.seed_rng(cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let x = tape.constant(images);
        let logits = model.forward(&mut tape, &x, true)?;
        let loss = match tape.cross_entropy(&logits, &labels, IGNORE_INDEX) {
            Ok(l) => l,
            // Every pixel of the batch ignored: skip the step.
            Err(_) if labels.iter().all(|&l| l == IGNORE_INDEX) => continue,
            Err(e) => return Err(e.into()),
        };
        let loss_value = loss.value().data()[0] as f64;
        let diverged = |checkpoints: &Vec<PathBuf>| Error::Diverged { iter: i, loss: loss_value, checkpoint: checkpoints.last().cloned() };
        if !loss_value.is_finite() {
            return Err(diverged(&checkpoints));
        }
        let grads = tape.backward(&loss)?;
        let stats = tape.take_stats();
        drop(tape);
        match optim.step(&mut model.store, &grads, lr, Some(&lr_scale)) {
            Err(Error::NonFiniteGradient(_)) => return Err(diverged(&checkpoints)),
            other => other?,
        }
        model.store.apply_stats(stats);

        let done = i + 1;
        let miou = if (t.eval_interval > 0 && done % t.eval_interval == 0) || done == t.iters {
            let m = evaluate(&model, &val_set, &cfg.eval.scales, cfg.eval.flip)?.mean;
            last_miou = Some(m);
            Some(m)
        } else {
            None
        };
        let row = LogRow { iter: i, loss: loss_value, lr, miou };
        if let Some((w, path)) = metrics.as_mut() {
            writeln!(w, "{}", row.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(row);
        if let Some(dir) = out_dir {
            if t.checkpoint_interval > 0 && done % t.checkpoint_interval == 0 {
                let path = dir.join(format!("ckpt_{done}.sgnx"));
                save_checkpoint(&path, &model, cfg, Some(&optim))?;
                checkpoints.push(path);
            }
        }
    }

    if let Some((mut w, path)) = metrics {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    let final_miou = match last_miou {
        Some(m) => m,
        None => evaluate(&model, &val_set, &cfg.eval.scales, cfg.eval.flip)?.mean,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("final.sgnx");
        save_checkpoint(&path, &model, cfg, Some(&optim))?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { model, optim, log, final_miou, checkpoints })
}
