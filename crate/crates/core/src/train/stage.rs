//! Stage-one and stage-two optimization loops.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Var};
use serde::{Deserialize, Serialize};

use super::adam::{linear_lr, Adam};
use super::batch::{sample_batch, step_rng, Augment, Batch, LoadedSplit};
use super::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, LossConfig, ModelConfig};
use crate::data::{DatasetManifest, Sample, Split};
use crate::error::{config_err, Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{Modot, SSR_PREFIX, STAGE1_PREFIX};
use crate::params::ParamStore;

pub const LOG_FILE: &str = "train_log.jsonl";

pub fn stage_checkpoint_path(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

fn periodic_checkpoint_path(out_dir: &Path, stage: u8, step: usize) -> PathBuf {
    out_dir.join(format!("stage{stage}_step{step:06}.ckpt"))
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final checkpoint (`stage{1,2}.ckpt` under the output directory).
    pub checkpoint: PathBuf,
    /// Total loss of every step run by this call, in order.
    pub losses: Vec<f64>,
    pub last: LossBreakdown,
    pub first_step: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from a checkpoint of the same stage.
    pub resume: Option<PathBuf>,
    /// Stage-one checkpoint for stage two; overrides the config entry.
    pub stage1_checkpoint: Option<PathBuf>,
}

/// Builds the network with parameters drawn from `seed`, except those
/// already present in `store`.
pub fn build_model(store: &ParamStore, cfg: &ModelConfig) -> Result<Modot> {
    Modot::new(store.var_builder(DType::F32, &Device::Cpu), cfg)
}

/// Model and parameters restored from a checkpoint.
pub fn restore_model(ck: &Checkpoint) -> Result<(ParamStore, Modot)> {
    let store = ParamStore::new(ck.config.seed);
    ck.restore_into(&store, "")?;
    let model = build_model(&store, &ck.config.model)?;
    Ok((store, model))
}

struct Logger {
    file: std::fs::File,
    path: PathBuf,
}

impl Logger {
    fn open(out_dir: &Path, truncate: bool) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(LOG_FILE);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn write(&mut self, entry: &StepLog) -> Result<()> {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn non_finite(stage: u8, step: usize, last_good: &Option<PathBuf>) -> Error {
    let at = match last_good {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint written yet".to_string(),
    };
    Error::Numeric(format!("non-finite loss at stage {stage} step {step}; {at}"))
}

fn train_pool(manifest: &DatasetManifest) -> Result<LoadedSplit> {
    let train = LoadedSplit::load(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::io(&manifest.root, "manifest has no training samples"));
    }
    Ok(train)
}

struct Loop<'a> {
    stage: u8,
    cfg: &'a ExperimentConfig,
    store: &'a ParamStore,
    vars: Vec<(String, Var)>,
    opt: Adam,
    total_steps: usize,
    start: usize,
    aug: Augment,
}

impl Loop<'_> {
    /// Runs the remaining steps. `loss_of` maps a batch to the differentiable
    /// loss terms; `after_save` runs after each checkpoint.
    fn run(
        mut self,
        pool: &[Sample],
        mut loss_of: impl FnMut(&Batch) -> Result<crate::losses::LossTerms>,
        mut after_save: impl FnMut(&ParamStore) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let out_dir = &self.cfg.train.out_dir;
        let mut logger = Logger::open(out_dir, self.start == 0)?;
        let mut last_good: Option<PathBuf> = None;
        let mut losses = Vec::with_capacity(self.total_steps - self.start);
        let mut last = None;
        let t0 = Instant::now();
        let device = Device::Cpu;
        for step in self.start..self.total_steps {
            let lr = linear_lr(self.cfg.train.lr, self.cfg.train.lr_end, step, self.total_steps);
            let mut rng = step_rng(self.cfg.seed, self.stage, step);
            let samples = sample_batch(pool, self.cfg.train.batch_size, self.aug, &mut rng)?;
            let batch = Batch::from_samples(&samples, &device)?;
            let terms = loss_of(&batch)?;
            let breakdown = terms.breakdown()?;
            if !breakdown.total.is_finite() {
                return Err(non_finite(self.stage, step, &last_good));
            }
            let grads = terms.total.backward()?;
            self.opt.step(&self.vars, &grads, lr)?;
            losses.push(breakdown.total);
            let done = step + 1;
            let entry = StepLog {
                stage: self.stage,
                step: done,
                lr,
                loss: breakdown.clone(),
            };
            logger.write(&entry)?;
            if self.cfg.train.log_every > 0 && (done % self.cfg.train.log_every == 0 || done == self.total_steps) {
                log::info!(
                    "stage {} step {done}/{} loss {:.4} (depth {:.4} ob {:.4} contrast {:.4}) lr {lr:.2e} {:.1}s",
                    self.stage,
                    self.total_steps,
                    breakdown.total,
                    breakdown.l_d,
                    breakdown.l_ob,
                    breakdown.l_c,
                    t0.elapsed().as_secs_f64()
                );
            }
            let every = self.cfg.train.checkpoint_every;
            if every > 0 && done % every == 0 && done < self.total_steps {
                after_save(self.store)?;
                let path = periodic_checkpoint_path(out_dir, self.stage, done);
                Checkpoint::capture(self.store, self.stage, done, self.cfg, Some(&self.opt))?.save(&path)?;
                last_good = Some(path);
            }
            last = Some(breakdown);
        }
        after_save(self.store)?;
        let path = stage_checkpoint_path(out_dir, self.stage);
        Checkpoint::capture(self.store, self.stage, self.total_steps, self.cfg, Some(&self.opt))?.save(&path)?;
        let last = last.ok_or_else(|| config_err!("nothing to train: already at step {}", self.total_steps))?;
        Ok(TrainOutcome {
            checkpoint: path,
            losses,
            last,
            first_step: self.start,
        })
    }
}

fn resume_state(path: &Path, stage: u8, store: &ParamStore) -> Result<(usize, Adam, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if ck.stage != stage {
        return Err(config_err!(
            "{} is a stage-{} checkpoint, cannot resume stage {stage}",
            path.display(),
            ck.stage
        ));
    }
    ck.restore_into(store, "")?;
    let opt = ck.optimizer.clone().unwrap_or_default();
    Ok((ck.step, opt, ck))
}

/// End-to-end training of the stage-one network on random crops.
pub fn train_stage1(cfg: &ExperimentConfig, manifest: &DatasetManifest, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = train_pool(manifest)?;
    let store = ParamStore::new(cfg.seed);
    let (start, opt) = match &opts.resume {
        Some(p) => {
            let (step, opt, _) = resume_state(p, 1, &store)?;
            (step, opt)
        }
        None => (0, Adam::default()),
    };
    let model = build_model(&store, &cfg.model)?;
    let lcfg = cfg.loss.clone();
    let lp = Loop {
        stage: 1,
        cfg,
        store: &store,
        vars: store.vars_with_prefix(STAGE1_PREFIX),
        opt,
        total_steps: cfg.train.stage1_steps,
        start,
        aug: Augment {
            crop: Some(cfg.train.crop_size),
            hflip: cfg.train.hflip,
            color_jitter: cfg.train.color_jitter,
        },
    };
    lp.run(
        &pool.samples,
        |b| {
            let out = model.stage1_forward(&b.image)?;
            total_loss(&out.depth, &out.ob_logits_all(), &b.depth, &b.ob, &b.valid, &lcfg)
        },
        |_| Ok(()),
    )
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.use_ssr = true;
    b.use_ssr = true;
    a == b
}

/// Trains only the refinement stage on full-resolution images; every
/// `stage1.*` parameter must stay bit-identical.
pub fn train_stage2(cfg: &ExperimentConfig, manifest: &DatasetManifest, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.model.use_ssr {
        return Err(config_err!("stage two needs model.use_ssr = true"));
    }
    let pool = train_pool(manifest)?;
    let store = ParamStore::new(cfg.seed);
    let (start, opt, reference) = match &opts.resume {
        Some(p) => {
            let (step, opt, ck) = resume_state(p, 2, &store)?;
            (step, opt, ck)
        }
        None => {
            let path = opts
                .stage1_checkpoint
                .clone()
                .or_else(|| cfg.train.stage1_checkpoint.clone())
                .unwrap_or_else(|| stage_checkpoint_path(&cfg.train.out_dir, 1));
            let ck = Checkpoint::load(&path)?;
            if !ck.has_group(STAGE1_PREFIX) {
                return Err(Error::io(&path, "checkpoint holds no stage-one parameters"));
            }
            ck.restore_into(&store, STAGE1_PREFIX)?;
            (0, Adam::default(), ck)
        }
    };
    if !same_architecture(&reference.config.model, &cfg.model) {
        return Err(config_err!("model config differs from the one stage one was trained with"));
    }
    let frozen = reference
        .checksums
        .get(STAGE1_PREFIX)
        .cloned()
        .ok_or_else(|| config_err!("checkpoint lacks a stage-one checksum"))?;
    let model = build_model(&store, &cfg.model)?;
    if store.checksum(STAGE1_PREFIX)? != frozen {
        return Err(Error::Freeze("stage-one parameters differ from the checkpoint".into()));
    }
    let lcfg = cfg.loss.clone();
    let lp = Loop {
        stage: 2,
        cfg,
        store: &store,
        vars: store.vars_with_prefix(SSR_PREFIX),
        opt,
        total_steps: cfg.train.stage2_steps,
        start,
        aug: Augment {
            crop: None,
            hflip: cfg.train.hflip,
            color_jitter: cfg.train.color_jitter,
        },
    };
    lp.run(
        &pool.samples,
        |b| {
            let s1 = model.stage1_forward(&b.image)?;
            let s2 = model.ssr_forward(&b.image, &s1)?;
            total_loss(&s2.depth, &[s2.ob_logit], &b.depth, &b.ob, &b.valid, &lcfg)
        },
        |store| {
            if store.checksum(STAGE1_PREFIX)? != frozen {
                return Err(Error::Freeze("stage-one parameters changed during stage two".into()));
            }
            Ok(())
        },
    )
}

/// Mean loss breakdown of the final outputs of `stage` over `samples`, at
/// full resolution, with only the final boundary map supervised.
pub fn dataset_loss(model: &Modot, samples: &[Sample], stage: u8, cfg: &LossConfig, batch_size: usize) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(config_err!("no samples to evaluate the loss on"));
    }
    let mut acc: Option<LossBreakdown> = None;
    let mut n = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = Batch::from_samples(chunk, &Device::Cpu)?;
        let s1 = model.stage1_forward(&b.image)?;
        let terms = match stage {
            1 => total_loss(&s1.depth, std::slice::from_ref(&s1.ob_logit), &b.depth, &b.ob, &b.valid, cfg)?,
            2 => {
                let s2 = model.ssr_forward(&b.image, &s1)?;
                total_loss(&s2.depth, &[s2.ob_logit], &b.depth, &b.ob, &b.valid, cfg)?
            }
            s => return Err(config_err!("unknown stage {s}")),
        };
        let w = chunk.len() as f64;
        let x = terms.breakdown()?;
        acc = Some(match acc {
            None => LossBreakdown {
                l_d: x.l_d * w,
                l_ob: x.l_ob * w,
                l_c: x.l_c * w,
                total: x.total * w,
                ob_terms: x.ob_terms.iter().map(|v| v * w).collect(),
            },
            Some(a) => LossBreakdown {
                l_d: a.l_d + x.l_d * w,
                l_ob: a.l_ob + x.l_ob * w,
                l_c: a.l_c + x.l_c * w,
                total: a.total + x.total * w,
                ob_terms: a.ob_terms.iter().zip(&x.ob_terms).map(|(p, v)| p + v * w).collect(),
            },
        });
        n += w;
    }
    let a = acc.expect("at least one chunk");
    Ok(LossBreakdown {
        l_d: a.l_d / n,
        l_ob: a.l_ob / n,
        l_c: a.l_c / n,
        total: a.total / n,
        ob_terms: a.ob_terms.iter().map(|v| v / n).collect(),
    })
}
