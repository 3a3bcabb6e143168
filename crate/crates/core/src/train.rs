//! Joint-diffusion training: AdamW with linear warmup, gradient
//! accumulation, metrics logging, checkpointing and deterministic resume.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::diffusion::{noise_mse, q_sample_state, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};
use crate::real::Real;
use crate::state::{gaussian, ActivationMode, MultimodalState};
use crate::synth::SynthSample;
use crate::text::{EmbeddingTable, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Examples per micro-batch.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale optimizer recipe.
    pub fn full() -> Self {
        Self {
            batch_size: 64,
            grad_accum_steps: 4,
            total_steps: 4_000_000,
            lr: 2e-4,
            weight_decay: 0.03,
            adam_betas: (0.9, 0.9),
            adam_eps: 1e-8,
            warmup_steps: 5000,
            seed: 0,
            eval_every: 10_000,
            checkpoint_every: 10_000,
        }
    }

    /// Same recipe at desk scale.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            grad_accum_steps: 1,
            total_steps: 30_000,
            lr: 2e-4,
            weight_decay: 0.03,
            adam_betas: (0.9, 0.9),
            adam_eps: 1e-8,
            warmup_steps: 500,
            seed: 0,
            eval_every: 2500,
            checkpoint_every: 2500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("total_steps", self.total_steps),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let (b1, b2) = self.adam_betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    /// Examples consumed per optimizer update.
    pub fn logical_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// Learning rate for update number `s` (1-based): `lr·s/warmup` while
    /// `s < warmup_steps`, then `lr`.
    pub fn lr_at(&self, s: usize) -> f64 {
        if s < self.warmup_steps {
            self.lr * s as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F: Real> {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<F>> = store
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.raw_dim()))
            .collect();
        Self {
            betas,
            eps,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: f64) -> Result<()> {
        if grads.values.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let (ob1, ob2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let (fbc1, fbc2) = (F::of(bc1), F::of(bc2));
        let decay = F::of(1.0 - lr * self.weight_decay);
        let (flr, feps) = (F::of(lr), F::of(self.eps));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = &grads.values[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = fb1 * *m + ob1 * g;
                    *v = fb2 * *v + ob2 * g * g;
                    let mh = *m / fbc1;
                    let vh = *v / fbc2;
                    *w = *w * decay - flr * mh / (vh.sqrt() + feps);
                });
        }
        Ok(())
    }
}

/// Training set with captions already mapped to model-width embeddings.
#[derive(Debug, Clone)]
pub struct TrainData<F: Real> {
    /// `(n, channels, hw, hw)`.
    pub images: Array4<F>,
    /// `(n, text_len, embed_dim)`.
    pub texts: Array3<F>,
}

impl<F: Real> TrainData<F> {
    pub fn from_samples(
        samples: &[SynthSample],
        vocab: &Vocabulary,
        codec: &EmbeddingTable,
        text_len: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let (c, h, w) = samples[0].image.dim();
        let d = codec.embed_dim();
        let mut images = Array4::<F>::zeros((samples.len(), c, h, w));
        let mut texts = Array3::<F>::zeros((samples.len(), text_len, d));
        for (i, s) in samples.iter().enumerate() {
            if s.image.dim() != (c, h, w) {
                return Err(Error::Shape("images differ in shape".into()));
            }
            images
                .index_axis_mut(Axis(0), i)
                .assign(&s.image.mapv(|x| F::of(x as f64)));
            texts
                .index_axis_mut(Axis(0), i)
                .assign(&codec.encode::<F>(vocab, &s.caption, text_len)?);
        }
        Ok(Self { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> MultimodalState<F> {
        MultimodalState::joint(
            self.images.select(Axis(0), idx),
            self.texts.select(Axis(0), idx),
        )
    }
}

/// One logical batch: clean data, per-example timesteps and noise.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    pub indices: Vec<usize>,
    pub x0: MultimodalState<F>,
    pub t: Vec<usize>,
    pub eps: MultimodalState<F>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Examples `range` of the batch.
    pub fn slice(&self, lo: usize, hi: usize) -> Batch<F> {
        let cut = |s: &MultimodalState<F>| MultimodalState {
            image: s.image.as_ref().map(|a| a.slice(s![lo..hi, .., .., ..]).to_owned()),
            text: s.text.as_ref().map(|a| a.slice(s![lo..hi, .., ..]).to_owned()),
        };
        Batch {
            indices: self.indices[lo..hi].to_vec(),
            x0: cut(&self.x0),
            t: self.t[lo..hi].to_vec(),
            eps: cut(&self.eps),
        }
    }
}

/// Batch for logical step `step`: a pure function of `(seed, step)`.
/// Indices, then timesteps, then per-example noise (image before text).
pub fn draw_batch<F: Real>(
    data: &TrainData<F>,
    n: usize,
    steps: usize,
    seed: u64,
    step: u64,
) -> Batch<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=steps)).collect();
    let x0 = data.gather(&indices);
    let img_dim = data.images.raw_dim();
    let txt_dim = data.texts.raw_dim();
    let mut ei = Array4::<F>::zeros((n, img_dim[1], img_dim[2], img_dim[3]));
    let mut et = Array3::<F>::zeros((n, txt_dim[1], txt_dim[2]));
    for b in 0..n {
        let gi: Array3<F> = gaussian((img_dim[1], img_dim[2], img_dim[3]), &mut rng);
        let gt: Array2<F> = gaussian((txt_dim[1], txt_dim[2]), &mut rng);
        ei.index_axis_mut(Axis(0), b).assign(&gi);
        et.index_axis_mut(Axis(0), b).assign(&gt);
    }
    Batch {
        indices,
        x0,
        t,
        eps: MultimodalState::joint(ei, et),
    }
}

/// Loss and parameter gradient of the joint objective on one batch. The
/// backbone always runs jointly on both full modalities.
pub fn loss_and_grads<F: Real>(
    model: &Backbone<F>,
    batch: &Batch<F>,
    sched: &NoiseSchedule,
) -> Result<(F, Grads<F>)> {
    if batch.x0.mode()? != ActivationMode::Joint {
        return Err(Error::Mode("training batches must carry both modalities".into()));
    }
    let x_t = q_sample_state(&batch.x0, &batch.t, &batch.eps, sched)?;
    let (pred, cache) = model.forward_train(&x_t, &batch.t, ActivationMode::Joint)?;
    let loss = noise_mse(&pred, &batch.eps)?;
    let grads = model.backward(&cache, &loss.grad)?;
    Ok((loss.value, grads))
}

/// Loss without gradients.
pub fn batch_loss<F: Real>(model: &Backbone<F>, batch: &Batch<F>, sched: &NoiseSchedule) -> Result<F> {
    let x_t = q_sample_state(&batch.x0, &batch.t, &batch.eps, sched)?;
    let pred = model.forward(&x_t, &batch.t, ActivationMode::Joint)?;
    Ok(noise_mse(&pred, &batch.eps)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Updates completed after this step.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_s: f64,
}

/// Line-oriented TSV log: `step  loss  lr  wall_s`.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step\tloss\tlr\twall_s";

    /// Opens `path` for appending, writing the header when the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", Self::HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}\t{:.6e}\t{:.6e}\t{:.3}", r.step, r.loss, r.lr, r.wall_s)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a metrics log back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("{}: malformed line {}", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(StepRecord {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
            wall_s: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Single-writer training state.
#[derive(Debug, Clone)]
pub struct Trainer<F: Real> {
    pub model: Backbone<F>,
    pub opt: AdamW<F>,
    pub cfg: TrainConfig,
    pub schedule: ScheduleConfig,
    sched: NoiseSchedule,
    step: usize,
    started: Option<Instant>,
    elapsed_before: f64,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: Backbone<F>, schedule: ScheduleConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = schedule.build()?;
        let opt = AdamW::new(model.params(), cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
        Ok(Self {
            model,
            opt,
            cfg,
            schedule,
            sched,
            step: 0,
            started: None,
            elapsed_before: 0.0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn noise_schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// The batch the next update will consume.
    pub fn next_batch(&self, data: &TrainData<F>) -> Batch<F> {
        draw_batch(
            data,
            self.cfg.logical_batch(),
            self.sched.steps(),
            self.cfg.seed,
            self.step as u64,
        )
    }

    /// One optimizer update over `grad_accum_steps` micro-batches.
    pub fn train_step(&mut self, data: &TrainData<F>) -> Result<StepRecord> {
        let started = *self.started.get_or_insert_with(Instant::now);
        let batch = self.next_batch(data);
        let (bs, k) = (self.cfg.batch_size, self.cfg.grad_accum_steps);
        let mut total = Grads::zeros_like(self.model.params());
        let mut loss_sum = 0.0;
        for m in 0..k {
            let micro = batch.slice(m * bs, (m + 1) * bs);
            let where_ = |what: &str| {
                Error::NonFinite(format!(
                    "{what} at step {}, micro-batch {m}, t = {:?}",
                    self.step + 1,
                    micro.t
                ))
            };
            let (loss, grads) = match loss_and_grads(&self.model, &micro, &self.sched) {
                Err(Error::NonFinite(what)) => return Err(where_(&what)),
                r => r?,
            };
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || !grads.all_finite() {
                return Err(where_(&format!("loss {loss}")));
            }
            loss_sum += loss;
            total.add_assign(&grads);
        }
        if k > 1 {
            total.scale(F::of(1.0 / k as f64));
        }
        let s = self.step + 1;
        let lr = self.cfg.lr_at(s);
        self.opt.update(self.model.params_mut(), &total, lr)?;
        self.step = s;
        Ok(StepRecord {
            step: s,
            loss: loss_sum / k as f64,
            lr,
            wall_s: self.elapsed_before + started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `until` updates are done (capped at `total_steps`),
    /// logging every step and checkpointing every `checkpoint_every` steps
    /// when `out_dir` is given. `on_step` may stop early by returning
    /// `Ok(false)`.
    pub fn fit(
        &mut self,
        data: &TrainData<F>,
        until: usize,
        out: Option<&RunArtifacts>,
        mut on_step: impl FnMut(&StepRecord, &Self) -> Result<bool>,
    ) -> Result<Vec<StepRecord>> {
        let until = until.min(self.cfg.total_steps);
        let mut log = match out {
            Some(o) => Some(MetricsLog::open(&o.metrics_path())?),
            None => None,
        };
        let mut records = Vec::new();
        while self.step < until {
            let r = self.train_step(data)?;
            if let Some(l) = log.as_mut() {
                l.record(&r)?;
            }
            records.push(r);
            if let Some(o) = out {
                if self.step % self.cfg.checkpoint_every == 0 || self.step == until {
                    self.save(&o.checkpoint_path(self.step), o.vocab.as_ref(), o.codec.as_ref())?;
                    self.save(&o.latest_path(), o.vocab.as_ref(), o.codec.as_ref())?;
                }
            }
            if !on_step(&r, self)? {
                break;
            }
        }
        Ok(records)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            backbone: self.model.config().clone(),
            schedule: self.schedule,
            train: Some(self.cfg),
        }
    }

    /// Atomic checkpoint with optimizer state.
    pub fn save(
        &self,
        path: &Path,
        vocab: Option<&Vocabulary>,
        codec: Option<&EmbeddingTable>,
    ) -> Result<()> {
        checkpoint::save(
            path,
            &self.meta(),
            self.step as u64,
            &self.model,
            Some(&self.opt),
            vocab,
            codec,
        )
    }

    /// Restores model, optimizer and step counter. `cfg` overrides the stored
    /// training config (e.g. to extend `total_steps`); its seed should match
    /// for a bit-reproducible continuation.
    pub fn resume(path: &Path, cfg: Option<TrainConfig>) -> Result<(Self, Checkpoint<F>)> {
        let ck = checkpoint::load::<F>(path)?;
        let cfg = cfg
            .or(ck.meta.train)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training config".into()))?;
        let mut tr = Trainer::new(ck.model.clone(), ck.meta.schedule, cfg)?;
        if let Some(opt) = &ck.optimizer {
            tr.opt = opt.clone();
            tr.opt.weight_decay = cfg.weight_decay;
        }
        tr.step = ck.step as usize;
        Ok((tr, ck))
    }

    /// Checks a resumed run's data against the stored vocabulary.
    pub fn check_vocab(ck: &Checkpoint<F>, vocab: &Vocabulary) -> Result<()> {
        let expected = ck.meta.backbone.vocab_size;
        if vocab.len() != expected {
            return Err(Error::Shape(format!(
                "vocabulary has {} tokens, checkpoint expects {expected}",
                vocab.len()
            )));
        }
        Ok(())
    }
}

/// Where a training run writes its outputs.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub vocab: Option<Vocabulary>,
    pub codec: Option<EmbeddingTable>,
}

impl RunArtifacts {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:07}.ckpt"))
    }

    pub fn latest_path(&self) -> PathBuf {
        self.dir.join("latest.ckpt")
    }
}
