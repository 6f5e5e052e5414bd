use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{greedy_extend, sample_input, Generation};
use super::{snapshot_teacher, EngineConfig, ReplayError, Result, Strategy, TeacherSnapshot};
use crate::data::{Output, Provenance, Sample, TaskDataset, TaskKind, Vocab};
use crate::losses::{
    beta_at, cvae_elbo_loss, kd_lm_loss, kd_rec_loss, lm_loss, reconstruction_nll, replay_loss, softmax_rows,
};
use crate::metrics::{intent_accuracy, slot_macro_f1};
use crate::model::{kl_diag_gauss_var, reparameterize, GaussianDiag, Injection, Model, PoolQuery};
use crate::prompting::{parse_generated, render_with, serialize_output, PromptOptions, Reject, RenderedPrompt, TaskSpec};
use crate::tensor::{clip_grad_norm, AdamState, Graph, Var};
use crate::Scalar;

/// One training example tagged with the index of its task in the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub task: usize,
    pub sample: Sample,
}

/// How often each optional code path ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub cvae_calls: usize,
    pub kd_calls: usize,
    pub generation_calls: usize,
    pub label_calls: usize,
    pub teacher_snapshots: usize,
    pub train_steps: usize,
}

/// Mean per-sample losses of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: String,
    pub epoch: usize,
    pub step: usize,
    pub beta: f64,
    pub loss: f64,
    pub lm: f64,
    pub rec: f64,
    pub kl: f64,
    pub kd: f64,
    pub n_real: usize,
    pub n_pseudo: usize,
}

/// One generation attempt, accepted or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    /// The task about to be learned when this sample was generated.
    pub replay_for: String,
    pub task: String,
    pub attempt: usize,
    pub accepted: bool,
    pub reason: Option<Reject>,
    pub utterance: Option<String>,
    pub output: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskReplayStats {
    pub task: String,
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
    pub shortfall: usize,
    pub rejects: BTreeMap<Reject, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct MixReport {
    pub items: Vec<TrainItem>,
    pub stats: Vec<TaskReplayStats>,
    pub records: Vec<PseudoRecord>,
}

struct LossParts {
    total: Var,
    lm: Var,
    rec: Option<Var>,
    kl: Option<Var>,
    kd: Option<Var>,
}

/// Model, optimizer and replay state for one pass over a task stream.
pub struct Learner<S> {
    model: Model<S>,
    vocab: Vocab,
    specs: Vec<TaskSpec>,
    config: EngineConfig,
    rng: ChaCha8Rng,
    memory: Vec<Vec<Sample>>,
    counters: Counters,
}

/// Prompt templates a strategy uses for each task.
pub fn task_specs(strategy: Strategy, tasks: &[TaskDataset]) -> Vec<TaskSpec> {
    tasks
        .iter()
        .map(|d| match strategy {
            Strategy::LamolToken => TaskSpec::special_token(&d.name, d.kind),
            _ => TaskSpec::new(&d.name, d.kind),
        })
        .collect()
}

impl<S: Scalar> Learner<S> {
    pub fn new(model: Model<S>, vocab: Vocab, specs: Vec<TaskSpec>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config().vocab_size {
            return Err(ReplayError::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        for s in &specs {
            s.validate()?;
        }
        let rng = ChaCha8Rng::seed_from_u64(config.replay.seed);
        Ok(Self {
            memory: vec![Vec::new(); specs.len()],
            model,
            vocab,
            specs,
            config,
            rng,
            counters: Counters::default(),
        })
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<S> {
        &mut self.model
    }

    pub fn into_model(self) -> Model<S> {
        self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn memory(&self, task: usize) -> &[Sample] {
        &self.memory[task]
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            no_task_id: self.config.replay.no_task_id,
            max_len: self.model.config().context_len,
        }
    }

    fn spec(&self, task: usize) -> Result<&TaskSpec> {
        self.specs.get(task).ok_or(ReplayError::UnknownTask(task))
    }

    pub fn snapshot_teacher(&mut self) -> TeacherSnapshot<S> {
        self.counters.teacher_snapshots += 1;
        snapshot_teacher(&self.model)
    }

    pub fn render(&self, task: usize, sample: &Sample) -> Result<RenderedPrompt> {
        let spec = self.spec(task)?;
        Ok(render_with(
            &self.vocab,
            spec,
            &sample.utterance,
            Some(&sample.output),
            self.prompt_options(),
        )?)
    }

    /// `[BOS] ⊕ prefix` and the first postfix token for `task`.
    fn head_and_stop(&self, task: usize) -> Result<(Vec<usize>, usize)> {
        let spec = self.spec(task)?;
        let mut head = vec![crate::data::BOS];
        head.extend(self.vocab.encode(&spec.prefix_words(self.config.replay.no_task_id)));
        let stop = self.vocab.encode(&spec.postfix_words())[0];
        Ok((head, stop))
    }

    /// Step one of pseudo-sample generation: samples `z` from the task's
    /// prior (when the latent is in use) and decodes an input with top-k.
    pub fn generate_pseudo_input(&mut self, task: usize) -> Result<Generation> {
        let top_k = self.config.replay.top_k;
        let mut rng = self.rng.clone();
        let out = self.generate_pseudo_input_with(task, top_k, &mut rng);
        self.rng = rng;
        out
    }

    /// `p(z | t)` from the task's generation prompt.
    pub fn task_prior(&self, task: usize) -> Result<GaussianDiag<S>> {
        let (head, _) = self.head_and_stop(task)?;
        let mut g = Graph::new();
        Ok(self.model.prior_for_prefix(&mut g, &head)?.values(&g))
    }

    pub fn generate_pseudo_input_with<R: Rng>(
        &mut self,
        task: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Result<Generation> {
        self.counters.generation_calls += 1;
        let (head, stop) = self.head_and_stop(task)?;
        let z = if self.config.replay.uses_latent() {
            let prior = self.task_prior(task)?;
            let eps: Vec<S> = self.model.sample_eps(rng);
            Some(prior.sample_with(&eps))
        } else {
            None
        };
        sample_input(
            &self.model,
            &head,
            stop,
            z.as_deref(),
            top_k,
            self.config.replay.max_decode_len,
            rng,
        )
    }

    /// As [`Self::generate_pseudo_input_with`] with an explicit latent (or none).
    pub fn decode_with_latent<R: Rng>(
        &self,
        task: usize,
        z: Option<&[S]>,
        top_k: usize,
        rng: &mut R,
    ) -> Result<Generation> {
        let (head, stop) = self.head_and_stop(task)?;
        sample_input(&self.model, &head, stop, z, top_k, self.config.replay.max_decode_len, rng)
    }

    /// Step two: greedily labels `x` with the solver and parses the result.
    pub fn label_pseudo_input(&mut self, task: usize, x: &[String]) -> Result<std::result::Result<Sample, Reject>> {
        self.counters.label_calls += 1;
        self.solve(task, x)
    }

    fn solve(&self, task: usize, x: &[String]) -> Result<std::result::Result<Sample, Reject>> {
        let spec = self.spec(task)?;
        let prompt = match render_with(&self.vocab, spec, x, None, self.prompt_options()) {
            Ok(p) => p,
            Err(crate::prompting::PromptError::EmptyInput) => return Ok(Err(Reject::EmptyInput)),
            Err(crate::prompting::PromptError::TooLong { .. }) => return Ok(Err(Reject::TooLong)),
            Err(e) => return Err(e.into()),
        };
        let seq = greedy_extend(&self.model, prompt.ids, self.config.replay.max_label_len)?;
        Ok(parse_generated(&self.vocab, spec, &seq, self.config.replay.no_task_id))
    }

    /// The solver's parsed output for a real input, or `None` if unparseable.
    pub fn predict(&self, task: usize, utterance: &[String]) -> Result<Option<Output>> {
        Ok(self.solve(task, utterance)?.ok().map(|s| s.output))
    }

    /// Accuracy (intent tasks) or slot macro-F1 on `samples`, in percent.
    pub fn evaluate(&self, task: usize, samples: &[Sample]) -> Result<f64> {
        let kind = self.spec(task)?.kind;
        let preds = samples
            .iter()
            .map(|s| self.predict(task, &s.utterance))
            .collect::<Result<Vec<_>>>()?;
        let score = match kind {
            TaskKind::Intent => {
                let golds: Vec<String> = samples.iter().map(|s| output_text(&s.output)).collect();
                let p: Vec<String> = preds
                    .iter()
                    .map(|p| match p {
                        Some(o @ Output::Intent(_)) => output_text(o),
                        _ => String::new(),
                    })
                    .collect();
                intent_accuracy(&p, &golds)?
            }
            TaskKind::Slot => {
                let golds: Vec<_> = samples
                    .iter()
                    .map(|s| match &s.output {
                        Output::Slots(v) => v.clone(),
                        Output::Intent(_) => Vec::new(),
                    })
                    .collect();
                let p: Vec<_> = preds
                    .into_iter()
                    .map(|p| match p {
                        Some(Output::Slots(v)) => v,
                        _ => Vec::new(),
                    })
                    .collect();
                slot_macro_f1(&p, &golds)?
            }
        };
        Ok(score)
    }

    /// Stores `floor(er_fraction · |train|)` random real samples of `task`.
    pub fn remember(&mut self, task: usize, train: &[Sample]) -> Result<()> {
        self.spec(task)?;
        let keep = (self.config.replay.er_fraction * train.len() as f64).floor() as usize;
        let picked = index::sample(&mut self.rng, train.len(), keep.min(train.len()));
        let mut idx = picked.into_vec();
        idx.sort_unstable();
        self.memory[task] = idx.into_iter().map(|i| train[i].clone()).collect();
        Ok(())
    }

    /// Replay samples for the previous tasks `0..task` before learning
    /// `task`, which has `n_new` training samples.
    pub fn build_replay_mix(&mut self, task: usize, n_new: usize) -> Result<MixReport> {
        let replay_for = self.spec(task)?.name.clone();
        let mut report = MixReport::default();
        let rc = self.config.replay.clone();
        if task == 0 || rc.strategy == Strategy::Finetune {
            return Ok(report);
        }
        let target = (rc.gamma * n_new as f64).ceil() as usize;
        let base = target / task;
        let extra = target % task;
        for prev in 0..task {
            let requested = base + usize::from(prev < extra);
            let mut stats = TaskReplayStats {
                task: self.specs[prev].name.clone(),
                requested,
                ..Default::default()
            };
            match rc.strategy {
                Strategy::Er => {
                    let mem = &self.memory[prev];
                    if !mem.is_empty() {
                        for _ in 0..requested {
                            let i = self.rng.random_range(0..mem.len());
                            report.items.push(TrainItem {
                                task: prev,
                                sample: mem[i].clone(),
                            });
                        }
                        stats.accepted = requested;
                    }
                }
                Strategy::Pcll | Strategy::LamolToken => {
                    let cap = requested * rc.resample_factor;
                    while stats.accepted < requested && stats.attempts < cap {
                        stats.attempts += 1;
                        let rec = self.one_pseudo_sample(prev, &replay_for, stats.attempts)?;
                        match (&rec.0, rec.1.reason) {
                            (Some(sample), _) => {
                                stats.accepted += 1;
                                report.items.push(TrainItem {
                                    task: prev,
                                    sample: sample.clone(),
                                });
                            }
                            (None, Some(r)) => *stats.rejects.entry(r).or_default() += 1,
                            (None, None) => unreachable!("rejected attempt without a reason"),
                        }
                        report.records.push(rec.1);
                    }
                }
                Strategy::Finetune => unreachable!(),
            }
            stats.shortfall = requested - stats.accepted;
            if stats.shortfall > 0 {
                log::warn!(
                    "replay for {replay_for}: {} of {} samples for {} missing after {} attempts",
                    stats.shortfall,
                    requested,
                    stats.task,
                    stats.attempts
                );
            }
            report.stats.push(stats);
        }
        Ok(report)
    }

    /// One full generate-then-label attempt for `task`, as a dump record.
    pub fn pseudo_attempt(&mut self, task: usize, replay_for: &str, attempt: usize) -> Result<PseudoRecord> {
        Ok(self.one_pseudo_sample(task, replay_for, attempt)?.1)
    }

    fn one_pseudo_sample(
        &mut self,
        task: usize,
        replay_for: &str,
        attempt: usize,
    ) -> Result<(Option<Sample>, PseudoRecord)> {
        let gen = self.generate_pseudo_input(task)?;
        let x = self.vocab.decode(&gen.x);
        let mut rec = PseudoRecord {
            replay_for: replay_for.to_string(),
            task: self.specs[task].name.clone(),
            attempt,
            accepted: false,
            reason: gen.reject,
            utterance: (!x.is_empty()).then(|| x.join(" ")),
            output: None,
            provenance: Provenance::Pseudo,
        };
        if gen.reject.is_some() {
            return Ok((None, rec));
        }
        match self.label_pseudo_input(task, &x)? {
            Ok(sample) => {
                rec.accepted = true;
                rec.utterance = Some(sample.utterance_text());
                rec.output = Some(output_text(&sample.output));
                Ok((Some(sample), rec))
            }
            Err(r) => {
                rec.reason = Some(r);
                Ok((None, rec))
            }
        }
    }

    /// Builds the per-sample objective. `eps` feeds the reparameterization
    /// when the latent is in use; `teacher` enables distillation for pseudo
    /// samples.
    fn sample_loss(
        &self,
        g: &mut Graph<S>,
        item: &TrainItem,
        teacher: Option<&Model<S>>,
        beta: f64,
        eps: &[S],
    ) -> Result<LossParts> {
        let rc = &self.config.replay;
        let lc = self.config.loss;
        let prompt = self.render(item.task, &item.sample)?;
        let model = &self.model;
        let out = model.lm_forward(g, &prompt.ids, None)?;
        let lm = lm_loss(g, out.logits, &prompt, lc.lambda)?;
        let pseudo = item.sample.provenance == Provenance::Pseudo;
        let teacher = teacher.filter(|_| pseudo && rc.uses_kd());

        let mut parts = LossParts {
            total: lm,
            lm,
            rec: None,
            kl: None,
            kd: None,
        };
        let mut plain = lm;
        let mut cvae_decoder = None;
        if rc.uses_latent() {
            let pooled_prefix = model.attention_average_pool(g, out.hidden, prompt.prefix.clone(), PoolQuery::Prefix)?;
            let pooled_full =
                model.attention_average_pool(g, out.hidden, prompt.prefix.start..prompt.x.end, PoolQuery::Full)?;
            let prior = model.prior_forward(g, pooled_prefix)?;
            let post = model.recognition_forward(g, pooled_full)?;
            let z = reparameterize(g, post, eps)?;
            let dec_ids = &prompt.ids[..prompt.x.end];
            let inject = Injection {
                z,
                rows: model.injection_rows(prompt.prefix.end, dec_ids.len()),
            };
            let dec = model.lm_forward(g, dec_ids, Some(&inject))?;
            let rec = reconstruction_nll(g, dec.logits, &prompt)?;
            let kl = kl_diag_gauss_var(g, post, prior)?;
            let cvae = cvae_elbo_loss(g, rec, kl, beta)?;
            plain = g.add(lm, cvae)?;
            parts.rec = Some(rec);
            parts.kl = Some(kl);
            cvae_decoder = Some((dec.logits, g.value(z).to_vec(), kl));
        }
        parts.total = plain;

        if let Some(teacher) = teacher {
            let v = self.vocab.len();
            let mut tg = Graph::new();
            let t_out = teacher.lm_forward(&mut tg, &prompt.ids, None)?;
            let t_probs = softmax_rows(tg.value(t_out.logits), v);
            let mut kd = kd_lm_loss(g, out.logits, &t_probs, &prompt)?;
            if let Some((dec_logits, z_value, kl)) = cvae_decoder {
                let dec_ids = &prompt.ids[..prompt.x.end];
                let tz = tg.row_leaf(z_value);
                let inject = Injection {
                    z: tz,
                    rows: teacher.injection_rows(prompt.prefix.end, dec_ids.len()),
                };
                let t_dec = teacher.lm_forward(&mut tg, dec_ids, Some(&inject))?;
                let t_dec_probs = softmax_rows(tg.value(t_dec.logits), v);
                let kd_rec = kd_rec_loss(g, dec_logits, &t_dec_probs, &prompt)?;
                let kd_cvae = cvae_elbo_loss(g, kd_rec, kl, beta)?;
                kd = g.add(kd, kd_cvae)?;
            }
            parts.kd = Some(kd);
            parts.total = replay_loss(g, plain, kd, lc.alpha)?;
        }
        Ok(parts)
    }

    /// Mean loss over `items` with fixed noise, as used by one optimizer
    /// step. Exposed for end-to-end gradient checks.
    pub fn batch_loss(
        &self,
        g: &mut Graph<S>,
        items: &[TrainItem],
        teacher: Option<&Model<S>>,
        beta: f64,
        eps: &[Vec<S>],
    ) -> Result<Var> {
        assert_eq!(items.len(), eps.len(), "one noise vector per item");
        let mut total: Option<Var> = None;
        for (item, e) in items.iter().zip(eps) {
            let l = self.sample_loss(g, item, teacher, beta, e)?.total;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| ReplayError::Config("empty batch".into()))?;
        Ok(g.scale(total, S::one() / S::from_usize_lossy(items.len())))
    }

    /// Trains on `train` (real samples of `task`) plus `mix`. The optimizer
    /// is reset at the start of every task.
    pub fn train_task(
        &mut self,
        task: usize,
        train: &[Sample],
        mix: &[TrainItem],
        teacher: Option<&TeacherSnapshot<S>>,
    ) -> Result<Vec<StepLog>> {
        let name = self.spec(task)?.name.clone();
        let rc = self.config.replay.clone();
        let mut items: Vec<TrainItem> = train
            .iter()
            .map(|s| TrainItem {
                task,
                sample: Sample {
                    provenance: Provenance::Real,
                    ..s.clone()
                },
            })
            .collect();
        items.extend(mix.iter().cloned());
        let mut logs = Vec::new();
        if items.is_empty() || rc.epochs == 0 {
            return Ok(logs);
        }
        let steps_per_epoch = items.len().div_ceil(rc.batch_size);
        let schedule = self.config.loss.schedule(steps_per_epoch);
        let mut adam = AdamState::new(self.config.adam, self.model.params());
        let clip = S::lit(rc.grad_clip);
        let z_dim = self.model.config().z_dim;
        let t_model = teacher.map(|t| t.model().clone());

        for epoch in 0..rc.epochs {
            items.shuffle(&mut self.rng);
            for (b, batch) in items.chunks(rc.batch_size).enumerate() {
                let step = epoch * steps_per_epoch + b;
                let beta = if rc.uses_latent() { beta_at(step, &schedule) } else { 0.0 };
                let inv = S::one() / S::from_usize_lossy(batch.len());
                let mut log = StepLog {
                    task: name.clone(),
                    epoch,
                    step,
                    beta,
                    loss: 0.0,
                    lm: 0.0,
                    rec: 0.0,
                    kl: 0.0,
                    kd: 0.0,
                    n_real: 0,
                    n_pseudo: 0,
                };
                for item in batch {
                    let eps: Vec<S> = if rc.uses_latent() {
                        self.model.sample_eps(&mut self.rng)
                    } else {
                        vec![S::zero(); z_dim]
                    };
                    let mut g = Graph::new();
                    let parts = self.sample_loss(&mut g, item, t_model.as_ref(), beta, &eps)?;
                    self.counters.cvae_calls += usize::from(parts.rec.is_some());
                    self.counters.kd_calls += usize::from(parts.kd.is_some());
                    let value = g.scalar_value(parts.total).as_f64();
                    if !value.is_finite() {
                        return Err(ReplayError::Diverged {
                            task,
                            epoch,
                            step,
                            loss: value,
                        });
                    }
                    let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v).as_f64());
                    log.loss += value;
                    log.lm += g.scalar_value(parts.lm).as_f64();
                    log.rec += get(parts.rec);
                    log.kl += get(parts.kl);
                    log.kd += get(parts.kd);
                    match item.sample.provenance {
                        Provenance::Real => log.n_real += 1,
                        Provenance::Pseudo => log.n_pseudo += 1,
                    }
                    let scaled = g.scale(parts.total, inv);
                    g.backward(scaled, self.model.params_mut())?;
                }
                let n = batch.len() as f64;
                for v in [&mut log.loss, &mut log.lm, &mut log.rec, &mut log.kl, &mut log.kd] {
                    *v /= n;
                }
                let params = self.model.params_mut();
                clip_grad_norm(params, clip);
                adam.step(params);
                params.zero_grad();
                self.counters.train_steps += 1;
                logs.push(log);
            }
        }
        if let Some(t) = teacher {
            t.verify()?;
        }
        Ok(logs)
    }
}

fn output_text(o: &Output) -> String {
    serialize_output(o).join(" ")
}
