use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{path_loss, Network, RngState, TrainConfig, TrainState};
use crate::curriculum::{PathCandidateSet, PathCategory, Stage1Sample};
use crate::error::{Error, Result};
use crate::grammar::ExpertKind;
use crate::losses::{sample_loss, LossBreakdown, TargetTensors};
use crate::model::{assemble, CeRegion, TextSequence};
use crate::world::{render_scene, TaskKind};

/// One optimization step, averaged over its batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub ce: f64,
    pub vis_total: f64,
    /// Mean alignment term per expert over the samples that queried it.
    pub vis_terms: BTreeMap<ExpertKind, f64>,
    pub penalty: f64,
    pub eta: f64,
    pub decision_tokens: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub stage: u8,
    pub steps: Vec<StepRecord>,
    /// `(step, term)` per expert.
    pub alignment_curves: BTreeMap<ExpertKind, Vec<(usize, f64)>>,
    /// Chosen-path categories over all stage-2 samples.
    pub selection_counts: BTreeMap<PathCategory, usize>,
    pub selection_frequency: BTreeMap<PathCategory, f64>,
    pub selection_by_task: BTreeMap<TaskKind, BTreeMap<PathCategory, f64>>,
    pub wall_clock_s: f64,
}

struct Optim {
    backbone: AdamW,
    heads: AdamW,
    vars: Vec<Var>,
    base_lr: (f64, f64),
    clip: f64,
    steps: usize,
}

const WARMUP_STEPS: usize = 20;

impl Optim {
    fn new(net: &Network, cfg: &TrainConfig) -> Result<Self> {
        let params = |lr| ParamsAdamW {
            lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let mut vars = net.backbone_vars();
        vars.extend(net.head_vars());
        Ok(Self {
            backbone: AdamW::new(net.backbone_vars(), params(cfg.lr_backbone))?,
            heads: AdamW::new(net.head_vars(), params(cfg.lr_heads))?,
            vars,
            base_lr: (cfg.lr_backbone, cfg.lr_heads),
            clip: cfg.grad_clip,
            steps: cfg.steps,
        })
    }

    /// Linear warmup, then cosine decay to a tenth of the base rate.
    fn schedule(&self, step: usize) -> f64 {
        if step < WARMUP_STEPS {
            return (step + 1) as f64 / WARMUP_STEPS as f64;
        }
        let span = self.steps.saturating_sub(WARMUP_STEPS).max(1) as f64;
        let t = ((step - WARMUP_STEPS) as f64 / span).min(1.0);
        0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn clip(&self, grads: &mut GradStore) -> Result<()> {
        if self.clip <= 0.0 {
            return Ok(());
        }
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Config("non-finite gradient norm".into()));
        }
        if norm > self.clip {
            let scale = self.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, step: usize, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        self.clip(&mut grads)?;
        let f = self.schedule(step);
        self.backbone.set_learning_rate(self.base_lr.0 * f);
        self.heads.set_learning_rate(self.base_lr.1 * f);
        self.backbone.step(&grads)?;
        self.heads.step(&grads)?;
        Ok(())
    }
}

/// Epoch-shuffled sample order.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

struct Prepared {
    image: Tensor,
    targets: TargetTensors,
    seqs: Vec<TextSequence>,
    categories: Vec<PathCategory>,
    task: TaskKind,
}

fn prepare_image(net: &Network, task: &crate::world::TaskSample) -> Result<Tensor> {
    net.decoder.image_features(&render_scene(&task.scene)?)
}

fn check_config(net: &Network, cfg: &TrainConfig, stage: u8) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("stage-{stage} training given a stage-{} config", cfg.stage)));
    }
    if cfg.slots != net.slots {
        return Err(Error::Config(format!(
            "config has {} slots but the model was built for {}",
            cfg.slots, net.slots
        )));
    }
    Ok(())
}

fn check_slots(id: u64, chain_slots: usize, want: usize) -> Result<()> {
    if chain_slots != want {
        return Err(Error::DataSchemaMismatch(format!(
            "sample {id} uses {chain_slots} observation slots, training uses {want}"
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Accum {
    loss: f64,
    ce: f64,
    vis: f64,
    penalty: f64,
    decisions: f64,
    terms: BTreeMap<ExpertKind, (f64, usize)>,
    n: usize,
}

impl Accum {
    fn add(&mut self, b: &LossBreakdown, loss: f64, decisions: usize) {
        self.loss += loss;
        self.ce += b.ce;
        self.vis += b.vis_total;
        self.penalty += b.penalty;
        self.decisions += decisions as f64;
        for (e, v) in &b.vis_terms {
            let t = self.terms.entry(*e).or_insert((0.0, 0));
            t.0 += v;
            t.1 += 1;
        }
        self.n += 1;
    }

    fn record(&self, step: usize, stage: u8, eta: f64) -> StepRecord {
        let n = self.n.max(1) as f64;
        StepRecord {
            step,
            stage,
            loss: self.loss / n,
            ce: self.ce / n,
            vis_total: self.vis / n,
            vis_terms: self.terms.iter().map(|(e, (s, c))| (*e, s / *c as f64)).collect(),
            penalty: self.penalty / n,
            eta,
            decision_tokens: self.decisions / n,
        }
    }
}

fn finish(metrics: &mut TrainMetrics, rec: StepRecord) {
    for (e, v) in &rec.vis_terms {
        metrics.alignment_curves.entry(*e).or_default().push((rec.step, *v));
    }
    if rec.step.is_multiple_of(100) {
        log::info!(
            "stage {} step {}: loss {:.4} ce {:.4} vis {:.4}",
            rec.stage,
            rec.step,
            rec.loss,
            rec.ce,
            rec.vis_total
        );
    }
    metrics.steps.push(rec);
}

/// Stage 1: expert queries sit in the input context; the loss is
/// cross-entropy on the question and answer plus weighted alignment of every
/// queried expert.
pub fn train_stage1(net: &mut Network, cfg: &TrainConfig, corpus: &[Stage1Sample]) -> Result<TrainMetrics> {
    check_config(net, cfg, 1)?;
    if corpus.is_empty() {
        return Err(Error::DataSchemaMismatch("empty stage-1 corpus".into()));
    }
    let started = Instant::now();
    let prepared = corpus
        .iter()
        .map(|s| {
            check_slots(s.id, s.context_chain.slot_count(), cfg.slots)?;
            if s.context_chain.has_think() || s.context_chain.context_len() == 0 {
                return Err(Error::DataSchemaMismatch(format!("sample {} is not a context-query sample", s.id)));
            }
            Ok(Prepared {
                image: prepare_image(net, &s.task)?,
                targets: TargetTensors::from_bundle(&s.targets, net.decoder.dtype(), net.decoder.device())?,
                seqs: vec![assemble(&net.decoder.vocab, &s.context_chain, s.question(), CeRegion::QuestionAnswer)?],
                categories: Vec::new(),
                task: s.task.task_kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Optim::new(net, cfg)?;
    let mut sampler = Sampler::new(prepared.len(), cfg.seed);
    let mut metrics = TrainMetrics {
        stage: 1,
        ..Default::default()
    };
    for step in 0..cfg.steps {
        let mut total: Option<Tensor> = None;
        let mut acc = Accum::default();
        for i in sampler.batch(cfg.batch_size) {
            let p = &prepared[i];
            let pl = path_loss(net, &p.image, &p.seqs[0], &p.targets, &cfg.weights)?;
            acc.add(&pl.breakdown, pl.breakdown.combined, p.seqs[0].layout.decision_positions.len());
            total = Some(match total {
                Some(t) => (t + pl.total)?,
                None => pl.total,
            });
        }
        let loss = (total.expect("batch is nonempty") / cfg.batch_size as f64)?;
        opt.step(step, &loss)?;
        finish(&mut metrics, acc.record(step, 1, 0.0));
    }
    net.history.push(1);
    net.train_state = Some(TrainState {
        config: cfg.clone(),
        rng: RngState::capture(&sampler.rng),
    });
    metrics.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(metrics)
}

/// Stage 2: every candidate path is teacher-forced, the cheapest by combined
/// cost is selected, and only that path's loss is backpropagated.
pub fn train_stage2(net: &mut Network, cfg: &TrainConfig, corpus: &[PathCandidateSet]) -> Result<TrainMetrics> {
    check_config(net, cfg, 2)?;
    if !net.history.contains(&1) {
        if !cfg.skip_stage1 {
            return Err(Error::MissingStage1Init);
        }
        log::warn!("stage 2 starting without stage-1 initialization");
    }
    if corpus.is_empty() {
        return Err(Error::DataSchemaMismatch("empty stage-2 corpus".into()));
    }
    let started = Instant::now();
    let prepared = corpus
        .iter()
        .map(|s| {
            if s.paths.is_empty() || s.paths.len() != s.categories.len() {
                return Err(Error::DataSchemaMismatch(format!("sample {} has malformed paths", s.id)));
            }
            let seqs = s
                .paths
                .iter()
                .map(|c| {
                    check_slots(s.id, c.slot_count(), cfg.slots)?;
                    assemble(&net.decoder.vocab, c, &s.task.question, CeRegion::Chain)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                image: prepare_image(net, &s.task)?,
                targets: TargetTensors::from_bundle(&s.targets, net.decoder.dtype(), net.decoder.device())?,
                seqs,
                categories: s.categories.clone(),
                task: s.task.task_kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Optim::new(net, cfg)?;
    let mut sampler = Sampler::new(prepared.len(), cfg.seed);
    let mut metrics = TrainMetrics {
        stage: 2,
        ..Default::default()
    };
    let mut by_task: BTreeMap<TaskKind, BTreeMap<PathCategory, usize>> = BTreeMap::new();
    for step in 0..cfg.steps {
        let mut total: Option<Tensor> = None;
        let mut acc = Accum::default();
        for i in sampler.batch(cfg.batch_size) {
            let p = &prepared[i];
            let mut losses = p
                .seqs
                .iter()
                .map(|s| path_loss(net, &p.image, s, &p.targets, &cfg.weights))
                .collect::<Result<Vec<_>>>()?;
            let breakdowns: Vec<LossBreakdown> = losses.iter().map(|l| l.breakdown.clone()).collect();
            let (value, chosen) = sample_loss(&breakdowns)?;
            let cat = p.categories[chosen];
            *metrics.selection_counts.entry(cat).or_insert(0) += 1;
            *by_task.entry(p.task).or_default().entry(cat).or_insert(0) += 1;
            acc.add(&breakdowns[chosen], value, p.seqs[chosen].layout.decision_positions.len());
            let chosen_loss = losses.swap_remove(chosen).total;
            drop(losses);
            total = Some(match total {
                Some(t) => (t + chosen_loss)?,
                None => chosen_loss,
            });
        }
        let loss = (total.expect("batch is nonempty") / cfg.batch_size as f64)?;
        opt.step(step, &loss)?;
        finish(&mut metrics, acc.record(step, 2, cfg.weights.eta));
    }
    let freq = |counts: &BTreeMap<PathCategory, usize>| {
        let n: usize = counts.values().sum();
        counts
            .iter()
            .map(|(c, k)| (*c, *k as f64 / n.max(1) as f64))
            .collect::<BTreeMap<_, _>>()
    };
    metrics.selection_frequency = freq(&metrics.selection_counts);
    metrics.selection_by_task = by_task.iter().map(|(t, c)| (*t, freq(c))).collect();
    net.history.push(2);
    net.train_state = Some(TrainState {
        config: cfg.clone(),
        rng: RngState::capture(&sampler.rng),
    });
    metrics.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(metrics)
}
