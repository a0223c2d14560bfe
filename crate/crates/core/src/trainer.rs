//! Staged training loop.
//!
//! Each iteration builds a fresh graph, composes the stage's losses, runs one
//! backward pass and applies one AdamW step to G, C and D together. The
//! adversarial term enters the objective as `-λ·L_Adv` behind a
//! gradient-reversal node with the same `λ`: descent on it makes D ascend
//! `L_Adv`, while the reversal makes G descend it.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::{self, LabeledDataset, PairedBatch, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossValue};
use crate::metrics::HistoryWriter;
use crate::nn::{self, BoundModel, CdaModel, Mode};
use crate::schedule::{self, ScheduleConfig, Stage, StepWeights};

// rng stream ids derived from the run seed
const DROPOUT_STREAM: u64 = 1;
const BATCH_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub tau: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// `false` runs DANN mode: no contrastive terms and `E' = E'' = 0`.
    pub contrastive_enabled: bool,
    /// `false` drops the adversarial term entirely (source-only baseline).
    pub adversarial_enabled: bool,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            batch_size: 32,
            schedule: ScheduleConfig::new(90, 25, 35),
            tau: losses::DEFAULT_TAU,
            lr_decay: 0.8,
            lr_period: 20,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            contrastive_enabled: true,
            adversarial_enabled: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            v.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            v.push(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_period < 1 {
            v.push("lr_period must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            v.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            v.push(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            v.push("adam betas must lie in [0, 1)".to_string());
        }
        if !(self.adam_eps > 0.0) {
            v.push("adam_eps must be > 0".to_string());
        }
        if self.schedule.epochs == 0 {
            v.push("epochs (E) must be > 0".to_string());
        }
        v.extend(self.schedule.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// The schedule actually followed: DANN mode starts the adversarial ramp
    /// at epoch 0.
    pub fn effective_schedule(&self) -> ScheduleConfig {
        if self.contrastive_enabled {
            self.schedule
        } else {
            ScheduleConfig {
                stage1_end: 0,
                crosscl_start: 0,
                ..self.schedule
            }
        }
    }

    /// Weights for epoch `e` after applying the mode toggles.
    pub fn weights_at(&self, e: usize) -> Result<StepWeights> {
        let mut w = schedule::weights_at(e, &self.effective_schedule())?;
        if !self.adversarial_enabled {
            w.lambda = 0.0;
        }
        if !self.contrastive_enabled {
            w.beta = 0.0;
        }
        Ok(w)
    }
}

/// Step-decayed learning rate for 0-based epoch index `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    // repeated multiplication: pow/powi results may differ between builds
    (0..epoch / cfg.lr_period).fold(cfg.lr0, |lr, _| lr * cfg.lr_decay)
}

/// AdamW moments, kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `(β1^t, β2^t)` for each parameter's own step count `t`.
    beta_powers: Vec<(f64, f64)>,
    /// Calls to [`adamw_step`].
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            beta_powers: vec![(1.0, 1.0); params.len()],
            step: 0,
        }
    }
}

/// One AdamW update. Parameters whose gradient is `None` (not reached by the
/// loss) are left untouched, moments included. Weight decay is applied to the
/// parameters directly, not through the gradient.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f64]>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if let Some(coord) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: i,
                coord,
                value: g[coord],
            });
        }
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (p1, p2) = &mut state.beta_powers[i];
        *p1 *= b1;
        *p2 *= b2;
        let (c1, c2) = (1.0 - *p1, 1.0 - *p2);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `argmax C(G(x))` in eval mode.
pub fn pseudo_labels(model: &CdaModel, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.logits(x)?))
}

/// Fraction of eval-mode predictions equal to `labels`.
pub fn evaluate(model: &CdaModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = pseudo_labels(model, x)?;
    Ok(accuracy(&pred, labels))
}

/// Accuracy on a target set using its held-back labels.
pub fn evaluate_target(model: &CdaModel, target: &UnlabeledDataset) -> Result<f64> {
    let y = target
        .hidden_y()
        .ok_or_else(|| Error::InvalidArgument("evaluation needs labels; target has none".into()))?;
    evaluate(model, target.x(), y)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Per-epoch summary; one history CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub lambda: f64,
    pub beta: f64,
    pub l_ce: f64,
    pub l_supcl: f64,
    pub l_adv: f64,
    pub l_crosscl: f64,
    pub src_acc: f64,
    /// `None` when the target carries no held-back labels.
    pub tgt_acc: Option<f64>,
    /// Agreement of the epoch's pseudo-labels with held-back labels; `None`
    /// when no pseudo-labels were generated.
    pub pseudo_acc: Option<f64>,
    pub lr: f64,
    /// Iterations whose cross-domain term was skipped for lack of anchors.
    pub crosscl_skips: usize,
}

/// Where a run writes checkpoints and its incremental history.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub config_hash: [u8; 32],
}

impl Artifacts {
    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.dir.join("model_final.ckpt")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CdaModel,
    pub history: Vec<EpochRecord>,
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

#[derive(Default)]
struct EpochStats {
    ce: Running,
    supcl: Running,
    adv: Running,
    crosscl: Running,
    pseudo_hits: usize,
    pseudo_total: usize,
    crosscl_skips: usize,
}

/// The adversarial piece of the objective: `L_Adv` on discriminator logits of
/// gradient-reversed embeddings, plus the node `-λ·L_Adv` to add to the total.
pub fn adversarial_term(
    g: &mut Graph,
    bound: &BoundModel,
    z_src: NodeId,
    z_tgt: NodeId,
    lambda: f64,
    mode: &mut Option<&mut ChaCha8Rng>,
) -> Result<(LossValue, NodeId)> {
    let rev_s = g.gradient_reversal(z_src, lambda)?;
    let rev_t = g.gradient_reversal(z_tgt, lambda)?;
    let d_s = bound.discriminate(g, rev_s, mode_of(mode))?;
    let d_t = bound.discriminate(g, rev_t, mode_of(mode))?;
    let adv = losses::adversarial_loss_from_logits(g, d_s, d_t)?;
    let term = g.scale(adv.node, -lambda);
    Ok((adv, term))
}

fn mode_of<'a>(rng: &'a mut Option<&mut ChaCha8Rng>) -> Mode<'a> {
    match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    }
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    weights: StepWeights,
    lr: f64,
    hidden_y: Option<&'a [usize]>,
}

fn train_step(
    ctx: &StepContext<'_>,
    model: &mut CdaModel,
    opt: &mut OptimizerState,
    batch: &PairedBatch,
    rng: &mut ChaCha8Rng,
    stats: &mut EpochStats,
) -> Result<()> {
    let cfg = ctx.cfg;
    let w = ctx.weights;
    let use_adv = cfg.adversarial_enabled && w.lambda > 0.0;
    let use_supcl = cfg.contrastive_enabled && w.stage != Stage::CrossDomain;
    let cross_stage = cfg.contrastive_enabled && w.stage == Stage::CrossDomain;
    let use_cross = cross_stage && w.beta > 0.0;

    // pseudo-labels come from the pre-update model in eval mode; they are
    // tallied for the history even while β is still 0
    let pseudo = if cross_stage {
        let p = pseudo_labels(model, &batch.x_t)?;
        if let Some(hy) = ctx.hidden_y {
            stats.pseudo_hits += p
                .iter()
                .zip(&batch.target_indices)
                .filter(|(l, &i)| **l == hy[i])
                .count();
            stats.pseudo_total += p.len();
        }
        Some(p)
    } else {
        None
    };

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut train_rng = Some(rng);
    let xs = g.constant(batch.x_s.clone());
    let (zs_raw, logits_s) = nn::embed_and_classify(&mut g, &bound, xs, mode_of(&mut train_rng))?;
    let ce = losses::cross_entropy(&mut g, logits_s, &batch.y_s)?;
    stats.ce.push(ce.value);
    let mut objective = ce.node;
    let mut zs_unit = None;

    if use_supcl {
        let zs = nn::l2_normalize(&mut g, zs_raw)?;
        zs_unit = Some(zs);
        match losses::sup_contrastive(&mut g, zs, &batch.y_s, cfg.tau) {
            Ok(l) => {
                stats.supcl.push(l.value);
                objective = g.add(objective, l.node)?;
            }
            Err(Error::DegenerateBatch) => {}
            Err(e) => return Err(e),
        }
    }

    let zt_raw = if use_adv || use_cross {
        let xt = g.constant(batch.x_t.clone());
        Some(bound.embed(&mut g, xt, mode_of(&mut train_rng))?)
    } else {
        None
    };

    if use_adv {
        let zt = zt_raw.expect("target embedded when adversarial");
        let (adv, term) = adversarial_term(&mut g, &bound, zs_raw, zt, w.lambda, &mut train_rng)?;
        stats.adv.push(adv.value);
        objective = g.add(objective, term)?;
    }

    if let Some(pseudo) = pseudo.filter(|_| use_cross) {
        let zt = zt_raw.expect("target embedded when cross-domain");
        let zs = match zs_unit {
            Some(z) => z,
            None => nn::l2_normalize(&mut g, zs_raw)?,
        };
        let zt = nn::l2_normalize(&mut g, zt)?;
        match losses::cross_domain_contrastive(&mut g, zs, &batch.y_s, zt, &pseudo, cfg.tau) {
            Ok(l) => {
                stats.crosscl.push(l.value);
                let term = g.scale(l.node, w.beta);
                objective = g.add(objective, term)?;
            }
            Err(Error::NoCrossDomainAnchors) | Err(Error::InvalidArgument(_)) => stats.crosscl_skips += 1,
            Err(e) => return Err(e),
        }
    }

    let total = g.value(objective).item().unwrap_or(f64::NAN);
    if !total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: format!("non-finite objective {total}"),
            last_checkpoint: None,
        });
    }

    let grads = g.backward(objective)?;
    let ids = bound.parameter_ids();
    let grad_refs: Vec<Option<&[f64]>> = ids.iter().map(|&id| grads.get_opt(id)).collect();
    let mut params = model.parameters_mut();
    adamw_step(&mut params, &grad_refs, opt, ctx.lr, cfg)
}

/// Runs the staged loop for epochs `1..=E`.
///
/// With `artifacts`, the history CSV is flushed after every epoch and
/// checkpoints are written every `checkpoint_every` epochs.
pub fn train(
    cfg: &TrainConfig,
    mut model: CdaModel,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    artifacts: Option<&Artifacts>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.in_dim() != model.in_dim() || target.in_dim() != model.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: vec![source.in_dim(), target.in_dim()],
            rhs: vec![model.in_dim()],
        });
    }
    if source.num_classes() != model.num_classes {
        return Err(Error::InvalidArgument(format!(
            "source has {} classes, model has {}",
            source.num_classes(),
            model.num_classes
        )));
    }

    let mut opt = OptimizerState::new(&model.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DROPOUT_STREAM);
    let batch_seed = cfg.seed ^ BATCH_SEED_SALT;

    let mut writer = match artifacts {
        Some(a) => Some(HistoryWriter::create(&a.history_path())?),
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut history = Vec::with_capacity(cfg.schedule.epochs);

    for epoch in 1..=cfg.schedule.epochs {
        let weights = cfg.weights_at(epoch)?;
        let ctx = StepContext {
            cfg,
            weights,
            lr: lr_at(epoch - 1, cfg),
            hidden_y: target.hidden_y(),
        };
        let mut stats = EpochStats::default();
        for batch in data::batches(source, target, cfg.batch_size, batch_seed, epoch as u64)? {
            train_step(&ctx, &mut model, &mut opt, &batch, &mut rng, &mut stats).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged {
                    epoch,
                    detail,
                    last_checkpoint: last_checkpoint.clone(),
                },
                Error::NonFiniteGradient { .. } | Error::DegenerateRow { .. } => Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                    last_checkpoint: last_checkpoint.clone(),
                },
                other => other,
            })?;
        }

        let record = EpochRecord {
            epoch,
            stage: weights.stage,
            lambda: weights.lambda,
            beta: weights.beta,
            l_ce: stats.ce.mean(),
            l_supcl: stats.supcl.mean(),
            l_adv: stats.adv.mean(),
            l_crosscl: stats.crosscl.mean(),
            src_acc: evaluate(&model, source.x(), source.y())?,
            tgt_acc: target.hidden_y().map(|y| evaluate(&model, target.x(), y)).transpose()?,
            pseudo_acc: (stats.pseudo_total > 0).then(|| stats.pseudo_hits as f64 / stats.pseudo_total as f64),
            lr: ctx.lr,
            crosscl_skips: stats.crosscl_skips,
        };
        if let Some(w) = writer.as_mut() {
            w.append(&record)?;
        }
        history.push(record);

        if let Some(a) = artifacts {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let p = a.checkpoint_path(epoch);
                nn::save_checkpoint(&model, &a.config_hash, &p)?;
                last_checkpoint = Some(p);
            }
        }
    }

    Ok(TrainOutcome { model, history })
}

/// Loads a checkpoint and checks it against the expected configuration hash.
pub fn load_model(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<CdaModel> {
    let (model, hash) = nn::load_checkpoint(path)?;
    if let Some(h) = expected_hash {
        if h != &hash {
            return Err(Error::Format(format!(
                "checkpoint {} was produced by a different configuration",
                path.display()
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::nn::init_model;
    use rand::Rng;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(19, &cfg), 5e-4);
        assert!((lr_at(40, &cfg) - 3.2e-4).abs() < 1e-18);
    }

    #[test]
    fn argmax_tie_break() {
        let l = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }

    #[test]
    fn pseudo_labels_match_linear_scan() {
        let m = init_model(&[2, 8], 4, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::matrix(20, 2, (0..40).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let logits = m.logits(&x).unwrap();
        let mut oracle = Vec::new();
        for r in 0..20 {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..3 {
                if logits.get(r, c) > best.1 {
                    best = (c, logits.get(r, c));
                }
            }
            oracle.push(best.0);
        }
        assert_eq!(pseudo_labels(&m, &x).unwrap(), oracle);
    }

    fn scalar_param(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn adamw_examples() {
        let mut cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_param(0.7);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[Some(&[0.0])], &mut st, 0.01, &cfg).unwrap();
        assert_eq!(p.data(), &[0.7]);

        let mut p = scalar_param(0.7);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[Some(&[1.0])], &mut st, 0.01, &cfg).unwrap();
        // m_hat = v_hat = 1 on the first step
        let expected = 0.7 - 0.01 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);

        cfg.weight_decay = 0.1;
        let mut p = scalar_param(2.0);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[Some(&[0.0])], &mut st, 0.01, &cfg).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);

        let mut p = scalar_param(2.0);
        let mut st = OptimizerState::new(&[&p]);
        let err = adamw_step(&mut [&mut p], &[Some(&[f64::NAN])], &mut st, 0.01, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { param: 0, coord: 0, .. }));
        assert_eq!(p.data(), &[2.0]);

        // unreached parameters are skipped entirely
        let mut p = scalar_param(2.0);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[None], &mut st, 0.01, &cfg).unwrap();
        assert_eq!(p.data(), &[2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn evaluate_constant_and_perfect() {
        let mut m = init_model(&[2, 4], 3, 2, 0).unwrap();
        for l in &mut m.classifier.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::zeros(&[4, 2]);
        assert_eq!(evaluate(&m, &x, &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(evaluate(&m, &x, &[0, 0, 0, 0]).unwrap(), 1.0);

        let m = init_model(&[2, 4], 3, 3, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::matrix(12, 2, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pred = pseudo_labels(&m, &x).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut hits = 0;
        for i in 0..12 {
            if pred[i] == labels[i] {
                hits += 1;
            }
        }
        assert_eq!(evaluate(&m, &x, &labels).unwrap(), hits as f64 / 12.0);

        let unl = crate::data::UnlabeledDataset::new(x, None, "t").unwrap();
        assert!(evaluate_target(&m, &unl).is_err());
    }

    #[test]
    fn config_validation_collects_everything() {
        let mut cfg = TrainConfig {
            lr0: 0.0,
            lr_decay: 1.5,
            batch_size: 1,
            ..Default::default()
        };
        cfg.schedule.crosscl_start = 10;
        let v = cfg.violations();
        assert!(v.len() >= 4, "{v:?}");
        assert!(v.iter().any(|s| s.contains("E'' >= E'")));
    }

    fn tiny_task(n: usize) -> (LabeledDataset, UnlabeledDataset) {
        let s = gen_two_moons(n, 0.1, 0.0, [0.0, 0.0], 1).unwrap();
        let t = gen_two_moons(n, 0.1, 30.0, [0.0, 0.0], 2).unwrap().into_unlabeled();
        (s, t)
    }

    fn tiny_cfg(e: usize, e1: usize, e2: usize) -> TrainConfig {
        TrainConfig {
            lr0: 5e-3,
            batch_size: 16,
            schedule: ScheduleConfig::new(e, e1, e2),
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn never_leaving_stage_one_records_no_adversarial_terms() {
        let (s, t) = tiny_task(64);
        let m = init_model(&[2, 16], 8, 2, 0).unwrap();
        let out = train(&tiny_cfg(4, 4, 4), m, &s, &t, None).unwrap();
        assert_eq!(out.history.len(), 4);
        for r in &out.history {
            assert_eq!(r.l_adv, 0.0);
            assert_eq!(r.l_crosscl, 0.0);
            // epoch E = E'' is already in the cross-domain stage
            assert_eq!(r.l_supcl > 0.0, r.epoch < 4);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (s, t) = tiny_task(64);
        let run = || {
            let m = init_model(&[2, 16], 8, 2, 0).unwrap();
            train(&tiny_cfg(6, 2, 3), m, &s, &t, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn stage_gating_in_history() {
        let (s, t) = tiny_task(64);
        let m = init_model(&[2, 16], 8, 2, 0).unwrap();
        let out = train(&tiny_cfg(8, 2, 4), m, &s, &t, None).unwrap();
        for r in &out.history {
            if r.epoch >= 4 {
                assert_eq!(r.l_supcl, 0.0);
            }
            if r.epoch <= 4 {
                assert_eq!(r.l_crosscl, 0.0);
            }
            if r.epoch > 4 {
                assert!(r.l_crosscl > 0.0 || r.crosscl_skips > 0);
                assert!(r.pseudo_acc.is_some());
            }
            assert!(r.l_ce.is_finite() && r.l_adv.is_finite());
        }
        assert!(out.history.iter().any(|r| r.l_adv < 0.0));
    }

    #[test]
    fn one_step_moves_all_three_networks_in_adversarial_stage() {
        let (s, t) = tiny_task(32);
        let mut m = init_model(&[2, 16], 8, 2, 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..tiny_cfg(10, 1, 10)
        };
        let batch = data::batches(&s, &t, 16, 0, 0).unwrap().remove(0);
        let ctx = StepContext {
            cfg: &cfg,
            weights: cfg.weights_at(5).unwrap(),
            lr: 1e-3,
            hidden_y: None,
        };
        assert_eq!(ctx.weights.stage, Stage::Adversarial);
        let mut opt = OptimizerState::new(&m.parameters());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stats = EpochStats::default();
        train_step(&ctx, &mut m, &mut opt, &batch, &mut rng, &mut stats).unwrap();
        assert_ne!(m.generator, before.generator);
        assert_ne!(m.classifier, before.classifier);
        assert_ne!(m.discriminator, before.discriminator);

        // stage I with no weight decay: D receives nothing
        let mut m2 = before.clone();
        let ctx1 = StepContext {
            weights: cfg.weights_at(0).unwrap(),
            ..ctx
        };
        assert_eq!(ctx1.weights.stage, Stage::SourceOnly);
        let mut opt = OptimizerState::new(&m2.parameters());
        train_step(&ctx1, &mut m2, &mut opt, &batch, &mut rng, &mut stats).unwrap();
        assert_eq!(m2.discriminator, before.discriminator);
        assert_ne!(m2.generator, before.generator);
    }

    #[test]
    fn discriminator_step_increases_separation() {
        // fixed, linearly separable embeddings stand in for a frozen G
        let m = init_model(&[2, 8], 4, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng, off: f64| {
            let d: Vec<f64> = (0..16 * 4).map(|i| rng.random_range(-0.3..0.3) + if i % 4 == 0 { off } else { 0.0 }).collect();
            Tensor::matrix(16, 4, d).unwrap()
        };
        let zs = mk(&mut rng, -1.0);
        let zt = mk(&mut rng, 1.0);
        let adv_value = |m: &CdaModel| {
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let (s, t) = (g.constant(zs.clone()), g.constant(zt.clone()));
            adversarial_term(&mut g, &b, s, t, 0.5, &mut None).unwrap().0.value
        };

        let mut m = m;
        let start = adv_value(&m);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&m.parameters());
        for _ in 0..20 {
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let (s, t) = (g.param(zs.clone()), g.param(zt.clone()));
            let (_, term) = adversarial_term(&mut g, &b, s, t, 0.5, &mut None).unwrap();
            let grads = g.backward(term).unwrap();
            let ids = b.parameter_ids();
            let [ng, nc, _] = m.parameter_counts();
            // only D is updated
            let refs: Vec<Option<&[f64]>> = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| if i < ng + nc { None } else { grads.get_opt(id) })
                .collect();
            adamw_step(&mut m.parameters_mut(), &refs, &mut opt, 1e-2, &cfg).unwrap();
        }
        let end = adv_value(&m);
        // L_Adv = mean log D(t) + mean log(1 - D(s)) rises toward 0 as D separates
        assert!(end > start + 0.1, "start {start} end {end}");
    }

    #[test]
    fn reversal_gives_generator_the_descent_direction() {
        // G's gradient through the reversal equals +λ² ∂L_Adv/∂z
        let m = init_model(&[2, 8], 4, 2, 6).unwrap();
        let z = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let zt = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let lambda = 0.6;

        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let (s, t) = (g.param(z.clone()), g.constant(zt.clone()));
        let (_, term) = adversarial_term(&mut g, &b, s, t, lambda, &mut None).unwrap();
        let via_grl = g.backward(term).unwrap().get(s);

        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let (s, t) = (g.param(z), g.constant(zt));
        let ds = b.discriminate(&mut g, s, Mode::Eval).unwrap();
        let dt = b.discriminate(&mut g, t, Mode::Eval).unwrap();
        let adv = losses::adversarial_loss_from_logits(&mut g, ds, dt).unwrap();
        let direct = g.backward(adv.node).unwrap().get(s);
        for (a, d) in via_grl.data().iter().zip(direct.data()) {
            assert!((a - lambda * lambda * d).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (s, t) = tiny_task(32);
        let mut m = init_model(&[2, 16], 8, 2, 0).unwrap();
        // hidden activations near 1e200 times weights near 1e200 overflow to inf
        for l in &mut m.generator.layers {
            l.weight.data_mut().iter_mut().for_each(|w| *w = 1e200);
        }
        let err = train(&tiny_cfg(2, 1, 2), m, &s, &t, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    }
}
