//! Optimization of `(1 - λ)·L_NLL + λ·L_BPR` over paired prompts, and
//! checkpoint files.

mod adam;
mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_pairs, Pair, TrainSample};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, PAD_ID};
use crate::tensor::{Float, Graph, ParamGrads, Parameters, Var};
use crate::tokenizer::{EOS_ID, NO_ID, YES_ID};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

/// How the preference score is read from the first decoder position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// `p(yes) / (p(yes) + p(no))`, i.e. `sigmoid(logit_yes - logit_no)`.
    #[default]
    Restricted,
    /// `p(yes)` under the full-vocabulary softmax.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_pairs: usize,
    pub epochs: usize,
    pub ratio_neg: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    /// Linear learning-rate warmup over this many steps; 0 disables it.
    pub warmup_steps: usize,
    pub score_mode: ScoreMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            learning_rate: 1e-3,
            batch_pairs: 16,
            epochs: 3,
            ratio_neg: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            warmup_steps: 0,
            score_mode: ScoreMode::Restricted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("train.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("train.batch_pairs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub bpr: f64,
    pub combined: f64,
    pub pairs_seen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PreferenceScore {
    pub r_hat: f64,
}

/// `(1 - λ)·nll + λ·bpr` for plain numbers.
pub fn combined_loss(nll: f64, bpr: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok((1.0 - lambda) * nll + lambda * bpr)
}

/// Two-class preference from the yes/no logits.
pub fn restricted_preference(logit_yes: f64, logit_no: f64) -> f64 {
    let d = logit_yes - logit_no;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(r_pos - r_neg)` averaged over pairs.
pub fn bpr_value(pairs: &[(f64, f64)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|(p, n)| {
            let d = p - n;
            // log(1 + e^-d), stable for both signs
            (-d).max(0.0) + (-d.abs()).exp().ln_1p()
        })
        .sum();
    total / pairs.len().max(1) as f64
}

/// Token-summed cross entropy of `targets` under `[m, V]` logits.
pub fn nll_loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = g.shape(logits)[0];
    if rows != targets.len() {
        return Err(Error::shape("nll_loss", g.shape(logits), &[targets.len()]));
    }
    let ce = g.cross_entropy(logits, targets)?;
    Ok(g.sum(ce))
}

/// Preference score `r̂` (shape `[1]`) read from row 0 of `[m, V]` logits.
pub fn score_var<F: Float>(g: &mut Graph<F>, logits: Var, mode: ScoreMode) -> Result<Var> {
    match mode {
        ScoreMode::Restricted => {
            let yes = g.pick(logits, &[YES_ID])?;
            let no = g.pick(logits, &[NO_ID])?;
            let d = g.sub(yes, no)?;
            Ok(g.sigmoid(d))
        }
        ScoreMode::Raw => {
            let p = g.softmax(logits, 1)?;
            g.pick(p, &[YES_ID])
        }
    }
}

/// Mean over pairs of `-log sigmoid(r_pos - r_neg)`, as a scalar.
pub fn bpr_loss<F: Float>(g: &mut Graph<F>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Data("bpr_loss needs at least one pair".into()));
    }
    let mut total: Option<Var> = None;
    for &(p, n) in pairs {
        let d = g.sub(p, n)?;
        let s = g.sigmoid(d);
        let l = g.log(s);
        let l = g.sum(l);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let t = total.expect("non-empty");
    Ok(g.scale(t, F::c(-1.0 / pairs.len() as f64)))
}

/// Decoder input and gold output for a label.
pub fn decoder_io(label: bool) -> ([usize; 2], [usize; 2]) {
    let tok = if label { YES_ID } else { NO_ID };
    ([PAD_ID, tok], [tok, EOS_ID])
}

/// Scores one tokenized prompt with a single decoder step.
pub fn score<F: Float>(model: &Seq2Seq, params: &Parameters<F>, input: &[usize], mode: ScoreMode) -> Result<PreferenceScore> {
    let mut g = Graph::new();
    let p = g.bind(params);
    let enc = model.encode(&mut g, &p, input)?;
    let logits = model.decode(&mut g, &p, &[PAD_ID], &enc)?;
    let r = score_var(&mut g, logits, mode)?;
    Ok(PreferenceScore {
        r_hat: g.value(r).data()[0].to_f64().unwrap_or(f64::NAN),
    })
}

/// Tokenized prompt with its label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedSample {
    pub input: Vec<usize>,
    pub label: bool,
}

/// The graph of one batch: `(loss, nll, bpr)` scalars.
pub struct BatchLoss {
    pub loss: Var,
    pub nll: Var,
    pub bpr: Var,
}

/// Builds the combined loss of a batch of pairs. Samples used by several
/// pairs are run once; their NLL is weighted by multiplicity so the result
/// equals the mean over all `2·pairs` templates.
pub fn batch_loss<F: Float>(
    g: &mut Graph<F>,
    p: &[Var],
    model: &Seq2Seq,
    batch: &[Pair],
    samples: &[EncodedSample],
    lambda: f64,
    mode: ScoreMode,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut unique: Vec<usize> = Vec::new();
    let mut weight: Vec<usize> = Vec::new();
    for idx in batch.iter().flat_map(|pr| [pr.pos, pr.neg]) {
        match unique.iter().position(|&u| u == idx) {
            Some(k) => weight[k] += 1,
            None => {
                unique.push(idx);
                weight.push(1);
            }
        }
    }
    let templates = 2.0 * batch.len() as f64;
    let mut nll: Option<Var> = None;
    let mut score_of = Vec::with_capacity(unique.len());
    for (k, &idx) in unique.iter().enumerate() {
        let s = samples
            .get(idx)
            .ok_or(Error::Index {
                what: "batch sample",
                index: idx,
                size: samples.len(),
            })?;
        let (dec_in, target) = decoder_io(s.label);
        let enc = model.encode(g, p, &s.input)?;
        let logits = model.decode(g, p, &dec_in, &enc)?;
        let l = nll_loss(g, logits, &target)?;
        let l = g.scale(l, F::c(weight[k] as f64 / templates));
        nll = Some(match nll {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
        score_of.push(score_var(g, logits, mode)?);
    }
    let nll = nll.expect("non-empty batch");
    let pairs: Vec<(Var, Var)> = batch
        .iter()
        .map(|pr| {
            let at = |i| unique.iter().position(|&u| u == i).expect("indexed above");
            (score_of[at(pr.pos)], score_of[at(pr.neg)])
        })
        .collect();
    let bpr = bpr_loss(g, &pairs)?;
    let a = g.scale(nll, F::c(1.0 - lambda));
    let b = g.scale(bpr, F::c(lambda));
    let loss = g.add(a, b)?;
    Ok(BatchLoss { loss, nll, bpr })
}

fn scalar<F: Float>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// One forward, backward and optimizer update over a batch of pairs.
pub fn train_step<F: Float>(
    model: &Seq2Seq,
    params: &mut Parameters<F>,
    opt: &mut Adam<F>,
    batch: &[Pair],
    samples: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = g.bind(params);
    let bl = batch_loss(&mut g, &p, model, batch, samples, cfg.lambda, cfg.score_mode)?;
    let (nll, bpr) = (scalar(&g, bl.nll), scalar(&g, bl.bpr));
    let lr = opt.current_lr();
    let diagnose = |what: &str| {
        let ids: Vec<(usize, usize)> = batch.iter().map(|pr| (pr.pos, pr.neg)).collect();
        Error::Numeric(format!(
            "{what} at step {} (lambda {}, lr {lr}); batch pairs {ids:?}",
            opt.steps() + 1,
            cfg.lambda
        ))
    };
    if !nll.is_finite() || !bpr.is_finite() {
        return Err(diagnose("non-finite loss"));
    }
    let grads = g.backward(bl.loss)?;
    let mut dense = ParamGrads::zeros_like(params);
    dense.accumulate(&grads.into_param_map(), F::one());
    if !dense.all_finite() {
        return Err(diagnose("non-finite gradient"));
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = dense.global_norm().to_f64().unwrap_or(f64::INFINITY);
        if norm > clip {
            dense.scale(F::c(clip / norm));
        }
    }
    opt.step(params, &dense);
    Ok(LossBreakdown {
        nll,
        bpr,
        combined: combined_loss(nll, bpr, cfg.lambda)?,
        pairs_seen: batch.len(),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub nll: f64,
    pub bpr: f64,
    pub combined: f64,
    pub lr: f64,
    pub pairs: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub pairs_seen: usize,
    pub skipped_positives: usize,
    pub borrowed_negatives: usize,
    /// Mean combined loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains for `cfg.epochs` epochs. `samples` and `encoded` are aligned; pairs
/// are rebuilt each epoch with seed `cfg.seed + epoch`. `on_step` sees every
/// logged step.
pub fn train<F: Float>(
    model: &Seq2Seq,
    params: &mut Parameters<F>,
    samples: &[TrainSample],
    encoded: &[EncodedSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Parameters<F>) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.len() != encoded.len() {
        return Err(Error::Data("samples and encoded prompts are not aligned".into()));
    }
    let mut opt = Adam::new(params, cfg);
    let mut summary = TrainSummary::default();
    for epoch in 0..cfg.epochs {
        let pairs = make_pairs(samples, cfg.batch_pairs, cfg.seed.wrapping_add(epoch as u64))?;
        summary.skipped_positives += pairs.skipped;
        summary.borrowed_negatives += pairs.borrowed;
        let mut total = 0.0;
        for batch in &pairs.batches {
            let start = Instant::now();
            let lb = train_step(model, params, &mut opt, batch, encoded, cfg)?;
            summary.steps += 1;
            summary.pairs_seen += lb.pairs_seen;
            total += lb.combined;
            let log = StepLog {
                epoch,
                step: summary.steps,
                nll: lb.nll,
                bpr: lb.bpr,
                combined: lb.combined,
                lr: opt.last_lr(),
                pairs: lb.pairs_seen,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_step(&log, params)?;
        }
        summary.epoch_loss.push(total / pairs.batches.len().max(1) as f64);
        log::info!("epoch {epoch}: mean loss {:.4}", summary.epoch_loss[epoch]);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn toy() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            vocab_size: 20,
            max_seq_len: 16,
            eps: 1e-6,
        }
    }

    #[test]
    fn nll_of_uniform_logits_is_two_log_v() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 20]));
        let l = nll_loss(&mut g, logits, &[YES_ID, EOS_ID]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 2.0 * 20f64.ln(), epsilon = 1e-12);
        assert!(nll_loss(&mut g, logits, &[YES_ID]).is_err());
    }

    #[test]
    fn nll_tends_to_zero_for_confident_logits() {
        let mut g = Graph::<f64>::new();
        let mut v = vec![0.0; 40];
        v[YES_ID] = 60.0;
        v[20 + EOS_ID] = 60.0;
        let logits = g.constant(Tensor::new(vec![2, 20], v).unwrap());
        let l = nll_loss(&mut g, logits, &[YES_ID, EOS_ID]).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn nll_matches_direct_log_softmax() {
        let vals: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new(vec![2, 20], vals.clone()).unwrap());
        let l = nll_loss(&mut g, logits, &[NO_ID, EOS_ID]).unwrap();
        let direct: f64 = [(0, NO_ID), (1, EOS_ID)]
            .iter()
            .map(|&(r, t)| {
                let row = &vals[r * 20..(r + 1) * 20];
                row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[t]
            })
            .sum();
        assert_abs_diff_eq!(g.value(l).item(), direct, epsilon = 1e-9);
    }

    #[test]
    fn restricted_score_examples() {
        assert_eq!(restricted_preference(1.3, 1.3), 0.5);
        assert_abs_diff_eq!(restricted_preference(3f64.ln(), 0.0), 0.75, epsilon = 1e-15);
        let r = restricted_preference(-800.0, 800.0);
        assert!(r >= 0.0 && r < 1e-300);
        let mut g = Graph::<f64>::new();
        let mut v = vec![0.0; 20];
        v[YES_ID] = 3f64.ln() + 2.0;
        v[NO_ID] = 2.0;
        let logits = g.constant(Tensor::new(vec![1, 20], v).unwrap());
        let s = score_var(&mut g, logits, ScoreMode::Restricted).unwrap();
        assert_abs_diff_eq!(g.value(s).data()[0], 0.75, epsilon = 1e-12);
        let raw = score_var(&mut g, logits, ScoreMode::Raw).unwrap();
        assert!(g.value(raw).data()[0] < 0.75);
    }

    #[test]
    fn bpr_examples() {
        assert_abs_diff_eq!(bpr_value(&[(0.4, 0.4)]), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(bpr_value(&[(1.0, 0.0)]), 0.31326168751822286, epsilon = 1e-12);
        let mut last = f64::INFINITY;
        for i in 0..=20 {
            let gap = -1.0 + 0.1 * i as f64;
            let v = bpr_value(&[(gap, 0.0)]);
            assert!(v < last);
            last = v;
        }
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1], &[0.9]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1], &[0.2]).unwrap());
        let c = g.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
        let l = bpr_loss(&mut g, &[(a, b), (c, a)]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), bpr_value(&[(0.9, 0.2), (0.5, 0.9)]), epsilon = 1e-12);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(2.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(combined_loss(2.0, 1.0, 0.5).unwrap(), 1.5);
        assert!(combined_loss(2.0, 1.0, 1.5).is_err());
        assert!(TrainConfig { lambda: -0.1, ..TrainConfig::default() }.validate().is_err());
    }

    fn toy_batch() -> (Vec<EncodedSample>, Vec<Pair>) {
        let samples = vec![
            EncodedSample { input: vec![5, 6, 7, 8], label: true },
            EncodedSample { input: vec![9, 10, 11], label: false },
            EncodedSample { input: vec![5, 12, 13, 14, 15], label: false },
            EncodedSample { input: vec![16, 17], label: true },
        ];
        let pairs = vec![Pair { pos: 0, neg: 1 }, Pair { pos: 0, neg: 2 }, Pair { pos: 3, neg: 1 }];
        (samples, pairs)
    }

    #[test]
    fn deduplicated_batch_equals_mean_over_templates() {
        let cfg = toy();
        let params = init_params::<f64>(&cfg, 3).unwrap();
        let model = Seq2Seq::new(&cfg, &params).unwrap();
        let (samples, pairs) = toy_batch();
        let mut g = Graph::new();
        let p = g.bind(&params);
        let bl = batch_loss(&mut g, &p, &model, &pairs, &samples, 0.3, ScoreMode::Restricted).unwrap();
        let (mut nll, mut pr) = (0.0, Vec::new());
        let mut r = Vec::new();
        for s in &samples {
            let (din, tgt) = decoder_io(s.label);
            let logits = model.decoder_forward(&params, &s.input, &din).unwrap();
            let mut g2 = Graph::new();
            let l = g2.constant(logits.clone());
            let ce = nll_loss(&mut g2, l, &tgt).unwrap();
            r.push((g2.value(ce).item(), restricted_preference(logits.at2(0, YES_ID), logits.at2(0, NO_ID))));
        }
        for pair in &pairs {
            nll += r[pair.pos].0 + r[pair.neg].0;
            pr.push((r[pair.pos].1, r[pair.neg].1));
        }
        nll /= 2.0 * pairs.len() as f64;
        assert_abs_diff_eq!(g.value(bl.nll).item(), nll, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(bl.bpr).item(), bpr_value(&pr), epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(bl.loss).item(), 0.7 * nll + 0.3 * bpr_value(&pr), epsilon = 1e-12);
        let s = score(&model, &params, &samples[0].input, ScoreMode::Restricted).unwrap();
        assert_abs_diff_eq!(s.r_hat, r[0].1, epsilon = 1e-12);
    }

    #[test]
    fn combined_gradient_is_the_convex_mix() {
        let cfg = toy();
        let params = init_params::<f64>(&cfg, 4).unwrap();
        let model = Seq2Seq::new(&cfg, &params).unwrap();
        let (samples, pairs) = toy_batch();
        let grads_at = |lambda: f64| {
            let mut g = Graph::new();
            let p = g.bind(&params);
            let bl = batch_loss(&mut g, &p, &model, &pairs, &samples, lambda, ScoreMode::Restricted).unwrap();
            let mut d = ParamGrads::zeros_like(&params);
            d.accumulate(&g.backward(bl.loss).unwrap().into_param_map(), 1.0);
            d
        };
        let (nll, bpr, mix) = (grads_at(0.0), grads_at(1.0), grads_at(0.4));
        for i in 0..params.len() {
            for j in 0..mix.grads[i].len() {
                let want = 0.6 * nll.grads[i][j] + 0.4 * bpr.grads[i][j];
                assert_abs_diff_eq!(mix.grads[i][j], want, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn steps_reduce_loss_and_are_deterministic() {
        let cfg = toy();
        let (samples, pairs) = toy_batch();
        let run = |lambda: f64| {
            let mut params = init_params::<f64>(&cfg, 5).unwrap();
            let model = Seq2Seq::new(&cfg, &params).unwrap();
            let tc = TrainConfig {
                lambda,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            };
            let mut opt = Adam::new(&params, &tc);
            let before = params.clone();
            let trace: Vec<f64> = (0..30)
                .map(|_| train_step(&model, &mut params, &mut opt, &pairs, &samples, &tc).unwrap().combined)
                .collect();
            (trace, before != params)
        };
        let (a, changed) = run(0.0);
        assert!(changed && a[29] < a[0]);
        assert_eq!(run(0.0).0, a);
        let (b, changed) = run(1.0);
        assert!(changed && b[29] < b[0]);
    }

    #[test]
    fn breakdown_identity_holds() {
        let cfg = toy();
        let (samples, pairs) = toy_batch();
        let mut params = init_params::<f32>(&cfg, 6).unwrap();
        let model = Seq2Seq::new(&cfg, &params).unwrap();
        let tc = TrainConfig::default();
        let mut opt = Adam::new(&params, &tc);
        for _ in 0..3 {
            let lb = train_step(&model, &mut params, &mut opt, &pairs, &samples, &tc).unwrap();
            assert!((lb.combined - (0.7 * lb.nll + 0.3 * lb.bpr)).abs() < 1e-9);
            assert_eq!(lb.pairs_seen, 3);
        }
    }
}
