//! Semi-supervised training: weak cross-entropy on labelled clips plus
//! the VAT penalty summed over every clip in the batch.
//!
//! Each clip gets its own tape; parameter gradients are summed across
//! clips in batch order, then applied with one Adam step. With lambda = 0
//! the VAT branch is never built, so a run reduces to plain weak
//! supervision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gcrnn::Gcrnn;
use crate::params::{adam_step, AdamState, Parameters};
use crate::tensor::{Scalar, Tensor};
use crate::vat::{binary_kl_graph, vadv_perturbation, VatConfig};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub labelled_per_batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub literal_eq5: bool,
    /// Fraction of labelled clips held out when no explicit validation
    /// split is given; 0 validates on the training clips themselves.
    pub val_fraction: f64,
    /// Stop early once validation weak F1 reaches this value.
    pub target_val_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 30,
            labelled_per_batch: 15,
            lr: 0.001,
            epochs: 100,
            seed: 0,
            literal_eq5: false,
            val_fraction: 0.1,
            target_val_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.labelled_per_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.labelled_per_batch > self.batch_size {
            return Err(Error::Config(format!(
                "labelled_per_batch {} exceeds batch_size {}",
                self.labelled_per_batch, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Clip-level multi-hot target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakLabelVector {
    pub l: Vec<u8>,
}

impl WeakLabelVector {
    pub fn new(l: Vec<u8>) -> Result<Self> {
        if l.iter().any(|&v| v > 1) {
            return Err(Error::Data("weak label entries must be 0 or 1".into()));
        }
        Ok(WeakLabelVector { l })
    }

    pub fn zeros(m: usize) -> Self {
        WeakLabelVector { l: vec![0; m] }
    }
}

/// One featurized clip; labelled clips carry their weak target.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub clip_id: String,
    pub features: Tensor<f32>,
    pub label: Option<WeakLabelVector>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub labelled: Vec<TrainClip>,
    pub unlabelled: Vec<TrainClip>,
    /// Explicit held-out labelled clips; empty means split internally
    /// per `val_fraction`.
    pub validation: Vec<TrainClip>,
}

/// Mean over clips of the summed per-class binary cross-entropy;
/// `literal_eq5` drops the (1 - l) log(1 - y) term.
pub fn weak_ce_loss(ys: &[Vec<f32>], labels: &[&WeakLabelVector], literal_eq5: bool) -> Result<f64> {
    if ys.is_empty() || ys.len() != labels.len() {
        return Err(Error::Config(format!(
            "weak_ce_loss: {} predictions, {} labels",
            ys.len(),
            labels.len()
        )));
    }
    let mut total = 0f64;
    for (y, label) in ys.iter().zip(labels) {
        if y.len() != label.l.len() {
            return Err(Error::ShapeMismatch {
                op: "weak_ce_loss",
                left: vec![y.len()],
                right: vec![label.l.len()],
            });
        }
        for (&yc, &lc) in y.iter().zip(&label.l) {
            let p = (yc as f64).clamp(1e-7, 1.0 - 1e-7);
            total -= lc as f64 * p.ln();
            if !literal_eq5 {
                total -= (1.0 - lc as f64) * (1.0 - p).ln();
            }
        }
    }
    Ok(total / ys.len() as f64)
}

/// Summed per-class cross-entropy of one clip, recorded on the tape.
pub fn clip_ce_graph<F: Scalar>(
    tape: &mut Tape<F>,
    y: Var,
    label: &WeakLabelVector,
    literal_eq5: bool,
) -> Result<Var> {
    let m = tape.value(y).len();
    if m != label.l.len() {
        return Err(Error::ShapeMismatch {
            op: "clip_ce_graph",
            left: vec![m],
            right: vec![label.l.len()],
        });
    }
    let lo = F::from_f64(1e-7);
    let hi = F::from_f64(1.0 - 1e-7);
    let yc = tape.clamp(y, lo, hi);
    let l_t = Tensor::new(
        vec![m],
        label.l.iter().map(|&v| F::from_f64(v as f64)).collect(),
    )?;
    let lv = tape.constant(l_t);
    let ln_y = tape.ln(yc);
    let pos = tape.mul(lv, ln_y)?;
    let summed = if literal_eq5 {
        tape.sum_all(pos)
    } else {
        let ny = tape.affine(yc, -F::ONE, F::ONE);
        let nl = tape.affine(lv, -F::ONE, F::ONE);
        let ln_ny = tape.ln(ny);
        let neg = tape.mul(nl, ln_ny)?;
        let both = tape.add(pos, neg)?;
        tape.sum_all(both)
    };
    Ok(tape.neg(summed))
}

/// Indices into the labelled and unlabelled pools forming one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
}

/// One epoch of mixed batches. Labelled clips are shuffled and consumed
/// without replacement (with replacement, with a warning, when the pool
/// is smaller than its quota); unlabelled clips cycle through reshuffled
/// passes. An empty unlabelled pool degrades to all-labelled batches.
pub fn make_epoch_batches(
    n_labelled: usize,
    n_unlabelled: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    config.validate()?;
    if n_labelled == 0 {
        return Err(Error::Config("labelled pool is empty".into()));
    }
    let (quota_l, quota_u) = if n_unlabelled == 0 {
        (config.batch_size, 0)
    } else {
        (
            config.labelled_per_batch,
            config.batch_size - config.labelled_per_batch,
        )
    };
    let n_batches = (n_labelled / quota_l).max(1);

    let mut labelled_order: Vec<usize> = (0..n_labelled).collect();
    labelled_order.shuffle(rng);
    if n_labelled < quota_l {
        log::warn!(
            "labelled pool ({n_labelled}) smaller than per-batch quota ({quota_l}); sampling with replacement"
        );
    }
    let mut unlabelled_order: Vec<usize> = (0..n_unlabelled).collect();
    unlabelled_order.shuffle(rng);
    if n_unlabelled > 0 && n_unlabelled < quota_u {
        log::warn!(
            "unlabelled pool ({n_unlabelled}) smaller than per-batch quota ({quota_u}); sampling with replacement"
        );
    }
    let mut u_pos = 0usize;
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let labelled: Vec<usize> = if n_labelled < quota_l {
            (0..quota_l).map(|_| rng.gen_range(0..n_labelled)).collect()
        } else {
            labelled_order[b * quota_l..(b + 1) * quota_l].to_vec()
        };
        let mut unlabelled = Vec::with_capacity(quota_u);
        while unlabelled.len() < quota_u {
            if u_pos == unlabelled_order.len() {
                unlabelled_order.shuffle(rng);
                u_pos = 0;
            }
            unlabelled.push(unlabelled_order[u_pos]);
            u_pos += 1;
        }
        batches.push(Batch {
            labelled,
            unlabelled,
        });
    }
    Ok(batches)
}

/// Clip-level macro F1 of thresholded predictions (y > 0.5) against weak
/// labels; a class absent from both sides scores 1.
pub fn weak_macro_f1(model: &Gcrnn<f32>, clips: &[TrainClip]) -> Result<f64> {
    let m = model.config.n_classes;
    let mut tp = vec![0usize; m];
    let mut fp = vec![0usize; m];
    let mut fn_ = vec![0usize; m];
    for clip in clips {
        let label = clip
            .label
            .as_ref()
            .ok_or_else(|| Error::Config(format!("clip {} has no weak label", clip.clip_id)))?;
        let (_, pred) = model.forward(&clip.features)?;
        for c in 0..m {
            let hit = pred.y[c] > 0.5;
            let truth = label.l[c] == 1;
            match (hit, truth) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let mut sum = 0f64;
    for c in 0..m {
        let f1 = if tp[c] + fp[c] + fn_[c] == 0 {
            1.0
        } else if tp[c] == 0 {
            0.0
        } else {
            let p = tp[c] as f64 / (tp[c] + fp[c]) as f64;
            let r = tp[c] as f64 / (tp[c] + fn_[c]) as f64;
            2.0 * p * r / (p + r)
        };
        sum += f1;
    }
    Ok(sum / m as f64)
}

/// Accumulated gradients and the batch's loss terms. `ce` is the mean
/// per-clip weak cross-entropy; `vat` is the lambda-weighted KL sum.
struct BatchGrads {
    grads: Vec<Tensor<f32>>,
    ce: f64,
    vat: f64,
}

fn add_into(dst: &mut Tensor<f32>, src: &Tensor<f32>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

fn perturbed_input(x: &Tensor<f32>, r: &Tensor<f32>) -> Tensor<f32> {
    let mut out = x.clone();
    for (d, s) in out.data_mut().iter_mut().zip(r.data()) {
        *d += *s;
    }
    out
}

fn batch_gradients(
    model: &Gcrnn<f32>,
    labelled: &[&TrainClip],
    unlabelled: &[&TrainClip],
    tc: &TrainConfig,
    vc: &VatConfig,
    vat_rng: &mut ChaCha8Rng,
) -> Result<BatchGrads> {
    let n = labelled.len();
    if n == 0 {
        return Err(Error::Config("batch has no labelled clips".into()));
    }
    let apply_vat = vc.lambda > 0.0;
    let lambda = vc.lambda as f32;
    let inv_n = 1.0 / n as f32;
    let mut grads: Vec<Tensor<f32>> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(p.tensor.shape()))
        .collect();
    let mut ce_sum = 0f64;
    let mut vat_sum = 0f64;

    let forward_const = |tape: &mut Tape<f32>, xv: Var| -> Result<Var> {
        let vars = model.params.bind_const(tape);
        model.graph(tape, xv, &vars).map(|o| o.y)
    };

    let mut run_clip = |clip: &TrainClip, is_labelled: bool| -> Result<()> {
        let pert = if apply_vat {
            let mut clip_rng = ChaCha8Rng::seed_from_u64(vat_rng.gen());
            Some(vadv_perturbation(
                &clip.features,
                &forward_const,
                vc,
                &mut clip_rng,
            )?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut loss: Option<Var> = None;
        if is_labelled {
            let label = clip
                .label
                .as_ref()
                .ok_or_else(|| Error::Config(format!("clip {} has no weak label", clip.clip_id)))?;
            let xv = tape.constant(clip.features.clone());
            let out = model.graph(&mut tape, xv, &vars)?;
            let ce = clip_ce_graph(&mut tape, out.y, label, tc.literal_eq5)?;
            ce_sum += tape.value(ce).as_scalar()? as f64;
            loss = Some(tape.affine(ce, inv_n, 0.0));
        }
        if let Some(p) = &pert {
            let xp = tape.constant(perturbed_input(&clip.features, &p.r_vadv));
            let out = model.graph(&mut tape, xp, &vars)?;
            let pref = tape.constant(p.p_ref.clone());
            let kl = binary_kl_graph(&mut tape, pref, out.y)?;
            vat_sum += tape.value(kl).as_scalar()? as f64;
            let weighted = tape.affine(kl, lambda, 0.0);
            loss = Some(match loss {
                Some(l) => tape.add(l, weighted)?,
                None => weighted,
            });
        }
        let loss = loss.expect("labelled or vat branch always present");
        let value = tape.value(loss).as_scalar()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss on clip {}", clip.clip_id),
            });
        }
        let clip_grads = tape.backward(loss)?;
        for (i, v) in vars.iter().enumerate() {
            if let Some(g) = clip_grads.get(*v) {
                add_into(&mut grads[i], g);
            }
        }
        Ok(())
    };

    for clip in labelled {
        run_clip(clip, true)?;
    }
    if apply_vat {
        for clip in unlabelled {
            run_clip(clip, false)?;
        }
    }
    Ok(BatchGrads {
        grads,
        ce: ce_sum / n as f64,
        vat: vc.lambda * vat_sum,
    })
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub vat: f64,
    pub val_weak_f1: f64,
}

pub struct TrainOutcome {
    pub model: Gcrnn<f32>,
    pub best_params: Parameters<f32>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub log: Vec<EpochStats>,
    /// Set when training stopped on a numerical failure; the best
    /// checkpoint up to that point is still returned.
    pub aborted: Option<String>,
}

/// Runs the full optimization. RNG streams are derived from the seed:
/// stream 0 splits validation, stream 1 orders batches, stream 2 seeds
/// per-clip VAT draws, so the batch sequence does not shift when VAT is
/// toggled.
pub fn train(
    mut model: Gcrnn<f32>,
    data: &TrainData,
    tc: &TrainConfig,
    vc: &VatConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    vc.validate()?;
    if data.labelled.is_empty() {
        return Err(Error::Config("no labelled training clips".into()));
    }
    let m = model.config.n_classes;
    for clip in data.labelled.iter().chain(&data.validation) {
        match &clip.label {
            None => {
                return Err(Error::Config(format!(
                    "clip {} needs a weak label",
                    clip.clip_id
                )))
            }
            Some(l) if l.l.len() != m => {
                return Err(Error::Config(format!(
                    "clip {}: label has {} classes, model has {m}",
                    clip.clip_id,
                    l.l.len()
                )))
            }
            Some(_) => {}
        }
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    split_rng.set_stream(0);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    batch_rng.set_stream(1);
    let mut vat_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    vat_rng.set_stream(2);

    // resolve training and validation index sets over data.labelled
    let (train_idx, val_clips): (Vec<usize>, Vec<TrainClip>) = if !data.validation.is_empty() {
        ((0..data.labelled.len()).collect(), data.validation.clone())
    } else {
        let n_val = (data.labelled.len() as f64 * tc.val_fraction).floor() as usize;
        if n_val == 0 {
            ((0..data.labelled.len()).collect(), data.labelled.clone())
        } else {
            let mut order: Vec<usize> = (0..data.labelled.len()).collect();
            order.shuffle(&mut split_rng);
            let (val, tr) = order.split_at(n_val);
            (tr.to_vec(), val.iter().map(|&i| data.labelled[i].clone()).collect())
        }
    };

    let mut adam = AdamState::new(&model.params);
    let mut best_params = model.params.clone();
    let mut best_epoch = 0usize;
    let mut best_val_f1 = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut aborted = None;

    'epochs: for epoch in 0..tc.epochs {
        let batches = make_epoch_batches(train_idx.len(), data.unlabelled.len(), tc, &mut batch_rng)?;
        let mut ce_acc = 0f64;
        let mut vat_acc = 0f64;
        for batch in &batches {
            let labelled: Vec<&TrainClip> = batch
                .labelled
                .iter()
                .map(|&i| &data.labelled[train_idx[i]])
                .collect();
            let unlabelled: Vec<&TrainClip> =
                batch.unlabelled.iter().map(|&i| &data.unlabelled[i]).collect();
            let step = match batch_gradients(&model, &labelled, &unlabelled, tc, vc, &mut vat_rng) {
                Ok(s) => s,
                Err(Error::NonFinite { what }) => {
                    aborted = Some(format!("epoch {epoch}: non-finite {what}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            ce_acc += step.ce;
            vat_acc += step.vat;
            if let Err(Error::NonFinite { what }) =
                adam_step(&mut model.params, &step.grads, &mut adam, tc.lr as f32)
            {
                aborted = Some(format!("epoch {epoch}: non-finite {what}"));
                break 'epochs;
            }
        }
        let val_weak_f1 = weak_macro_f1(&model, &val_clips)?;
        log.push(EpochStats {
            epoch,
            ce: ce_acc / batches.len() as f64,
            vat: vat_acc / batches.len() as f64,
            val_weak_f1,
        });
        if val_weak_f1 > best_val_f1 {
            best_val_f1 = val_weak_f1;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        if let Some(target) = tc.target_val_f1 {
            if val_weak_f1 >= target {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model,
        best_params,
        best_epoch,
        best_val_f1,
        log,
        aborted,
    })
}
