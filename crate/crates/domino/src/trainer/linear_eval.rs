//! Linear evaluation: freeze the encoder, cache its latents once, then fit a
//! softmax probe on the cached features with the same optimizer and schedule
//! as pretraining. Top-1 accuracy is reported per modality and per split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::datasets::LabeledImageSet;
use crate::model::{init_probe, EncoderConfig, ParamStore};
use crate::ndgrad::{Array, NdError, Scalar, Tape};
use crate::rng::{seeded, seeded_indexed, stream};
use crate::simsuite::{collect_representations, Split};
use crate::trainer::{onecycle_lr, RAdam, RAdamHyper, TrainOpts};

/// Cached features for one modality and split: an n x d matrix plus labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    x: Array<f64>,
    y: Vec<usize>,
}

impl FeatureSet {
    pub fn new(x: Array<f64>, y: Vec<usize>) -> Result<FeatureSet, NdError> {
        if x.shape().len() != 2 {
            return Err(NdError::BadShape { what: format!("features must be 2-D, got {:?}", x.shape()) });
        }
        if x.shape()[0] != y.len() {
            return Err(NdError::Invalid(format!(
                "{} feature rows vs {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(NdError::Invalid("features contain non-finite values".into()));
        }
        Ok(FeatureSet { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    fn rows(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let d = self.d();
        let mut xs = Vec::with_capacity(idx.len() * d);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
            ys.push(self.y[i]);
        }
        (xs, ys)
    }
}

/// Run the frozen encoder in eval mode over `set` and cache the latents.
pub fn extract_features<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    m: usize,
    set: &LabeledImageSet,
    batch: usize,
) -> Result<FeatureSet, NdError> {
    let rep = collect_representations(&store.cast::<f64>(), cfg, m, set, Split::Train, batch)?;
    let (n, d) = (rep.z.nrows(), rep.z.ncols());
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            data.push(rep.z[(i, j)]);
        }
    }
    FeatureSet::new(Array::new(vec![n, d], data)?, set.labels().to_vec())
}

/// Top-1 accuracies of the fitted probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub train_acc: f64,
    pub holdout_acc: f64,
}

fn top1_accuracy(w: &Array<f64>, b: &Array<f64>, set: &FeatureSet) -> f64 {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    let mut hits = 0usize;
    for i in 0..set.n() {
        let row = &set.x.data()[i * d..(i + 1) * d];
        let mut arg = 0usize;
        let mut best = f64::NEG_INFINITY;
        for c in 0..k {
            let mut logit = b.data()[c];
            for (j, xj) in row.iter().enumerate() {
                logit += xj * w.data()[j * k + c];
            }
            if logit > best {
                best = logit;
                arg = c;
            }
        }
        if arg == set.y[i] {
            hits += 1;
        }
    }
    hits as f64 / set.n() as f64
}

/// Fit one softmax layer on cached features. Public so that tests can inject
/// synthetic features without an encoder.
pub fn fit_linear_probe(
    train: &FeatureSet,
    holdout: &FeatureSet,
    num_classes: usize,
    opts: &TrainOpts,
) -> Result<ProbeOutcome, NdError> {
    opts.validate()?;
    if train.n() == 0 || holdout.n() == 0 {
        return Err(NdError::Invalid("probe needs non-empty train and holdout sets".into()));
    }
    if train.d() != holdout.d() {
        return Err(NdError::Invalid(format!(
            "train features have d={}, holdout d={}",
            train.d(),
            holdout.d()
        )));
    }
    if num_classes < 2 {
        return Err(NdError::Invalid(format!("need >= 2 classes, got {num_classes}")));
    }
    for &y in train.labels().iter().chain(holdout.labels()) {
        if y >= num_classes {
            return Err(NdError::Invalid(format!("label {y} out of range for {num_classes} classes")));
        }
    }

    let d = train.d();
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(opts.seed, stream::INIT);
    init_probe(&mut store, &mut rng, 0, d, num_classes);
    let mut optim = RAdam::new(RAdamHyper::default());

    // Cross-entropy is defined for any batch size, so tails are kept and the
    // schedule sees exactly epochs * ceil(n/batch) steps.
    let n = train.n();
    let total_steps = opts.epochs * n.div_ceil(opts.batch);
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seeded_indexed(opts.seed, stream::SHUFFLE, epoch as u64));
        for chunk in idx.chunks(opts.batch) {
            let lr = onecycle_lr(step, total_steps, opts.lr, opts.max_lr)?;
            step += 1;
            let (xs, ys) = train.rows(chunk);
            let mut tape = Tape::<f64>::new();
            let w = tape.param(&[d, num_classes], store.param("linear_probe0/w")?.data());
            let b = tape.param(&[num_classes], store.param("linear_probe0/b")?.data());
            let xb = tape.constant(&[chunk.len(), d], &xs);
            let wx = tape.matmul(xb, w)?;
            let neg_b = tape.scale(b, -1.0)?;
            let logits = tape.sub_row(wx, neg_b)?;
            let loss = tape.softmax_xent(logits, &ys)?;
            let grads = tape.backward(loss)?;
            let mut by_name = BTreeMap::new();
            for (name, r) in [("linear_probe0/w", w), ("linear_probe0/b", b)] {
                let g = grads
                    .get(r)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.param(name).expect("probe param").numel()]);
                by_name.insert(name.to_string(), g);
            }
            optim.step(&mut store, &by_name, lr)?;
        }
    }

    let w = store.param("linear_probe0/w")?;
    let b = store.param("linear_probe0/b")?;
    Ok(ProbeOutcome { train_acc: top1_accuracy(w, b, train), holdout_acc: top1_accuracy(w, b, holdout) })
}

/// Accuracy report for one modality of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub modality: usize,
    pub train_acc: f64,
    pub holdout_acc: f64,
}

/// Linear evaluation of modality `m`: the encoder in `store` stays frozen
/// (shared reference; eval-mode batchnorm), only the probe is trained.
pub fn linear_eval<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    m: usize,
    train: &LabeledImageSet,
    holdout: &LabeledImageSet,
    opts: &TrainOpts,
) -> Result<EvalOutcome, NdError> {
    if !store.has_param(&format!("enc{m}/conv1/w")) {
        return Err(NdError::Invalid(format!("checkpoint has no encoder for modality {m}")));
    }
    let num_classes = train.num_classes().max(holdout.num_classes());
    let ft = extract_features(store, cfg, m, train, opts.batch)?;
    let fh = extract_features(store, cfg, m, holdout, opts.batch)?;
    let probe = fit_linear_probe(&ft, &fh, num_classes, opts)?;
    Ok(EvalOutcome { modality: m, train_acc: probe.train_acc, holdout_acc: probe.holdout_acc })
}
