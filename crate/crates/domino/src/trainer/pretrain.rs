//! Pretraining loop: one RAdam step per kept batch, OneCycle learning rate,
//! per-epoch loss breakdown, final + best-loss checkpoints, NaN abort.

use std::collections::{BTreeMap, BTreeSet};

use crate::datasets::{epoch_batches, MultimodalBatch, PairedDataset};
use crate::model::{
    bind, encode, init_decoder, init_encoder, init_head, init_probe, update_running_stats,
    EncoderConfig, ForwardCtx, ParamStore,
};
use crate::ndgrad::{BatchNormMode, NdError, Scalar, Tape};
use crate::objectives::{total_loss, CriticConfig, ModalityBatch, PairGraph};
use crate::rng::{seeded, stream};
use crate::trainer::{onecycle_lr, RAdam, RAdamHyper};

/// Optimization hyperparameters shared by pretraining and the linear probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOpts {
    pub lr: f64,
    pub max_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts { lr: 4e-4, max_lr: 0.01, batch: 64, epochs: 50, seed: 0 }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<(), NdError> {
        if self.batch < 2 {
            return Err(NdError::Invalid(format!(
                "batch must be >= 2 (contrastive losses need negatives), got {}",
                self.batch
            )));
        }
        if self.epochs == 0 {
            return Err(NdError::Invalid("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.max_lr.is_finite() && self.max_lr >= self.lr) {
            return Err(NdError::Invalid(format!(
                "need 0 < lr <= max_lr, got lr={} max_lr={}",
                self.lr, self.max_lr
            )));
        }
        Ok(())
    }
}

/// One row of the per-epoch loss log. `edge` is either a canonical edge name
/// (unweighted value) or `"total"` (weighted sum the optimizer saw). `lr` is
/// the learning rate at the epoch's last step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub edge: String,
    pub value: f64,
    pub lr: f64,
}

/// Outcome of [`pretrain`]: final parameters, the lowest-mean-loss epoch's
/// parameters, the loss log, and abort/skip diagnostics.
#[derive(Debug, Clone)]
pub struct PretrainResult<T: Scalar> {
    pub store: ParamStore<T>,
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub rows: Vec<LossRow>,
    /// True when a nonfinite total loss forced an early stop; `store` then
    /// holds the last epoch that completed cleanly.
    pub aborted: bool,
    pub skipped_steps: u64,
}

impl<T: Scalar> PretrainResult<T> {
    /// Mean of the `"total"` rows for one epoch, if that epoch was logged.
    pub fn epoch_total(&self, epoch: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.epoch == epoch && r.edge == "total").map(|r| r.value)
    }
}

/// Per-modality encoder configs: the shared architecture with each modality's
/// channel count substituted.
pub fn modality_configs(ds: &PairedDataset, base: &EncoderConfig) -> Result<Vec<EncoderConfig>, NdError> {
    (0..2)
        .map(|m| Ok(EncoderConfig { in_channels: ds.modality(m)?.channels(), ..*base }))
        .collect()
}

/// Number of optimizer steps per epoch: every full batch plus a tail batch
/// only when it still has the two samples InfoNCE needs.
pub fn kept_batches(n: usize, batch: usize) -> usize {
    let full = n / batch;
    let tail = n % batch;
    full + usize::from(tail >= 2)
}

/// Initialize every module the graph needs from one INIT-stream RNG. Encoders
/// for all modalities are always created so checkpoints stay evaluable even
/// for graphs that train only one side.
pub fn init_model<T: Scalar>(
    graph: &PairGraph,
    cfgs: &[EncoderConfig],
    embed_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ParamStore<T>, NdError> {
    if cfgs.len() != graph.num_modalities() {
        return Err(NdError::Invalid(format!(
            "{} encoder configs for {} modalities",
            cfgs.len(),
            graph.num_modalities()
        )));
    }
    let mut rng = seeded(seed, stream::INIT);
    let mut store = ParamStore::new();
    for (m, cfg) in cfgs.iter().enumerate() {
        init_encoder(&mut store, &mut rng, m, cfg);
    }
    for &m in &graph.required_heads() {
        init_head(&mut store, &mut rng, m, &cfgs[m], embed_dim);
    }
    for &m in &graph.required_decoders() {
        init_decoder(&mut store, &mut rng, m, &cfgs[m]);
    }
    for &m in &graph.required_classifiers() {
        if num_classes < 2 {
            return Err(NdError::Invalid(format!(
                "supervised edge on modality {m} needs >= 2 classes, got {num_classes}"
            )));
        }
        init_probe(&mut store, &mut rng, m, cfgs[m].latent_dim, num_classes);
    }
    Ok(store)
}

/// The weightless critic scores vectors of dimension `critic.d`, so every
/// latent that enters a contrastive edge must have that dimension.
fn check_critic_dims(graph: &PairGraph, cfgs: &[EncoderConfig], critic: &CriticConfig) -> Result<(), NdError> {
    let contrastive: BTreeSet<usize> = graph
        .edges()
        .iter()
        .filter(|we| !matches!(we.edge, crate::objectives::Edge::Ae(_) | crate::objectives::Edge::Sup(_)))
        .flat_map(|we| we.edge.modalities())
        .collect();
    for m in contrastive {
        if cfgs[m].latent_dim != critic.d {
            return Err(NdError::Invalid(format!(
                "latent_dim {} of modality {m} != critic dimension {}; contrastive edges need them equal",
                cfgs[m].latent_dim, critic.d
            )));
        }
    }
    Ok(())
}

struct StepOutcome {
    total: f64,
    per_edge: Vec<(String, f64)>,
}

fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    optim: &mut RAdam,
    graph: &PairGraph,
    cfgs: &[EncoderConfig],
    critic: &CriticConfig,
    batch: &MultimodalBatch<T>,
    lr: f64,
) -> Result<StepOutcome, NdError> {
    let mut tape = Tape::<T>::new();
    let binding = bind(&mut tape, store, |_| true);
    let x0 = tape.constant(batch.x1.shape(), batch.x1.data());
    let x1 = tape.constant(batch.x2.shape(), batch.x2.data());
    let touched = graph.touched_modalities();

    let (total, per_edge, sites) = {
        let mut ctx = ForwardCtx::new(&mut tape, &binding, BatchNormMode::Train);
        let mut batches = Vec::with_capacity(2);
        for (m, xr) in [x0, x1].into_iter().enumerate() {
            if touched.contains(&m) {
                let out = encode(&mut ctx, m, &cfgs[m], xr)?;
                batches.push(ModalityBatch { x: Some(xr), out: Some(out) });
            } else {
                batches.push(ModalityBatch { x: None, out: None });
            }
        }
        let labels = graph.uses_labels().then_some(batch.labels.as_slice());
        let (total, per_edge) = total_loss(&mut ctx, graph, cfgs, critic, &batches, labels)?;
        let sites = std::mem::take(&mut ctx.bn_sites);
        (total, per_edge, sites)
    };

    let total_val = tape.values(total)[0].to_f64();
    let per_edge_vals: Vec<(String, f64)> =
        per_edge.iter().map(|(name, r)| (name.clone(), tape.values(*r)[0].to_f64())).collect();
    if !total_val.is_finite() {
        return Ok(StepOutcome { total: total_val, per_edge: per_edge_vals });
    }

    let grads = tape.backward(total)?;
    let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, r) in binding.iter() {
        if !store.has_param(name) {
            continue;
        }
        let g = match grads.get(*r) {
            Some(g) => g.iter().map(|v| Scalar::to_f64(*v)).collect(),
            // Parameters outside the loss subgraph still decay their moments.
            None => vec![0.0; store.param(name)?.numel()],
        };
        by_name.insert(name.clone(), g);
    }
    if optim.step(store, &by_name, lr)? {
        update_running_stats(store, &tape, &sites)?;
    }
    Ok(StepOutcome { total: total_val, per_edge: per_edge_vals })
}

/// Train `graph` on `ds` for `opts.epochs` epochs. Deterministic for a fixed
/// seed: data order, initialization, and updates all derive from `opts.seed`.
pub fn pretrain<T: Scalar>(
    ds: &PairedDataset,
    graph: &PairGraph,
    base: &EncoderConfig,
    critic: &CriticConfig,
    opts: &TrainOpts,
) -> Result<PretrainResult<T>, NdError> {
    opts.validate()?;
    critic.validate()?;
    if graph.num_modalities() != 2 {
        return Err(NdError::Invalid(format!(
            "paired datasets carry 2 modalities, graph declares {}",
            graph.num_modalities()
        )));
    }
    let cfgs = modality_configs(ds, base)?;
    check_critic_dims(graph, &cfgs, critic)?;
    let steps_per_epoch = kept_batches(ds.len(), opts.batch);
    if steps_per_epoch == 0 {
        return Err(NdError::Invalid(format!(
            "dataset of {} pairs yields no usable batch at batch size {}",
            ds.len(),
            opts.batch
        )));
    }
    let total_steps = steps_per_epoch * opts.epochs;

    let mut store = init_model::<T>(graph, &cfgs, critic.d, ds.num_classes(), opts.seed)?;
    let mut optim = RAdam::new(RAdamHyper::default());
    let mut rows = Vec::new();
    let mut last_good = store.clone();
    let mut best = store.clone();
    let mut best_epoch = 0usize;
    let mut best_loss = f64::INFINITY;
    let mut aborted = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..opts.epochs {
        let mut batches = epoch_batches::<T>(ds, opts.batch, opts.seed, epoch as u64);
        batches.retain(|b| b.len() >= 2);
        let mut total_sum = 0.0;
        let mut edge_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut edge_order: Vec<String> = Vec::new();
        let mut last_lr = opts.lr;
        for batch in &batches {
            let lr = onecycle_lr(step, total_steps, opts.lr, opts.max_lr)?;
            step += 1;
            last_lr = lr;
            let out = train_step(&mut store, &mut optim, graph, &cfgs, critic, batch, lr)?;
            if !out.total.is_finite() {
                aborted = true;
                break 'epochs;
            }
            total_sum += out.total;
            for (name, v) in out.per_edge {
                if !edge_sums.contains_key(&name) {
                    edge_order.push(name.clone());
                }
                *edge_sums.entry(name).or_insert(0.0) += v;
            }
        }
        let denom = batches.len() as f64;
        for name in edge_order {
            rows.push(LossRow { epoch, edge: name.clone(), value: edge_sums[&name] / denom, lr: last_lr });
        }
        let epoch_mean = total_sum / denom;
        rows.push(LossRow { epoch, edge: "total".into(), value: epoch_mean, lr: last_lr });
        last_good = store.clone();
        if epoch_mean < best_loss {
            best_loss = epoch_mean;
            best = store.clone();
            best_epoch = epoch;
        }
    }

    let skipped = optim.skipped_steps();
    let store = if aborted { last_good } else { store };
    Ok(PretrainResult { store, best, best_epoch, rows, aborted, skipped_steps: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::synth_multimodal;
    use crate::datasets::{LabeledImageSet, PairKind};
    use crate::ndgrad::Array;
    use crate::objectives::PairGraph;
    use crate::rng::seeded_indexed;
    use rand::Rng;

    fn tiny_opts(epochs: usize) -> TrainOpts {
        TrainOpts { batch: 8, epochs, seed: 3, ..TrainOpts::default() }
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { in_channels: 1, base_channels: 4, latent_dim: 16 }
    }

    fn tiny_critic() -> CriticConfig {
        CriticConfig::with_d(16)
    }

    #[test]
    fn kept_batches_drops_singleton_tail() {
        assert_eq!(kept_batches(64, 64), 1);
        assert_eq!(kept_batches(65, 64), 1); // tail of 1 dropped
        assert_eq!(kept_batches(66, 64), 2); // tail of 2 kept
        assert_eq!(kept_batches(3, 64), 1);
        assert_eq!(kept_batches(1, 64), 0);
    }

    #[test]
    fn loss_log_covers_every_edge_and_epoch() {
        let ds = synth_multimodal(24, 4, 0).unwrap();
        let graph = PairGraph::named("RR-AE").unwrap();
        let res =
            pretrain::<f32>(&ds, &graph, &tiny_cfg(), &tiny_critic(), &tiny_opts(2)).unwrap();
        assert!(!res.aborted);
        assert_eq!(res.skipped_steps, 0);
        for epoch in 0..2 {
            for edge in ["RR:0-1", "AE:0", "AE:1", "total"] {
                assert!(
                    res.rows.iter().any(|r| r.epoch == epoch && r.edge == edge),
                    "missing row {edge} at epoch {epoch}"
                );
            }
        }
        // 4 rows per epoch x 2 epochs
        assert_eq!(res.rows.len(), 8);
    }

    #[test]
    fn same_seed_reproduces_parameters_bitwise() {
        let ds = synth_multimodal(16, 4, 1).unwrap();
        let graph = PairGraph::named("RR").unwrap();
        let run = || pretrain::<f32>(&ds, &graph, &tiny_cfg(), &tiny_critic(), &tiny_opts(2)).unwrap();
        let (a, b) = (run(), run());
        for ((n1, v1), (n2, v2)) in a.store.params().zip(b.store.params()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.data(), v2.data(), "param {n1} diverged");
        }
        for ((n1, v1), (n2, v2)) in a.store.buffers().zip(b.store.buffers()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.data(), v2.data(), "buffer {n1} diverged");
        }
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn training_moves_parameters_and_updates_running_stats() {
        let ds = synth_multimodal(16, 4, 2).unwrap();
        let graph = PairGraph::named("RR").unwrap();
        let cfg = tiny_cfg();
        let critic = tiny_critic();
        let init = init_model::<f32>(&graph, &modality_configs(&ds, &cfg).unwrap(), critic.d, 4, 3).unwrap();
        let res = pretrain::<f32>(&ds, &graph, &cfg, &critic, &tiny_opts(1)).unwrap();
        let moved = res.store.param("enc0/conv1/w").unwrap().data() != init.param("enc0/conv1/w").unwrap().data();
        assert!(moved, "encoder weights never updated");
        let rm = res.store.buffer("enc0/bn2/running_mean").unwrap();
        assert!(rm.data().iter().any(|v| *v != 0.0), "running mean still at init");
    }

    #[test]
    fn untouched_modality_stays_at_init() {
        // A graph that only trains modality 0 must leave encoder 1 exactly
        // as initialized (zero gradients, zero-step RAdam updates).
        let ds = synth_multimodal(16, 4, 5).unwrap();
        let graph = PairGraph::from_strings(&["CR:0".into()], &BTreeMap::new(), 2).unwrap();
        let cfg = tiny_cfg();
        let critic = tiny_critic();
        let init = init_model::<f32>(&graph, &modality_configs(&ds, &cfg).unwrap(), critic.d, 4, 3).unwrap();
        let res = pretrain::<f32>(&ds, &graph, &cfg, &critic, &tiny_opts(1)).unwrap();
        assert_eq!(
            res.store.param("enc1/conv1/w").unwrap().data(),
            init.param("enc1/conv1/w").unwrap().data()
        );
        assert_ne!(
            res.store.param("enc0/conv1/w").unwrap().data(),
            init.param("enc0/conv1/w").unwrap().data()
        );
    }

    #[test]
    fn best_checkpoint_tracks_lowest_epoch_mean() {
        let ds = synth_multimodal(24, 4, 7).unwrap();
        let graph = PairGraph::named("AE").unwrap();
        let res = pretrain::<f32>(&ds, &graph, &tiny_cfg(), &tiny_critic(), &tiny_opts(3)).unwrap();
        let totals: Vec<f64> = (0..3).map(|e| res.epoch_total(e).unwrap()).collect();
        let argmin = totals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(res.best_epoch, argmin, "totals {totals:?}");
    }

    #[test]
    fn rr_loss_decreases_even_when_one_modality_is_noise() {
        // Collapse-risk analogue: modality 2 carries no signal at all, yet the
        // RR loss still goes down (the encoders can co-adapt to batch noise).
        let n = 24;
        let side = 32;
        let mut rng = seeded_indexed(11, stream::DATA, 99);
        let glyphs = synth_multimodal(n, 4, 11).unwrap();
        let noise: Vec<f32> = (0..n * side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b = LabeledImageSet::new(
            Array::new(vec![n, 1, side, side], noise).unwrap(),
            glyphs.a.labels().to_vec(),
            "pure-noise",
        )
        .unwrap();
        let ds = PairedDataset::new(PairKind::Synthetic, glyphs.a.clone(), b).unwrap();
        let graph = PairGraph::named("RR").unwrap();
        let opts = TrainOpts { batch: 8, epochs: 6, seed: 1, ..TrainOpts::default() };
        let res = pretrain::<f32>(&ds, &graph, &tiny_cfg(), &tiny_critic(), &opts).unwrap();
        assert!(!res.aborted);
        let first = res.epoch_total(0).unwrap();
        let last = res.epoch_total(5).unwrap();
        assert!(last < first, "RR loss failed to decrease: {first} -> {last}");
    }

    #[test]
    fn rejects_degenerate_settings() {
        let ds = synth_multimodal(8, 4, 0).unwrap();
        let graph = PairGraph::named("RR").unwrap();
        let bad_batch = TrainOpts { batch: 1, ..TrainOpts::default() };
        assert!(pretrain::<f32>(&ds, &graph, &tiny_cfg(), &tiny_critic(), &bad_batch).is_err());
        let bad_epochs = TrainOpts { epochs: 0, ..TrainOpts::default() };
        assert!(pretrain::<f32>(&ds, &graph, &tiny_cfg(), &tiny_critic(), &bad_epochs).is_err());
        // latent 16 vs critic d=64 must be rejected up front
        assert!(pretrain::<f32>(&ds, &graph, &tiny_cfg(), &CriticConfig::default(), &tiny_opts(1)).is_err());
    }
}
